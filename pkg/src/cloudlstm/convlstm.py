"""Convolutional LSTM cell, bidirectional sequence encoder and classifier head.

The cell follows one specific gate formulation: a constant +1 pre-activation
bias on the forget gate, a tanh-valued output gate, and a cell output
``h = o * c`` without squashing the cell state. The textbook form (sigmoid
output gate, ``h = o * tanh(c)``) is available behind the
``standard_lstm_variant`` switch for comparison runs.

Gate kernels convolve spatially, so every gate value is a [H,W,r] map; the
encoder compresses a whole [T,H,W,d] image sequence into the final cell state.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, NamedTuple, Optional

import numpy as np

from .tensor import (
    FormatError,
    ShapeError,
    Tensor,
    conv2d_same,
    elementwise_add,
    elementwise_mul,
    read_tensor_from,
    sigmoid,
    tanh,
    write_tensor_to,
)

CHECKPOINT_MAGIC = b"CLCK"


@dataclass(frozen=True)
class CellConfig:
    """Static geometry of one cell: kernel size, channel counts, tile extents."""

    kernel_size: int
    in_channels: int
    hidden_channels: int
    height: int
    width: int

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        for name in ("in_channels", "hidden_channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class ConvLstmParams:
    """The eight gate kernels of one direction.

    ``w_x*`` kernels are [k,k,d,r] (input to gate), ``w_h*`` are [k,k,r,r]
    (hidden to gate); gate letters: i input, j modulation, f forget, o output.
    """

    w_xi: Tensor
    w_hi: Tensor
    w_xj: Tensor
    w_hj: Tensor
    w_xf: Tensor
    w_hf: Tensor
    w_xo: Tensor
    w_ho: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            yield f.name, getattr(self, f.name)

    def validate(self, cfg: CellConfig) -> None:
        k, d, r = cfg.kernel_size, cfg.in_channels, cfg.hidden_channels
        for name, t in self.named_tensors():
            want = (k, k, d, r) if name.startswith("w_x") else (k, k, r, r)
            if t.shape != want:
                raise ShapeError(f"parameter {name} has shape {t.shape}, expected {want}")


@dataclass
class EncoderParams:
    """Independent forward/backward direction kernels plus the classifier head.

    ``head`` is [k,k,2r,C]; its input is the channel concatenation of both
    directions' final cell states.
    """

    forward: ConvLstmParams
    backward: ConvLstmParams
    head: Tensor
    standard_lstm_variant: bool = False

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.forward.named_tensors():
            yield f"forward.{name}", t
        for name, t in self.backward.named_tensors():
            yield f"backward.{name}", t
        yield "head", self.head

    @property
    def hidden_channels(self) -> int:
        return self.forward.w_hi.shape[2]

    @property
    def n_classes(self) -> int:
        return self.head.shape[3]


class CellState(NamedTuple):
    h: Tensor  # hidden output, [H,W,r]
    c: Tensor  # long-term cell state, [H,W,r]


class GateRecord(NamedTuple):
    """All gate activations and states of one timestep, each [H,W,r]."""

    i: Tensor
    j: Tensor
    f: Tensor
    o: Tensor
    c: Tensor
    h: Tensor


@dataclass
class GateTrace:
    """Per-step gate activations of one encoder pass, each [T,H,W,r]."""

    i: Tensor
    j: Tensor
    f: Tensor
    o: Tensor
    c: Tensor
    h: Tensor

    @property
    def n_steps(self) -> int:
        return self.i.shape[0]


def zero_state(height: int, width: int, hidden_channels: int) -> CellState:
    shape = (height, width, hidden_channels)
    return CellState(h=np.zeros(shape), c=np.zeros(shape))


def _stacked_kernels(p: ConvLstmParams) -> tuple[Tensor, Tensor]:
    # One conv per source with the four gate kernels stacked along the output
    # axis, in (i, j, f, o) order. Each output channel is an independent dot
    # product, so per-gate results match separate convolutions exactly.
    wx = np.concatenate((p.w_xi, p.w_xj, p.w_xf, p.w_xo), axis=3)
    wh = np.concatenate((p.w_hi, p.w_hj, p.w_hf, p.w_ho), axis=3)
    return wx, wh


def _step_raw(x: Tensor, prev: CellState, wx: Tensor, wh: Tensor,
              standard_variant: bool) -> GateRecord:
    pre = elementwise_add(conv2d_same(x, wx), conv2d_same(prev.h, wh))
    r = wh.shape[2]
    a_i, a_j, a_f, a_o = (pre[..., n * r : (n + 1) * r] for n in range(4))
    f = sigmoid(a_f + 1.0)  # constant forget bias, not a trained parameter
    i = sigmoid(a_i)
    j = tanh(a_j)
    c = elementwise_add(elementwise_mul(prev.c, f), elementwise_mul(i, j))
    if standard_variant:
        o = sigmoid(a_o)
        h = elementwise_mul(o, tanh(c))
    else:
        o = tanh(a_o)
        h = elementwise_mul(o, c)
    return GateRecord(i=i, j=j, f=f, o=o, c=c, h=h)


def cell_step(x: Tensor, prev: CellState, params: ConvLstmParams,
              standard_lstm_variant: bool = False) -> tuple[CellState, GateRecord]:
    """Advance the cell by one frame; returns the new state and all gate values."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"cell_step: frame must be [H,W,d], got {x.shape}")
    if prev.h.shape != prev.c.shape:
        raise ShapeError(f"cell_step: state mismatch h {prev.h.shape} vs c {prev.c.shape}")
    if prev.h.shape[:2] != x.shape[:2]:
        raise ShapeError(
            f"cell_step: spatial mismatch, frame {x.shape} vs state {prev.h.shape}"
        )
    wx, wh = _stacked_kernels(params)
    rec = _step_raw(x, prev, wx, wh, standard_lstm_variant)
    return CellState(h=rec.h, c=rec.c), rec


def encode(frames: Tensor, params: ConvLstmParams, record_trace: bool = False,
           standard_lstm_variant: bool = False) -> tuple[Tensor, Optional[GateTrace]]:
    """Run the cell over a [T,H,W,d] sequence from a zero state.

    Returns the final cell state c_T and, when ``record_trace`` is set, the
    full per-step gate trace.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ShapeError(f"encode: sequence must be [T,H,W,d], got {frames.shape}")
    if frames.shape[0] == 0:
        raise ValueError("encode: empty sequence")
    _, height, width, _ = frames.shape
    r = params.w_hi.shape[2]
    wx, wh = _stacked_kernels(params)
    state = zero_state(height, width, r)
    records = [] if record_trace else None
    for t in range(frames.shape[0]):
        rec = _step_raw(frames[t], state, wx, wh, standard_lstm_variant)
        state = CellState(h=rec.h, c=rec.c)
        if records is not None:
            records.append(rec)
    trace = None
    if records is not None:
        trace = GateTrace(*(np.stack([getattr(rec, name) for rec in records])
                            for name in GateRecord._fields))
    return state.c, trace


def encode_bidirectional(frames: Tensor, params: EncoderParams) -> Tensor:
    """Concatenate the final cell states of the forward and time-reversed pass.

    Channels [0,r) come from the forward direction, [r,2r) from encoding the
    reversed sequence with the independent backward kernels.
    """
    fwd, _ = encode(frames, params.forward,
                    standard_lstm_variant=params.standard_lstm_variant)
    bwd, _ = encode(frames[::-1], params.backward,
                    standard_lstm_variant=params.standard_lstm_variant)
    return np.concatenate((fwd, bwd), axis=2)


def classify(state: Tensor, head: Tensor) -> Tensor:
    """Map an encoded [H,W,2r] state to per-pixel class probabilities.

    A same-padding convolution produces logits; a max-subtracted softmax over
    the class axis yields strictly positive probabilities summing to one.
    """
    logits = conv2d_same(state, head)
    shifted = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=2, keepdims=True)


def _write_name(stream: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    stream.write(struct.pack("<I", len(raw)))
    stream.write(raw)


def _read_name(stream: BinaryIO) -> str:
    buf = stream.read(4)
    if len(buf) != 4:
        raise FormatError("truncated checkpoint while reading name length")
    (n,) = struct.unpack("<I", buf)
    if n > 4096:
        raise FormatError(f"implausible name length {n}")
    raw = stream.read(n)
    if len(raw) != n:
        raise FormatError("truncated checkpoint while reading name")
    return raw.decode("utf-8")


def save_checkpoint(path, cfg: CellConfig, params: EncoderParams) -> None:
    """Write all parameter tensors plus the cell geometry to one container file.

    Header: magic "CLCK", then kernel_size, in_channels, hidden_channels,
    height, width, n_classes as u32 little-endian, the variant flag as one
    byte, and the tensor count as u32. Each entry is a length-prefixed
    UTF-8 name followed by a CLT1 tensor blob.
    """
    params.forward.validate(cfg)
    params.backward.validate(cfg)
    entries = list(params.named_tensors())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<6I", cfg.kernel_size, cfg.in_channels,
                             cfg.hidden_channels, cfg.height, cfg.width,
                             params.n_classes))
        fh.write(struct.pack("<B", 1 if params.standard_lstm_variant else 0))
        fh.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            _write_name(fh, name)
            write_tensor_to(fh, t)


def load_checkpoint(path) -> tuple[CellConfig, EncoderParams]:
    """Read a checkpoint container back; errors name the offending file."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
            header = fh.read(24)
            if len(header) != 24:
                raise FormatError("truncated checkpoint header")
            k, d, r, height, width, n_classes = struct.unpack("<6I", header)
            flag = fh.read(1)
            if len(flag) != 1:
                raise FormatError("truncated checkpoint header")
            variant = bool(flag[0])
            count_buf = fh.read(4)
            if len(count_buf) != 4:
                raise FormatError("truncated checkpoint header")
            (count,) = struct.unpack("<I", count_buf)
            tensors: dict[str, Tensor] = {}
            for _ in range(count):
                name = _read_name(fh)
                tensors[name] = read_tensor_from(fh)
            if fh.read(1):
                raise FormatError("trailing bytes after checkpoint data")
        cfg = CellConfig(kernel_size=k, in_channels=d, hidden_channels=r,
                         height=height, width=width)
        directions = {}
        for prefix in ("forward", "backward"):
            kwargs = {}
            for f in dataclasses.fields(ConvLstmParams):
                key = f"{prefix}.{f.name}"
                if key not in tensors:
                    raise FormatError(f"missing tensor {key}")
                kwargs[f.name] = tensors[key]
            directions[prefix] = ConvLstmParams(**kwargs)
        if "head" not in tensors:
            raise FormatError("missing tensor head")
        head = tensors["head"]
        if head.ndim != 4 or head.shape[2] != 2 * r or head.shape[3] != n_classes:
            raise FormatError(f"head tensor has shape {head.shape}, "
                              f"expected [k,k,{2 * r},{n_classes}]")
        params = EncoderParams(forward=directions["forward"],
                               backward=directions["backward"], head=head,
                               standard_lstm_variant=variant)
        params.forward.validate(cfg)
        params.backward.validate(cfg)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return cfg, params
