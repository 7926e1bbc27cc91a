"""Loss, exact reverse-mode gradients, Adam updates and the training loop.

Gradients are derived by hand and backpropagated through every timestep of
both encoder directions, including both the cell-state and hidden-state
recurrence paths. The derivation is validated entry by entry against central
finite differences (see the test suite); nothing here relies on an autodiff
framework.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .convlstm import (
    CellConfig,
    ConvLstmParams,
    EncoderParams,
    GateTrace,
    classify,
    encode,
    save_checkpoint,
)
from .tensor import ShapeError, Tensor, _im2col, _require_same_shape, conv2d_same

LOG_CLAMP = 1e-12  # probability floor in the loss; caps per-pixel loss at ~27.6


class NonFiniteError(ValueError):
    """A forward activation or gradient stopped being finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0,1), got {b}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class GradientSet:
    """One gradient tensor per parameter tensor, shape-congruent with EncoderParams."""

    forward: ConvLstmParams
    backward: ConvLstmParams
    head: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.forward.named_tensors():
            yield f"forward.{name}", t
        for name, t in self.backward.named_tensors():
            yield f"backward.{name}", t
        yield "head", self.head


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, Tensor]
    v: dict[str, Tensor]
    step: int = 0

    @classmethod
    def for_params(cls, params: EncoderParams) -> "AdamState":
        m = {name: np.zeros_like(t) for name, t in params.named_tensors()}
        v = {name: np.zeros_like(t) for name, t in params.named_tensors()}
        return cls(m=m, v=v, step=0)


def one_hot(labels: np.ndarray, n_classes: int) -> Tensor:
    """Expand an integer [H,W] label map into a [H,W,C] one-hot tensor."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label values outside [0,{n_classes}): "
                         f"min {labels.min()}, max {labels.max()}")
    out = np.zeros(labels.shape + (n_classes,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def cross_entropy(probs: Tensor, labels: Tensor) -> float:
    """Mean per-pixel cross-entropy against one-hot labels.

    Probabilities are clamped at 1e-12 before the log so saturated inputs
    cannot produce an infinite loss.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    _require_same_shape(probs, labels, "cross_entropy")
    if probs.ndim != 3:
        raise ShapeError(f"cross_entropy: expected [H,W,C], got {probs.shape}")
    is_01 = np.all((labels == 0.0) | (labels == 1.0))
    if not is_01 or not np.all(labels.sum(axis=2) == 1.0):
        raise ValueError("cross_entropy: labels are not one-hot")
    n_pixels = probs.shape[0] * probs.shape[1]
    return float(-(labels * np.log(np.maximum(probs, LOG_CLAMP))).sum() / n_pixels)


def _conv2d_input_grad(d_out: Tensor, kernel: Tensor) -> Tensor:
    # Gradient of conv2d_same w.r.t. its image: correlate the output gradient
    # with the spatially flipped, channel-transposed kernel.
    flipped = kernel[::-1, ::-1].transpose(0, 1, 3, 2)
    return conv2d_same(d_out, flipped)


def _conv2d_kernel_grad(image: Tensor, d_out: Tensor, k: int) -> Tensor:
    # Gradient of conv2d_same w.r.t. its kernel, via the same patch unfolding
    # the forward pass uses.
    image = np.ascontiguousarray(image, dtype=np.float64)
    d_out = np.ascontiguousarray(d_out, dtype=np.float64)
    cols = _im2col(image, k)
    g = cols.T @ d_out.reshape(-1, d_out.shape[2])
    return g.reshape(k, k, image.shape[2], d_out.shape[2])


def _zero_direction_grads(p: ConvLstmParams) -> dict[str, Tensor]:
    return {name: np.zeros_like(t) for name, t in p.named_tensors()}


def _bptt_direction(frames: Tensor, trace: GateTrace, p: ConvLstmParams,
                    d_c_final: Tensor, standard_variant: bool) -> ConvLstmParams:
    """Backpropagate through every step of one direction.

    ``d_c_final`` is the loss gradient w.r.t. the returned final cell state.
    Returns gradients shaped like the direction's parameters.
    """
    n_steps = trace.n_steps
    k = p.w_xi.shape[0]
    r = p.w_hi.shape[2]
    d = p.w_xi.shape[2]
    zeros_hw_r = np.zeros_like(d_c_final)
    wh = np.concatenate((p.w_hi, p.w_hj, p.w_hf, p.w_ho), axis=3)
    wh_flipped = wh[::-1, ::-1].transpose(0, 1, 3, 2)
    g_wx = np.zeros((k, k, d, 4 * r))
    g_wh = np.zeros((k, k, r, 4 * r))
    dc = d_c_final.copy()
    dh = np.zeros_like(dc)
    for t in reversed(range(n_steps)):
        i, j, f, o, c = trace.i[t], trace.j[t], trace.f[t], trace.o[t], trace.c[t]
        if not np.isfinite(c).all() or not np.isfinite(trace.h[t]).all():
            raise NonFiniteError(f"non-finite activation at step {t}")
        c_prev = trace.c[t - 1] if t > 0 else zeros_hw_r
        h_prev = trace.h[t - 1] if t > 0 else zeros_hw_r
        if standard_variant:
            tc = np.tanh(c)
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            da_o = do * o * (1.0 - o)       # sigmoid output gate
        else:
            do = dh * c
            dc = dc + dh * o
            da_o = do * (1.0 - o * o)       # tanh output gate
        di = dc * j
        dj = dc * i
        df = dc * c_prev
        da_i = di * i * (1.0 - i)
        da_j = dj * (1.0 - j * j)
        da_f = df * f * (1.0 - f)
        da = np.concatenate((da_i, da_j, da_f, da_o), axis=2)
        if not np.isfinite(da).all():
            raise NonFiniteError(f"non-finite gradient at step {t}")
        g_wx += _conv2d_kernel_grad(frames[t], da, k)
        g_wh += _conv2d_kernel_grad(h_prev, da, k)
        dh = _conv2d_input_grad(da, wh)
        dc = dc * f
    return ConvLstmParams(
        w_xi=g_wx[..., 0 * r : 1 * r], w_hi=g_wh[..., 0 * r : 1 * r],
        w_xj=g_wx[..., 1 * r : 2 * r], w_hj=g_wh[..., 1 * r : 2 * r],
        w_xf=g_wx[..., 2 * r : 3 * r], w_hf=g_wh[..., 2 * r : 3 * r],
        w_xo=g_wx[..., 3 * r : 4 * r], w_ho=g_wh[..., 3 * r : 4 * r],
    )


def forward_loss(frames: Tensor, labels: Tensor, params: EncoderParams) -> float:
    """Loss of one tile without gradient bookkeeping (used by finite differences)."""
    fwd, _ = encode(frames, params.forward,
                    standard_lstm_variant=params.standard_lstm_variant)
    bwd, _ = encode(np.ascontiguousarray(frames[::-1]), params.backward,
                    standard_lstm_variant=params.standard_lstm_variant)
    state = np.concatenate((fwd, bwd), axis=2)
    return cross_entropy(classify(state, params.head), labels)


def backward(frames: Tensor, labels: Tensor,
             params: EncoderParams) -> tuple[float, GradientSet]:
    """Loss and its exact gradient w.r.t. every parameter tensor.

    ``labels`` is the one-hot [H,W,C] reference. The softmax/cross-entropy
    pair reduces to probs - labels at the logits (exact whenever the 1e-12
    probability clamp is inactive), which then flows through the head
    convolution and both encoder directions.
    """
    frames = np.asarray(frames, dtype=np.float64)
    variant = params.standard_lstm_variant
    reversed_frames = np.ascontiguousarray(frames[::-1])
    fwd_c, fwd_trace = encode(frames, params.forward, record_trace=True,
                              standard_lstm_variant=variant)
    bwd_c, bwd_trace = encode(reversed_frames, params.backward, record_trace=True,
                              standard_lstm_variant=variant)
    state = np.concatenate((fwd_c, bwd_c), axis=2)
    probs = classify(state, params.head)
    loss = cross_entropy(probs, labels)
    n_pixels = probs.shape[0] * probs.shape[1]
    d_logits = (probs - labels) / n_pixels
    k_head = params.head.shape[0]
    g_head = _conv2d_kernel_grad(state, d_logits, k_head)
    d_state = _conv2d_input_grad(d_logits, params.head)
    r = fwd_c.shape[2]
    g_fwd = _bptt_direction(frames, fwd_trace, params.forward, d_state[..., :r], variant)
    g_bwd = _bptt_direction(reversed_frames, bwd_trace, params.backward,
                            d_state[..., r:], variant)
    return loss, GradientSet(forward=g_fwd, backward=g_bwd, head=g_head)


def batch_backward(batch: Sequence[tuple[Tensor, Tensor]],
                   params: EncoderParams) -> tuple[float, GradientSet]:
    """Mean loss and mean gradients over (frames, one-hot labels) pairs.

    Accumulation follows the order of ``batch`` so results are reproducible.
    """
    if not batch:
        raise ValueError("batch_backward: empty batch")
    total_loss = 0.0
    sums: Optional[dict[str, Tensor]] = None
    for frames, labels in batch:
        loss, grads = backward(frames, labels, params)
        total_loss += loss
        if sums is None:
            sums = {name: t.copy() for name, t in grads.named_tensors()}
        else:
            for name, t in grads.named_tensors():
                sums[name] += t
    n = float(len(batch))
    mean = {name: t / n for name, t in sums.items()}
    return total_loss / n, _gradients_from_named(mean)


def _direction_from_named(prefix: str, values: dict[str, Tensor]) -> ConvLstmParams:
    kwargs = {f.name: values[f"{prefix}.{f.name}"]
              for f in dataclasses.fields(ConvLstmParams)}
    return ConvLstmParams(**kwargs)


def _gradients_from_named(values: dict[str, Tensor]) -> GradientSet:
    return GradientSet(forward=_direction_from_named("forward", values),
                       backward=_direction_from_named("backward", values),
                       head=values["head"])


def _params_from_named(template: EncoderParams, values: dict[str, Tensor]) -> EncoderParams:
    return EncoderParams(forward=_direction_from_named("forward", values),
                         backward=_direction_from_named("backward", values),
                         head=values["head"],
                         standard_lstm_variant=template.standard_lstm_variant)


def adam_step(params: EncoderParams, grads: GradientSet, state: AdamState,
              cfg: TrainConfig) -> tuple[EncoderParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_values: dict[str, Tensor] = {}
    new_m: dict[str, Tensor] = {}
    new_v: dict[str, Tensor] = {}
    grad_map = dict(grads.named_tensors())
    for name, p in params.named_tensors():
        g = grad_map[name]
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: gradient {name} has shape {g.shape}, "
                             f"expected {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        new_values[name] = p - cfg.learning_rate * update
        new_m[name] = m
        new_v[name] = v
    return (_params_from_named(params, new_values),
            AdamState(m=new_m, v=new_v, step=t))


def init_params(cfg: CellConfig, n_classes: int, seed: int,
                head_kernel_size: Optional[int] = None,
                standard_lstm_variant: bool = False) -> EncoderParams:
    """Seeded uniform initialization, bound 1/sqrt(k*k*fan_in) per kernel.

    Tensors are drawn in the fixed named order (forward gates, backward
    gates, head), so one seed always yields bit-identical parameters.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    k = cfg.kernel_size
    kh = head_kernel_size if head_kernel_size is not None else k
    if kh < 1 or kh % 2 == 0:
        raise ValueError(f"head kernel size must be odd and >= 1, got {kh}")
    d, r = cfg.in_channels, cfg.hidden_channels
    rng = np.random.default_rng(seed)

    def draw(shape):
        bound = 1.0 / np.sqrt(shape[0] * shape[1] * shape[2])
        return rng.uniform(-bound, bound, size=shape)

    def direction():
        return ConvLstmParams(
            w_xi=draw((k, k, d, r)), w_hi=draw((k, k, r, r)),
            w_xj=draw((k, k, d, r)), w_hj=draw((k, k, r, r)),
            w_xf=draw((k, k, d, r)), w_hf=draw((k, k, r, r)),
            w_xo=draw((k, k, d, r)), w_ho=draw((k, k, r, r)),
        )

    return EncoderParams(forward=direction(), backward=direction(),
                         head=draw((kh, kh, 2 * r, n_classes)),
                         standard_lstm_variant=standard_lstm_variant)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float
    wall_seconds: float


def predict_tile(frames: Tensor, params: EncoderParams) -> np.ndarray:
    """Per-pixel argmax class map for one tile (lowest index wins ties)."""
    state = np.concatenate(
        (encode(frames, params.forward,
                standard_lstm_variant=params.standard_lstm_variant)[0],
         encode(np.ascontiguousarray(frames[::-1]), params.backward,
                standard_lstm_variant=params.standard_lstm_variant)[0]),
        axis=2)
    return np.argmax(classify(state, params.head), axis=2)


def train_loop(dataset, cfg: TrainConfig, hidden_channels: int,
               kernel_size: int = 3, standard_lstm_variant: bool = False,
               frame_indices: Optional[np.ndarray] = None,
               initial_params: Optional[EncoderParams] = None,
               checkpoint_every: int = 0, checkpoint_dir=None,
               progress=None) -> tuple[EncoderParams, list[EpochMetrics]]:
    """Train on the dataset's train partition, validating every epoch.

    Tiles are reshuffled each epoch with the seeded generator; gradients are
    averaged over each batch in ascending tile order before the Adam update.
    ``frame_indices`` restricts every tile to a frame subset (coverage
    ablations). When ``checkpoint_every`` is positive, a checkpoint container
    is written to ``checkpoint_dir`` after every N-th epoch. Returns the
    final parameters and the per-epoch metrics.
    """
    train_tiles = dataset.partition("train")
    if not train_tiles:
        raise ValueError("train_loop: empty training partition")
    valid_tiles = dataset.partition("valid")

    def tile_frames(tile):
        if frame_indices is None:
            return tile.frames
        return np.ascontiguousarray(tile.frames[frame_indices])

    cell_cfg = CellConfig(kernel_size=kernel_size, in_channels=dataset.n_bands,
                          hidden_channels=hidden_channels,
                          height=dataset.tile_size, width=dataset.tile_size)
    params = initial_params if initial_params is not None else init_params(
        cell_cfg, dataset.n_classes, cfg.seed,
        standard_lstm_variant=standard_lstm_variant)
    adam = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    train_frames = [tile_frames(t) for t in train_tiles]
    train_labels = [one_hot(t.labels, dataset.n_classes) for t in train_tiles]
    valid_frames = [tile_frames(t) for t in valid_tiles]

    metrics: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(train_tiles))
        loss_sum = 0.0
        for base in range(0, len(order), cfg.batch_size):
            batch_ids = sorted(order[base : base + cfg.batch_size])
            batch = [(train_frames[i], train_labels[i]) for i in batch_ids]
            loss, grads = batch_backward(batch, params)
            loss_sum += loss * len(batch_ids)
            params, adam = adam_step(params, grads, adam, cfg)
        train_loss = loss_sum / len(train_tiles)
        correct = 0
        total = 0
        for tile, frames in zip(valid_tiles, valid_frames):
            pred = predict_tile(frames, params)
            correct += int((pred == tile.labels).sum())
            total += pred.size
        val_accuracy = correct / total if total else float("nan")
        row = EpochMetrics(epoch=epoch, train_loss=train_loss,
                           val_accuracy=val_accuracy,
                           wall_seconds=time.perf_counter() - started)
        metrics.append(row)
        if checkpoint_every > 0 and checkpoint_dir is not None \
                and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint_epoch{epoch + 1:03d}.clck",
                            cell_cfg, params)
        if progress is not None:
            progress(row)
    return params, metrics


def format_metrics(metrics: Sequence[EpochMetrics]) -> str:
    """Tab-separated metrics log, one line per epoch.

    Wall time is deliberately left out of the file so reruns with one seed
    are byte-identical; it is reported on the console instead.
    """
    lines = [f"{m.epoch}\t{m.train_loss!r}\t{m.val_accuracy!r}" for m in metrics]
    return "".join(line + "\n" for line in lines)
