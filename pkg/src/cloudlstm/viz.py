"""Grayscale activation panels: inputs and gate maps over time, as PGM files.

A panel is a grid with one row per source (input proxy or a gate/state
channel) and one column per timestep. Every row is normalized with a single
fixed value range, never per cell, so brightness is comparable along time
within a row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .convlstm import GateTrace
from .synthdata import REFLECTANCE_MAX, ImageSequence

SOURCES = ("input", "i", "j", "f", "o", "c", "h")
GAP_GRAY = 128


@dataclass(frozen=True)
class PanelSpec:
    """What to render: (source, channel) rows and the timestep columns.

    ``ranges`` may pin a (lo, hi) normalization range per row; rows left as
    None use the source's natural range: (0,1) for i and f, (-1,1) for j and
    o, symmetric max-abs over the selected steps for c and h, and
    (0, REFLECTANCE_MAX) for the input proxy. ``scale`` is the rendered pixel
    size of one tensor pixel, ``gap`` the gray separator width.
    """

    rows: tuple[tuple[str, int], ...]
    timesteps: tuple[int, ...]
    scale: int = 4
    gap: int = 2
    ranges: tuple[Optional[tuple[float, float]], ...] = ()

    def __post_init__(self):
        if not self.rows or not self.timesteps:
            raise ValueError("panel needs at least one row and one timestep")
        for source, _ in self.rows:
            if source not in SOURCES:
                raise ValueError(f"unknown source {source!r}, expected one of {SOURCES}")
        if self.scale < 1 or self.gap < 0:
            raise ValueError("scale must be >= 1 and gap >= 0")
        if self.ranges and len(self.ranges) != len(self.rows):
            raise ValueError("ranges, when given, must match the row count")


def _row_cells(trace: GateTrace, seq: ImageSequence, source: str, channel: int,
               steps: Sequence[int]) -> list[np.ndarray]:
    if source == "input":
        n_bands = min(3, seq.frames.shape[3])
        return [seq.frames[t, :, :, :n_bands].mean(axis=2) for t in steps]
    gate = getattr(trace, source)
    if not 0 <= channel < gate.shape[3]:
        raise ValueError(f"channel {channel} out of range for {gate.shape[3]} "
                         f"hidden channels")
    return [gate[t, :, :, channel] for t in steps]


def _row_range(source: str, cells: list[np.ndarray]) -> tuple[float, float]:
    if source in ("i", "f"):
        return 0.0, 1.0
    if source in ("j", "o"):
        return -1.0, 1.0
    if source == "input":
        return 0.0, REFLECTANCE_MAX
    peak = max(float(np.abs(c).max()) for c in cells)  # c and h are unbounded
    return -peak, peak


def _to_gray(cell: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.full(cell.shape, GAP_GRAY, dtype=np.uint8)
    scaled = np.rint((cell - lo) / (hi - lo) * 255.0)
    return np.clip(scaled, 0.0, 255.0).astype(np.uint8)


def render_panel(trace: GateTrace, seq: ImageSequence, spec: PanelSpec) -> np.ndarray:
    """Render the panel grid to an 8-bit grayscale image array."""
    n_steps = trace.n_steps
    if seq.frames.shape[0] != n_steps:
        raise ValueError(f"trace covers {n_steps} steps but the sequence has "
                         f"{seq.frames.shape[0]} frames")
    for t in spec.timesteps:
        if not 0 <= t < n_steps:
            raise ValueError(f"timestep {t} out of range [0,{n_steps})")
    height, width = trace.i.shape[1], trace.i.shape[2]
    ch, cw = height * spec.scale, width * spec.scale
    n_rows, n_cols = len(spec.rows), len(spec.timesteps)
    grid = np.full((n_rows * ch + (n_rows - 1) * spec.gap,
                    n_cols * cw + (n_cols - 1) * spec.gap),
                   GAP_GRAY, dtype=np.uint8)
    for row_idx, (source, channel) in enumerate(spec.rows):
        cells = _row_cells(trace, seq, source, channel, spec.timesteps)
        pinned = spec.ranges[row_idx] if spec.ranges else None
        lo, hi = pinned if pinned is not None else _row_range(source, cells)
        y = row_idx * (ch + spec.gap)
        for col_idx, cell in enumerate(cells):
            gray = _to_gray(cell, lo, hi)
            gray = np.repeat(np.repeat(gray, spec.scale, axis=0), spec.scale, axis=1)
            x = col_idx * (cw + spec.gap)
            grid[y : y + ch, x : x + cw] = gray
    return grid


def panel_filename(prefix: str, channel: int, timesteps: Sequence[int]) -> str:
    return f"{prefix}_cell{channel}_t{timesteps[0]}-{timesteps[-1]}.pgm"


def write_image(image: np.ndarray, path) -> None:
    """Write an 8-bit grayscale array as a binary portable graymap (P5)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"expected a 2-D uint8 image, got {image.dtype} "
                         f"with shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())
