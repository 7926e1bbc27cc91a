"""Classification metrics and the cloud-sensitivity statistic.

The cloud-sensitivity report quantifies, per hidden channel, how strongly the
input gate closes on cloudy pixels: for each channel the mean input-gate
activation is taken separately over cloudy and clear (timestep, pixel) pairs
and the clear/cloudy ratio ranks channels. This scalar view of the gate maps
is an artifact of this library, not a reported result of any upstream study.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convlstm import GateTrace
from .tensor import ShapeError


class DegenerateMaskError(ValueError):
    """The cloud mask has no cloudy or no clear pixels."""


def overall_accuracy(pred: np.ndarray, ref: np.ndarray) -> float:
    """Correct pixels divided by total pixels."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"overall_accuracy: shape mismatch {pred.shape} vs {ref.shape}")
    return float((pred == ref).sum() / pred.size)


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)


def confusion(pred: np.ndarray, ref: np.ndarray, n_classes: int) -> np.ndarray:
    """C x C count matrix with reference classes as rows, predictions as columns."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"confusion: shape mismatch {pred.shape} vs {ref.shape}")
    for name, a in (("pred", pred), ("ref", ref)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"confusion: {name} contains classes outside "
                             f"[0,{n_classes})")
    flat = ref.ravel() * n_classes + pred.ravel()
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes)


@dataclass
class ChannelSensitivity:
    channel: int
    cloudy_mean: float
    clear_mean: float

    @property
    def ratio(self) -> float:
        return self.clear_mean / self.cloudy_mean


@dataclass
class CloudSensitivityReport:
    channels: list[ChannelSensitivity]  # sorted by ratio, descending

    def top_channels(self, n: int) -> list[int]:
        return [c.channel for c in self.channels[:n]]

    def format(self) -> str:
        lines = ["channel\tcloudy_mean\tclear_mean\tratio"]
        for c in self.channels:
            lines.append(f"{c.channel}\t{c.cloudy_mean!r}\t{c.clear_mean!r}\t{c.ratio!r}")
        return "".join(line + "\n" for line in lines)


def cloud_sensitivity(trace: GateTrace, mask: np.ndarray) -> CloudSensitivityReport:
    """Mean input-gate activation over cloudy vs clear pixels, per channel.

    ``mask`` is a boolean [T,H,W] array aligned with the trace. Both means are
    taken over the same timestep set, so a channel that ignores clouds scores
    a ratio near one.
    """
    gate = trace.i
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gate.shape[:3]:
        raise ShapeError(f"cloud_sensitivity: mask {mask.shape} does not match "
                         f"trace {gate.shape[:3]}")
    n_cloudy = int(mask.sum())
    if n_cloudy == 0 or n_cloudy == mask.size:
        raise DegenerateMaskError(
            "degenerate mask: need at least one cloudy and one clear pixel")
    cloudy = gate[mask].mean(axis=0)
    clear = gate[~mask].mean(axis=0)
    channels = [ChannelSensitivity(channel=ch, cloudy_mean=float(cloudy[ch]),
                                   clear_mean=float(clear[ch]))
                for ch in range(gate.shape[3])]
    channels.sort(key=lambda c: (-c.ratio, c.channel))
    return CloudSensitivityReport(channels=channels)
