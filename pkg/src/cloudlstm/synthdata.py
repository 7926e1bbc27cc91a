"""Synthetic crop-phenology scenes with ground-truth cloud masks.

A scene is a rectangular mosaic of crop parcels. Each class has a per-band
seasonal reflectance curve (constant baseline plus one Gaussian bump in time),
so classes are told apart mainly by their temporal dynamics. Clouds are
injected per frame as thresholded smooth random fields that overwrite the
ground signal with a high flat reflectance; the mask records exactly the
overwritten pixels, giving exact per-frame coverage ratios.

Also here: the strict-less-than coverage filter used by the ablation runs,
leakage-free block partitioning of tiles into train/valid/eval, and the
on-disk dataset format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import FormatError, Tensor, read_tensor, write_tensor

PARTITION_NAMES = ("train", "valid", "eval")
MARGIN = 3  # tile partition code for discarded margin tiles

REFLECTANCE_MAX = 1.2

# Value ranges for the per-class seasonal curves. Baselines overlap heavily
# across classes while bump amplitudes are large, so single cloud-free frames
# carry much less class information than the temporal shape.
_BASELINE_RANGE = (0.08, 0.30)
_AMPLITUDE_RANGE = (0.15, 0.45)
_CENTER_RANGE = (0.10, 0.90)
_WIDTH_RANGE = (0.06, 0.20)

# Cloud blob fields: per cloudy frame, a few Gaussian bumps are summed and
# thresholded at 1.0. The wide size/strength ranges yield coverage ratios
# spread over (0, ~0.7], which the threshold ablation needs.
_BLOB_COUNT_RANGE = (1, 6)       # upper bound exclusive
_BLOB_SIGMA_RANGE = (8.0, 64.0)
_BLOB_AMP_RANGE = (0.9, 2.2)


class EmptyFilterError(ValueError):
    """Coverage filtering removed every frame."""


@dataclass(frozen=True)
class SceneConfig:
    height: int = 192
    width: int = 192
    tile_size: int = 24
    n_frames: int = 30
    n_bands: int = 4
    n_classes: int = 6
    parcel_mean_size: int = 32     # mean parcel side length, pixels
    cloud_probability: float = 0.7  # chance that a frame gets cloud blobs
    cloud_opacity: float = 1.0      # reflectance written under clouds
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.tile_size < 1:
            raise ValueError("scene extents and tile size must be >= 1")
        if self.height % self.tile_size or self.width % self.tile_size:
            raise ValueError(
                f"scene {self.height}x{self.width} is not divisible into whole "
                f"tiles of {self.tile_size}")
        if self.n_frames < 1:
            raise ValueError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.n_bands < 1 or self.n_classes < 2:
            raise ValueError("need n_bands >= 1 and n_classes >= 2")
        if not 0.0 <= self.cloud_probability <= 1.0:
            raise ValueError(f"cloud_probability must be in [0,1], "
                             f"got {self.cloud_probability}")
        if self.noise_sigma < 0 or self.parcel_mean_size < 4:
            raise ValueError("noise_sigma must be >= 0, parcel_mean_size >= 4")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


@dataclass
class ImageSequence:
    frames: Tensor      # [T,H,W,D] reflectances in [0, REFLECTANCE_MAX]
    timestamps: Tensor  # [T] normalized year fractions in [0,1)


@dataclass
class CloudMask:
    mask: np.ndarray  # bool [T,H,W]

    @property
    def pixel_counts(self) -> np.ndarray:
        return self.mask.sum(axis=(1, 2))

    @property
    def coverage(self) -> np.ndarray:
        """Exact per-frame cloudy-pixel ratio, recomputed from the mask."""
        t, h, w = self.mask.shape
        return self.pixel_counts / float(h * w)


@dataclass
class ClassProfiles:
    """Seasonal curve parameters per (class, band)."""

    baseline: np.ndarray
    amplitude: np.ndarray
    center: np.ndarray
    width: np.ndarray

    def curves(self, timestamps: np.ndarray) -> np.ndarray:
        """Reflectance curves evaluated at the given times, [C, D, T]."""
        t = timestamps[None, None, :]
        bump = np.exp(-((t - self.center[..., None]) ** 2)
                      / (2.0 * self.width[..., None] ** 2))
        return self.baseline[..., None] + self.amplitude[..., None] * bump


@dataclass
class Scene:
    config: SceneConfig
    sequence: ImageSequence
    labels: np.ndarray  # [H,W] class indices
    clouds: CloudMask
    profiles: ClassProfiles


def _split_parcels(rng: np.random.Generator, height: int, width: int,
                   mean_size: int) -> list[tuple[int, int, int, int]]:
    # Recursive binary splits with randomized cut positions until both sides
    # are near the target size. LIFO order keeps the draw sequence fixed.
    stack = [(0, 0, height, width)]
    parcels = []
    limit = mean_size * 3 // 2
    while stack:
        y, x, h, w = stack.pop()
        if max(h, w) <= limit or max(h, w) < 8:
            parcels.append((y, x, h, w))
            continue
        frac = rng.uniform(0.35, 0.65)
        if h >= w:
            cut = min(h - 4, max(4, int(round(h * frac))))
            stack.append((y + cut, x, h - cut, w))
            stack.append((y, x, cut, w))
        else:
            cut = min(w - 4, max(4, int(round(w * frac))))
            stack.append((y, x + cut, h, w - cut))
            stack.append((y, x, h, cut))
    return parcels


def _draw_profiles(rng: np.random.Generator, n_classes: int,
                   n_bands: int) -> ClassProfiles:
    shape = (n_classes, n_bands)
    return ClassProfiles(
        baseline=rng.uniform(*_BASELINE_RANGE, size=shape),
        amplitude=rng.uniform(*_AMPLITUDE_RANGE, size=shape),
        center=rng.uniform(*_CENTER_RANGE, size=shape),
        width=rng.uniform(*_WIDTH_RANGE, size=shape),
    )


def _cloud_fields(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    """Boolean [T,H,W] cloud mask from thresholded sums of Gaussian bumps."""
    yy = np.arange(cfg.height, dtype=np.float64)[:, None]
    xx = np.arange(cfg.width, dtype=np.float64)[None, :]
    mask = np.zeros((cfg.n_frames, cfg.height, cfg.width), dtype=bool)
    for t in range(cfg.n_frames):
        if rng.random() >= cfg.cloud_probability:
            continue
        n_blobs = int(rng.integers(*_BLOB_COUNT_RANGE))
        fld = np.zeros((cfg.height, cfg.width))
        for _ in range(n_blobs):
            cy = rng.uniform(0.0, cfg.height)
            cx = rng.uniform(0.0, cfg.width)
            sigma = rng.uniform(*_BLOB_SIGMA_RANGE)
            amp = rng.uniform(*_BLOB_AMP_RANGE)
            fld += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                / (2.0 * sigma * sigma))
        mask[t] = fld > 1.0
    return mask


def generate_scene(cfg: SceneConfig) -> Scene:
    """Build one scene: reflectance stack, label map, cloud mask, profiles.

    All structural randomness (parcels, profiles, clouds) comes from the
    scene stream of ``cfg.seed``; pixel noise comes from one sub-stream per
    tile, so tiles could be produced independently in parallel and still
    match the sequential output bit for bit.
    """
    rng = np.random.default_rng([cfg.seed, 0])
    height, width = cfg.height, cfg.width
    parcels = _split_parcels(rng, height, width, cfg.parcel_mean_size)
    # Cycle the class list over parcels then shuffle: every class appears and
    # counts stay near-balanced.
    classes = rng.permutation(np.resize(np.arange(cfg.n_classes), len(parcels)))
    labels = np.zeros((height, width), dtype=np.int64)
    for (y, x, h, w), cls in zip(parcels, classes):
        labels[y : y + h, x : x + w] = cls
    profiles = _draw_profiles(rng, cfg.n_classes, cfg.n_bands)
    timestamps = np.arange(cfg.n_frames, dtype=np.float64) / cfg.n_frames
    curves = profiles.curves(timestamps)                    # [C, D, T]
    ground = curves[labels].transpose(3, 0, 1, 2)           # [H,W,D,T] -> [T,H,W,D]
    mask = _cloud_fields(rng, cfg)

    frames = np.empty((cfg.n_frames, height, width, cfg.n_bands))
    n_tx = width // cfg.tile_size
    for row in range(height // cfg.tile_size):
        for col in range(n_tx):
            idx = row * n_tx + col
            tile_rng = np.random.default_rng([cfg.seed, 1, idx])
            ys = slice(row * cfg.tile_size, (row + 1) * cfg.tile_size)
            xs = slice(col * cfg.tile_size, (col + 1) * cfg.tile_size)
            noise = tile_rng.normal(
                0.0, cfg.noise_sigma,
                size=(cfg.n_frames, cfg.tile_size, cfg.tile_size, cfg.n_bands))
            base = np.where(mask[:, ys, xs, None], cfg.cloud_opacity,
                            ground[:, ys, xs, :])
            frames[:, ys, xs, :] = np.clip(base + noise, 0.0, REFLECTANCE_MAX)
    return Scene(config=cfg, sequence=ImageSequence(frames, timestamps),
                 labels=labels, clouds=CloudMask(mask), profiles=profiles)


def frame_filter_indices(pixel_counts: np.ndarray, n_pixels: int,
                         threshold: float) -> np.ndarray:
    """Indices of frames whose coverage is strictly below ``threshold``.

    Threshold 0 is the cloud-free case and matches exact zero counts; any
    threshold above 1 keeps every frame. Raises when nothing survives.
    """
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    counts = np.asarray(pixel_counts)
    if threshold == 0:
        keep = np.flatnonzero(counts == 0)
    else:
        keep = np.flatnonzero(counts / float(n_pixels) < threshold)
    if keep.size == 0:
        raise EmptyFilterError(f"no frames below coverage threshold {threshold}")
    return keep


def coverage_filter(seq: ImageSequence, clouds: CloudMask,
                    threshold: float) -> tuple[ImageSequence, np.ndarray]:
    """Keep frames whose cloud coverage is strictly below ``threshold``.

    Frame order is preserved. Returns the filtered sequence plus the kept
    frame indices.
    """
    t, h, w = clouds.mask.shape
    keep = frame_filter_indices(clouds.pixel_counts, h * w, threshold)
    filtered = ImageSequence(frames=seq.frames[keep],
                             timestamps=seq.timestamps[keep])
    return filtered, keep


@dataclass
class PartitionAssignment:
    """Block grid partition plus the per-tile assignment derived from it."""

    height: int
    width: int
    tile_size: int
    block_size: int
    margin: int
    block_partition: np.ndarray  # [n_by, n_bx] values in {0,1,2}
    tile_partition: np.ndarray   # [n_ty, n_tx] values in {0,1,2,MARGIN}

    def tiles(self, partition: str) -> list[tuple[int, int]]:
        code = PARTITION_NAMES.index(partition)
        rows, cols = np.nonzero(self.tile_partition == code)
        return list(zip(rows.tolist(), cols.tolist()))

    def counts(self) -> dict[str, int]:
        out = {name: int((self.block_partition == i).sum())
               for i, name in enumerate(PARTITION_NAMES)}
        return out


def _quota_counts(n: int, ratios: tuple[float, float, float]) -> list[int]:
    # Largest-remainder apportionment; remainder ties go to the partition
    # furthest below its target, so small grids still get all partitions.
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [int(q) for q in quotas]
    while sum(counts) < n:
        best = None
        for idx, (q, c) in enumerate(zip(quotas, counts)):
            key = (-(q - c), c / q if q > 0 else float("inf"), idx)
            if best is None or key < best[0]:
                best = (key, idx)
        counts[best[1]] += 1
    return counts


def partition_blocks(height: int, width: int, tile_size: int, block_size: int,
                     margin: int, seed: int,
                     ratios: tuple[float, float, float] = (4.0, 1.0, 1.0),
                     ) -> PartitionAssignment:
    """Assign whole blocks to train/valid/eval and derive tile partitions.

    Blocks tile the scene on a regular grid. A strip of ceil(margin/2) pixels
    inside every internal block border is discarded, so tiles of two distinct
    partitions are never closer than ``margin`` pixels. Tiles fully inside a
    block's kept interior inherit its partition; all others are dropped.
    """
    if block_size % tile_size:
        raise ValueError(f"block size {block_size} is not a multiple of the "
                         f"tile size {tile_size}")
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    if height % tile_size or width % tile_size:
        raise ValueError("scene extents must be divisible into whole tiles")
    n_by = -(-height // block_size)
    n_bx = -(-width // block_size)
    n_blocks = n_by * n_bx
    counts = _quota_counts(n_blocks, ratios)
    codes = np.repeat(np.arange(3), counts)
    rng = np.random.default_rng(seed)
    block_partition = codes[rng.permutation(n_blocks)].reshape(n_by, n_bx)

    strip = (margin + 1) // 2
    n_ty = height // tile_size
    n_tx = width // tile_size
    tile_partition = np.full((n_ty, n_tx), MARGIN, dtype=np.int64)
    for ty in range(n_ty):
        y0, y1 = ty * tile_size, (ty + 1) * tile_size
        by = y0 // block_size
        lo_y = by * block_size + (strip if by > 0 else 0)
        hi_y = min((by + 1) * block_size, height) - (strip if (by + 1) * block_size < height else 0)
        for tx in range(n_tx):
            x0, x1 = tx * tile_size, (tx + 1) * tile_size
            bx = x0 // block_size
            lo_x = bx * block_size + (strip if bx > 0 else 0)
            hi_x = min((bx + 1) * block_size, width) - (strip if (bx + 1) * block_size < width else 0)
            if y0 >= lo_y and y1 <= hi_y and x0 >= lo_x and x1 <= hi_x:
                tile_partition[ty, tx] = block_partition[by, bx]
    return PartitionAssignment(height=height, width=width, tile_size=tile_size,
                               block_size=block_size, margin=margin,
                               block_partition=block_partition,
                               tile_partition=tile_partition)


@dataclass
class TileRecord:
    tile_id: str
    row: int
    col: int
    partition: str
    frames: Tensor       # [T,h,w,D]
    labels: np.ndarray   # [h,w] int
    mask: np.ndarray     # bool [T,h,w]


@dataclass
class Dataset:
    height: int
    width: int
    tile_size: int
    n_frames: int
    n_bands: int
    n_classes: int
    seed: int
    timestamps: np.ndarray
    cloud_pixel_counts: np.ndarray
    tiles: list[TileRecord] = field(default_factory=list)
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def coverage(self) -> np.ndarray:
        return self.cloud_pixel_counts / float(self.height * self.width)

    def partition(self, name: str) -> list[TileRecord]:
        return [t for t in self.tiles if t.partition == name]

    def tile_by_id(self, tile_id: str) -> TileRecord:
        for t in self.tiles:
            if t.tile_id == tile_id:
                return t
        raise KeyError(f"no tile {tile_id!r} in dataset")


def _tile_id(row: int, col: int) -> str:
    return f"r{row:03d}c{col:03d}"


# Scene knobs echoed into the manifest so a dataset can be regenerated from
# its own description.
_PROVENANCE_KEYS = ("parcel_mean_size", "cloud_probability", "cloud_opacity",
                    "noise_sigma")


def write_dataset(directory, scene: Scene, assignment: PartitionAssignment) -> Path:
    """Write kept tiles plus a line-oriented manifest; margin tiles are dropped.

    Layout: ``manifest.txt`` and one CLT1 file per tile under ``tiles/``
    (reflectances), ``labels/`` (class indices) and ``masks/`` (cloud flags
    stored as 0.0/1.0).
    """
    cfg = scene.config
    if assignment.height != cfg.height or assignment.width != cfg.width \
            or assignment.tile_size != cfg.tile_size:
        raise ValueError("partition assignment does not match the scene geometry")
    root = Path(directory)
    for sub in ("tiles", "labels", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    lines = []
    for key in ("height", "width", "tile_size", "n_frames", "n_bands",
                "n_classes", "seed"):
        lines.append(f"{key}={getattr(cfg, key)}")
    lines.append(f"block_size={assignment.block_size}")
    lines.append(f"margin={assignment.margin}")
    for key in _PROVENANCE_KEYS:
        lines.append(f"{key}={getattr(cfg, key)!r}")
    lines.append("timestamps=" + ",".join(repr(float(v))
                                          for v in scene.sequence.timestamps))
    counts = scene.clouds.pixel_counts
    lines.append("cloud_pixels=" + ",".join(str(int(v)) for v in counts))
    prof = scene.profiles
    for c in range(cfg.n_classes):
        for b in range(cfg.n_bands):
            values = (prof.baseline[c, b], prof.amplitude[c, b],
                      prof.center[c, b], prof.width[c, b])
            lines.append(f"profile={c},{b}," +
                         ",".join(repr(float(v)) for v in values))

    ts = cfg.tile_size
    for ty in range(cfg.height // ts):
        for tx in range(cfg.width // ts):
            code = assignment.tile_partition[ty, tx]
            if code == MARGIN:
                continue
            name = PARTITION_NAMES[code]
            tid = _tile_id(ty, tx)
            ys = slice(ty * ts, (ty + 1) * ts)
            xs = slice(tx * ts, (tx + 1) * ts)
            write_tensor(root / "tiles" / f"{tid}.clt",
                         scene.sequence.frames[:, ys, xs, :])
            write_tensor(root / "labels" / f"{tid}.clt",
                         scene.labels[ys, xs].astype(np.float64))
            write_tensor(root / "masks" / f"{tid}.clt",
                         scene.clouds.mask[:, ys, xs].astype(np.float64))
            lines.append(f"tile={tid},{name},{ty},{tx}")

    (root / "manifest.txt").write_text("".join(line + "\n" for line in lines),
                                       encoding="utf-8")
    return root


def _parse_manifest(path: Path) -> tuple[dict[str, str], list[tuple[str, str]]]:
    singles: dict[str, str] = {}
    repeated: list[tuple[str, str]] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        if key in ("tile", "profile"):
            repeated.append((key, value))
        else:
            singles[key] = value
    return singles, repeated


def read_dataset(directory) -> Dataset:
    """Load a dataset directory written by :func:`write_dataset`."""
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FormatError(f"{manifest}: missing manifest")
    singles, repeated = _parse_manifest(manifest)
    try:
        ds = Dataset(
            height=int(singles["height"]), width=int(singles["width"]),
            tile_size=int(singles["tile_size"]),
            n_frames=int(singles["n_frames"]), n_bands=int(singles["n_bands"]),
            n_classes=int(singles["n_classes"]), seed=int(singles["seed"]),
            timestamps=np.array([float(v) for v in
                                 singles["timestamps"].split(",")]),
            cloud_pixel_counts=np.array([int(v) for v in
                                         singles["cloud_pixels"].split(",")]),
            extra={k: v for k, v in singles.items()},
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{manifest}: {exc}") from None
    if ds.timestamps.size != ds.n_frames or ds.cloud_pixel_counts.size != ds.n_frames:
        raise FormatError(f"{manifest}: per-frame lists do not match n_frames")

    ts = ds.tile_size
    for key, value in repeated:
        if key != "tile":
            continue
        parts = value.split(",")
        if len(parts) != 4 or parts[1] not in PARTITION_NAMES:
            raise FormatError(f"{manifest}: bad tile line {value!r}")
        tid, partition, row, col = parts[0], parts[1], int(parts[2]), int(parts[3])
        frames = read_tensor(root / "tiles" / f"{tid}.clt")
        labels = read_tensor(root / "labels" / f"{tid}.clt")
        mask = read_tensor(root / "masks" / f"{tid}.clt")
        if frames.shape != (ds.n_frames, ts, ts, ds.n_bands):
            raise FormatError(f"{root / 'tiles' / (tid + '.clt')}: shape "
                              f"{frames.shape} does not match the manifest")
        if labels.shape != (ts, ts):
            raise FormatError(f"{root / 'labels' / (tid + '.clt')}: shape "
                              f"{labels.shape} does not match the manifest")
        if mask.shape != (ds.n_frames, ts, ts):
            raise FormatError(f"{root / 'masks' / (tid + '.clt')}: shape "
                              f"{mask.shape} does not match the manifest")
        ds.tiles.append(TileRecord(
            tile_id=tid, row=row, col=col, partition=partition,
            frames=frames, labels=labels.astype(np.int64),
            mask=mask != 0.0))
    n_files = len(list((root / "tiles").glob("*.clt")))
    if n_files != len(ds.tiles):
        raise FormatError(f"{root}: manifest lists {len(ds.tiles)} tiles but "
                          f"{n_files} tile files exist")
    return ds
