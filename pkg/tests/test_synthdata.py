import numpy as np
import pytest

from cloudlstm.synthdata import (
    MARGIN,
    PARTITION_NAMES,
    CloudMask,
    EmptyFilterError,
    ImageSequence,
    SceneConfig,
    coverage_filter,
    frame_filter_indices,
    generate_scene,
    partition_blocks,
    read_dataset,
    write_dataset,
)
from cloudlstm.tensor import FormatError


def small_config(**overrides):
    base = dict(height=96, width=96, tile_size=24, n_frames=8, n_bands=3,
                n_classes=4, parcel_mean_size=24, cloud_probability=0.6,
                cloud_opacity=1.0, noise_sigma=0.02, seed=5)
    base.update(overrides)
    return SceneConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        SceneConfig(height=100, width=96, tile_size=24)
    with pytest.raises(ValueError, match="cloud_probability"):
        small_config(cloud_probability=1.5)
    with pytest.raises(ValueError, match="n_frames"):
        small_config(n_frames=0)


def test_generation_is_deterministic():
    a = generate_scene(small_config())
    b = generate_scene(small_config())
    assert np.array_equal(a.sequence.frames, b.sequence.frames)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.clouds.mask, b.clouds.mask)


def test_no_clouds_when_probability_zero():
    scene = generate_scene(small_config(cloud_probability=0.0))
    assert scene.clouds.mask.sum() == 0
    assert np.array_equal(scene.clouds.coverage, np.zeros(8))


def test_noise_free_cloud_free_pixels_depend_only_on_class():
    scene = generate_scene(small_config(cloud_probability=0.0, noise_sigma=0.0))
    labels = scene.labels
    frames = scene.sequence.frames
    cls = labels[0, 0]
    same = np.argwhere(labels == cls)
    y0, x0 = same[0]
    y1, x1 = same[-1]
    assert (y0, x0) != (y1, x1)
    assert np.array_equal(frames[:, y0, x0, :], frames[:, y1, x1, :])


def test_cloudy_pixels_outshine_clear_ones():
    scene = generate_scene(small_config())
    cov = scene.clouds.coverage
    partial = np.flatnonzero((cov > 0.05) & (cov < 0.95))
    assert partial.size > 0
    for t in partial:
        frame = scene.sequence.frames[t]
        mask = scene.clouds.mask[t]
        clear_p95 = np.percentile(frame[~mask], 95)
        assert (frame[mask] >= clear_p95).all()


def test_coverage_counts_are_exact():
    scene = generate_scene(small_config())
    counts = scene.clouds.pixel_counts
    for t in range(scene.config.n_frames):
        assert counts[t] == scene.clouds.mask[t].sum()
    assert np.array_equal(scene.clouds.coverage, counts / (96.0 * 96.0))


def test_timestamps_evenly_spaced_in_unit_interval():
    scene = generate_scene(small_config())
    ts = scene.sequence.timestamps
    assert ts[0] == 0.0 and ts[-1] < 1.0
    assert np.allclose(np.diff(ts), 1.0 / scene.config.n_frames)


def _mask_from_coverages(coverages, h=10, w=10):
    t = len(coverages)
    mask = np.zeros((t, h, w), dtype=bool)
    for i, cov in enumerate(coverages):
        n = int(round(cov * h * w))
        mask[i].flat[:n] = True
    return CloudMask(mask=mask)


def test_filter_definition_case():
    clouds = _mask_from_coverages([0.0, 0.3, 0.6, 0.05])
    seq = ImageSequence(frames=np.arange(4.0)[:, None, None, None]
                        * np.ones((4, 10, 10, 2)),
                        timestamps=np.arange(4) / 4.0)
    filtered, kept = coverage_filter(seq, clouds, 0.25)
    assert kept.tolist() == [0, 3]
    assert filtered.frames.shape[0] == 2
    assert np.array_equal(filtered.frames[0], seq.frames[0])
    assert np.array_equal(filtered.frames[1], seq.frames[3])
    assert np.array_equal(filtered.timestamps, seq.timestamps[[0, 3]])


def test_filter_thresholds_are_nested():
    scene = generate_scene(small_config(seed=9))
    counts = scene.clouds.pixel_counts
    previous = None
    for threshold in (1.01, 0.5, 0.25, 0.1, 0.0):
        kept = set(frame_filter_indices(counts, 96 * 96, threshold).tolist())
        if previous is not None:
            assert kept.issubset(previous)
        previous = kept


def test_filter_zero_keeps_only_exactly_cloud_free():
    clouds = _mask_from_coverages([0.0, 0.01, 0.0])
    kept = frame_filter_indices(clouds.pixel_counts, 100, 0.0)
    assert kept.tolist() == [0, 2]


def test_filter_above_one_keeps_everything():
    clouds = _mask_from_coverages([0.0, 0.5, 1.0])
    kept = frame_filter_indices(clouds.pixel_counts, 100, 1.01)
    assert kept.tolist() == [0, 1, 2]


def test_filter_empty_result_is_distinct_error():
    clouds = _mask_from_coverages([0.5, 0.8])
    with pytest.raises(EmptyFilterError):
        frame_filter_indices(clouds.pixel_counts, 100, 0.0)
    with pytest.raises(EmptyFilterError):
        frame_filter_indices(clouds.pixel_counts, 100, 0.1)


def test_partition_single_block_no_margin():
    a = partition_blocks(96, 96, 24, 96, 0, seed=1)
    assert a.block_partition.shape == (1, 1)
    codes = set(np.unique(a.tile_partition).tolist())
    assert len(codes) == 1 and MARGIN not in codes


def test_partition_tiles_never_straddle_blocks():
    a = partition_blocks(192, 192, 24, 96, 12, seed=2)
    for ty in range(8):
        for tx in range(8):
            code = a.tile_partition[ty, tx]
            if code == MARGIN:
                continue
            by, bx = (ty * 24) // 96, (tx * 24) // 96
            assert ((ty + 1) * 24 - 1) // 96 == by
            assert ((tx + 1) * 24 - 1) // 96 == bx
            assert code == a.block_partition[by, bx]


def test_partition_ratio_over_many_blocks():
    # 25 x 25 = 625 blocks
    a = partition_blocks(2400, 2400, 24, 96, 12, seed=3)
    counts = a.counts()
    total = sum(counts.values())
    assert total == 625
    for name, target in zip(PARTITION_NAMES, (4 / 6, 1 / 6, 1 / 6)):
        assert abs(counts[name] / total - target) < 0.05


def _tile_gap(a_row, a_col, b_row, b_col, tile_size):
    # Euclidean gap in pixels between two tile rectangles (0 when touching)
    dy = max(0, abs(a_row - b_row) - 1) * tile_size
    dx = max(0, abs(a_col - b_col) - 1) * tile_size
    return float(np.hypot(dy, dx))


def test_partitions_respect_margin_distance():
    margin = 12
    a = partition_blocks(192, 192, 24, 96, margin, seed=4)
    kept = [(code, ty, tx)
            for (ty, tx), code in np.ndenumerate(a.tile_partition)
            if code != MARGIN]
    for i, (code_a, ya, xa) in enumerate(kept):
        for code_b, yb, xb in kept[i + 1:]:
            if code_a == code_b:
                continue
            gap = _tile_gap(ya, xa, yb, xb, 24)
            assert gap >= margin, (
                f"tiles ({ya},{xa}) and ({yb},{xb}) of different partitions "
                f"are only {gap}px apart")


def test_partition_is_deterministic_in_seed():
    a = partition_blocks(192, 192, 24, 96, 12, seed=8)
    b = partition_blocks(192, 192, 24, 96, 12, seed=8)
    assert np.array_equal(a.tile_partition, b.tile_partition)
    # with enough blocks, different seeds give different layouts
    big_a = partition_blocks(960, 960, 24, 96, 12, seed=8)
    big_c = partition_blocks(960, 960, 24, 96, 12, seed=9)
    assert not np.array_equal(big_a.block_partition, big_c.block_partition)


def test_partition_rejects_block_not_multiple_of_tile():
    with pytest.raises(ValueError, match="multiple"):
        partition_blocks(96, 96, 24, 60, 0, seed=0)


def test_dataset_roundtrip_bit_exact(tmp_path):
    scene = generate_scene(small_config())
    assignment = partition_blocks(96, 96, 24, 48, 4, seed=5)
    root = write_dataset(tmp_path / "ds", scene, assignment)
    ds = read_dataset(root)
    assert ds.n_frames == scene.config.n_frames
    assert np.array_equal(ds.cloud_pixel_counts, scene.clouds.pixel_counts)
    assert np.array_equal(ds.timestamps, scene.sequence.timestamps)
    ts = scene.config.tile_size
    for tile in ds.tiles:
        ys = slice(tile.row * ts, (tile.row + 1) * ts)
        xs = slice(tile.col * ts, (tile.col + 1) * ts)
        assert np.array_equal(tile.frames, scene.sequence.frames[:, ys, xs, :])
        assert np.array_equal(tile.labels, scene.labels[ys, xs])
        assert np.array_equal(tile.mask, scene.clouds.mask[:, ys, xs])


def test_dataset_files_match_manifest(tmp_path):
    scene = generate_scene(small_config())
    assignment = partition_blocks(96, 96, 24, 48, 4, seed=5)
    root = write_dataset(tmp_path / "ds", scene, assignment)
    ds = read_dataset(root)
    n_files = len(list((root / "tiles").glob("*.clt")))
    assert n_files == len(ds.tiles) > 0


def test_dataset_write_is_deterministic(tmp_path):
    scene = generate_scene(small_config())
    assignment = partition_blocks(96, 96, 24, 48, 4, seed=5)
    a = write_dataset(tmp_path / "a", scene, assignment)
    b = write_dataset(tmp_path / "b", scene, assignment)
    for fa in sorted(p for p in a.rglob("*") if p.is_file()):
        fb = b / fa.relative_to(a)
        assert fb.read_bytes() == fa.read_bytes(), fa.name


def test_truncated_tile_file_names_path(tmp_path):
    scene = generate_scene(small_config())
    assignment = partition_blocks(96, 96, 24, 48, 4, seed=5)
    root = write_dataset(tmp_path / "ds", scene, assignment)
    victim = sorted((root / "tiles").glob("*.clt"))[0]
    victim.write_bytes(victim.read_bytes()[:-9])
    with pytest.raises(FormatError) as err:
        read_dataset(root)
    assert victim.name in str(err.value)
