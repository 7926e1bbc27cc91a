import numpy as np
import pytest

from cloudlstm.convlstm import GateTrace
from cloudlstm.synthdata import ImageSequence
from cloudlstm.viz import PanelSpec, panel_filename, render_panel, write_image


def read_pgm_reference(path):
    """Minimal independent P5 reader used as the round-trip oracle."""
    raw = open(path, "rb").read()
    assert raw.startswith(b"P5\n")
    rest = raw[3:]
    dims, rest = rest.split(b"\n", 1)
    w, h = (int(v) for v in dims.split(b" "))
    maxval, data = rest.split(b"\n", 1)
    assert maxval == b"255"
    assert len(data) == w * h
    return w, h, np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def make_trace(T=4, H=3, W=3, r=2, fill=None, seed=44):
    if fill is None:
        rng = np.random.default_rng(seed)
        arr = lambda lo, hi: rng.uniform(lo, hi, (T, H, W, r))
        return GateTrace(i=arr(0.01, 0.99), j=arr(-0.9, 0.9), f=arr(0.01, 0.99),
                         o=arr(-0.9, 0.9), c=arr(-2.0, 2.0), h=arr(-2.0, 2.0))
    full = np.full((T, H, W, r), fill)
    return GateTrace(i=full, j=full.copy(), f=full.copy(), o=full.copy(),
                     c=full.copy(), h=full.copy())


def make_seq(T=4, H=3, W=3, d=4, value=0.6):
    return ImageSequence(frames=np.full((T, H, W, d), value),
                         timestamps=np.arange(T) / T)


def test_zero_rows_map_to_fixed_grays():
    trace = make_trace(fill=0.0)
    seq = make_seq(value=0.0)
    spec = PanelSpec(rows=(("i", 0), ("j", 0), ("c", 0)), timesteps=(0, 1, 2),
                     scale=1, gap=0)
    grid = render_panel(trace, seq, spec)
    assert grid.shape == (9, 9)
    assert (grid[0:3] == 0).all()      # i row, range (0,1): 0 -> black
    assert (grid[3:6] == 128).all()    # j row, range (-1,1): 0 -> mid gray
    assert (grid[6:9] == 128).all()    # c row, degenerate all-zero range


def test_range_endpoints_hit_255():
    trace = make_trace(fill=1.0)
    spec = PanelSpec(rows=(("i", 0),), timesteps=(0,), scale=1, gap=0)
    grid = render_panel(trace, make_seq(), spec)
    assert (grid == 255).all()


def test_input_row_uses_first_three_band_mean():
    trace = make_trace(fill=0.0)
    seq = make_seq(value=1.2)  # reflectance ceiling -> white
    spec = PanelSpec(rows=(("input", 0),), timesteps=(0, 3), scale=1, gap=0)
    grid = render_panel(trace, seq, spec)
    assert (grid == 255).all()
    seq_mixed = make_seq(value=0.0)
    seq_mixed.frames[..., 3] = 1.2  # fourth band must not contribute
    grid2 = render_panel(trace, seq_mixed, spec)
    assert (grid2 == 0).all()


def test_cell_row_symmetric_range_keeps_zero_mid_gray():
    trace = make_trace(fill=0.0)
    trace.c[0, 0, 0, 0] = 3.0
    trace.c[1, 0, 0, 0] = -3.0
    spec = PanelSpec(rows=(("c", 0),), timesteps=(0, 1), scale=1, gap=0)
    grid = render_panel(trace, make_seq(), spec)
    assert grid[0, 0] == 255
    assert grid[0, 3] == 0
    assert grid[2, 2] == 128  # untouched zero pixel stays centered


def test_row_range_is_shared_across_columns():
    trace = make_trace(fill=0.0)
    trace.c[0, :, :, 0] = 1.0
    trace.c[2, :, :, 0] = 2.0  # the row peak; normalization must use it
    spec = PanelSpec(rows=(("c", 0),), timesteps=(0, 2), scale=1, gap=0)
    grid = render_panel(trace, make_seq(), spec)
    col0 = grid[:, :3]
    col2 = grid[:, 3:]
    assert (col2 == 255).all()
    assert (col0 == np.rint((1.0 + 2.0) / 4.0 * 255)).all()


def test_gap_pixels_are_mid_gray_and_layout_matches():
    trace = make_trace()
    spec = PanelSpec(rows=(("i", 0), ("f", 1)), timesteps=(0, 1, 3),
                     scale=2, gap=3)
    grid = render_panel(trace, make_seq(), spec)
    assert grid.shape == (2 * 6 + 3, 3 * 6 + 2 * 3)
    assert (grid[6:9, :] == 128).all()
    assert (grid[:, 6:9] == 128).all()


def test_render_rejects_bad_requests():
    trace = make_trace()
    with pytest.raises(ValueError, match="timestep"):
        render_panel(trace, make_seq(),
                     PanelSpec(rows=(("i", 0),), timesteps=(9,)))
    with pytest.raises(ValueError, match="channel"):
        render_panel(trace, make_seq(),
                     PanelSpec(rows=(("i", 5),), timesteps=(0,)))
    with pytest.raises(ValueError, match="source"):
        PanelSpec(rows=(("??", 0),), timesteps=(0,))


def test_rendering_is_deterministic():
    trace = make_trace(seed=45)
    spec = PanelSpec(rows=(("input", 0), ("i", 1), ("c", 0)), timesteps=(0, 1, 2, 3))
    a = render_panel(trace, make_seq(), spec)
    b = render_panel(trace, make_seq(), spec)
    assert np.array_equal(a, b)


def test_pgm_single_black_pixel_exact_bytes(tmp_path):
    path = tmp_path / "one.pgm"
    write_image(np.zeros((1, 1), dtype=np.uint8), path)
    raw = path.read_bytes()
    assert raw == b"P5\n1 1\n255\n\x00"
    assert len(raw) == 12


def test_pgm_roundtrip_through_reference_reader(tmp_path):
    rng = np.random.default_rng(46)
    image = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    path = tmp_path / "grid.pgm"
    write_image(image, path)
    w, h, back = read_pgm_reference(path)
    assert (w, h) == (7, 5)
    assert np.array_equal(back, image)


def test_pgm_header_matches_extents(tmp_path):
    image = np.zeros((3, 9), dtype=np.uint8)
    path = tmp_path / "hdr.pgm"
    write_image(image, path)
    assert path.read_bytes().startswith(b"P5\n9 3\n255\n")


def test_pgm_rejects_non_uint8():
    with pytest.raises(ValueError, match="uint8"):
        write_image(np.zeros((2, 2)), "/tmp/never-written.pgm")


def test_panel_filename_scheme():
    assert panel_filename("out/panel", 47, (0, 1, 2)) == "out/panel_cell47_t0-2.pgm"


def test_render_golden_fixture(tmp_path):
    # Frozen seeded trace rendered once and committed; byte layout must not
    # drift.
    import pathlib
    golden = pathlib.Path(__file__).parent / "golden" / "panel_seed45.pgm"
    trace = make_trace(T=5, H=4, W=4, r=3, seed=45)
    seq = make_seq(T=5, H=4, W=4)
    spec = PanelSpec(rows=(("input", 0), ("i", 1), ("j", 2), ("c", 0)),
                     timesteps=(0, 2, 4), scale=3, gap=2)
    image = render_panel(trace, seq, spec)
    out = tmp_path / "panel.pgm"
    write_image(image, out)
    assert golden.is_file(), "golden fixture missing; run tests/make_goldens.py"
    assert out.read_bytes() == golden.read_bytes()
