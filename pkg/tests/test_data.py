import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slimmat.data import (BG_THRESHOLD, FG_THRESHOLD, TRIMAP_KERNEL, UNKNOWN_RANGE, DatasetExistsError,
                          composite, generate_dataset, load_sample, load_split, make_trimap, read_manifest,
                          save_sample, synth_sample, to_tensors, unknown_mask)


@pytest.mark.parametrize("seed", [0, 1, 7, 123, 9999])
def test_composite_residual(seed):
    s = synth_sample(seed)
    a = s.alpha[..., None].astype(np.float64)
    ref = a * s.fg + (1 - a) * s.bg
    assert np.abs(s.image - ref).max() <= 1e-6


def test_composite_shapes_and_ranges():
    s = synth_sample(3, 48)
    assert s.image.shape == s.fg.shape == s.bg.shape == (48, 48, 3)
    assert s.alpha.shape == s.trimap.shape == (48, 48)
    for arr in (s.image, s.fg, s.bg, s.alpha):
        assert arr.min() >= 0 and arr.max() <= 1
    assert set(np.unique(s.trimap)) <= {0.0, 0.5, 1.0}
    frac = s.unknown.mean()
    assert UNKNOWN_RANGE[0] <= frac <= UNKNOWN_RANGE[1]


def test_same_seed_same_sample():
    a, b = synth_sample(42), synth_sample(42)
    for name in ("image", "fg", "bg", "alpha", "trimap"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.alpha, synth_sample(43).alpha)


def test_too_small_size_rejected():
    with pytest.raises(ValueError):
        synth_sample(0, 16)


@pytest.mark.parametrize("col", [20, 32, 40])
def test_trimap_step_edge_band(col):
    alpha = np.zeros((64, 64), np.float32)
    alpha[:, :col] = 1.0
    tri = make_trimap(alpha)
    half = TRIMAP_KERNEL // 2
    unknown_cols = np.where(unknown_mask(tri).all(axis=0))[0]
    assert unknown_cols.tolist() == list(range(col - half, col + half))
    assert (tri[:, : col - half] == 1).all()
    assert (tri[:, col + half:] == 0).all()


def test_trimap_constant_alpha():
    assert (make_trimap(np.ones((40, 40))) == 1).all()
    assert (make_trimap(np.zeros((40, 40))) == 0).all()


def test_trimap_kernel_too_large():
    with pytest.raises(ValueError):
        make_trimap(np.ones((8, 8)), kernel=11)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fractional_alpha_always_unknown(seed):
    rng = np.random.default_rng(seed)
    alpha = np.clip(rng.normal(0.5, 0.6, (40, 40)), 0, 1)
    alpha[rng.random((40, 40)) < 0.5] = 1.0
    tri = make_trimap(alpha)
    fractional = (alpha > BG_THRESHOLD) & (alpha < FG_THRESHOLD)
    assert unknown_mask(tri)[fractional].all()
    assert (alpha[tri == 1] >= FG_THRESHOLD).all()
    assert (alpha[tri == 0] <= BG_THRESHOLD).all()


def test_ramp_contained_in_unknown():
    alpha = np.tile(np.clip((np.arange(64) - 20) / 24, 0, 1), (64, 1)).astype(np.float32)
    tri = make_trimap(alpha)
    ramp = (alpha > 0) & (alpha < 1)
    assert unknown_mask(tri)[ramp].all()


def test_composite_function():
    a = np.array([[0.0, 0.25], [1.0, 0.5]], np.float32)
    fg, bg = np.ones((2, 2, 3), np.float32), np.zeros((2, 2, 3), np.float32)
    assert np.allclose(composite(a, fg, bg)[..., 0], a)


def test_dataset_layout_and_manifest(tmp_path):
    manifest = generate_dataset(tmp_path / "d", 3, 2, size=32, seed=5)
    rows = read_manifest(tmp_path / "d")
    assert [r["split"] for r in rows] == ["train"] * 3 + ["test"] * 2
    assert len({r["seed"] for r in rows}) == 5
    assert len(load_split(tmp_path / "d", "train")) == 3
    assert len(load_split(tmp_path / "d")) == 2  # root defaults to test
    again = generate_dataset(tmp_path / "e", 3, 2, size=32, seed=5)
    assert manifest.read_bytes() == again.read_bytes()
    other = generate_dataset(tmp_path / "f", 3, 2, size=32, seed=6)
    assert manifest.read_bytes() != other.read_bytes()


def test_dataset_regeneration_identical_pixels(tmp_path):
    generate_dataset(tmp_path / "a", 2, 1, size=32, seed=1)
    generate_dataset(tmp_path / "b", 2, 1, size=32, seed=1)
    for split in ("train", "test"):
        for x, y in zip(load_split(tmp_path / "a", split), load_split(tmp_path / "b", split)):
            assert np.array_equal(x.image, y.image) and np.array_equal(x.alpha, y.alpha)


def test_dataset_refuses_overwrite(tmp_path):
    generate_dataset(tmp_path / "d", 1, 1, size=32)
    with pytest.raises(DatasetExistsError):
        generate_dataset(tmp_path / "d", 1, 1, size=32)
    generate_dataset(tmp_path / "d", 2, 1, size=32, force=True)
    assert len(load_split(tmp_path / "d", "train")) == 2


@pytest.mark.parametrize("seed", [0, 11])
def test_save_load_roundtrip_exact(tmp_path, seed):
    s = synth_sample(seed)
    save_sample(s, tmp_path / "s")
    r = load_sample(tmp_path / "s")
    for name in ("image", "fg", "bg", "alpha", "trimap"):
        assert np.array_equal(getattr(s, name), getattr(r, name)), name


def test_to_tensors_layout():
    samples = [synth_sample(i, 32) for i in range(3)]
    x, alpha, trimap = to_tensors(samples)
    assert tuple(x.shape) == (3, 4, 32, 32)
    assert tuple(alpha.shape) == tuple(trimap.shape) == (3, 1, 32, 32)
    assert np.allclose(x[1, :3].numpy().transpose(1, 2, 0), samples[1].image)
    assert np.allclose(x[1, 3].numpy(), samples[1].trimap)
