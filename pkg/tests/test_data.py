"""Synthetic scenes, degradations and dataset I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmsnet import data
from xmsnet.data import (DegradationSpec, SceneError, SceneSpec, generate_sample, load_dataset, load_sample, misalign,
                         psnr, save_sample, stack, write_index)


def iou(a, b):
    return (a & b).sum() / max((a | b).sum(), 1)


def test_same_seed_is_bitwise_identical():
    degr = DegradationSpec(noise_sigma=0.1, dx=2, rotation=3)
    a = generate_sample(11, SceneSpec(), degr)
    b = generate_sample(11, SceneSpec(), degr)
    for name in ("rgb", "aux", "gt"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = generate_sample(12, SceneSpec(), degr)
    assert a.rgb.tobytes() != c.rgb.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_clean_aux_aligned_with_gt(seed):
    s = generate_sample(seed)
    assert iou(s.aux[0] > 0.5, s.gt[0] > 0.5) > 0.99


def test_thermal_aux_aligned_with_gt():
    ious = [iou(s.aux[0] > 0.5, s.gt[0] > 0.5) for s in
            (generate_sample(k, SceneSpec(aux_mode="thermal")) for k in range(5))]
    assert min(ious) > 0.8


@pytest.mark.parametrize("seed", range(5))
def test_heavy_noise_psnr(seed):
    s = generate_sample(seed, None, DegradationSpec(noise_sigma=0.5))
    assert psnr(s.aux_clean, s.aux) < 12.0


def test_light_noise_psnr_higher():
    s = generate_sample(0, None, DegradationSpec(noise_sigma=0.05))
    assert psnr(s.aux_clean, s.aux) > 20.0


def test_pure_noise_aux_carries_no_scene():
    s = generate_sample(3, None, DegradationSpec(pure_noise=True))
    assert abs(np.corrcoef(s.aux[0].ravel(), s.gt[0].ravel())[0, 1]) < 0.1


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_sample_invariants(seed):
    s = generate_sample(seed, SceneSpec(min_objects=1, max_objects=3), DegradationSpec(noise_sigma=0.3, dx=3))
    assert s.rgb.shape == s.aux.shape == (3, 64, 64) and s.gt.shape == (1, 64, 64)
    frac = s.gt.mean()
    assert 0.01 <= frac <= 0.6
    assert set(np.unique(s.gt)) <= {0.0, 1.0}
    for x in (s.rgb, s.aux):
        assert x.min() >= 0 and x.max() <= 1
    # auxiliary channel is replicated to 3 planes
    assert np.array_equal(s.aux[0], s.aux[2])


def test_scene_validation():
    with pytest.raises(SceneError):
        generate_sample(0, SceneSpec(height=48))
    with pytest.raises(SceneError):
        generate_sample(0, SceneSpec(min_objects=0))
    with pytest.raises(SceneError):
        generate_sample(0, SceneSpec(shapes=("square",)))
    with pytest.raises(SceneError):
        generate_sample(0, None, DegradationSpec(noise_sigma=-1))


def test_foreground_bounds_give_up_after_retries(monkeypatch):
    monkeypatch.setattr(data, "_object_mask", lambda rng, kind, h, w: np.zeros((h, w), bool))
    with pytest.raises(SceneError, match="100 attempts"):
        generate_sample(0)


# ---------------------------------------------------------------- misalign

def blob(n=64, sigma=6.0):
    yy, xx = np.mgrid[0:n, 0:n] - (n - 1) / 2
    return np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))


def test_identity_affine_unchanged():
    x = np.random.default_rng(0).uniform(size=(3, 32, 32))
    assert np.array_equal(misalign(x), x)
    assert DegradationSpec().is_identity_affine


def test_shift_round_trip():
    x = blob()
    back = misalign(misalign(x, dx=4), dx=-4)
    assert np.abs(back - x).max() < 0.02
    back = misalign(misalign(x, dx=2.5, dy=-1.5), dx=-2.5, dy=1.5)
    assert np.abs(back - x).max() < 0.02


def test_shift_direction():
    x = np.zeros((16, 16))
    x[8, 8] = 1
    moved = misalign(x, dx=3, dy=-2)
    assert np.unravel_index(moved.argmax(), moved.shape) == (6, 11)


def test_disk_rotation_symmetry():
    yy, xx = np.mgrid[0:33, 0:33] - 16
    disk = (xx ** 2 + yy ** 2 <= 100).astype(np.float64)
    np.testing.assert_allclose(misalign(disk, rotation=90), disk, atol=1e-9)


def test_misalign_only_touches_aux():
    a = generate_sample(5)
    b = generate_sample(5, None, DegradationSpec(dx=4, rotation=5))
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.gt, b.gt)
    assert not np.array_equal(a.aux, b.aux)


# ---------------------------------------------------------------- disk I/O

def test_sample_round_trip(tmp_path):
    s = generate_sample(7, None, DegradationSpec(noise_sigma=0.1))
    save_sample(s, tmp_path / "s", SceneSpec(), "noisy")
    assert sorted(p.name for p in (tmp_path / "s").iterdir()) == ["aux.ppm", "gt.pgm", "meta.json", "rgb.ppm"]
    assert (tmp_path / "s" / "rgb.ppm").read_bytes()[:2] == b"P6"
    assert (tmp_path / "s" / "gt.pgm").read_bytes()[:2] == b"P5"
    r = load_sample(tmp_path / "s")
    assert np.abs(r.rgb - s.rgb).max() <= 0.5 / 255 + 1e-6
    assert np.abs(r.aux - s.aux).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(r.gt, s.gt)
    assert r.seed == 7 and r.degradation == s.degradation


def test_dataset_index(tmp_path):
    entries = []
    for k, cell in enumerate(("a", "a", "b")):
        save_sample(generate_sample(k), tmp_path / f"sample_{k:05d}", cell=cell)
        entries.append({"dir": f"sample_{k:05d}", "cell": cell, "seed": k})
    write_index(tmp_path, entries, [{"name": "a"}, {"name": "b"}])
    assert len(load_dataset(tmp_path)) == 3
    assert [s.seed for s in load_dataset(tmp_path, "a")] == [0, 1]
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_stack_adds_batch_axis():
    rgb, aux, gt = stack([generate_sample(0), generate_sample(1)])
    assert rgb.shape == (2, 3, 64, 64) and gt.shape == (2, 1, 64, 64)
