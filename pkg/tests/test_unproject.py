import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from coseg.core import Camera, GaussianSet, logit
from coseg.raster import DEFAULT_SETTINGS, RasterSettings, project, render
from coseg.unproject import (UnprojectAccumulator, accumulate_view, finalize, normalize_rows,
                             unproject_all_scales)
from scenes import front_camera, random_gaussians


def splat_lists(gs, cams, settings=DEFAULT_SETTINGS):
    out = []
    for cam in cams:
        p = project(cam, gs, settings)
        out.append([(int(p.index[k]), p.mean2d[k], p.conic[k], p.radius[k]) for k in range(len(p))])
    return out


def two_view_scene(seed=0, n=5, size=8):
    rng = np.random.default_rng(seed)
    gs = random_gaussians(rng, n)
    cams = [front_camera(size), Camera(size, size, size / 2, size / 2, size, size,
                                       t=[0.1, -0.05, 0.2])]
    maps = [rng.normal(size=(size, size, 6)) for _ in cams]
    return gs, cams, maps


@pytest.mark.parametrize("settings", [RasterSettings.exact(), DEFAULT_SETTINGS])
def test_matches_triple_loop(settings):
    gs, cams, maps = two_view_scene()
    acc = UnprojectAccumulator(len(gs), 6, threshold=0.05)
    for cam, F in zip(cams, maps):
        accumulate_view(gs, cam, F, acc, settings)
    counter, buf, f, keep = oracles.unproject_triple_loop(
        gs, cams, maps, splat_lists(gs, cams, settings), gs.opacity, 0.05, acc.eps,
        alpha_min=settings.alpha_min, early_stop=settings.early_stop)
    assert np.array_equal(acc.counter, counter)
    assert np.abs(acc.buffer - buf).max() <= 1e-12
    out, mask = finalize(acc, gs, 2, 8, 8)
    assert np.array_equal(mask, keep)
    assert np.abs(out.features[1] - f[keep]).max() <= 1e-12


def test_invisible_gaussian_untouched():
    gs = GaussianSet([[0, 0, 3.0], [0, 0, -3.0]], [[1.0, 0, 0, 0]] * 2, np.full((2, 3), -2.0),
                     [2.0, 2.0], np.zeros((2, 3)))
    acc = UnprojectAccumulator(2, 3)
    accumulate_view(gs, front_camera(8), np.ones((8, 8, 3)), acc)
    assert acc.counter[1] == 0 and np.all(acc.buffer[1] == 0)
    assert acc.counter[0] > 0


def test_single_term_buffer():
    acc = UnprojectAccumulator(1, 3)
    gidx, pidx, w = np.array([0]), np.array([0]), np.array([0.9])
    gs = GaussianSet([[0, 0, 3.0]], [[1.0, 0, 0, 0]], np.zeros((1, 3)), [0.0], np.zeros((1, 3)))
    F = np.zeros((1, 1, 3))
    F[0, 0, 0] = 1.0
    accumulate_view(gs, front_camera(1), F, acc, coverage=(gidx, pidx, w))
    assert acc.counter[0] == 1 and np.allclose(acc.buffer[0], [0.9, 0, 0])


def test_zero_counter_zero_threshold_keeps_zero_row():
    gs = GaussianSet(np.zeros((1, 3)), [[1.0, 0, 0, 0]], np.zeros((1, 3)), [0.0], np.zeros((1, 3)))
    acc = UnprojectAccumulator(1, 2, threshold=0.0)
    out, keep = finalize(acc, gs, 1, 4, 4)
    assert keep[0] and np.all(out.features[1] == 0)


def test_average_before_normalization():
    acc = UnprojectAccumulator(1, 2, eps=0.0)
    acc.counter[:] = 2
    acc.buffer[:] = [1.8, 0.0]
    assert np.allclose(acc.buffer / (acc.counter[:, None] + acc.eps), [[0.9, 0.0]])


def test_dimension_mismatch():
    gs, cams, maps = two_view_scene()
    with pytest.raises(ValueError, match="dim"):
        accumulate_view(gs, cams[0], maps[0], UnprojectAccumulator(len(gs), 4))
    with pytest.raises(ValueError, match="camera"):
        accumulate_view(gs, front_camera(16), maps[0], UnprojectAccumulator(len(gs), 6))
    with pytest.raises(ValueError, match="threshold"):
        UnprojectAccumulator(3, 2, threshold=1.5)


def test_round_trip_single_occluder():
    # coverage squares do not overlap, so each covered pixel sees exactly one splat
    rng = np.random.default_rng(3)
    xs = np.array([-0.8, 0.0, 0.8])
    pos = np.array([[x, y, 3.0] for x in xs for y in xs])
    n = len(pos)
    gs = GaussianSet(pos, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), np.log(0.05)),
                     np.full(n, logit(0.999)), np.zeros((n, 3)))
    truth = normalize_rows(rng.normal(size=(n, 8)))
    cam = front_camera(32)
    F = render(cam, gs, truth).image
    out, keep = unproject_all_scales(gs, [cam], [{1: F}], scales=(1,))
    cos = np.sum(out.features[1] * truth[keep], axis=1)
    assert keep.all() and np.all(cos > 0.99)


def test_identical_maps_identical_scales():
    gs, cams, maps = two_view_scene()
    out, _ = unproject_all_scales(gs, cams, [{1: m, 2: m} for m in maps], scales=(1, 2))
    assert np.array_equal(out.features[1], out.features[2])


def test_constant_maps_give_constant_rows():
    gs, cams, _ = two_view_scene()
    vals = {n: np.arange(1, 5) * n + np.eye(4)[n - 1] for n in (1, 2, 3, 4)}
    stacks = [{n: np.broadcast_to(vals[n], (8, 8, 4)) for n in vals} for _ in cams]
    out, keep = unproject_all_scales(gs, cams, stacks)
    for n in vals:
        attended = np.linalg.norm(out.features[n], axis=1) > 0
        assert np.allclose(out.features[n][attended], normalize_rows(vals[n]))


def test_mixed_resolution_scales_intrinsics():
    gs = GaussianSet([[0.3, -0.2, 3.0]], [[1.0, 0, 0, 0]], np.full((1, 3), -2.0), [2.0],
                     np.zeros((1, 3)))
    cam = front_camera(64)
    base = project(cam, gs).mean2d[0]
    for n in (1, 2, 3):
        small = cam.resized(64 // 2**n, 64 // 2**n)
        assert np.allclose(project(small, gs).mean2d[0], base / 2**n)


def test_inconsistent_views_and_dims():
    gs, cams, maps = two_view_scene()
    with pytest.raises(ValueError, match="stacks"):
        unproject_all_scales(gs, cams, [{1: maps[0]}], scales=(1,))
    with pytest.raises(ValueError, match="dims"):
        unproject_all_scales(gs, cams, [{1: maps[0]}, {1: maps[1][..., :3]}], scales=(1,))
    with pytest.raises(ValueError, match="missing"):
        unproject_all_scales(gs, cams, [{1: maps[0]}, {2: maps[1]}], scales=(1,))


def test_pruning_count_matches_formula():
    gs, cams, maps = two_view_scene(n=12)
    for T in (0.0, 0.01, 0.05, 0.2):
        acc = UnprojectAccumulator(len(gs), 6, threshold=T)
        for cam, F in zip(cams, maps):
            accumulate_view(gs, cam, F, acc)
        _, keep = finalize(acc, gs, 2, 8, 8)
        assert int((~keep).sum()) == int(np.sum(acc.counter < T * 2 * 8 * 8))


@given(st.lists(st.floats(0, 1), min_size=2, max_size=5))
def test_pruning_monotone(thresholds):
    gs, cams, maps = two_view_scene(n=12)
    counts = []
    for T in sorted(thresholds):
        _, keep = unproject_all_scales(gs, cams, [{1: m} for m in maps], T, scales=(1,))
        counts.append(keep.sum())
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_view_order_independent():
    rng = np.random.default_rng(5)
    gs = random_gaussians(rng, 20)
    cams = [Camera(16, 16, 8, 8, 16, 16, t=rng.normal(0, 0.1, 3)) for _ in range(6)]
    maps = [rng.normal(size=(16, 16, 5)) * 10 ** rng.uniform(-3, 3) for _ in cams]
    a, _ = unproject_all_scales(gs, cams, [{1: m} for m in maps], scales=(1,))
    perm = rng.permutation(6)
    b, _ = unproject_all_scales(gs, [cams[i] for i in perm], [{1: maps[i]} for i in perm],
                                scales=(1,))
    assert np.abs(a.features[1] - b.features[1]).max() <= 1e-10


def test_merge_equals_sequential():
    gs, cams, maps = two_view_scene(n=10)
    seq = UnprojectAccumulator(len(gs), 6)
    parts = [UnprojectAccumulator(len(gs), 6) for _ in cams]
    for cam, F, part in zip(cams, maps, parts):
        accumulate_view(gs, cam, F, seq)
        accumulate_view(gs, cam, F, part)
    merged = UnprojectAccumulator(len(gs), 6)
    for part in parts:
        merged.merge(part)
    assert np.array_equal(merged.counter, seq.counter) and merged.n_views == 2
    assert np.abs(merged.buffer - seq.buffer).max() <= 1e-12


def test_no_learnable_state():
    acc = UnprojectAccumulator(4, 3)
    trainable = [k for k, v in vars(acc).items() if isinstance(v, np.ndarray) and v.dtype.kind == "f"
                 and k not in ("buffer", "_comp")]
    assert trainable == []
