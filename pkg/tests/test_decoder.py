import numpy as np
import pytest

import oracles
from coseg import io
from coseg.decoder import (DecoderState, bake_identities, decode_backward, decode_forward,
                           gather_image_features, interpolation_weights, upsample)
from coseg.raster import render
from coseg.spatial import EncoderWeights, build_hierarchy, encode
from scenes import cloud, front_camera, random_gaussians


def setup(n=64, hidden=(256, 128, 64, 32), widths=(16, 64, 128, 256), dims=(16, 16, 16, 16),
          classes=5, seed=0):
    rng = np.random.default_rng(seed)
    pts = cloud(rng, n)
    h = build_hierarchy(pts, seed)
    sf = encode(pts, h, EncoderWeights.random(seed, widths))
    feats = {s: rng.normal(size=(n, d)) for s, d in zip((1, 2, 3, 4), dims)}
    f_d = gather_image_features(feats, np.arange(n), h)
    state = DecoderState.init(dims, widths, widths[-1], classes, hidden, seed)
    return pts, h, sf, f_d, state, rng


def test_interpolation_partition_of_unity(rng):
    fine, coarse = rng.normal(size=(50, 3)), rng.normal(size=(12, 3))
    idx, w = interpolation_weights(fine, coarse)
    assert np.abs(w.sum(axis=1) - 1).max() <= 1e-12
    assert np.allclose(upsample(np.full((12, 4), 2.5), idx, w), 2.5)


def test_interpolation_coincident_point(rng):
    # the residual is about eps * sum(|v_j - v_i| / d_j), so spread the points out
    coarse = rng.uniform(-100, 100, size=(10, 3))
    vals = rng.normal(size=(10, 3))
    idx, w = interpolation_weights(coarse[[4]], coarse)
    assert np.abs(upsample(vals, idx, w)[0] - vals[4]).max() <= 1e-9
    near = coarse / 100
    idx, w = interpolation_weights(near[[4]], near)
    d = np.linalg.norm(near[idx[0]] - near[4], axis=1)[1:]
    bound = 1e-8 * np.sum(np.abs(vals[idx[0][1:]] - vals[4]) / d[:, None], axis=0)
    assert np.all(np.abs(upsample(vals, idx, w)[0] - vals[4]) <= bound)


def test_forward_matches_loop_reference():
    pts, h, sf, f_d, state, _ = setup(n=256)
    logits, _ = decode_forward(f_d, sf.f_s, sf.f_e, h, pts, state)
    ref = oracles.decode_reference(f_d, sf.f_s, sf.f_e, h.levels, pts, state.params)
    assert logits.shape == (256, 5)
    assert np.abs(logits - ref).max() <= 1e-10


def test_backward_matches_finite_differences():
    pts, h, sf, f_d, state, rng = setup(hidden=(12, 10, 8, 6), widths=(4, 6, 8, 10),
                                        dims=(5, 4, 3, 2), classes=3)
    logits, cache = decode_forward(f_d, sf.f_s, sf.f_e, h, pts, state)
    G = rng.normal(size=logits.shape)
    Gf = {n: rng.normal(size=cache.pre[n].shape) for n in (3, 4)}
    grads = decode_backward(cache, G, state, Gf)

    def loss():
        out, c = decode_forward(f_d, sf.f_s, sf.f_e, h, pts, state)
        return np.sum(out * G) + sum(np.sum(c.pre[n] * Gf[n]) for n in Gf)

    for name, p in state.params.items():
        def f(x, p=p):
            saved = p.copy()
            p[...] = x
            val = loss()
            p[...] = saved
            return val
        numeric = oracles.central_diff(f, p.copy())
        assert oracles.rel_err(grads[name], numeric) < 1e-4, name


def test_backward_default_widths_sampled_entries():
    pts, h, sf, f_d, state, rng = setup()
    logits, cache = decode_forward(f_d, sf.f_s, sf.f_e, h, pts, state)
    G = rng.normal(size=logits.shape)
    grads = decode_backward(cache, G, state)
    for name, p in state.params.items():
        for flat in rng.choice(p.size, size=min(6, p.size), replace=False):
            i = np.unravel_index(flat, p.shape)
            old = p[i]
            p[i] = old + 1e-5
            up = np.sum(decode_forward(f_d, sf.f_s, sf.f_e, h, pts, state)[0] * G)
            p[i] = old - 1e-5
            down = np.sum(decode_forward(f_d, sf.f_s, sf.f_e, h, pts, state)[0] * G)
            p[i] = old
            num = (up - down) / 2e-5
            assert abs(num - grads[name][i]) <= 1e-4 * max(abs(num), 1e-3), name


def test_zero_upstream_gives_zero_gradients():
    pts, h, sf, f_d, state, _ = setup()
    logits, cache = decode_forward(f_d, sf.f_s, sf.f_e, h, pts, state)
    grads = decode_backward(cache, np.zeros_like(logits), state)
    assert all(np.all(g == 0) for g in grads.values())


def test_fc_gradient_is_outer_product():
    pts, h, sf, f_d, state, rng = setup()
    logits, cache = decode_forward(f_d, sf.f_s, sf.f_e, h, pts, state)
    G = rng.normal(size=logits.shape)
    grads = decode_backward(cache, G, state)
    assert np.allclose(grads["fc.W"], cache.act[1].T @ G)


def test_stale_and_missing_cache():
    pts, h, sf, f_d, state, _ = setup()
    logits, cache = decode_forward(f_d, sf.f_s, sf.f_e, h, pts, state)
    grads = decode_backward(cache, np.ones_like(logits), state)
    state.apply(grads)
    with pytest.raises(RuntimeError, match="stale"):
        decode_backward(cache, np.ones_like(logits), state)
    cache.inputs.clear()
    with pytest.raises(RuntimeError, match="empty"):
        decode_backward(cache, np.ones_like(logits), state)


def test_dimension_errors():
    pts, h, sf, f_d, state, _ = setup()
    bad = [f_d[0][:, :3]] + f_d[1:]
    with pytest.raises(ValueError, match="image feature width"):
        decode_forward(bad, sf.f_s, sf.f_e, h, pts, state)
    with pytest.raises(ValueError, match="bottleneck"):
        decode_forward(f_d, sf.f_s, sf.f_e[:, :5], h, pts, state)


def test_permutation_consistent():
    pts, h, sf, f_d, state, rng = setup(n=100)
    feats = {s: rng.normal(size=(100, 16)) for s in (1, 2, 3, 4)}
    enc = EncoderWeights.random(0)

    def run(order):
        p = pts[order]
        hh = build_hierarchy(p, 9)
        s = encode(p, hh, enc)
        fd = gather_image_features({k: v[order] for k, v in feats.items()}, np.arange(100), hh)
        return decode_forward(fd, s.f_s, s.f_e, hh, p, state)[0]

    perm = rng.permutation(100)
    assert np.abs(run(perm) - run(np.arange(100))[perm]).max() <= 1e-10


def test_bake_render_and_checkpoint(tmp_path):
    rng = np.random.default_rng(2)
    gs = random_gaussians(rng, 64, num_classes=3)
    logits = rng.normal(size=(64, 3))
    baked = bake_identities(gs, logits)
    cam = front_camera(16)
    live = render(cam, gs, np.concatenate([logits, np.zeros((64, 1))], 1),
                  background=np.array([0, 0, 0, 1.0])).image
    assert np.array_equal(render(cam, baked, "seg").image, live)
    assert np.array_equal(bake_identities(baked, logits).seg_logits, baked.seg_logits)
    io.save_gaussians(tmp_path / "b.ply", baked)
    back = io.load_gaussians(tmp_path / "b.ply")
    assert np.array_equal(back.seg_logits, logits.astype(np.float32).astype(np.float64))
    with pytest.raises(ValueError):
        bake_identities(gs, logits[:10])


def test_decoder_checkpoint_round_trip(tmp_path):
    *_, state, _ = setup()
    io.save_decoder(tmp_path / "d.csgd", state)
    back = io.load_decoder(tmp_path / "d.csgd")
    assert back.config() == state.config()
    for k, v in state.params.items():
        assert np.array_equal(back.params[k], v.astype(np.float32).astype(np.float64))
    assert state.num_parameters == back.num_parameters
    side = (tmp_path / "d.csgd.json").read_text().replace('"num_classes": 5', '"num_classes": 6')
    (tmp_path / "d.csgd.json").write_text(side)
    with pytest.raises(ValueError, match="hash"):
        io.load_decoder(tmp_path / "d.csgd")
