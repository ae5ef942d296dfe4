"""Slow, direct reference implementations used only by the tests.

None of these import the vectorized code paths they check; shared inputs
are plain arrays.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial.transform import Rotation


def covariance(q, s_log):
    # scipy wants (x, y, z, w)
    R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    S = np.diag(np.exp(s_log))
    return R @ S @ S.T @ R.T


def project_one(cam, pos, q, s_log, low_pass=0.3, near=0.2):
    """(depth, mean2d, inverse cov2d, radius) or None when culled."""
    t = cam.R @ pos + cam.t
    if t[2] <= near:
        return None
    tx, ty, tz = t
    J = np.array([[cam.fx / tz, 0.0, -cam.fx * tx / tz**2],
                  [0.0, cam.fy / tz, -cam.fy * ty / tz**2]])
    cov = J @ cam.R @ covariance(q, s_log) @ cam.R.T @ J.T + low_pass * np.eye(2)
    if np.linalg.det(cov) <= 0:
        return None
    radius = math.ceil(3.0 * math.sqrt(np.linalg.eigvalsh(cov).max()))
    mean = np.array([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy])
    return tz, mean, np.linalg.inv(cov), radius


def naive_render(cam, gs, values, background, alpha_max=0.99, alpha_min=0.0, early_stop=0.0):
    """Blend ``values`` pixel by pixel, Gaussian by Gaussian, front to back."""
    values = np.asarray(values, dtype=np.float64)
    opac = 1.0 / (1.0 + np.exp(-gs.opacity_raw))
    splats = []
    for i in range(len(gs)):
        pr = project_one(cam, gs.positions[i], gs.rotations[i], gs.log_scales[i])
        if pr is not None:
            splats.append((pr[0], i) + pr[1:])
    splats.sort(key=lambda s: (s[0], s[1]))

    H, W, K = cam.height, cam.width, values.shape[1]
    image = np.zeros((H, W, K))
    alpha_acc = np.zeros((H, W))
    for v in range(H):
        for u in range(W):
            p = np.array([u + 0.5, v + 0.5])
            T = 1.0
            color = np.zeros(K)
            for _, i, mean, inv, r in splats:
                d = p - mean
                if abs(d[0]) > r or abs(d[1]) > r:
                    continue
                a = min(opac[i] * math.exp(-0.5 * d @ inv @ d), alpha_max)
                if a < alpha_min:
                    continue
                if T * (1.0 - a) < early_stop:
                    break
                color += a * T * values[i]
                alpha_acc[v, u] += a * T
                T *= 1.0 - a
            image[v, u] = color + T * np.asarray(background)
    return image, alpha_acc


def unproject_triple_loop(gs, cams, maps, projections, opacity, threshold, eps,
                          alpha_max=0.99, alpha_min=0.0, early_stop=0.0):
    """Literal attendance-counting unprojection.

    ``projections[v]`` gives, per view, the depth-sorted visible splats as
    (gaussian, mean2d, conic (A, B, C), radius); ``maps[v]`` is (H, W, D).
    """
    N, D = len(gs), maps[0].shape[2]
    counter = np.zeros(N, dtype=np.int64)
    buf = np.zeros((N, D))
    for v, cam in enumerate(cams):
        F = maps[v]
        H, W = F.shape[:2]
        for y in range(H):
            for x in range(W):
                T, done = 1.0, False
                for i, mean, (A, B, C), r in projections[v]:
                    dx, dy = x + 0.5 - mean[0], y + 0.5 - mean[1]
                    if abs(dx) > r or abs(dy) > r:
                        continue
                    # every covered pixel counts, contributing or not
                    counter[i] += 1
                    power = min(-0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy, 0.0)
                    a = min(opacity[i] * math.exp(power), alpha_max)
                    if done or a < alpha_min:
                        continue
                    if T * (1.0 - a) < early_stop:
                        done = True
                        continue
                    buf[i] += a * T * F[y, x]
                    T *= 1.0 - a
    V = len(cams)
    H, W = maps[0].shape[:2]
    keep = counter >= threshold * V * H * W
    f = buf / (counter[:, None] + eps)
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    f = np.where(norm > 0, f / np.where(norm > 0, norm, 1.0), 0.0)
    return counter, buf, f, keep


def brute_knn(query, points, k):
    out = []
    for q in query:
        d = [float(np.sqrt(np.sum((p - q) ** 2))) for p in points]
        out.append(sorted(range(len(points)), key=lambda j: (d[j], j))[:k])
    return np.array(out)


def leaky(x, slope=0.01):
    return x if x > 0 else slope * x


def decode_reference(f_d, f_s, f_e, levels, positions, params, k=3, eps=1e-8):
    """Multi-scale fusion decoder written with explicit loops."""
    prev = [list(row) for row in f_e]
    for n in (4, 3, 2, 1):
        pts = positions[levels[n - 1]]
        if n < 4:
            coarse = positions[levels[n]]
            nbr = brute_knn(pts, coarse, k)
            up = []
            for i, p in enumerate(pts):
                ws = [1.0 / (np.sqrt(np.sum((coarse[j] - p) ** 2)) + eps) for j in nbr[i]]
                tot = sum(ws)
                row = [sum(ws[a] / tot * prev[nbr[i][a]][c] for a in range(k))
                       for c in range(len(prev[0]))]
                up.append(row)
            prev = up
        Wm, b = params[f"mlp{n}.W"], params[f"mlp{n}.b"]
        out = []
        for i in range(len(pts)):
            h = list(prev[i]) + list(f_d[n - 1][i]) + list(f_s[n - 1][i])
            out.append([leaky(sum(h[r] * Wm[r, c] for r in range(len(h))) + b[c])
                        for c in range(Wm.shape[1])])
        prev = out
    Wf, bf = params["fc.W"], params["fc.b"]
    return np.array([[sum(row[r] * Wf[r, c] for r in range(len(row))) + bf[c]
                      for c in range(Wf.shape[1])] for row in prev])


def confusion_loop(pred, gt, C, ignore=-1):
    cm = [[0] * C for _ in range(C)]
    missed = [0] * C
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if g == ignore:
            continue
        if 0 <= p < C:
            cm[g][p] += 1
        else:
            missed[g] += 1
    return np.array(cm), np.array(missed)


def ch_loop(X, y):
    X = [list(map(float, r)) for r in X]
    labels = sorted(set(int(v) for v in y))
    n, k, d = len(X), len(labels), len(X[0])
    mean = [sum(r[j] for r in X) / n for j in range(d)]
    between = within = 0.0
    for c in labels:
        rows = [r for r, l in zip(X, y) if l == c]
        cent = [sum(r[j] for r in rows) / len(rows) for j in range(d)]
        between += len(rows) * sum((cent[j] - mean[j]) ** 2 for j in range(d))
        within += sum(sum((r[j] - cent[j]) ** 2 for j in range(d)) for r in rows)
    return between / within * (n - k) / (k - 1)


def db_loop(X, y):
    X = [list(map(float, r)) for r in X]
    labels = sorted(set(int(v) for v in y))
    d = len(X[0])
    cents, spreads = [], []
    for c in labels:
        rows = [r for r, l in zip(X, y) if l == c]
        cent = [sum(r[j] for r in rows) / len(rows) for j in range(d)]
        cents.append(cent)
        spreads.append(sum(math.sqrt(sum((r[j] - cent[j]) ** 2 for j in range(d)))
                           for r in rows) / len(rows))
    total = 0.0
    for i in range(len(labels)):
        worst = 0.0
        for j in range(len(labels)):
            if i != j:
                dist = math.sqrt(sum((cents[i][t] - cents[j][t]) ** 2 for t in range(d)))
                worst = max(worst, (spreads[i] + spreads[j]) / dist)
        total += worst
    return total / len(labels)


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
