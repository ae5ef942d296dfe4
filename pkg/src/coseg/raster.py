"""Tile-based software rasterizer with an analytic backward pass.

Splats are binned into 16x16 tiles; every tile is then processed as one
padded batch ``(tiles, pixels, splats)``, so a forward or backward pass is a
fixed number of vectorized array operations regardless of scene layout.
A pixel is covered by a splat when its center lies inside the splat's
``radius`` square; the same coverage test drives unprojection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianSet, covariance_backward


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = 16
    early_stop: float = 1e-4
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    near: float = 0.2
    low_pass: float = 0.3

    @classmethod
    def exact(cls, **kw) -> "RasterSettings":
        """No early termination and no small-alpha skipping."""
        return cls(early_stop=0.0, alpha_min=0.0, **kw)


DEFAULT_SETTINGS = RasterSettings()


@dataclass
class Splat2D:
    gaussian_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float


@dataclass
class Projection:
    """Visible splats in ascending depth order (structure of arrays)."""

    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    opacity: np.ndarray
    t_cam: np.ndarray
    J: np.ndarray
    cov3d: np.ndarray

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, k: int) -> Splat2D:
        return Splat2D(int(self.index[k]), self.mean2d[k], self.cov2d[k],
                       float(self.depth[k]), float(self.radius[k]))


def _pixel_span(center, radius, size):
    lo = np.ceil(center - radius - 0.5)
    hi = np.floor(center + radius - 0.5)
    return np.maximum(lo, 0).astype(np.int64), np.minimum(hi, size - 1).astype(np.int64)


def project(cam: Camera, gs: GaussianSet, settings: RasterSettings = DEFAULT_SETTINGS) -> Projection:
    """EWA projection of all Gaussians into ``cam``; drops invisible ones."""
    t_all = cam.world_to_camera(gs.positions)
    front = np.nonzero(t_all[:, 2] > settings.near)[0]
    t = t_all[front]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]

    J = np.zeros((len(front), 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * tx / tz**2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * ty / tz**2
    M = J @ cam.R
    cov3d = gs.covariances()[front]
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2) + settings.low_pass * np.eye(2)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(lam))
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d = np.stack([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy], axis=1)

    u0, u1 = _pixel_span(mean2d[:, 0], radius, cam.width)
    v0, v1 = _pixel_span(mean2d[:, 1], radius, cam.height)
    keep = (det > 0) & (radius > 0) & (u0 <= u1) & (v0 <= v1)

    order = np.nonzero(keep)[0]
    order = order[np.lexsort((front[order], tz[order]))]
    return Projection(
        index=front[order], mean2d=mean2d[order], cov2d=cov2d[order], conic=conic[order],
        depth=tz[order], radius=radius[order], opacity=gs.opacity[front[order]],
        t_cam=t[order], J=J[order], cov3d=cov3d[order],
    )


def opacity_2d(splat: Splat2D, alpha: float, p, alpha_max: float = 0.99) -> float:
    """Projected opacity of one splat at pixel position ``p``."""
    d = np.asarray(p, dtype=np.float64) - splat.mean2d
    maha = d @ np.linalg.solve(splat.cov2d, d)
    return min(alpha * np.exp(-0.5 * maha), alpha_max)


@dataclass
class _TileBatch:
    splats: np.ndarray      # (T, L) positions into the projection, -1 padded
    pixel_index: np.ndarray  # (T, P) flat pixel index, -1 outside image
    pu: np.ndarray          # (T, P) pixel center x
    pv: np.ndarray          # (T, P) pixel center y


def _bin_tiles(proj: Projection, cam: Camera, tile: int) -> _TileBatch:
    W, H = cam.width, cam.height
    ntx, nty = -(-W // tile), -(-H // tile)
    u0, u1 = _pixel_span(proj.mean2d[:, 0], proj.radius, W)
    v0, v1 = _pixel_span(proj.mean2d[:, 1], proj.radius, H)
    tu0, tu1, tv0, tv1 = u0 // tile, u1 // tile, v0 // tile, v1 // tile

    lists = []
    for ty in range(nty):
        for tx in range(ntx):
            hit = (tu0 <= tx) & (tu1 >= tx) & (tv0 <= ty) & (tv1 >= ty)
            lists.append(np.nonzero(hit)[0])
    L = max([len(x) for x in lists] + [1])
    splats = np.full((len(lists), L), -1, dtype=np.int64)
    for k, s in enumerate(lists):
        splats[k, : len(s)] = s

    oy, ox = np.divmod(np.arange(tile * tile), tile)
    ty, tx = np.divmod(np.arange(len(lists)), ntx)
    u = tx[:, None] * tile + ox[None, :]
    v = ty[:, None] * tile + oy[None, :]
    inside = (u < W) & (v < H)
    pixel_index = np.where(inside, v * W + u, -1)
    return _TileBatch(splats, pixel_index, u + 0.5, v + 0.5)


@dataclass
class RenderOutput:
    """Blended image plus the per-pixel blending state kept for backward.

    ``image`` is (H, W, K) and ``alpha_acc`` is (H, W). When the pass was
    recorded, :meth:`contributors` lists ``(gaussian_index, alpha, T)`` per
    pixel in blending order.
    """

    image: np.ndarray
    alpha_acc: np.ndarray
    camera: Camera
    projection: Projection
    background: np.ndarray
    _cache: dict | None = field(default=None, repr=False)

    @property
    def recorded(self) -> bool:
        return self._cache is not None

    def _require_cache(self) -> dict:
        if self._cache is None:
            raise RuntimeError("render pass was not recorded; call render(..., record=True)")
        return self._cache

    def contributors(self, v: int, u: int) -> list[tuple[int, float, float]]:
        c = self._require_cache()
        if c.get("empty"):
            return []
        W, tile = self.camera.width, c["tile"]
        ntx = -(-W // tile)
        t = (v // tile) * ntx + (u // tile)
        p = (v % tile) * tile + (u % tile)
        out = []
        for k, s in enumerate(c["batch"].splats[t]):
            if s >= 0 and c["alpha"][t, p, k] > 0 and c["live"][t, p, k]:
                out.append((int(self.projection.index[s]), float(c["alpha"][t, p, k]),
                            float(c["T"][t, p, k])))
        return out

    def with_payload(self, values: np.ndarray, background=None) -> "RenderOutput":
        """Re-blend a different (N, K) payload with this pass's recorded weights."""
        c = self._require_cache()
        values = np.asarray(values, dtype=np.float64)
        K = values.shape[1]
        bg = np.zeros(K) if background is None else np.asarray(background, dtype=np.float64)
        H, W = self.camera.height, self.camera.width
        if c.get("empty"):
            return RenderOutput(np.broadcast_to(bg, (H, W, K)).copy(), self.alpha_acc,
                                self.camera, self.projection, bg, c)
        batch, valid = c["batch"], c["valid"]
        pay = values[self.projection.index[np.where(valid, batch.splats, 0)]] * valid[:, :, None]
        tiles = np.einsum("tpl,tlk->tpk", c["w"], pay) + c["t_final"][:, :, None] * bg
        inimg = batch.pixel_index >= 0
        image = np.zeros((H * W, K))
        image[batch.pixel_index[inimg]] = tiles[inimg]
        return RenderOutput(image.reshape(H, W, K), self.alpha_acc, self.camera,
                            self.projection, bg, dict(c, pay=pay))

    def coverage(self):
        """Flat (gaussian_index, pixel_index, weight) triples of covered pixels.

        Coverage follows the radius square and ignores early termination;
        weight is ``alpha * T`` where the splat contributed and 0 otherwise.
        """
        c = self._require_cache()
        if c.get("empty"):
            e = np.zeros(0, dtype=np.int64)
            return e, e, np.zeros(0)
        t, p, k = np.nonzero(c["covered"])
        s = c["batch"].splats[t, k]
        return self.projection.index[s], c["batch"].pixel_index[t, p], c["w"][t, p, k]


def _payload(gs: GaussianSet, cam: Camera, payload, background):
    if isinstance(payload, str) and payload == "color":
        values = gs.rgb(cam.center)
        bg = np.zeros(3) if background is None else background
    elif isinstance(payload, str) and payload == "seg":
        if gs.seg_logits is None:
            raise ValueError("Gaussian set has no segmentation identities")
        values = np.concatenate([gs.seg_logits, np.zeros((len(gs), 1))], axis=1)
        bg = np.zeros(values.shape[1])
        bg[-1] = 1.0
    elif isinstance(payload, tuple) and payload[0] == "feature":
        if payload[1] not in gs.features:
            raise ValueError(f"Gaussian set has no features at scale {payload[1]}")
        values = gs.features[payload[1]]
        bg = np.zeros(values.shape[1])
    else:
        values = np.asarray(payload, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if len(values) != len(gs):
            raise ValueError(f"payload has {len(values)} rows, expected {len(gs)}")
        bg = np.zeros(values.shape[1]) if background is None else background
    bg = np.asarray(bg, dtype=np.float64).reshape(values.shape[1])
    return values, bg


def render(cam: Camera, gs: GaussianSet, payload="color", *, background=None,
           settings: RasterSettings = DEFAULT_SETTINGS, record: bool = True,
           projection: Projection | None = None) -> RenderOutput:
    """Front-to-back alpha blending of a per-Gaussian payload.

    ``payload`` is ``"color"``, ``"seg"`` (logits plus a trailing void channel
    filled by the residual transmittance), ``("feature", n)`` or an (N, K)
    array. A precomputed ``projection`` of the same camera may be reused.
    """
    values, bg = _payload(gs, cam, payload, background)
    proj = project(cam, gs, settings) if projection is None else projection
    H, W, K = cam.height, cam.width, values.shape[1]
    if len(proj) == 0:
        image = np.broadcast_to(bg, (H, W, K)).copy()
        cache = dict(empty=True) if record else None
        return RenderOutput(image, np.zeros((H, W)), cam, proj, bg, cache)
    batch = _bin_tiles(proj, cam, settings.tile_size)

    valid = batch.splats >= 0
    s = np.where(valid, batch.splats, 0)
    inimg = batch.pixel_index >= 0
    mu, r, con = proj.mean2d[s], proj.radius[s], proj.conic[s]
    dx = batch.pu[:, :, None] - mu[:, None, :, 0]
    dy = batch.pv[:, :, None] - mu[:, None, :, 1]
    rr = r[:, None, :]
    covered = valid[:, None, :] & inimg[:, :, None] & (np.abs(dx) <= rr) & (np.abs(dy) <= rr)

    A, B, C = con[:, None, :, 0], con[:, None, :, 1], con[:, None, :, 2]
    power = np.minimum(-0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy, 0.0)
    G = np.exp(power)
    a_raw = proj.opacity[s][:, None, :] * G
    clamped = a_raw > settings.alpha_max
    a = np.minimum(a_raw, settings.alpha_max)
    a = np.where(covered & (a >= settings.alpha_min), a, 0.0)

    one_minus = 1.0 - a
    T = np.ones_like(a)
    np.cumprod(one_minus[:, :, :-1], axis=2, out=T[:, :, 1:])
    live = T * one_minus >= settings.early_stop
    a_eff = a * live
    w = a_eff * T
    t_final = np.prod(1.0 - a_eff, axis=2)

    pay = values[proj.index[s]] * valid[:, :, None]
    img_tiles = np.einsum("tpl,tlk->tpk", w, pay) + t_final[:, :, None] * bg
    acc_tiles = w.sum(axis=2)

    flat = batch.pixel_index[inimg]
    image = np.zeros((H * W, K))
    image[flat] = img_tiles[inimg]
    alpha_acc = np.zeros(H * W)
    alpha_acc[flat] = acc_tiles[inimg]

    cache = None
    if record:
        cache = dict(batch=batch, tile=settings.tile_size, valid=valid, covered=covered,
                     dx=dx, dy=dy, G=G, a_raw=a_raw, alpha=a, clamped=clamped, T=T,
                     live=live, w=w, t_final=t_final, pay=pay)
    return RenderOutput(image.reshape(H, W, K), alpha_acc.reshape(H, W), cam, proj, bg, cache)


@dataclass
class RenderGrads:
    """Gradients from :func:`render_backward`, indexed by Gaussian."""

    payload: np.ndarray
    opacity_raw: np.ndarray | None = None
    positions: np.ndarray | None = None
    rotations: np.ndarray | None = None
    log_scales: np.ndarray | None = None
    mean2d: np.ndarray | None = None   # per Gaussian, zero where not visible
    cov2d: np.ndarray | None = None
    visible: np.ndarray | None = None


def render_backward(out: RenderOutput, dL_dimage: np.ndarray, gs: GaussianSet,
                    geometry: bool = True) -> RenderGrads:
    """Reverse-mode gradients of a recorded render pass.

    With ``geometry=False`` only the payload gradient is computed (enough for
    segmentation training, where geometry is frozen).
    """
    c = out._require_cache()
    proj, cam = out.projection, out.camera
    N, K = len(gs), out.image.shape[2]
    if c.get("empty"):
        z = lambda *shape: np.zeros((N,) + shape)  # noqa: E731
        return RenderGrads(z(K), z(), z(3), z(4), z(3), z(2), z(2, 2), np.zeros(N, dtype=bool))
    batch, w, valid = c["batch"], c["w"], c["valid"]
    dL_dimage = np.asarray(dL_dimage, dtype=np.float64).reshape(-1, K)
    if len(dL_dimage) != cam.width * cam.height:
        raise ValueError("gradient image does not match the rendered image size")

    inimg = batch.pixel_index >= 0
    g = np.where(inimg[:, :, None], dL_dimage[np.maximum(batch.pixel_index, 0)], 0.0)
    gidx = proj.index[np.where(valid, batch.splats, 0)][valid]

    dpay_t = np.einsum("tpl,tpk->tlk", w, g)
    dpay = np.zeros((N, K))
    np.add.at(dpay, gidx, dpay_t[valid])
    grads = RenderGrads(payload=dpay)
    if not geometry:
        return grads

    a, T, pay = c["alpha"], c["T"], c["pay"]
    gc = np.einsum("tpk,tlk->tpl", g, pay)
    gb = g @ out.background
    wg = w * gc
    suffix = np.cumsum(wg[:, :, ::-1], axis=2)[:, :, ::-1] - wg + (c["t_final"] * gb)[:, :, None]
    active = c["live"] & (a > 0) & ~c["clamped"]
    da = np.where(active, T * gc - suffix / np.where(active, 1.0 - a, 1.0), 0.0)

    dx, dy, a_raw = c["dx"], c["dy"], c["a_raw"]
    dpow = da * a_raw
    con = proj.conic[np.where(valid, batch.splats, 0)]
    A, B, C = con[:, None, :, 0], con[:, None, :, 1], con[:, None, :, 2]
    per_entry = np.stack([
        (da * c["G"]).sum(1),
        (dpow * (A * dx + B * dy)).sum(1),
        (dpow * (B * dx + C * dy)).sum(1),
        (-0.5 * dx * dx * dpow).sum(1),
        (-dx * dy * dpow).sum(1),
        (-0.5 * dy * dy * dpow).sum(1),
    ], axis=-1)
    M = len(proj)
    acc = np.zeros((M, 6))
    np.add.at(acc, batch.splats[valid], per_entry[valid])
    dalpha, dmu, dA, dB, dC = acc[:, 0], acc[:, 1:3], acc[:, 3], acc[:, 4], acc[:, 5]

    # conic -> 2D covariance -> 3D covariance and Jacobian
    Gc = np.stack([np.stack([dA, 0.5 * dB], -1), np.stack([0.5 * dB, dC], -1)], -2)
    Ci = np.stack([np.stack([proj.conic[:, 0], proj.conic[:, 1]], -1),
                   np.stack([proj.conic[:, 1], proj.conic[:, 2]], -1)], -2)
    dcov2d = -Ci @ Gc @ Ci
    Mj = proj.J @ cam.R
    dcov3d = np.swapaxes(Mj, 1, 2) @ dcov2d @ Mj
    dJ = 2.0 * dcov2d @ Mj @ proj.cov3d @ cam.R.T

    tx, ty, tz = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    dt = np.zeros((M, 3))
    dt[:, 0] = dJ[:, 0, 2] * (-fx / tz**2) + dmu[:, 0] * fx / tz
    dt[:, 1] = dJ[:, 1, 2] * (-fy / tz**2) + dmu[:, 1] * fy / tz
    dt[:, 2] = (dJ[:, 0, 0] * (-fx / tz**2) + dJ[:, 0, 2] * (2 * fx * tx / tz**3)
                + dJ[:, 1, 1] * (-fy / tz**2) + dJ[:, 1, 2] * (2 * fy * ty / tz**3)
                - dmu[:, 0] * fx * tx / tz**2 - dmu[:, 1] * fy * ty / tz**2)

    idx = proj.index
    dq, dsl = covariance_backward(gs.rotations[idx], gs.log_scales[idx], dcov3d)
    alpha = proj.opacity
    grads.opacity_raw = np.zeros(N)
    grads.opacity_raw[idx] = dalpha * alpha * (1 - alpha)
    grads.positions = np.zeros((N, 3))
    grads.positions[idx] = dt @ cam.R
    grads.rotations = np.zeros((N, 4))
    grads.rotations[idx] = dq
    grads.log_scales = np.zeros((N, 3))
    grads.log_scales[idx] = dsl
    grads.mean2d = np.zeros((N, 2))
    grads.mean2d[idx] = dmu
    grads.cov2d = np.zeros((N, 2, 2))
    grads.cov2d[idx] = dcov2d
    grads.visible = np.zeros(N, dtype=bool)
    grads.visible[idx] = True
    return grads
