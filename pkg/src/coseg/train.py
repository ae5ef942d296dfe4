"""Two-stage training: Gaussian building, then segmentation learning.

Stage 1 fits geometry and color to posed images with a photometric loss.
Stage 2 freezes that geometry, unprojects the multi-scale image features,
and trains only the fusion decoder against (noisy) 2D labels.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianSet, logit, normalize_quaternions
from .decoder import DecoderState, bake_identities, decode_backward, decode_forward, \
    gather_image_features
from .loss import CoSegConfig, coseg_loss, photometric_loss
from .optim import Adam
from .raster import DEFAULT_SETTINGS, RasterSettings, render, render_backward
from .spatial import EncoderWeights, build_hierarchy, encode, knn, softmax, visible_subset
from .unproject import DEFAULT_EPS, DEFAULT_THRESHOLD, unproject_all_scales

log = logging.getLogger(__name__)


@dataclass
class Stage1Config:
    lambda1: float = 0.8
    iterations: int = 2000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 0.0025
    lr_opacity: float = 0.05
    lr_scaling: float = 0.005
    lr_rotation: float = 0.001
    init_opacity: float = 0.1
    sh: bool = False
    densify: bool = False
    densify_from: int = 100
    densify_until: int = 1500
    densify_interval: int = 100
    densify_grad_threshold: float = 0.0002
    percent_dense: float = 0.01
    prune_opacity: float = 0.005


@dataclass
class Stage2Config:
    iterations: int = 6000
    lr: float = 0.001
    coseg: CoSegConfig = field(default_factory=CoSegConfig)
    hidden: tuple = (256, 128, 64, 32)
    encoder_widths: tuple = (16, 64, 128, 256)
    attendance_threshold: float = DEFAULT_THRESHOLD
    eps: float = DEFAULT_EPS
    scales: tuple = (1, 2, 3, 4)


@dataclass
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        s2 = dict(d.get("stage2", {}))
        s2["coseg"] = CoSegConfig(**s2.get("coseg", {}))
        for k in ("hidden", "encoder_widths", "scales"):
            if k in s2:
                s2[k] = tuple(s2[k])
        return cls(Stage1Config(**d.get("stage1", {})), Stage2Config(**s2), d.get("seed", 0))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class ViewSampler:
    """Shuffled-epoch view order from a seeded generator."""

    def __init__(self, views, seed: int):
        self.views = list(views)
        self.rng = np.random.default_rng(seed)
        self._queue: list = []

    def __next__(self):
        if not self._queue:
            self._queue = list(self.rng.permutation(self.views))
        return int(self._queue.pop(0))


# ---------------------------------------------------------------- stage 1

def init_gaussians(points: np.ndarray, colors: np.ndarray, cfg: Stage1Config) -> GaussianSet:
    """Isotropic Gaussians at the points, sized by the mean distance to 3 neighbors."""
    points = np.array(points, dtype=np.float64)
    _, dist = knn(points, points, 4)
    d = np.sqrt(np.maximum(np.mean(dist[:, 1:] ** 2, axis=1), 1e-7))
    n = len(points)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    colors = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)
    if cfg.sh:
        sh = np.zeros((n, 4, 3))
        sh[:, 0] = (colors - 0.5) / 0.28209479177387814
        colors = sh
    return GaussianSet(points, rot, np.repeat(np.log(d)[:, None], 3, axis=1),
                       np.full(n, logit(cfg.init_opacity)), colors)


def scene_extent(cams: list[Camera]) -> float:
    centers = np.stack([c.center for c in cams])
    return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))


_STAGE1_PARAMS = ("positions", "rotations", "log_scales", "opacity_raw", "colors")


def _stage1_grads(gs: GaussianSet, cam: Camera, image: np.ndarray, cfg: Stage1Config,
                  settings: RasterSettings):
    out = render(cam, gs, "color", settings=settings)
    loss, dimg = photometric_loss(out.image, image, cfg.lambda1)
    g = render_backward(out, dimg, gs)
    grads = {"positions": g.positions, "rotations": g.rotations, "log_scales": g.log_scales,
             "opacity_raw": g.opacity_raw, "colors": g.payload}
    if gs.uses_sh:
        from .core import eval_sh1_backward

        dsh, dpos = eval_sh1_backward(gs.colors, gs.positions, cam.center, g.payload)
        grads["colors"] = dsh
        grads["positions"] = grads["positions"] + dpos
    return loss, grads, g


def _densify(gs: GaussianSet, opt: Adam, grad_accum, denom, extent, cfg: Stage1Config, rng):
    avg = np.where(denom > 0, grad_accum / np.maximum(denom, 1), 0.0)
    big_grad = avg >= cfg.densify_grad_threshold
    max_scale = np.exp(gs.log_scales).max(axis=1)
    clone = big_grad & (max_scale <= cfg.percent_dense * extent)
    split = big_grad & (max_scale > cfg.percent_dense * extent)

    keep = np.nonzero(~split)[0]
    clones = np.nonzero(clone)[0]
    splits = np.nonzero(split)[0]
    new = gs.select(np.concatenate([keep, clones, splits, splits]))
    n0, nc, ns = len(keep), len(clones), len(splits)
    if ns:
        from .core import quaternion_to_rotation

        sl = slice(n0 + nc, None)
        parents = gs.select(np.concatenate([splits, splits]))
        std = np.exp(parents.log_scales)
        offs = rng.normal(size=std.shape) * std
        R = quaternion_to_rotation(parents.rotations)
        new.positions[sl] = parents.positions + np.einsum("nij,nj->ni", R, offs)
        new.log_scales[sl] = parents.log_scales - np.log(1.6)
    order = np.concatenate([keep, clones, splits, splits])
    for name in _STAGE1_PARAMS:
        opt.select_rows(name, order)
        if ns and name in opt.m:
            opt.m[name][n0 + nc:] = 0.0
            opt.v[name][n0 + nc:] = 0.0

    alive = np.nonzero(new.opacity >= cfg.prune_opacity)[0]
    for name in _STAGE1_PARAMS:
        opt.select_rows(name, alive)
    return new.select(alive)


def stage1_build(images: list[np.ndarray], cams: list[Camera], init, cfg: Stage1Config | None = None,
                 seed: int = 0, settings: RasterSettings = DEFAULT_SETTINGS, log_fn=None,
                 views=None) -> GaussianSet:
    """Optimize geometry and color of a Gaussian set against posed images.

    ``init`` is a :class:`GaussianSet` or a ``(points, colors)`` pair. Only
    the listed ``views`` (default: all) are used for supervision.
    """
    cfg = cfg or Stage1Config()
    if len(images) != len(cams):
        raise ValueError(f"{len(images)} images for {len(cams)} cameras")
    views = list(range(len(cams))) if views is None else list(views)
    if len(views) < 2:
        raise ValueError("Gaussian building needs at least 2 views")
    gs = init.copy() if isinstance(init, GaussianSet) else init_gaussians(*init, cfg)
    if cfg.iterations == 0:
        return gs

    extent = scene_extent([cams[v] for v in views])
    rates = {"positions": cfg.lr_position * extent, "rotations": cfg.lr_rotation,
             "log_scales": cfg.lr_scaling, "opacity_raw": cfg.lr_opacity, "colors": cfg.lr_color}
    opt = Adam(dict(rates), eps=1e-15)
    sampler = ViewSampler(views, derive_seed(seed, 1))
    rng = np.random.default_rng(derive_seed(seed, 2))
    grad_accum = np.zeros(len(gs))
    denom = np.zeros(len(gs))

    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        frac = (it - 1) / max(cfg.iterations - 1, 1)
        opt.lr["positions"] = extent * float(np.exp(
            (1 - frac) * np.log(cfg.lr_position) + frac * np.log(cfg.lr_position_final)))
        v = next(sampler)
        loss, grads, g = _stage1_grads(gs, cams[v], images[v], cfg, settings)
        if not np.isfinite(loss):
            raise FloatingPointError(f"stage 1 diverged at iteration {it} (loss={loss})")
        params = {k: getattr(gs, k) for k in _STAGE1_PARAMS}
        opt.step(params, grads)
        gs.normalize_rotations()
        if not gs.uses_sh:
            np.clip(gs.colors, 0.0, 1.0, out=gs.colors)

        if cfg.densify and it <= cfg.densify_until:
            grad_accum += np.linalg.norm(g.mean2d, axis=1) * g.visible
            denom += g.visible
            if it >= cfg.densify_from and it % cfg.densify_interval == 0:
                gs = _densify(gs, opt, grad_accum, denom, extent, cfg, rng)
                grad_accum = np.zeros(len(gs))
                denom = np.zeros(len(gs))
        if log_fn is not None:
            log_fn({"stage": 1, "iter": it, "view": v, "loss": float(loss), "n": len(gs),
                    "time": time.perf_counter() - t0})
    return gs


# ---------------------------------------------------------------- stage 2

def seg_probabilities(logit_image: np.ndarray) -> np.ndarray:
    return softmax(logit_image, axis=-1)


def predict_labels(seg_image: np.ndarray) -> np.ndarray:
    """Argmax class map of a rendered segmentation image; void becomes -1."""
    lab = np.argmax(seg_image, axis=-1)
    return np.where(lab == seg_image.shape[-1] - 1, -1, lab)


@dataclass
class SegmentationModel:
    """Everything Stage 2 produces or needs to run the decoder again."""

    gaussians: GaussianSet
    decoder: DecoderState
    encoder: EncoderWeights
    keep: np.ndarray
    history: list = field(default_factory=list)


def decode_points(gs: GaussianSet, idx: np.ndarray, encoder: EncoderWeights,
                  decoder: DecoderState, seed: int):
    """Run encoder and decoder on the Gaussians ``idx``; returns (logits, cache, hierarchy)."""
    pos = gs.positions[idx]
    hier = build_hierarchy(pos, seed)
    sf = encode(pos, hier, encoder)
    f_d = gather_image_features(gs.features, idx, hier)
    logits, cache = decode_forward(f_d, sf.f_s, sf.f_e, hier, pos, decoder)
    return logits, cache, hier


def bake(gs: GaussianSet, encoder: EncoderWeights, decoder: DecoderState, seed: int) -> GaussianSet:
    logits, _, _ = decode_points(gs, np.arange(len(gs)), encoder, decoder, derive_seed(seed, 3))
    return bake_identities(gs, logits)


def stage2_segment(gs: GaussianSet, cams: list[Camera], feature_stacks: list[dict],
                   labels: list[np.ndarray], num_classes: int, cfg: Stage2Config | None = None,
                   seed: int = 0, views=None, encoder: EncoderWeights | None = None,
                   settings: RasterSettings = DEFAULT_SETTINGS, log_fn=None) -> SegmentationModel:
    """Train the fusion decoder on frozen geometry and bake the identities.

    ``labels[v]`` are (H, W) class maps at image resolution with -1 for void;
    ``feature_stacks[v][n]`` the scale-``n`` feature map of view ``v``. With
    ``feature_stacks=None`` the set must already carry unprojected features.
    """
    cfg = cfg or Stage2Config()
    views = list(range(len(cams))) if views is None else list(views)
    if feature_stacks is None:
        missing = [n for n in cfg.scales if n not in gs.features]
        if missing:
            raise ValueError(f"no feature stacks given and Gaussians lack scales {missing}")
        geo, keep = gs.copy(), np.ones(len(gs), dtype=bool)
    else:
        geo, keep = unproject_all_scales(gs, cams, feature_stacks, cfg.attendance_threshold,
                                         cfg.eps, cfg.scales, settings)
    if encoder is None:
        encoder = EncoderWeights.random(derive_seed(seed, 4), cfg.encoder_widths)
    image_dims = [geo.features[n].shape[1] for n in cfg.scales]
    decoder = DecoderState.init(image_dims, list(encoder.widths), encoder.bottleneck.shape[1],
                                num_classes, cfg.hidden, derive_seed(seed, 5), cfg.lr)
    coseg = cfg.coseg
    sampler = ViewSampler(views, derive_seed(seed, 6))
    reg_rng = np.random.default_rng(derive_seed(seed, 7))
    passes, history = {}, []
    min_points = 4 ** 3

    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        v = next(sampler)
        cam = cams[v]
        if v not in passes:
            passes[v] = render(cam, geo, np.zeros((len(geo), 1)), settings=settings)
        base = passes[v]
        vis = np.sort(base.projection.index)
        if len(vis) < min_points:
            log.warning("view %d: only %d visible Gaussians, skipping step %d", v, len(vis), it)
            continue

        logits, cache, hier = decode_points(geo, vis, encoder, decoder, derive_seed(seed, it))
        payload = np.zeros((len(geo), num_classes + 1))
        payload[vis, :num_classes] = logits
        bg = np.zeros(num_classes + 1)
        bg[-1] = 1.0
        out = base.with_payload(payload, bg)
        S = softmax(out.image, axis=-1)
        pos = geo.positions[vis]
        fused = {n: cache.pre[n] for n in coseg.reg_scales}
        fused_pos = {n: pos[hier.levels[n - 1]] for n in coseg.reg_scales}
        loss, parts, dS, dfused = coseg_loss(S, labels[v], fused, fused_pos, coseg, reg_rng)
        dz = S * (dS - np.sum(S * dS, axis=-1, keepdims=True))
        dpay = render_backward(out, dz, geo, geometry=False).payload
        grads = decode_backward(cache, dpay[vis, :num_classes], decoder, dfused)
        decoder.apply(grads)
        rec = {"stage": 2, "iter": it, "view": v, "loss": float(loss), **parts,
               "time": time.perf_counter() - t0}
        history.append(rec)
        if log_fn is not None:
            log_fn(rec)

    baked = bake(geo, encoder, decoder, seed)
    return SegmentationModel(baked, decoder, encoder, keep, history)


def render_labels(gs: GaussianSet, cam: Camera, settings: RasterSettings = DEFAULT_SETTINGS):
    return predict_labels(render(cam, gs, "seg", settings=settings, record=False).image)


# ---------------------------------------------------------------- label noise

def inject_label_noise(labels: list[np.ndarray], rate: float, seed: int, num_classes: int,
                       instances: list[np.ndarray] | None = None):
    """Relabel a random subset of object instances independently per view.

    Each view draws ``round(rate * present)`` of its visible instances and maps
    each to a different, randomly chosen class. Returns ``(noisy, manifest)``
    where the manifest lists ``(view, instance, old, new)`` tuples.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"noise rate must be in [0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    noisy, manifest = [], []
    for v, lab in enumerate(labels):
        lab = np.asarray(lab)
        inst = lab if instances is None else np.asarray(instances[v])
        out = lab.copy()
        present = np.unique(inst[(inst >= 0) & (lab >= 0)])
        count = int(round(rate * len(present)))
        for i in rng.permutation(present)[:count]:
            mask = (inst == i) & (lab >= 0)
            old = int(np.bincount(lab[mask]).argmax())
            choices = [c for c in range(num_classes) if c != old]
            new = int(rng.choice(choices))
            out[mask] = new
            manifest.append((v, int(i), old, new))
        noisy.append(out)
    return noisy, manifest
