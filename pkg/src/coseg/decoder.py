"""Global-to-local fusion decoder producing per-Gaussian class logits.

Starting at the coarsest level, each stage concatenates the (upsampled)
output of the previous stage with the unprojected image features and the
spatial features of its level, then applies a shared MLP. A final fully
connected layer maps the finest stage to class logits. Upsampling is
inverse-distance interpolation over the 3 nearest coarse points.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GaussianSet
from .optim import Adam
from .spatial import LEAKY_SLOPE, SampleHierarchy, knn, leaky_relu

HIDDEN = (256, 128, 64, 32)
INTERP_K = 3
INTERP_EPS = 1e-8


def interpolation_weights(fine: np.ndarray, coarse: np.ndarray, k: int = INTERP_K):
    """Neighbor indices and normalized inverse-distance weights, each (m, k)."""
    idx, dist = knn(fine, coarse, k)
    w = 1.0 / (dist + INTERP_EPS)
    return idx, w / w.sum(axis=1, keepdims=True)


def upsample(values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("mk,mkd->md", w, values[idx])


def upsample_backward(grad: np.ndarray, idx: np.ndarray, w: np.ndarray, n_coarse: int):
    out = np.zeros((n_coarse, grad.shape[1]))
    np.add.at(out, idx.ravel(), (w[:, :, None] * grad[:, None, :]).reshape(-1, grad.shape[1]))
    return out


@dataclass
class DecoderState:
    """Trainable decoder weights plus their optimizer state.

    ``params`` holds ``mlp{n}.W``/``mlp{n}.b`` for levels 4..1 and
    ``fc.W``/``fc.b``. ``dims`` records the per-level input widths
    ``(image, spatial)`` and the bottleneck width so checkpoints can be
    validated on load.
    """

    params: dict
    image_dims: tuple
    spatial_dims: tuple
    bottleneck_dim: int
    num_classes: int
    hidden: tuple = HIDDEN
    optimizer: Adam = field(default=None, repr=False)
    version: int = 0

    @classmethod
    def init(cls, image_dims, spatial_dims, bottleneck_dim: int, num_classes: int,
             hidden=HIDDEN, seed: int = 0, lr: float = 1e-3) -> "DecoderState":
        rng = np.random.default_rng(seed)
        params = {}
        prev = bottleneck_dim
        for n in (4, 3, 2, 1):
            d_in = prev + image_dims[n - 1] + spatial_dims[n - 1]
            d_out = hidden[4 - n]
            params[f"mlp{n}.W"] = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
            params[f"mlp{n}.b"] = np.zeros(d_out)
            prev = d_out
        params["fc.W"] = rng.normal(0.0, np.sqrt(1.0 / prev), size=(prev, num_classes))
        params["fc.b"] = np.zeros(num_classes)
        return cls(params, tuple(image_dims), tuple(spatial_dims), int(bottleneck_dim),
                   int(num_classes), tuple(hidden), Adam(lr))

    def apply(self, grads: dict) -> None:
        """One optimizer step; invalidates caches from earlier forward passes."""
        self.optimizer.step(self.params, grads)
        self.version += 1

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def config(self) -> dict:
        return {"image_dims": list(self.image_dims), "spatial_dims": list(self.spatial_dims),
                "bottleneck_dim": self.bottleneck_dim, "num_classes": self.num_classes,
                "hidden": list(self.hidden)}


@dataclass
class DecoderCache:
    inputs: dict      # level -> concatenated MLP input
    pre: dict         # level -> pre-activation (the fused feature)
    act: dict         # level -> post-activation
    interp: dict      # level -> (idx, w) upsampling from level + 1
    sizes: dict
    widths: dict      # level -> width of the upsampled block at the front of inputs
    version: int


def decode_forward(f_d, f_s, f_e, hierarchy: SampleHierarchy, positions: np.ndarray,
                   state: DecoderState):
    """Fuse per-level features into logits for every level-1 point.

    ``f_d[n-1]`` and ``f_s[n-1]`` are aligned with ``hierarchy.levels[n-1]``;
    ``f_e`` lives on level 4. Returns ``(logits, cache)``.
    """
    if len(f_d) != 4 or len(f_s) != 4:
        raise ValueError("expected image and spatial features for 4 levels")
    for n in range(1, 5):
        m = len(hierarchy.levels[n - 1])
        if len(f_d[n - 1]) != m or len(f_s[n - 1]) != m:
            raise ValueError(f"level {n}: features have {len(f_d[n - 1])}/{len(f_s[n - 1])} "
                             f"rows, hierarchy has {m} points")
        if f_d[n - 1].shape[1] != state.image_dims[n - 1]:
            raise ValueError(f"level {n}: image feature width {f_d[n - 1].shape[1]} != "
                             f"{state.image_dims[n - 1]}")
        if f_s[n - 1].shape[1] != state.spatial_dims[n - 1]:
            raise ValueError(f"level {n}: spatial feature width {f_s[n - 1].shape[1]} != "
                             f"{state.spatial_dims[n - 1]}")
    if f_e.shape != (len(hierarchy.levels[3]), state.bottleneck_dim):
        raise ValueError(f"bottleneck features have shape {f_e.shape}")

    p = state.params
    cache = DecoderCache({}, {}, {}, {}, {}, {}, state.version)
    prev = f_e
    for n in (4, 3, 2, 1):
        if n < 4:
            fine = positions[hierarchy.levels[n - 1]]
            coarse = positions[hierarchy.levels[n]]
            idx, w = interpolation_weights(fine, coarse)
            cache.interp[n] = (idx, w)
            prev = upsample(prev, idx, w)
        cache.widths[n] = prev.shape[1]
        h = np.concatenate([prev, f_d[n - 1], f_s[n - 1]], axis=1)
        z = h @ p[f"mlp{n}.W"] + p[f"mlp{n}.b"]
        cache.inputs[n], cache.pre[n] = h, z
        prev = cache.act[n] = leaky_relu(z)
        cache.sizes[n] = len(h)
    logits = prev @ p["fc.W"] + p["fc.b"]
    return logits, cache


def decode_backward(cache: DecoderCache, dL_dlogits: np.ndarray, state: DecoderState,
                    dL_dfused: dict | None = None) -> dict:
    """Parameter gradients; ``dL_dfused[n]`` adds gradient on level-n pre-activations."""
    if cache is None or not cache.inputs:
        raise RuntimeError("decoder cache is empty; run decode_forward first")
    if cache.version != state.version:
        raise RuntimeError("decoder cache is stale: parameters changed after the forward pass")
    if len(dL_dlogits) != cache.sizes[1]:
        raise ValueError("gradient rows do not match the cached forward pass")
    p, dL_dfused = state.params, dL_dfused or {}
    grads = {"fc.W": cache.act[1].T @ dL_dlogits, "fc.b": dL_dlogits.sum(axis=0)}
    da = dL_dlogits @ p["fc.W"].T
    for n in (1, 2, 3, 4):
        dz = da * np.where(cache.pre[n] > 0, 1.0, LEAKY_SLOPE)
        if n in dL_dfused:
            dz = dz + dL_dfused[n]
        grads[f"mlp{n}.W"] = cache.inputs[n].T @ dz
        grads[f"mlp{n}.b"] = dz.sum(axis=0)
        if n < 4:
            dh = dz @ p[f"mlp{n}.W"].T
            idx, w = cache.interp[n]
            da = upsample_backward(dh[:, : cache.widths[n]], idx, w, cache.sizes[n + 1])
    return grads


def gather_image_features(features: dict, visible: np.ndarray, hierarchy: SampleHierarchy):
    """Per-level unprojected features for a point subset, ordered like the hierarchy."""
    return [features[n][visible[hierarchy.levels[n - 1]]] for n in (1, 2, 3, 4)]


def bake_identities(gs: GaussianSet, logits: np.ndarray) -> GaussianSet:
    """Store decoded logits as the set's segmentation identities."""
    if len(logits) != len(gs):
        raise ValueError(f"{len(logits)} logit rows for {len(gs)} Gaussians")
    return gs.with_seg_logits(logits)
