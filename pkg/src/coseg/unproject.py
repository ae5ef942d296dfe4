"""Explicit feature unprojection onto a fixed Gaussian geometry.

Every Gaussian keeps a pixel-hit counter and a weighted feature buffer.
For each view, each pixel inside a Gaussian's radius square increments the
counter and adds ``alpha * T * F(p)`` to the buffer, with alpha and T taken
from the same blending pass the renderer uses. Finalizing divides the buffer
by ``counter + eps``, L2-normalizes the rows and prunes Gaussians seen in
fewer than ``threshold * V * H * W`` pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .core import Camera, GaussianSet
from .raster import DEFAULT_SETTINGS, RasterSettings, render

DEFAULT_THRESHOLD = 1e-7
DEFAULT_EPS = 1e-8


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize along the last axis; zero vectors stay zero."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


@dataclass
class UnprojectAccumulator:
    """Per-Gaussian hit counter and compensated feature buffer."""

    n_gaussians: int
    dim: int
    threshold: float = DEFAULT_THRESHOLD
    eps: float = DEFAULT_EPS
    counter: np.ndarray = field(init=False)
    buffer: np.ndarray = field(init=False)
    _comp: np.ndarray = field(init=False, repr=False)
    n_views: int = field(init=False, default=0)

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"attendance threshold must be in [0, 1], got {self.threshold}")
        self.counter = np.zeros(self.n_gaussians, dtype=np.int64)
        self.buffer = np.zeros((self.n_gaussians, self.dim))
        self._comp = np.zeros_like(self.buffer)

    def _kahan_add(self, partial: np.ndarray) -> None:
        y = partial - self._comp
        t = self.buffer + y
        self._comp = (t - self.buffer) - y
        self.buffer = t

    def add(self, counts: np.ndarray, partial: np.ndarray) -> None:
        """Merge one view's partial sums."""
        self.counter += counts
        self._kahan_add(partial)
        self.n_views += 1

    def merge(self, other: "UnprojectAccumulator") -> None:
        """Fold in a per-worker accumulator; counts merge exactly."""
        self.counter += other.counter
        self._kahan_add(other.buffer - other._comp)
        self.n_views += other.n_views


def view_coverage(gs: GaussianSet, cam: Camera, settings: RasterSettings = DEFAULT_SETTINGS):
    """Blending coverage of one view: (gaussian_index, pixel_index, alpha*T)."""
    out = render(cam, gs, np.zeros((len(gs), 1)), settings=settings)
    return out.coverage()


def accumulate_view(gs: GaussianSet, cam: Camera, feature_map: np.ndarray,
                    acc: UnprojectAccumulator, settings: RasterSettings = DEFAULT_SETTINGS,
                    coverage=None) -> UnprojectAccumulator:
    """Add one view's features to ``acc``; ``cam`` must match the map resolution."""
    F = np.asarray(feature_map, dtype=np.float64)
    if F.ndim != 3 or F.shape[2] != acc.dim:
        raise ValueError(f"feature map of shape {F.shape} does not match accumulator dim {acc.dim}")
    if F.shape[:2] != (cam.height, cam.width):
        raise ValueError(f"feature map {F.shape[:2]} does not match camera "
                         f"{(cam.height, cam.width)}")
    if len(gs) != acc.n_gaussians:
        raise ValueError("accumulator and Gaussian set sizes differ")
    gidx, pidx, w = view_coverage(gs, cam, settings) if coverage is None else coverage
    counts = np.bincount(gidx, minlength=acc.n_gaussians)
    weights = sparse.csr_matrix((w, (gidx, pidx)), shape=(acc.n_gaussians, F.shape[0] * F.shape[1]))
    partial = weights @ F.reshape(-1, acc.dim)
    acc.add(counts, partial)
    return acc


def attendance_mask(counter: np.ndarray, threshold: float, n_views: int, height: int,
                    width: int) -> np.ndarray:
    return counter >= threshold * n_views * height * width


def finalize(acc: UnprojectAccumulator, gs: GaussianSet, n_views: int, height: int,
             width: int, scale: int = 1):
    """Average, normalize and prune; returns ``(pruned_set, keep_mask)``."""
    f = normalize_rows(acc.buffer / (acc.counter[:, None] + acc.eps))
    keep = attendance_mask(acc.counter, acc.threshold, n_views, height, width)
    out = gs.copy()
    out.features[scale] = f
    return out.select(np.nonzero(keep)[0]), keep


def unproject_all_scales(gs: GaussianSet, cams: list[Camera], stacks: list[dict],
                         threshold: float = DEFAULT_THRESHOLD, eps: float = DEFAULT_EPS,
                         scales=(1, 2, 3, 4), settings: RasterSettings = DEFAULT_SETTINGS,
                         normalize_maps: bool = True):
    """Unproject a multi-scale feature stack for every view.

    ``stacks[v][n]`` is the (H_n, W_n, D_n) map of view ``v`` at scale ``n``;
    cameras are rescaled to each map's resolution. Pruning is decided from
    the first listed scale and applied to every array of the set. Returns
    ``(pruned_set, keep_mask)``.
    """
    if len(stacks) != len(cams):
        raise ValueError(f"{len(stacks)} feature stacks for {len(cams)} cameras")
    for v, stack in enumerate(stacks):
        missing = [n for n in scales if n not in stack]
        if missing:
            raise ValueError(f"view {v} is missing feature scales {missing}")

    coverage_cache = {}
    features, keep = {}, None
    for n in scales:
        dims = {np.shape(s[n])[2] for s in stacks}
        if len(dims) != 1:
            raise ValueError(f"inconsistent feature dims at scale {n}: {sorted(dims)}")
        acc = UnprojectAccumulator(len(gs), dims.pop(), threshold, eps)
        for v, (cam, stack) in enumerate(zip(cams, stacks)):
            F = normalize_rows(stack[n]) if normalize_maps else np.asarray(stack[n], dtype=np.float64)
            key = (v, F.shape[0], F.shape[1])
            if key not in coverage_cache:
                coverage_cache[key] = view_coverage(gs, cam.resized(F.shape[1], F.shape[0]), settings)
            accumulate_view(gs, cam.resized(F.shape[1], F.shape[0]), F, acc, settings,
                            coverage=coverage_cache[key])
        features[n] = normalize_rows(acc.buffer / (acc.counter[:, None] + eps))
        if keep is None:
            H, W = np.shape(stacks[0][n])[:2]
            keep = attendance_mask(acc.counter, threshold, len(cams), H, W)

    out = gs.copy()
    out.features.update(features)
    return out.select(np.nonzero(keep)[0]), keep
