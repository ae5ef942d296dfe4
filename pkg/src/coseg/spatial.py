"""Frozen RandLA-style point encoder over Gaussian centroids.

Four levels, each decimated 4x by random sampling. On every level a Local
Feature Aggregation block encodes neighbor geometry, concatenates it with the
neighbors' incoming features and pools them with per-channel softmax
attention. Weights are seeded random projections (or loaded from disk) and
are never updated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Camera, GaussianSet
from .raster import DEFAULT_SETTINGS, RasterSettings, project

WIDTHS = (16, 64, 128, 256)
N_NEIGHBORS = 16
DECIMATION = 4
LEAKY_SLOPE = 0.01


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def knn(query: np.ndarray, points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the ``k`` nearest ``points`` for every query."""
    k = min(k, len(points))
    dist, idx = cKDTree(points).query(query, k=k)
    return np.asarray(idx).reshape(len(query), k), np.asarray(dist).reshape(len(query), k)


@dataclass
class SampleHierarchy:
    """Random-sampling pyramid.

    ``levels[n]`` holds indices into the input positions for level ``n + 1``
    (level 1 is every point in input order); ``neighbors[n]`` holds KNN lists
    within level ``n + 1`` as indices into ``levels[n]``.
    """

    levels: list[np.ndarray]
    neighbors: list[np.ndarray]
    seed: int

    @property
    def sizes(self) -> list[int]:
        return [len(x) for x in self.levels]

    def positions(self, positions: np.ndarray, level: int) -> np.ndarray:
        return positions[self.levels[level - 1]]


def build_hierarchy(positions: np.ndarray, seed: int, k: int = N_NEIGHBORS,
                    ratio: int = DECIMATION, n_levels: int = 4) -> SampleHierarchy:
    """Deterministic sampling pyramid; independent of input point order.

    Sampling acts on points sorted lexicographically by position, so a
    permuted input yields the same point subsets.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    min_points = ratio ** (n_levels - 1)
    if n < min_points:
        raise ValueError(f"need at least {min_points} points for {n_levels} levels, got {n}")
    rank = np.empty(n, dtype=np.int64)
    rank[np.lexsort(positions.T[::-1])] = np.arange(n)
    rng = np.random.default_rng(seed)

    levels = [np.arange(n)]
    for _ in range(n_levels - 1):
        prev = levels[-1]
        canon = prev[np.argsort(rank[prev])]
        chosen = canon[rng.permutation(len(canon))[: len(canon) // ratio]]
        levels.append(chosen[np.argsort(rank[chosen])])
    neighbors = [knn(positions[lv], positions[lv], k)[0] for lv in levels]
    return SampleHierarchy(levels, neighbors, seed)


def sub_indices(hierarchy: SampleHierarchy, level: int) -> np.ndarray:
    """Positions of level ``level`` points inside level ``level - 1``."""
    prev = hierarchy.levels[level - 2]
    lookup = np.full(prev.max() + 1, -1)
    lookup[prev] = np.arange(len(prev))
    return lookup[hierarchy.levels[level - 1]]


@dataclass
class EncoderWeights:
    """Per level: input projection, local spatial encoding, attention scores,
    output projection; plus a bottleneck projection producing ``f_e``."""

    layers: list[dict]
    bottleneck: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        if self.frozen:
            for layer in self.layers:
                for w in layer.values():
                    w.flags.writeable = False
            self.bottleneck.flags.writeable = False

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(layer["W_out"].shape[1] for layer in self.layers)

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [(layer["W_in"].shape[0], layer["W_out"].shape[1]) for layer in self.layers]

    @classmethod
    def random(cls, seed: int = 0, widths=WIDTHS, in_dim: int = 3) -> "EncoderWeights":
        rng = np.random.default_rng(seed)

        def he(fan_in, fan_out):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

        layers, d_in = [], in_dim
        for d in widths:
            half = d // 2
            layers.append({"W_in": he(d_in, half), "W_lse": he(10, d - half),
                           "W_score": he(d, d), "W_out": he(d, d)})
            d_in = d
        return cls(layers, he(d_in, d_in))

    @classmethod
    def from_arrays(cls, dims, flat: np.ndarray) -> "EncoderWeights":
        flat = np.asarray(flat, dtype=np.float64)
        pos, layers = 0, []

        def take(r, c):
            nonlocal pos
            w = flat[pos: pos + r * c].reshape(r, c)
            pos += r * c
            return w.copy()

        for d_in, d in dims:
            half = d // 2
            layers.append({"W_in": take(d_in, half), "W_lse": take(10, d - half),
                           "W_score": take(d, d), "W_out": take(d, d)})
        d_last = dims[-1][1]
        bottleneck = take(d_last, d_last)
        if pos != len(flat):
            raise ValueError(f"weights file has {len(flat)} values, layout needs {pos}")
        return cls(layers, bottleneck)

    def flat(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts += [layer[k].ravel() for k in ("W_in", "W_lse", "W_score", "W_out")]
        parts.append(self.bottleneck.ravel())
        return np.concatenate(parts)


def relative_encoding(points: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """``[p_i, p_k, p_i - p_k, |p_i - p_k|]`` per neighbor, shape (m, k, 10)."""
    pi = np.broadcast_to(points[:, None, :], neighbors.shape + (3,))
    pk = points[neighbors]
    diff = pi - pk
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    return np.concatenate([pi, pk, diff, dist], axis=-1)


def local_feature_aggregation(points, neighbors, features, layer: dict):
    """One LFA block; returns pooled features (m, d) and attention scores (m, k, d)."""
    geo = leaky_relu(relative_encoding(points, neighbors) @ layer["W_lse"])
    nbr = leaky_relu(features @ layer["W_in"])[neighbors]
    cat = np.concatenate([nbr, geo], axis=-1)
    scores = softmax(cat @ layer["W_score"], axis=1)
    pooled = np.sum(scores * cat, axis=1)
    return leaky_relu(pooled @ layer["W_out"]), scores


@dataclass
class SpatialFeatures:
    f_s: list[np.ndarray]
    f_e: np.ndarray
    scores: list[np.ndarray] | None = None


def encode(positions: np.ndarray, hierarchy: SampleHierarchy, weights: EncoderWeights,
           return_scores: bool = False) -> SpatialFeatures:
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) != len(hierarchy.levels[0]):
        raise ValueError(f"hierarchy was built for {len(hierarchy.levels[0])} points, "
                         f"got {len(positions)}")
    if len(weights.layers) != len(hierarchy.levels):
        raise ValueError(f"{len(weights.layers)} encoder layers for "
                         f"{len(hierarchy.levels)} hierarchy levels")
    f_s, all_scores = [], []
    x = positions
    for n, layer in enumerate(weights.layers):
        if n > 0:
            x = f_s[-1][sub_indices(hierarchy, n + 1)]
        pts = positions[hierarchy.levels[n]]
        out, scores = local_feature_aggregation(pts, hierarchy.neighbors[n], x, layer)
        f_s.append(out)
        all_scores.append(scores)
    f_e = leaky_relu(f_s[-1] @ weights.bottleneck)
    return SpatialFeatures(f_s, f_e, all_scores if return_scores else None)


def visible_subset(gs: GaussianSet, cam: Camera,
                   settings: RasterSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Sorted indices of Gaussians that project with nonzero radius."""
    return np.sort(project(cam, gs, settings).index)
