"""Gaussian scene containers, cameras and covariance construction.

All arrays are float64 internally. Cameras map world points into a camera
frame with +z forward: ``x_cam = R @ x_world + t``. Pixel ``(u, v)`` is sampled
at its center ``(u + 0.5, v + 0.5)``, so scaling intrinsics by a factor maps
pixel coordinates by the same factor.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (w, x, y, z) quaternions, shape (..., 3, 3)."""
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quaternion_to_rotation` for a single matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.zeros(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.asarray(q, dtype=np.float64)
    return q if q[0] >= 0 else -q


def build_covariance(q: np.ndarray, s_log: np.ndarray) -> np.ndarray:
    """Covariance ``R diag(exp(s_log))^2 R^T``; broadcasts over leading axes.

    The quaternion is renormalized internally, so any nonzero ``q`` is accepted.
    """
    R = quaternion_to_rotation(q)
    M = R * np.exp(np.asarray(s_log, dtype=np.float64))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_backward(q, s_log, dL_dcov):
    """Gradients of a scalar loss w.r.t. ``q`` and ``s_log`` given dL/dSigma.

    ``dL_dcov`` need not be symmetric. Returns ``(dL_dq, dL_dslog)`` with shapes (N, 4) and (N, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    R = quaternion_to_rotation(qn)
    s = np.exp(s_log)
    M = R * s[..., None, :]
    dL_dcov = np.asarray(dL_dcov, dtype=np.float64)
    dM = (dL_dcov + np.swapaxes(dL_dcov, -1, -2)) @ M
    dL_ds = np.einsum("...rk,...rk->...k", dM, R)
    dL_dslog = dL_ds * s
    dR = dM * s[..., None, :]

    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = lambda r, c: dR[..., r, c]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    dq = (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm
    return dq, dL_dslog


def eval_sh1(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Degree-1 SH color; ``sh`` is (N, 4, 3), ``dirs`` unit vectors (N, 3)."""
    x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    c = SH_C0 * sh[:, 0] - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    return np.maximum(c + 0.5, 0.0)


def eval_sh1_backward(sh, positions, cam_center, dL_dcolor):
    """Gradients of :func:`eval_sh1` w.r.t. the coefficients and positions."""
    v = positions - cam_center
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    dirs = v / norm
    x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    raw = SH_C0 * sh[:, 0] - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    g = dL_dcolor * (raw + 0.5 > 0)
    dsh = np.stack([SH_C0 * g, -SH_C1 * y * g, SH_C1 * z * g, -SH_C1 * x * g], axis=1)
    ddir = np.stack([
        -SH_C1 * np.sum(g * sh[:, 3], axis=1),
        -SH_C1 * np.sum(g * sh[:, 1], axis=1),
        SH_C1 * np.sum(g * sh[:, 2], axis=1),
    ], axis=1)
    dpos = (ddir - dirs * np.sum(ddir * dirs, axis=1, keepdims=True)) / norm
    return dsh, dpos


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def world_to_camera(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.R.T + self.t

    def resized(self, width: int, height: int) -> "Camera":
        """Same pose with intrinsics rescaled to a new image size."""
        sx, sy = width / self.width, height / self.height
        return replace(self, fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx,
                       cy=self.cy * sy, width=int(width), height=int(height))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fov_deg=60.0, width=64, height=64):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("viewing direction is parallel to the up vector")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, R, -R @ eye)

    def to_dict(self) -> dict:
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx),
                "cy": float(self.cy), "width": int(self.width), "height": int(self.height),
                "R": [float(v) for v in self.R.ravel()], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["R"], dtype=np.float64).reshape(3, 3), d["t"])


def world_to_camera(cam: Camera, x: np.ndarray) -> np.ndarray:
    return cam.world_to_camera(x)


@dataclass
class GaussianSet:
    """Structure-of-arrays Gaussian scene.

    Attributes:
        positions: (N, 3) centroids.
        rotations: (N, 4) quaternions (w, x, y, z).
        log_scales: (N, 3) per-axis log standard deviations.
        opacity_raw: (N,) opacity logits.
        colors: (N, 3) RGB, or (N, 4, 3) degree-1 SH coefficients.
        seg_logits: (N, C) segmentation identities, optional.
        features: per-scale unprojected features ``{n: (N, D)}``.
        extras: additional per-Gaussian float arrays (e.g. ground-truth labels).
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_raw: np.ndarray
    colors: np.ndarray
    seg_logits: np.ndarray | None = None
    features: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.colors.shape not in ((n, 3), (n, 4, 3)):
            raise ValueError(f"colors must be (N, 3) or (N, 4, 3), got {self.colors.shape}")
        if self.seg_logits is not None:
            self.seg_logits = np.asarray(self.seg_logits, dtype=np.float64)
            if self.seg_logits.ndim != 2 or len(self.seg_logits) != n:
                raise ValueError("seg_logits must be (N, C)")
        self.features = {int(k): np.asarray(v, dtype=np.float64) for k, v in self.features.items()}
        self.extras = {k: np.asarray(v, dtype=np.float64) for k, v in self.extras.items()}
        for k, v in list(self.features.items()) + list(self.extras.items()):
            if len(v) != n:
                raise ValueError(f"array {k!r} has length {len(v)}, expected {n}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def uses_sh(self) -> bool:
        return self.colors.ndim == 3

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    @property
    def num_classes(self) -> int:
        return 0 if self.seg_logits is None else self.seg_logits.shape[1]

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.log_scales)

    def rgb(self, cam_center: np.ndarray | None = None) -> np.ndarray:
        """Per-Gaussian RGB; SH colors need the viewing camera center."""
        if not self.uses_sh:
            return self.colors
        v = self.positions - cam_center
        return eval_sh1(self.colors, v / np.linalg.norm(v, axis=1, keepdims=True))

    def select(self, idx) -> "GaussianSet":
        idx = np.asarray(idx)
        return GaussianSet(
            self.positions[idx], self.rotations[idx], self.log_scales[idx],
            self.opacity_raw[idx], self.colors[idx],
            None if self.seg_logits is None else self.seg_logits[idx],
            {k: v[idx] for k, v in self.features.items()},
            {k: v[idx] for k, v in self.extras.items()},
        )

    def copy(self) -> "GaussianSet":
        return self.select(np.arange(len(self)))

    def with_seg_logits(self, logits: np.ndarray) -> "GaussianSet":
        out = self.copy()
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2 or len(logits) != len(self):
            raise ValueError(f"expected logits of shape ({len(self)}, C), got {logits.shape}")
        out.seg_logits = logits.copy()
        return out

    def normalize_rotations(self) -> None:
        self.rotations = normalize_quaternions(self.rotations)
