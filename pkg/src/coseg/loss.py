"""Training objectives with hand-written gradients."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .spatial import knn

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
_TINY = 1e-300


@dataclass
class CoSegConfig:
    pi_rl: float = 0.5
    lambda_pix: float = 0.8
    lambda_reg: float = 0.2
    reg_scales: tuple = (3, 4)
    reg_M: int = 1024
    reg_K: int = 8
    pixel_loss: str = "js"

    def __post_init__(self):
        if not 0.0 < self.pi_rl < 1.0:
            raise ValueError(f"pi_rl must lie in (0, 1), got {self.pi_rl}")
        if self.pixel_loss not in ("js", "ce"):
            raise ValueError(f"unknown pixel loss {self.pixel_loss!r}")
        self.reg_scales = tuple(int(n) for n in self.reg_scales)

    @property
    def pi_p(self) -> float:
        return 1.0 - self.pi_rl

    @property
    def Z(self) -> float:
        return js_scale(self.pi_rl)


def js_scale(pi_rl: float) -> float:
    """Scaling constant ``-(1 - pi_rl) log(1 - pi_rl)``."""
    return -(1.0 - pi_rl) * np.log(1.0 - pi_rl)


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(x):
    k = _gauss_kernel()
    y = correlate1d(x, k, axis=0, mode="constant")
    return correlate1d(y, k, axis=1, mode="constant")


def ssim(img: np.ndarray, ref: np.ndarray, return_grad: bool = False):
    """Mean SSIM over an (H, W, C) pair with zero-padded Gaussian windows."""
    x, y = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    mu1, mu2 = _blur(x), _blur(y)
    e11, e22, e12 = _blur(x * x), _blur(y * y), _blur(x * y)
    s11, s22, s12 = e11 - mu1 * mu1, e22 - mu2 * mu2, e12 - mu1 * mu2
    a1, a2 = 2 * mu1 * mu2 + SSIM_C1, 2 * s12 + SSIM_C2
    b1, b2 = mu1 * mu1 + mu2 * mu2 + SSIM_C1, s11 + s22 + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = smap.mean()
    if not return_grad:
        return value
    g = 1.0 / smap.size
    d_mu1 = g * (2 * mu2 * a2 / (b1 * b2) - 2 * mu2 * a1 / (b1 * b2)
                 - smap * 2 * mu1 / b1 + smap * 2 * mu1 / b2)
    d_e11 = g * (-smap / b2)
    d_e12 = g * (2 * a1 / (b1 * b2))
    grad = _blur(d_mu1) + 2 * x * _blur(d_e11) + y * _blur(d_e12)
    return value, grad


def photometric_loss(rendered: np.ndarray, target: np.ndarray, lambda1: float = 0.8):
    """``lambda1 * L1 + (1 - lambda1) * (1 - SSIM) / 2`` and its image gradient."""
    rendered, target = np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = np.abs(diff).mean()
    s, ds = ssim(rendered, target, return_grad=True)
    loss = lambda1 * l1 + (1 - lambda1) * (1 - s) / 2
    grad = lambda1 * np.sign(diff) / diff.size - (1 - lambda1) / 2 * ds
    return loss, grad


def _valid_pixels(S, labels, C):
    S = np.asarray(S, dtype=np.float64)
    labels = np.asarray(labels)
    if S.shape[:-1] != labels.shape:
        raise ValueError(f"prediction {S.shape} and label {labels.shape} shapes differ")
    if np.any(np.abs(S.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("predicted distributions do not sum to 1")
    valid = labels >= 0
    if np.any(labels[valid] >= C):
        raise ValueError(f"label index out of range for {C} classes")
    return S, labels, valid


def pixel_js_loss(S: np.ndarray, labels: np.ndarray, cfg: CoSegConfig | None = None):
    """Weighted Jensen-Shannon loss against one-hot labels, averaged over pixels.

    ``S`` is (..., C) per-pixel distributions and ``labels`` (...) class
    indices; negative labels are ignored. Returns ``(loss, dL/dS)``.
    """
    cfg = cfg or CoSegConfig()
    C = S.shape[-1]
    S, labels, valid = _valid_pixels(S, labels, C)
    n = max(int(valid.sum()), 1)
    kappa = np.zeros_like(S)
    np.put_along_axis(kappa, np.where(valid, labels, 0)[..., None], 1.0, axis=-1)
    pr, pp, Z = cfg.pi_rl, cfg.pi_p, cfg.Z
    m = pr * kappa + pp * S
    log_m = np.log(np.maximum(m, _TINY))
    log_S = np.log(np.maximum(S, _TINY))
    kl_label = -np.take_along_axis(log_m, np.where(valid, labels, 0)[..., None], -1)[..., 0]
    kl_pred = np.sum(np.where(S > 0, S * (log_S - log_m), 0.0), axis=-1)
    per_pixel = (pr * kl_label + pp * kl_pred) / Z
    loss = np.sum(np.where(valid, per_pixel, 0.0)) / n
    grad = np.where(valid[..., None], pp * (log_S - log_m) / (Z * n), 0.0)
    return loss, grad


def pixel_ce_loss(S: np.ndarray, labels: np.ndarray, cfg: CoSegConfig | None = None):
    """Mean cross-entropy baseline; same interface as :func:`pixel_js_loss`."""
    C = S.shape[-1]
    S, labels, valid = _valid_pixels(S, labels, C)
    n = max(int(valid.sum()), 1)
    lab = np.where(valid, labels, 0)[..., None]
    p = np.maximum(np.take_along_axis(S, lab, -1)[..., 0], _TINY)
    loss = np.sum(np.where(valid, -np.log(p), 0.0)) / n
    grad = np.zeros_like(S)
    np.put_along_axis(grad, lab, np.where(valid, -1.0 / (p * n), 0.0)[..., None], axis=-1)
    return loss, grad


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def kl_pair(f_j: np.ndarray, f_k: np.ndarray):
    """``KL(softmax(f_j) || softmax(f_k))`` row-wise, with both gradients."""
    lp, lq = log_softmax(f_j), log_softmax(f_k)
    P, Q = np.exp(lp), np.exp(lq)
    u = lp - lq
    kl = np.sum(P * u, axis=-1)
    d_j = P * (u - kl[..., None])
    d_k = Q - P
    return kl, d_j, d_k


def reg_loss(features: dict, positions: dict, cfg: CoSegConfig | None = None, rng=None):
    """KL closeness between sampled points and their spatial nearest neighbors.

    ``features[n]`` (m_n, d) are pre-softmax fused features at scale ``n`` and
    ``positions[n]`` (m_n, 3) their centroids. Each scale draws ``M`` points,
    compares each with its ``K`` nearest other points, and is normalized by
    ``M * K``. Returns ``(loss, {n: dL/df_n})``.
    """
    cfg = cfg or CoSegConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    total, grads = 0.0, {}
    for n in cfg.reg_scales:
        f, pos = np.asarray(features[n], dtype=np.float64), np.asarray(positions[n])
        pop = len(f)
        grads[n] = np.zeros_like(f)
        M, K = cfg.reg_M, cfg.reg_K
        if M > pop:
            warnings.warn(f"reg_M={M} exceeds {pop} points at scale {n}; clamping", stacklevel=2)
            M = pop
        if K > pop - 1:
            warnings.warn(f"reg_K={K} exceeds {pop - 1} neighbors at scale {n}; clamping",
                          stacklevel=2)
            K = pop - 1
        if M == 0 or K <= 0:
            continue
        sample = np.sort(rng.choice(pop, size=M, replace=False))
        idx, _ = knn(pos[sample], pos, K + 1)
        nbrs = np.array([[j for j in row if j != s][:K] for s, row in zip(sample, idx)])
        fj = np.repeat(f[sample], K, axis=0)
        fk = f[nbrs.ravel()]
        kl, d_j, d_k = kl_pair(fj, fk)
        scale = 1.0 / (M * K)
        total += kl.sum() * scale
        np.add.at(grads[n], np.repeat(sample, K), d_j * scale)
        np.add.at(grads[n], nbrs.ravel(), d_k * scale)
    return total, grads


def coseg_loss(S, labels, fused: dict, positions: dict, cfg: CoSegConfig | None = None,
               rng=None):
    """``lambda_pix * pixel + lambda_reg * reg``; returns (loss, parts, dL/dS, {n: dL/df})."""
    cfg = cfg or CoSegConfig()
    pixel = pixel_js_loss if cfg.pixel_loss == "js" else pixel_ce_loss
    l_pix, d_S = pixel(S, labels, cfg)
    if cfg.lambda_reg != 0.0 and fused:
        l_reg, d_f = reg_loss(fused, positions, cfg, rng)
    else:
        l_reg, d_f = 0.0, {}
    loss = cfg.lambda_pix * l_pix + cfg.lambda_reg * l_reg
    parts = {"pix": float(l_pix), "reg": float(l_reg)}
    return loss, parts, cfg.lambda_pix * d_S, {n: cfg.lambda_reg * g for n, g in d_f.items()}
