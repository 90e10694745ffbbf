"""Similarity measures, regularizers and probabilistic objectives.

Every differentiable term returns ``(value, grad)`` where ``grad`` is taken
with respect to the term's first argument (the warped image, the warped
label stack, or the displacement).  Windowed statistics (LNCC, SSIM) use
windows clipped to the volume rather than padded intensities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import DEFAULT_STEPS, scaling_and_squaring, svf_vjp
from .volume import VolumeError, check_field, check_labels
from .warp import apply_tape, warp_vjp, warp_volume

LNCC_EPS = 1e-5
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.02
    gamma: float = 0.0
    sigma2: float = 1.0
    sigma_s2: float = 1.0
    lncc_window: int = 9

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise VolumeError("lam and gamma must be non-negative")
        if self.sigma2 <= 0 or self.sigma_s2 <= 0:
            raise VolumeError("noise variances must be positive")
        if self.lncc_window < 1 or self.lncc_window % 2 == 0:
            raise VolumeError(f"lncc_window must be a positive odd integer, got {self.lncc_window}")

    @classmethod
    def for_setting(cls, sim: str) -> LossWeights:
        """MSE + diffusion with lam 0.02, or LNCC + bending + Dice with lam = gamma = 1."""
        if sim == "mse":
            return cls(lam=0.02, gamma=0.0)
        return cls(lam=1.0, gamma=1.0)


def _same_dims(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise VolumeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def box_sum(x, n: int, axes=(-3, -2, -1)) -> np.ndarray:
    """Sum over an ``n``-wide window centred on each voxel, clipped at the borders.

    Window membership is symmetric, so this linear map is its own adjoint.
    """
    r = n // 2
    out = np.asarray(x, dtype=np.float64)
    for axis in axes:
        size = out.shape[axis]
        c = np.cumsum(out, axis=axis)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
        idx = np.arange(size)
        hi = np.minimum(idx + r + 1, size)
        lo = np.maximum(idx - r, 0)
        out = np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)
    return out


def window_counts(dims, n: int) -> np.ndarray:
    return box_sum(np.ones(dims), n)


def mse(a, b):
    a, b = _same_dims(a, b)
    diff = a - b
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def lncc_map(a, b, n: int = 9, eps: float = LNCC_EPS):
    """Per-voxel squared local correlation and the window statistics behind it."""
    a, b = _same_dims(a, b)
    if n < 1 or n % 2 == 0:
        raise VolumeError(f"LNCC window must be odd, got {n}")
    count = window_counts(a.shape, n)
    sa, sb = box_sum(a, n), box_sum(b, n)
    saa, sbb, sab = box_sum(a * a, n), box_sum(b * b, n), box_sum(a * b, n)
    cross = sab - sa * sb / count
    var_a = saa - sa * sa / count
    var_b = sbb - sb * sb / count
    denom = (var_a + eps) * (var_b + eps)
    return cross**2 / denom, (count, sa, sb, cross, var_a, var_b, denom)


def lncc(a, b, n: int = 9, eps: float = LNCC_EPS, reduce: str = "sum"):
    """Local normalized cross-correlation (a similarity: higher is better).

    ``reduce="sum"`` sums the per-voxel values; ``"mean"`` averages them.
    The gradient is with respect to ``a``.
    """
    a, b = _same_dims(a, b)
    cc, (count, sa, sb, cross, var_a, var_b, denom) = lncc_map(a, b, n, eps)
    d_cross = 2.0 * cross / denom
    d_var_a = -(cross**2) / (denom * (var_a + eps))
    # chain through cross = sab - sa*sb/N and var_a = saa - sa^2/N
    d_sa = -d_cross * sb / count - 2.0 * d_var_a * sa / count
    grad = box_sum(d_cross, n) * b + 2.0 * box_sum(d_var_a, n) * a + box_sum(d_sa, n)
    if reduce == "sum":
        return float(np.sum(cc)), grad
    if reduce == "mean":
        return float(np.mean(cc)), grad / cc.size
    raise VolumeError(f"unknown reduction {reduce!r}")


def _fdiff(x, axis):
    return np.diff(x, axis=axis)


def _fdiff_adjoint(g, axis):
    """Adjoint of ``np.diff`` along ``axis``: output is one longer."""
    pad = [(0, 0)] * g.ndim
    pad[axis] = (1, 0)
    lead = np.pad(g, pad)
    pad[axis] = (0, 1)
    return lead - np.pad(g, pad)


def diffusion_reg(u):
    """Sum of squared forward differences of every displacement component."""
    u = check_field(u, name="displacement")
    value, grad = 0.0, np.zeros_like(u)
    for axis in (1, 2, 3):
        if u.shape[axis] < 2:
            raise VolumeError("diffusion regularizer needs at least 2 voxels per axis")
        d = _fdiff(u, axis)
        value += float(np.sum(d * d))
        grad += 2.0 * _fdiff_adjoint(d, axis)
    return value, grad


_BENDING_TERMS = [(1, 1, 1.0), (2, 2, 1.0), (3, 3, 1.0), (1, 2, 2.0), (1, 3, 2.0), (2, 3, 2.0)]


def bending_energy(u):
    """Sum of squared second differences, cross terms weighted by 2.

    Each second derivative is a repeated forward difference evaluated only
    where both differences exist, so affine fields give exactly zero.
    """
    u = check_field(u, name="displacement")
    if min(u.shape[1:]) < 3:
        raise VolumeError("bending energy needs at least 3 voxels per axis")
    value, grad = 0.0, np.zeros_like(u)
    for i, j, w in _BENDING_TERMS:
        t = _fdiff(_fdiff(u, i), j)
        value += w * float(np.sum(t * t))
        grad += 2.0 * w * _fdiff_adjoint(_fdiff_adjoint(t, j), i)
    return value, grad


def dice_loss(sf, sm_warped, eps: float = DICE_EPS):
    """Soft multi-class Dice loss; gradient with respect to ``sm_warped``.

    ``eps`` is added to numerator and denominator so an empty/empty class
    scores a perfect overlap.
    """
    sf, sm = _same_dims(check_labels(sf), check_labels(sm_warped))
    axes = (1, 2, 3)
    inter = np.sum(sf * sm, axis=axes)
    denom = np.sum(sf * sf, axis=axes) + np.sum(sm * sm, axis=axes) + eps
    num = 2.0 * inter + eps
    k = sf.shape[0]
    value = 1.0 - float(np.mean(num / denom))
    dratio = (2.0 * sf * denom[:, None, None, None] - num[:, None, None, None] * 2.0 * sm) / (
        denom[:, None, None, None] ** 2
    )
    return value, -dratio / k


def dice_scores(sf, sm) -> list[float]:
    """Hard Dice per channel on binarized (>= 0.5) masks."""
    sf = check_labels(sf) >= 0.5
    sm = check_labels(sm) >= 0.5
    scores = []
    for f, m in zip(sf, sm):
        total = f.sum() + m.sum()
        scores.append(1.0 if total == 0 else float(2.0 * np.logical_and(f, m).sum() / total))
    return scores


REGULARIZERS = {"diffusion": diffusion_reg, "bending": bending_energy}
SIMILARITIES = ("mse", "lncc")


def composite_loss(
    If,
    Im,
    u,
    sf=None,
    sm=None,
    weights: LossWeights | None = None,
    sim: str = "mse",
    reg: str = "diffusion",
    return_terms: bool = False,
):
    """``L_sim + lam * R + gamma * L_seg`` and its gradient with respect to ``u``.

    LNCC enters as ``-mean(LNCC)`` and the regularizer is divided by the
    voxel count so all terms are per-voxel averages, like MSE.
    """
    w = weights or LossWeights()
    If = np.asarray(If, dtype=np.float64)
    u = check_field(u, If.shape, name="displacement")
    if sim not in SIMILARITIES:
        raise VolumeError(f"unknown similarity {sim!r}")
    if reg not in REGULARIZERS:
        raise VolumeError(f"unknown regularizer {reg!r}")
    if w.gamma > 0 and (sf is None or sm is None):
        raise VolumeError("segmentation weight gamma > 0 requires both label stacks")

    warped, tape = warp_volume(Im, u)
    if sim == "mse":
        l_sim, g_img = mse(warped, If)
    else:
        cc, g_img = lncc(warped, If, w.lncc_window, reduce="mean")
        l_sim, g_img = -cc, -g_img
    _, grad = warp_vjp(tape, Im, g_img)

    n_vox = If.size
    r_val, r_grad = REGULARIZERS[reg](u)
    r_val /= n_vox
    grad = grad + w.lam * r_grad / n_vox

    l_seg = 0.0
    if w.gamma > 0:
        sm = check_labels(sm, If.shape)
        sm_w = apply_tape(tape, sm)
        l_seg, g_lab = dice_loss(check_labels(sf, If.shape), sm_w)
        _, g_u = warp_vjp(tape, sm, g_lab)
        grad = grad + w.gamma * g_u

    total = l_sim + w.lam * r_val + w.gamma * l_seg
    if return_terms:
        return total, grad, {"sim": l_sim, "reg": r_val, "seg": l_seg, "warped": warped}
    return total, grad


# ---------------------------------------------------------- probabilistic


@dataclass
class GaussianPosterior:
    mu: np.ndarray  # (3, H, W, L) mean velocity
    logvar: np.ndarray  # (3, H, W, L) diagonal log-variance

    def __post_init__(self):
        self.mu = check_field(self.mu, name="mu")
        self.logvar = check_field(self.logvar, self.mu.shape[1:], name="logvar")


def graph_degree(dims) -> np.ndarray:
    """Number of in-grid 6-neighbours of every voxel."""
    deg = np.zeros(dims)
    for axis, n in enumerate(dims):
        per_axis = np.full(n, 2.0)
        per_axis[0] -= 1.0
        per_axis[-1] -= 1.0
        shape = [1, 1, 1]
        shape[axis] = n
        deg += per_axis.reshape(shape)
    return deg


def laplacian_apply(mu) -> np.ndarray:
    """``L mu`` with ``L = D - A`` on the 6-neighbour voxel graph, per channel."""
    mu = np.asarray(mu, dtype=np.float64)
    out = graph_degree(mu.shape[-3:]) * mu
    for axis in (-3, -2, -1):
        pad = [(0, 0)] * mu.ndim
        pad[axis] = (1, 0)
        out -= np.pad(np.take(mu, np.arange(mu.shape[axis] - 1), axis=axis), pad)
        pad[axis] = (0, 1)
        out -= np.pad(np.take(mu, np.arange(1, mu.shape[axis]), axis=axis), pad)
    return out


def precision_quadratic(mu, lam: float) -> float:
    """``mu^T Lambda_u mu`` with ``Lambda_u = lam * L``."""
    mu = np.asarray(mu, dtype=np.float64)
    return lam * float(np.sum(mu * laplacian_apply(mu)))


def kl_term(post: GaussianPosterior, lam: float):
    """``0.5 * [tr(lam D Sigma - log Sigma) + mu^T Lambda_u mu]`` and its gradients."""
    deg = graph_degree(post.mu.shape[1:])
    var = np.exp(post.logvar)
    value = 0.5 * (float(np.sum(lam * deg * var - post.logvar)) + precision_quadratic(post.mu, lam))
    g_mu = lam * laplacian_apply(post.mu)
    g_logvar = 0.5 * (lam * deg * var - 1.0)
    return value, g_mu, g_logvar


def _sample_velocity(post: GaussianPosterior, rng):
    eps = rng.standard_normal(post.mu.shape)
    std = np.exp(0.5 * post.logvar)
    return post.mu + std * eps, eps, std


def elbo_loss(If, Im, post: GaussianPosterior, weights: LossWeights | None = None,
              steps: int = DEFAULT_STEPS, rng=None):
    """Negative ELBO for one reparameterized sample; returns ``(value, (grad_mu, grad_logvar))``."""
    value, grads, _ = _elbo(If, Im, None, None, post, weights, steps, rng)
    return value, grads


def elbo_loss_aux(If, sf, Im, sm, post: GaussianPosterior, weights: LossWeights | None = None,
                  steps: int = DEFAULT_STEPS, rng=None):
    """:func:`elbo_loss` plus ``||s_f - s_m o phi||^2 / (2 sigma_s^2)`` over all label channels."""
    if sf is None or sm is None:
        raise VolumeError("auxiliary ELBO needs both label stacks")
    value, grads, _ = _elbo(If, Im, sf, sm, post, weights, steps, rng)
    return value, grads


def _elbo(If, Im, sf, sm, post, weights, steps, rng):
    w = weights or LossWeights()
    if rng is None:
        raise VolumeError("ELBO sampling needs an explicit rng")
    If = np.asarray(If, dtype=np.float64)
    if post.mu.shape[1:] != If.shape:
        raise VolumeError(f"posterior dims {post.mu.shape[1:]} do not match image {If.shape}")
    v, eps, std = _sample_velocity(post, rng)
    u, svf_tape = scaling_and_squaring(v, steps, return_tape=True)
    warped, tape = warp_volume(Im, u)
    resid = warped - If
    recon = float(np.sum(resid**2)) / (2.0 * w.sigma2)
    _, g_u = warp_vjp(tape, Im, resid / w.sigma2)
    label_term = 0.0
    if sf is not None:
        sf = check_labels(sf, If.shape)
        sm = check_labels(sm, If.shape)
        lres = apply_tape(tape, sm) - sf
        label_term = float(np.sum(lres**2)) / (2.0 * w.sigma_s2)
        _, g_lab = warp_vjp(tape, sm, lres / w.sigma_s2)
        g_u = g_u + g_lab
    g_v = svf_vjp(v, steps, g_u, svf_tape)
    kl, kg_mu, kg_logvar = kl_term(post, w.lam)
    grad_mu = g_v + kg_mu
    grad_logvar = g_v * eps * 0.5 * std + kg_logvar
    terms = {"recon": recon, "labels": label_term, "kl": kl}
    return recon + label_term + kl, (grad_mu, grad_logvar), terms


# ------------------------------------------------------------- evaluation


def ssim(a, b, window: int = 7, data_range: float | None = None) -> float:
    """Mean local SSIM over clipped ``window``-wide cubes (K1 = 0.01, K2 = 0.03)."""
    a, b = _same_dims(a, b)
    if min(a.shape) < window:
        raise VolumeError(f"volume {a.shape} smaller than SSIM window {window}")
    if data_range is None:
        data_range = float(max(a.max(), b.max()) - min(a.min(), b.min())) or 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    count = window_counts(a.shape, window)
    mu_a = box_sum(a, window) / count
    mu_b = box_sum(b, window) / count
    var_a = box_sum(a * a, window) / count - mu_a**2
    var_b = box_sum(b * b, window) / count - mu_b**2
    cov = box_sum(a * b, window) / count - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(np.mean(s))
