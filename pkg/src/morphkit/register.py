"""Iterative registration: affine pre-alignment followed by deformable descent.

Deformable parameterizations:

* ``dense``        -- the displacement itself;
* ``svf``          -- a stationary velocity exponentiated by scaling and squaring;
* ``bspline-svf``  -- a control-point lattice expanded to a dense velocity,
  then exponentiated.

The optimizer is first-order descent with a max-norm step (the largest
per-voxel update equals the current step length, in voxels), step halving on
rejection and best-seen bookkeeping, so the best-loss trace never increases.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .fields import (
    DEFAULT_STEPS,
    BsplineLattice,
    bspline_to_dense,
    bspline_vjp,
    jacobian_report,
    scaling_and_squaring,
    svf_vjp,
)
from .losses import LossWeights, composite_loss, dice_scores, lncc, mse, ssim
from .volume import VolumeError, check_field
from .warp import warp_labels, warp_vjp, warp_volume

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """The objective became non-finite during optimization."""


# ------------------------------------------------------------------ affine

AFFINE_NAMES = ("rx", "ry", "rz", "tx", "ty", "tz", "sx", "sy", "sz", "hxy", "hxz", "hyz")


@dataclass
class AffineParams:
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    sx: float = 1.0
    sy: float = 1.0
    sz: float = 1.0
    hxy: float = 0.0
    hxz: float = 0.0
    hyz: float = 0.0

    def __post_init__(self):
        if min(self.sx, self.sy, self.sz) <= 0:
            raise VolumeError("affine scales must be positive")

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in AFFINE_NAMES], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> AffineParams:
        return cls(**{n: float(x) for n, x in zip(AFFINE_NAMES, v)})


def _rot(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    r = np.eye(3)
    r[i, i], r[j, j] = c, c
    if axis == 1:
        r[i, j], r[j, i] = s, -s
    else:
        r[i, j], r[j, i] = -s, s
    return r


def _drot(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    d = np.zeros((3, 3))
    d[i, i], d[j, j] = -s, -s
    if axis == 1:
        d[i, j], d[j, i] = c, -c
    else:
        d[i, j], d[j, i] = -c, c
    return d


def _factors(a: AffineParams):
    rx, ry, rz = _rot(0, a.rx), _rot(1, a.ry), _rot(2, a.rz)
    shear = np.array([[1.0, a.hxy, a.hxz], [0.0, 1.0, a.hyz], [0.0, 0.0, 1.0]])
    scale = np.diag([a.sx, a.sy, a.sz])
    return rz, ry, rx, shear, scale


def affine_matrix(a: AffineParams) -> np.ndarray:
    """``Rz @ Ry @ Rx @ Shear @ Scale``."""
    rz, ry, rx, shear, scale = _factors(a)
    return rz @ ry @ rx @ shear @ scale


def affine_matrix_jacobian(a: AffineParams) -> np.ndarray:
    """``dA / d theta`` for the 12 parameters, shape ``(12, 3, 3)`` (zero for translations)."""
    rz, ry, rx, shear, scale = _factors(a)
    out = np.zeros((12, 3, 3))
    out[0] = rz @ ry @ _drot(0, a.rx) @ shear @ scale
    out[1] = rz @ _drot(1, a.ry) @ rx @ shear @ scale
    out[2] = _drot(2, a.rz) @ ry @ rx @ shear @ scale
    left = rz @ ry @ rx
    for d in range(3):
        e = np.zeros((3, 3))
        e[d, d] = 1.0
        out[6 + d] = left @ shear @ e
    for k, (i, j) in enumerate([(0, 1), (0, 2), (1, 2)]):
        e = np.zeros((3, 3))
        e[i, j] = 1.0
        out[9 + k] = left @ e @ scale
    return out


def _centered_grid(dims):
    grid = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"))
    center = (np.array(dims, dtype=np.float64) - 1.0) / 2.0
    return grid - center[:, None, None, None]


def affine_to_field(a: AffineParams, dims) -> np.ndarray:
    """``u(p) = A (p - c) + c + t - p`` about the volume centre ``c``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeError(f"bad dims {dims}")
    rel = _centered_grid(dims)
    A = affine_matrix(a)
    t = np.array([a.tx, a.ty, a.tz])
    return np.einsum("ij,jxyz->ixyz", A - np.eye(3), rel) + t[:, None, None, None]


def affine_field_vjp(a: AffineParams, grad_u) -> np.ndarray:
    """Gradient over the 12 parameters given ``dL/du``."""
    grad_u = check_field(grad_u, name="grad_u")
    rel = _centered_grid(grad_u.shape[1:])
    moment = np.einsum("ixyz,jxyz->ij", grad_u, rel)
    g = np.einsum("kij,ij->k", affine_matrix_jacobian(a), moment)
    g[3:6] = grad_u.reshape(3, -1).sum(axis=1)
    return g


@dataclass
class OptimConfig:
    iterations: int = 200
    step: float = 0.5
    sim: str = "lncc"
    reg: str = "bending"
    weights: LossWeights = field(default_factory=lambda: LossWeights(lam=1.0, gamma=1.0))
    seed: int = 0
    tol: float = 1e-4
    levels: int = 1
    grow: float = 1.2

    def __post_init__(self):
        if self.iterations < 1:
            raise VolumeError("iterations must be >= 1")
        if self.step <= 0:
            raise VolumeError("step must be positive")
        if self.levels not in (1, 2):
            raise VolumeError("levels must be 1 or 2")

    def as_dict(self) -> dict:
        return asdict(self)


def _similarity(warped, fixed, sim, window):
    if sim == "mse":
        return mse(warped, fixed)
    value, grad = lncc(warped, fixed, window, reduce="mean")
    return -value, -grad


def _check_finite(value, what):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what} loss")


@dataclass
class Trace:
    losses: list = field(default_factory=list)
    best: list = field(default_factory=list)
    accepted: int = 0


def _descend(x0, evaluate, cfg: OptimConfig, precondition=None):
    """Max-norm descent with backtracking.  ``evaluate(x) -> (loss, grad)``."""
    x = x0
    loss, grad = evaluate(x)
    _check_finite(loss, "initial")
    trace = Trace([loss], [loss])
    best_x, best = x, loss
    step = cfg.step
    for _ in range(cfg.iterations):
        direction = grad if precondition is None else precondition(grad)
        scale = float(np.max(np.abs(direction)))
        if scale == 0.0 or step < cfg.tol:
            break
        cand = best_x - step * direction / scale
        c_loss, c_grad = evaluate(cand)
        _check_finite(c_loss, "candidate")
        trace.losses.append(c_loss)
        if c_loss < best:
            best_x, best, grad = cand, c_loss, c_grad
            step *= cfg.grow
            trace.accepted += 1
        else:
            step *= 0.5
        trace.best.append(best)
    return best_x, best, trace


def affine_register(Im, If, cfg: OptimConfig | None = None, init: AffineParams | None = None):
    """Fit the 12 affine parameters by descent on the image similarity.

    Returns ``(params, trace)``; ``trace.best`` is non-increasing.
    """
    cfg = cfg or OptimConfig(sim="mse")
    Im = np.asarray(Im, dtype=np.float64)
    If = np.asarray(If, dtype=np.float64)
    if Im.shape != If.shape:
        raise VolumeError(f"moving {Im.shape} and fixed {If.shape} differ in shape")
    radius = max(np.mean(Im.shape) / 2.0, 1.0)
    # one unit of rotation/scale/shear moves boundary voxels by ~radius
    unit = np.array([1 / radius] * 3 + [1.0] * 3 + [1 / radius] * 6)

    def evaluate(theta):
        try:
            a = AffineParams.from_vector(theta)
        except VolumeError:
            return np.inf, np.zeros_like(theta)
        u = affine_to_field(a, Im.shape)
        warped, tape = warp_volume(Im, u)
        value, g_img = _similarity(warped, If, cfg.sim, cfg.weights.lncc_window)
        _, g_u = warp_vjp(tape, Im, g_img)
        return value, affine_field_vjp(a, g_u)

    x0 = (init or AffineParams()).vector()
    best, _, trace = _descend_affine(x0, evaluate, cfg, unit)
    return AffineParams.from_vector(best), trace


def _descend_affine(x0, evaluate, cfg, unit):
    # rescale to unit-free coordinates so one max-norm step is ~step voxels of motion
    wrapped = lambda z: _scaled_eval(evaluate, z, unit)
    z, loss, trace = _descend(x0 / unit, wrapped, cfg)
    return z * unit, loss, trace


def _scaled_eval(evaluate, z, unit):
    value, g = evaluate(z * unit)
    return value, g * unit


# ------------------------------------------------------------- deformable

KINDS = ("dense", "svf", "bspline-svf")


@dataclass
class DeformParam:
    kind: str
    values: np.ndarray
    steps: int = DEFAULT_STEPS
    spacing: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise VolumeError(f"unknown parameterization {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)

    @classmethod
    def zeros(cls, kind: str, dims, steps: int = DEFAULT_STEPS, spacing: int = 2) -> DeformParam:
        if kind == "bspline-svf":
            values = BsplineLattice.zeros(dims, spacing).ctrl
        else:
            values = np.zeros((3,) + tuple(dims))
        return cls(kind, values, steps, spacing)

    def displacement(self, dims, return_tape: bool = False):
        tape = None
        if self.kind == "dense":
            u = check_field(self.values, dims, name="displacement")
        else:
            v = self.velocity(dims)
            u, tape = scaling_and_squaring(v, self.steps, return_tape=True)
        return (u, tape) if return_tape else u

    def velocity(self, dims):
        if self.kind == "bspline-svf":
            return bspline_to_dense(BsplineLattice(self.spacing, self.values), dims)
        return self.values

    def pullback(self, dims, grad_u, tape):
        """Chain ``dL/du`` back to the parameter values."""
        if self.kind == "dense":
            return grad_u
        g_v = svf_vjp(None, self.steps, grad_u, tape)
        if self.kind == "bspline-svf":
            return bspline_vjp(BsplineLattice(self.spacing, self.values), g_v)
        return g_v


def _downsample(x, factor=0.5):
    x = np.asarray(x, dtype=np.float64)
    lead = x.ndim - 3
    return ndimage.zoom(x, (1,) * lead + (factor,) * 3, order=1, mode="nearest")


def _upsample_param(p: DeformParam, coarse_dims, fine_dims) -> DeformParam:
    if p.kind == "bspline-svf":
        # lattice refinement is not attempted; restart the fine lattice from the coarse dense velocity
        v = p.velocity(coarse_dims)
        v_fine = _resize_field(v, fine_dims)
        lat = BsplineLattice.zeros(fine_dims, p.spacing)
        ctrl = _fit_lattice(lat, v_fine)
        return DeformParam(p.kind, ctrl, p.steps, p.spacing)
    return DeformParam(p.kind, _resize_field(p.values, fine_dims), p.steps, p.spacing)


def _resize_field(u, dims):
    factors = [f / c for f, c in zip(dims, u.shape[1:])]
    out = np.stack([ndimage.zoom(c, factors, order=1, mode="nearest") for c in u])
    return out * np.array(factors)[:, None, None, None]


def _fit_lattice(lat: BsplineLattice, dense, iters: int = 50):
    """Least-squares control points reproducing ``dense`` (few gradient steps)."""
    ctrl = np.zeros_like(lat.ctrl)
    for _ in range(iters):
        resid = bspline_to_dense(BsplineLattice(lat.spacing, ctrl), dense.shape[1:]) - dense
        ctrl -= 0.5 * bspline_vjp(lat, resid)
    return ctrl


@dataclass
class RegistrationReport:
    kind: str
    loss_trace: list
    best_trace: list
    final_loss: float
    dice: list
    folded_fraction: float
    ssim: float
    iterations: int
    accepted: int
    config: dict

    def as_dict(self) -> dict:
        return asdict(self)


def deform_register(Im, If, sf=None, sm=None, param: DeformParam | None = None, cfg: OptimConfig | None = None):
    """Deformable registration; returns ``(param, displacement, report)``."""
    cfg = cfg or OptimConfig()
    Im = np.asarray(Im, dtype=np.float64)
    If = np.asarray(If, dtype=np.float64)
    if Im.shape != If.shape:
        raise VolumeError(f"moving {Im.shape} and fixed {If.shape} differ in shape")
    dims = Im.shape
    param = param or DeformParam.zeros("svf", dims)

    levels = [(Im, If, sf, sm)]
    if cfg.levels == 2:
        levels.insert(0, tuple(None if x is None else _downsample(x) for x in (Im, If, sf, sm)))
        coarse_dims = levels[0][0].shape
        param = DeformParam.zeros(param.kind, coarse_dims, param.steps, param.spacing)

    trace = Trace()
    for li, (im, fx, s_f, s_m) in enumerate(levels):
        if li > 0:
            param = _upsample_param(param, levels[li - 1][0].shape, im.shape)
        level_dims = im.shape
        current = param

        def evaluate(values, current=current, im=im, fx=fx, s_f=s_f, s_m=s_m, level_dims=level_dims):
            p = DeformParam(current.kind, values, current.steps, current.spacing)
            u, tape = p.displacement(level_dims, return_tape=True)
            loss, g_u = composite_loss(fx, im, u, s_f, s_m, cfg.weights, cfg.sim, cfg.reg)
            return loss, p.pullback(level_dims, g_u, tape)

        values, best, level_trace = _descend(param.values, evaluate, cfg)
        param = DeformParam(param.kind, values, param.steps, param.spacing)
        trace.losses += level_trace.losses
        trace.best += level_trace.best if li == len(levels) - 1 else []
        trace.accepted += level_trace.accepted
        log.debug("level %d: loss %.6g after %d accepted steps", li, best, level_trace.accepted)

    u = param.displacement(dims)
    final_loss = composite_loss(If, Im, u, sf, sm, cfg.weights, cfg.sim, cfg.reg)[0]
    warped = warp_volume(Im, u)[0]
    dice = dice_scores(sf, warp_labels(sm, u)) if sf is not None and sm is not None else []
    report = RegistrationReport(
        kind=param.kind,
        loss_trace=[float(x) for x in trace.losses],
        best_trace=[float(x) for x in trace.best],
        final_loss=float(final_loss),
        dice=dice,
        folded_fraction=jacobian_report(u).folded_fraction,
        ssim=ssim(warped, If) if min(dims) >= 7 else float("nan"),
        iterations=len(trace.losses) - 1,
        accepted=trace.accepted,
        config=cfg.as_dict(),
    )
    return param, u, report
