"""Deformation-field algebra.

Sign convention: a displacement ``u`` samples the moving image at
``p - u(p)``.  Composition, exponentiation and their adjoints all follow
from that single rule; see :func:`compose`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import VolumeError, check_field
from .warp import WarpTape, apply_tape, make_tape, warp_vjp

DEFAULT_STEPS = 7
MAX_STEPS = 12


def compose(a, b, return_tape: bool = False):
    """Displacement of ``phi_a o phi_b``: ``u(p) = u_b(p) + u_a(p - u_b(p))``.

    Warping with the result equals warping with ``a`` and then with ``b``.
    """
    b = check_field(b, name="b")
    a = check_field(a, b.shape[1:], name="a")
    tape = make_tape(b)
    out = b + apply_tape(tape, a)
    return (out, tape) if return_tape else out


def compose_vjp(tape: WarpTape, a, grad_out):
    """Adjoint of :func:`compose`; returns ``(grad_a, grad_b)``."""
    grad_a, grad_coords = warp_vjp(tape, a, grad_out)
    return grad_a, grad_out + grad_coords


@dataclass
class SvfTape:
    steps: int
    fields: list  # u_0 = v / 2**T, ..., u_{T-1}; inputs of each squaring
    tapes: list


def _check_steps(steps):
    if not (isinstance(steps, (int, np.integer)) and 1 <= steps <= MAX_STEPS):
        raise VolumeError(f"squaring steps must be an integer in [1, {MAX_STEPS}], got {steps!r}")
    return int(steps)


def scaling_and_squaring(v, steps: int = DEFAULT_STEPS, return_tape: bool = False):
    """Group exponential of a stationary velocity field.

    Starts from ``v / 2**steps`` and composes the field with itself
    ``steps`` times.
    """
    steps = _check_steps(steps)
    v = check_field(v, name="velocity")
    u = v / 2.0**steps
    fields, tapes = [], []
    for _ in range(steps):
        fields.append(u)
        u, tape = compose(u, u, return_tape=True)
        tapes.append(tape)
    return (u, SvfTape(steps, fields, tapes)) if return_tape else u


def svf_vjp(v, steps: int, grad_u, tape: SvfTape | None = None):
    """Gradient of a loss with respect to the velocity, given its gradient w.r.t. ``exp(v)``."""
    steps = _check_steps(steps)
    if tape is None:
        _, tape = scaling_and_squaring(v, steps, return_tape=True)
    elif tape.steps != steps:
        raise VolumeError(f"tape recorded {tape.steps} squaring steps, asked for {steps}")
    g = check_field(grad_u, name="grad_u")
    for u, t in zip(reversed(tape.fields), reversed(tape.tapes)):
        grad_a, grad_b = compose_vjp(t, u, g)
        g = grad_a + grad_b
    return g / 2.0**steps


# ---------------------------------------------------------------- B-splines


def cubic_bspline(x):
    """Uniform cubic B-spline kernel, support ``(-2, 2)``."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    inner = x < 1.0
    outer = (x >= 1.0) & (x < 2.0)
    out[inner] = 2.0 / 3.0 - x[inner] ** 2 + 0.5 * x[inner] ** 3
    out[outer] = (2.0 - x[outer]) ** 3 / 6.0
    return out


def _spacing3(spacing):
    sp = tuple(int(s) for s in np.broadcast_to(spacing, (3,)))
    if min(sp) < 1:
        raise VolumeError(f"control-point spacing must be >= 1 voxel, got {sp}")
    return sp


def lattice_shape(dims, spacing) -> tuple[int, int, int]:
    """Control points per axis: one margin point before the image, enough after it."""
    sp = _spacing3(spacing)
    return tuple((int(d) - 1) // s + 4 for d, s in zip(dims, sp))


@dataclass
class BsplineLattice:
    spacing: tuple[int, int, int]
    ctrl: np.ndarray  # (3, nx, ny, nz); control point c sits at voxel (c - 1) * spacing

    def __post_init__(self):
        self.spacing = _spacing3(self.spacing)
        self.ctrl = np.asarray(self.ctrl, dtype=np.float64)
        if self.ctrl.ndim != 4 or self.ctrl.shape[0] != 3:
            raise VolumeError(f"control displacements must be (3, nx, ny, nz), got {self.ctrl.shape}")

    @classmethod
    def zeros(cls, dims, spacing):
        return cls(spacing, np.zeros((3,) + lattice_shape(dims, spacing)))


def basis_matrix(dim: int, spacing: int, n_ctrl: int) -> np.ndarray:
    p = np.arange(dim, dtype=np.float64)[:, None]
    knots = (np.arange(n_ctrl, dtype=np.float64)[None, :] - 1.0) * spacing
    return cubic_bspline((p - knots) / spacing)


def _matrices(lat: BsplineLattice, dims):
    need = lattice_shape(dims, lat.spacing)
    have = lat.ctrl.shape[1:]
    if any(h < n for h, n in zip(have, need)):
        raise VolumeError(f"lattice {have} does not cover dims {tuple(dims)} (needs {need})")
    return [basis_matrix(d, s, n) for d, s, n in zip(dims, lat.spacing, have)]


def bspline_to_dense(lat: BsplineLattice, dims) -> np.ndarray:
    bx, by, bz = _matrices(lat, dims)
    return np.einsum("ia,jb,kc,dabc->dijk", bx, by, bz, lat.ctrl, optimize=True)


def bspline_vjp(lat: BsplineLattice, grad_dense) -> np.ndarray:
    """Transpose of :func:`bspline_to_dense` applied to ``grad_dense``."""
    grad_dense = check_field(grad_dense, name="grad_dense")
    bx, by, bz = _matrices(lat, grad_dense.shape[1:])
    return np.einsum("ia,jb,kc,dijk->dabc", bx, by, bz, grad_dense, optimize=True)


# ----------------------------------------------------------------- Jacobian


@dataclass(frozen=True)
class JacobianReport:
    det: np.ndarray
    folded_fraction: float

    @property
    def folded_count(self) -> int:
        return int(np.count_nonzero(self.det <= 0))


def spatial_gradient(u) -> np.ndarray:
    """``g[i, j] = d u_i / d x_j`` by forward differences, backward on the far face."""
    u = np.asarray(u, dtype=np.float64)
    grads = []
    for axis in range(1, 4):
        if u.shape[axis] < 2:
            raise VolumeError("Jacobian needs at least 2 voxels per axis")
        d = np.diff(u, axis=axis)
        last = np.take(d, [-1], axis=axis)
        grads.append(np.concatenate([d, last], axis=axis))
    return np.stack(grads, axis=1)


JACOBIAN_CONVENTIONS = ("additive", "sampling")


def jacobian_report(u, convention: str = "additive") -> JacobianReport:
    """Per-voxel Jacobian determinant and the fraction of voxels with ``det <= 0``.

    ``"additive"`` treats the deformation as ``p + u(p)`` and evaluates
    ``det(I + grad u)``.  ``"sampling"`` evaluates ``det(I - grad u)``, the
    Jacobian of the map ``p - u(p)`` at which :func:`warp_volume` samples.
    """
    if convention not in JACOBIAN_CONVENTIONS:
        raise VolumeError(f"unknown Jacobian convention {convention!r}")
    u = check_field(u, name="displacement")
    g = spatial_gradient(u)
    if convention == "sampling":
        g = -g
    jac = np.moveaxis(g, (0, 1), (-2, -1)) + np.eye(3)
    det = np.linalg.det(jac)
    return JacobianReport(det, float(np.count_nonzero(det <= 0)) / det.size)


def smooth_velocity(dims, rng, amp: float = 3.0) -> np.ndarray:
    """Random smooth stationary velocity field with ``max |v| = amp``.

    A separable half-sine bump that vanishes on every boundary face, pointing
    in a random direction.  Used as the reference family for diffeomorphism
    checks: it is as smooth as a field of this amplitude can be on the grid,
    so trilinear resampling error stays small.
    """
    bump = np.ones(tuple(dims))
    for axis, n in enumerate(dims):
        shape = [1, 1, 1]
        shape[axis] = n
        bump = bump * np.sin(np.pi * np.arange(n) / (n - 1)).reshape(shape)
    d = rng.standard_normal(3)
    return amp * (d / np.abs(d).max())[:, None, None, None] * (bump / bump.max())
