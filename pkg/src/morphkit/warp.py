"""Spatial transformer: resample a volume at ``p - u(p)``.

Sample coordinates are clamped to ``[0, dim - 1]`` per axis (border
replication), so trilinear weights form a partition of unity everywhere.
Images may carry leading channel axes, ``(..., H, W, L)``; every channel is
warped by the same field.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .volume import VolumeError, check_field, check_labels

MODES = ("trilinear", "nearest")


@dataclass(frozen=True)
class WarpTape:
    mode: str
    dims: tuple[int, int, int]
    coords: np.ndarray  # (3, H, W, L) clamped sample positions
    lo: np.ndarray  # (3, H, W, L) lower corner index
    hi: np.ndarray
    frac: np.ndarray  # (3, H, W, L) position within the cell
    active: np.ndarray  # (3, H, W, L) False where the coordinate was clamped

    def corner_weights(self):
        """Yield ``(flat_index, weight, dweight)`` per corner; ``dweight[d]`` is d weight / d coord_d."""
        f = self.frac
        one_minus = 1.0 - f
        for bits in product((0, 1), repeat=3):
            idx = [self.hi[d] if b else self.lo[d] for d, b in enumerate(bits)]
            w1 = [f[d] if b else one_minus[d] for d, b in enumerate(bits)]
            sign = [1.0 if b else -1.0 for b in bits]
            weight = w1[0] * w1[1] * w1[2]
            dweight = (
                sign[0] * w1[1] * w1[2],
                sign[1] * w1[0] * w1[2],
                sign[2] * w1[0] * w1[1],
            )
            flat = np.ravel_multi_index(idx, self.dims)
            yield flat, weight, dweight


def _identity_grid(dims):
    return np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"))


def make_tape(u: np.ndarray, mode: str = "trilinear") -> WarpTape:
    if mode not in MODES:
        raise VolumeError(f"unknown interpolation mode {mode!r}")
    u = check_field(u, name="displacement")
    dims = tuple(u.shape[1:])
    raw = _identity_grid(dims) - u
    upper = np.array(dims, dtype=np.float64)[:, None, None, None] - 1.0
    coords = np.clip(raw, 0.0, upper)
    active = (raw >= 0.0) & (raw <= upper)
    if mode == "nearest":
        lo = np.floor(coords + 0.5).astype(np.int64)
        lo = np.minimum(lo, upper.astype(np.int64))
        return WarpTape(mode, dims, coords, lo, lo, np.zeros_like(coords), active)
    top = np.maximum(upper - 1.0, 0.0).astype(np.int64)
    lo = np.minimum(np.floor(coords).astype(np.int64), top)
    hi = np.minimum(lo + 1, upper.astype(np.int64))
    frac = coords - lo
    return WarpTape(mode, dims, coords, lo, hi, frac, active)


def _flat_image(img, dims):
    img = np.asarray(img, dtype=np.float64)
    if tuple(img.shape[-3:]) != tuple(dims):
        raise VolumeError(f"image dims {img.shape[-3:]} do not match field dims {tuple(dims)}")
    lead = img.shape[:-3]
    return img.reshape(lead + (-1,)), lead


def apply_tape(tape: WarpTape, img) -> np.ndarray:
    flat, lead = _flat_image(img, tape.dims)
    if tape.mode == "nearest":
        idx = np.ravel_multi_index(tuple(tape.lo), tape.dims)
        return flat[..., idx]
    out = np.zeros(lead + tape.dims)
    for idx, weight, _ in tape.corner_weights():
        out += weight * flat[..., idx]
    return out


def warp_volume(img, u, mode: str = "trilinear"):
    """Return ``(img o phi, tape)`` with ``img o phi (p) = img(p - u(p))``."""
    tape = make_tape(u, mode)
    return apply_tape(tape, img), tape


def warp_labels(s, u) -> np.ndarray:
    """Warp every channel of a ``(K, H, W, L)`` label stack trilinearly."""
    s = check_labels(s)
    u = check_field(u, s.shape[1:], name="displacement")
    return np.clip(warp_volume(s, u)[0], 0.0, 1.0)


def warp_vjp(tape: WarpTape, img, grad_out):
    """Pull ``grad_out`` back through a trilinear warp.

    Returns ``(grad_img, grad_u)``.  ``grad_u`` carries the minus sign from
    sampling at ``p - u`` and is zero along axes where the sample coordinate
    was clamped.
    """
    if tape.mode != "trilinear":
        raise VolumeError("gradients require a trilinear tape; nearest sampling is inference-only")
    flat, lead = _flat_image(img, tape.dims)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != lead + tape.dims:
        raise VolumeError(f"grad_out shape {grad_out.shape} does not match image {lead + tape.dims}")
    n = int(np.prod(tape.dims))
    g_flat = grad_out.reshape((-1, n))
    img_rows = flat.reshape((-1, n))
    grad_img = np.zeros_like(img_rows)
    dcoord = np.zeros((3, n))
    for idx, weight, dweight in tape.corner_weights():
        idx = idx.reshape(-1)
        w = weight.reshape(-1)
        for c in range(g_flat.shape[0]):
            grad_img[c] += np.bincount(idx, weights=w * g_flat[c], minlength=n)
        g_dot_img = np.sum(g_flat * img_rows[:, idx], axis=0)
        for d in range(3):
            dcoord[d] += g_dot_img * dweight[d].reshape(-1)
    grad_u = -dcoord.reshape((3,) + tape.dims) * tape.active
    return grad_img.reshape(lead + tape.dims), grad_u
