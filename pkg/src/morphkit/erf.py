"""Effective receptive field probe.

A unit cotangent is placed on every displacement component at one output
voxel (the tap) and pulled back to the moving-image input; the magnitude of
the result is the ERF.  :class:`LocalConvNet` is a two-layer 3x3x3
convolutional reference whose receptive field is strictly local.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import swin3d
from .volume import VolumeError, make_rng

SUPPORT_THRESHOLD = 1e-8
_OFFSETS = list(product(range(3), repeat=3))


def conv3d(x, w, b):
    """'Same' 3x3x3 convolution (cross-correlation) with zero padding.

    ``x`` is ``(Cin, H, W, L)``, ``w`` is ``(Cout, Cin, 3, 3, 3)``.
    """
    _, h, wd, l = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    y = np.zeros((w.shape[0], h, wd, l))
    for i, j, k in _OFFSETS:
        y += np.einsum("oc,cxyz->oxyz", w[:, :, i, j, k], xp[:, i : i + h, j : j + wd, k : k + l])
    return y + b[:, None, None, None]


def conv3d_vjp(x, w, gy):
    _, h, wd, l = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i, j, k in _OFFSETS:
        window = xp[:, i : i + h, j : j + wd, k : k + l]
        gw[:, :, i, j, k] = np.einsum("oxyz,cxyz->oc", gy, window)
        gxp[:, i : i + h, j : j + wd, k : k + l] += np.einsum("oc,oxyz->cxyz", w[:, :, i, j, k], gy)
    return gxp[:, 1:-1, 1:-1, 1:-1], gw, gy.sum(axis=(1, 2, 3))


@dataclass
class LocalConvNet:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, hidden: int = 8, seed: int = 0, scale: float = 0.2, in_channels: int = 2):
        rng = make_rng(seed)
        return cls(
            rng.uniform(-scale, scale, (hidden, in_channels, 3, 3, 3)),
            rng.uniform(-scale, scale, hidden),
            rng.uniform(-scale, scale, (3, hidden, 3, 3, 3)),
            rng.uniform(-scale, scale, 3),
        )

    def forward(self, pair):
        pair = np.asarray(pair, dtype=np.float64)
        h = conv3d(pair, self.w1, self.b1)
        a = swin3d.leaky_relu(h)
        return conv3d(a, self.w2, self.b2), (pair, h, a)

    def vjp(self, tape, grad_u):
        pair, h, a = tape
        ga, _, _ = conv3d_vjp(a, self.w2, grad_u)
        gh = swin3d.leaky_relu_vjp(h, ga)
        gx, _, _ = conv3d_vjp(pair, self.w1, gh)
        return gx

    def scaled(self, factor: float) -> LocalConvNet:
        return LocalConvNet(self.w1 * factor, self.b1 * factor, self.w2 * factor, self.b2 * factor)


@dataclass
class SwinNet:
    """Adapter giving a :class:`swin3d.SwinNetParams` stack the forward/vjp interface."""

    params: swin3d.SwinNetParams

    def forward(self, pair):
        return swin3d.swin_forward(self.params, pair)

    def vjp(self, tape, grad_u):
        return swin3d.swin_vjp(tape, grad_u)[0]

    def scaled(self, factor: float) -> SwinNet:
        return SwinNet(self.params.scaled(factor))


def _check_tap(tap, dims):
    tap = tuple(int(t) for t in tap)
    if len(tap) != 3 or any(not 0 <= t < d for t, d in zip(tap, dims)):
        raise VolumeError(f"tap {tap} outside volume {tuple(dims)}")
    return tap


def center_tap(dims):
    return tuple(int(d) // 2 for d in dims)


def probe_input(dims, seed: int = 0):
    """Deterministic random (moving, fixed) pair in [0, 1] used as the probe point."""
    return make_rng(seed).random((2,) + tuple(dims))


def erf_probe(net, pair, tap=None) -> np.ndarray:
    """``|d sum_c u_c(tap) / d I_m|`` as a volume the shape of the moving image."""
    pair = np.asarray(pair, dtype=np.float64)
    dims = pair.shape[1:]
    tap = _check_tap(center_tap(dims) if tap is None else tap, dims)
    u, tape = net.forward(pair)
    seed = np.zeros_like(u)
    seed[(slice(None),) + tap] = 1.0
    return np.abs(net.vjp(tape, seed)[0])


def erf_finite_difference(net, pair, tap=None, h: float = 1e-5) -> np.ndarray:
    """The same map by central differences, two forward passes per moving voxel."""
    pair = np.asarray(pair, dtype=np.float64)
    dims = pair.shape[1:]
    tap = _check_tap(center_tap(dims) if tap is None else tap, dims)
    out = np.zeros(dims)
    for idx in np.ndindex(*dims):
        plus, minus = pair.copy(), pair.copy()
        plus[(0,) + idx] += h
        minus[(0,) + idx] -= h
        fp = net.forward(plus)[0][(slice(None),) + tap].sum()
        fm = net.forward(minus)[0][(slice(None),) + tap].sum()
        out[idx] = abs(fp - fm) / (2 * h)
    return out


def support_fraction(erf, threshold: float = SUPPORT_THRESHOLD) -> float:
    """Fraction of voxels whose influence exceeds ``threshold`` times the maximum."""
    erf = np.asarray(erf, dtype=np.float64)
    peak = float(erf.max())
    if peak <= 0.0:
        return 0.0
    return float(np.count_nonzero(erf > threshold * peak)) / erf.size
