"""Deformable image registration numerics with hand-written gradients.

Modules by concern:

* :mod:`morphkit.volume`      volumes, raw I/O, phantoms
* :mod:`morphkit.warp`        trilinear warping and its adjoint
* :mod:`morphkit.fields`      composition, scaling and squaring, B-splines, Jacobians
* :mod:`morphkit.losses`      similarity, regularization, Dice, variational loss
* :mod:`morphkit.swin3d`      3D shifted-window attention with reverse mode
* :mod:`morphkit.uncertainty` Monte-Carlo ensembles and calibration
* :mod:`morphkit.register`    affine and deformable descent
* :mod:`morphkit.erf`         effective receptive field probe
"""

__version__ = "0.1.0"

from .fields import compose, jacobian_report, scaling_and_squaring
from .volume import (
    Volume,
    VolumeError,
    make_phantom,
    make_rng,
    volume_read,
    volume_write,
)
from .warp import warp_vjp, warp_volume

__all__ = [
    "Volume",
    "VolumeError",
    "compose",
    "jacobian_report",
    "make_phantom",
    "make_rng",
    "scaling_and_squaring",
    "volume_read",
    "volume_write",
    "warp_vjp",
    "warp_volume",
]
