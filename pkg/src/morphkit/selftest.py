"""Invariant suite behind ``morphkit selftest``.

Each check draws its own seeded generator and returns ``(passed, detail)``.
Module functions are looked up at call time so a patched implementation is
what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import erf, fields, losses, swin3d, uncertainty, warp
from .gradcheck import directional_error
from .volume import make_rng


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_warp_identity(rng):
    img = rng.random((6, 6, 6))
    err = np.abs(warp.warp_volume(img, np.zeros((3, 6, 6, 6)))[0] - img).max()
    return err <= 1e-7, f"max |warp(img, 0) - img| = {err:.2e}"


def check_warp_vjp(rng):
    img, g = rng.random((5, 5, 5)), rng.standard_normal((5, 5, 5))
    u = rng.normal(0, 0.6, (3, 5, 5, 5))
    _, tape = warp.warp_volume(img, u)
    _, gu = warp.warp_vjp(tape, img, g)
    err = directional_error(lambda x: np.sum(g * warp.warp_volume(img, x)[0]), u, gu, rng, h=1e-6)
    return err <= 1e-4, f"rel err {err:.2e}"


def check_compose_translation(rng):
    a = np.broadcast_to(np.array([0.5, -0.25, 1.0])[:, None, None, None], (3, 8, 8, 8))
    b = np.broadcast_to(np.array([-0.75, 0.5, 0.25])[:, None, None, None], (3, 8, 8, 8))
    c = fields.compose(a, b)
    err = np.abs(c[:, 2:-2, 2:-2, 2:-2] - (a + b)[:, 2:-2, 2:-2, 2:-2]).max()
    return err <= 1e-12, f"interior error {err:.2e}"


def check_svf_diffeomorphic(rng):
    v = fields.smooth_velocity((16, 16, 16), rng, 3.0)
    u = fields.scaling_and_squaring(v, 7)
    back = fields.compose(u, fields.scaling_and_squaring(-v, 7))
    folded = fields.jacobian_report(u).folded_fraction
    resid = np.abs(back).max()
    return folded == 0.0 and resid <= 0.1, f"folded {folded}, inverse residual {resid:.3f}"


def check_svf_vjp(rng):
    v = rng.normal(0, 0.5, (3, 5, 5, 5))
    g = rng.standard_normal((3, 5, 5, 5))
    gv = fields.svf_vjp(v, 3, g)
    err = directional_error(lambda x: np.sum(g * fields.scaling_and_squaring(x, 3)), v, gv, rng, h=1e-6)
    return err <= 1e-3, f"rel err {err:.2e}"


def check_bspline_adjoint(rng):
    dims = (9, 7, 8)
    lat = fields.BsplineLattice(2, rng.standard_normal((3,) + fields.lattice_shape(dims, 2)))
    w = rng.standard_normal((3,) + dims)
    lhs = np.sum(fields.bspline_to_dense(lat, dims) * w)
    rhs = np.sum(lat.ctrl * fields.bspline_vjp(lat, w))
    const = fields.BsplineLattice(2, np.full_like(lat.ctrl, 1.5))
    pou = np.abs(fields.bspline_to_dense(const, dims) - 1.5).max()
    err = abs(lhs - rhs) / max(abs(lhs), 1e-12)
    return err <= 1e-6 and pou <= 1e-12, f"adjoint rel err {err:.2e}, partition-of-unity err {pou:.2e}"


def check_jacobian_affine(rng):
    grid = np.stack(np.meshgrid(*[np.arange(8.0)] * 3, indexing="ij"))
    det = fields.jacobian_report(0.5 * grid).det
    err = np.abs(det - 1.5**3).max()
    return err <= 1e-9, f"max |det - 1.5^3| = {err:.2e}"


def _loss_grad_check(fn, x, rng, tol, h=1e-6):
    _, g = fn(x)
    return directional_error(lambda y: fn(y)[0], x, g, rng, h=h) <= tol


def check_mse(rng):
    a, b = rng.random((5, 5, 5)), rng.random((5, 5, 5))
    ok = _loss_grad_check(lambda x: losses.mse(x, b), a, rng, 1e-5)
    return ok and losses.mse(a, a)[0] == 0.0, "value and gradient"


def check_lncc(rng):
    a, b = rng.random((6, 6, 6)), rng.random((6, 6, 6))
    ok = _loss_grad_check(lambda x: losses.lncc(x, b, 3), a, rng, 1e-3)
    # default window: the eps guard breaks invariance by ~eps / (window variance sum)
    base = losses.lncc(a, b)[0]
    inv = abs(losses.lncc(a, 2 * b + 3)[0] - base) / abs(base)
    return ok and inv <= 1e-5, f"affine invariance rel diff {inv:.2e}"


def check_diffusion(rng):
    u = rng.standard_normal((3, 5, 5, 5))
    ok = _loss_grad_check(losses.diffusion_reg, u, rng, 1e-5)
    zero = losses.diffusion_reg(np.ones((3, 5, 5, 5)))[0]
    return ok and zero == 0.0, "gradient and constant-field zero"


def check_bending(rng):
    u = rng.standard_normal((3, 5, 5, 5))
    ok = _loss_grad_check(losses.bending_energy, u, rng, 1e-4)
    grid = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"))
    A = rng.standard_normal((3, 3))
    affine = np.einsum("ij,jxyz->ixyz", A, grid) + 2.0
    zero = losses.bending_energy(affine)[0]
    return ok and zero <= 1e-18, f"affine bending energy {zero:.2e}"


def check_dice(rng):
    sf = (rng.random((2, 5, 5, 5)) > 0.5).astype(float)
    sm = rng.random((2, 5, 5, 5))
    ok = _loss_grad_check(lambda x: losses.dice_loss(sf, x), sm, rng, 1e-5)
    return ok and losses.dice_loss(sf, sf)[0] <= 1e-12, "gradient and identity"


def check_composite(rng):
    Im, If = rng.random((6, 6, 6)), rng.random((6, 6, 6))
    sf = (rng.random((1, 6, 6, 6)) > 0.5).astype(float)
    sm = (rng.random((1, 6, 6, 6)) > 0.5).astype(float)
    w = losses.LossWeights(lam=1.0, gamma=1.0, lncc_window=3)
    u = rng.normal(0, 0.5, (3, 6, 6, 6))
    ok = _loss_grad_check(lambda x: losses.composite_loss(If, Im, x, sf, sm, w, "lncc", "bending"), u, rng, 1e-3)
    return ok, "LNCC + bending + Dice gradient"


def check_precision_cross(rng):
    mu = rng.standard_normal((3, 5, 6, 7))
    a = losses.precision_quadratic(mu, 0.7)
    b = 0.7 * losses.diffusion_reg(mu)[0]
    err = abs(a - b) / abs(b)
    return err <= 1e-6, f"rel diff {err:.2e}"


def check_window_partition(rng):
    tokens = rng.standard_normal((4, 8, 12, 3))
    wins0, plan0 = swin3d.window_partition(tokens, (2, 4, 6), "none")
    wins1, plan1 = swin3d.window_partition(tokens, (2, 4, 6), "half")
    regions = len(np.unique(plan1.region))
    back = np.abs(swin3d.window_reverse(wins1, plan1) - tokens).max()
    ok = wins0.shape[0] == 8 and wins1.shape[0] == 8 and regions == 27 and back == 0.0
    return ok, f"windows {wins0.shape[0]}/{wins1.shape[0]}, shifted regions {regions}"


def check_attention_mask(rng):
    tokens = rng.standard_normal((4, 8, 12, 4))
    params = swin3d.SwinParams.init(4, 2, (2, 4, 6), rng, scale=0.5)
    wins, plan = swin3d.window_partition(tokens, (2, 4, 6), "half")
    _, _, attn = swin3d.window_attention(wins, params, plan, return_weights=True)
    rows = np.abs(attn.sum(-1) - 1.0).max()
    leak = attn[np.broadcast_to((plan.mask < 0)[:, None], attn.shape)].max()
    return rows <= 1e-6 and leak <= 1e-8, f"row-sum err {rows:.1e}, masked weight {leak:.1e}"


def check_swin_vjp(rng):
    net = swin3d.SwinNetParams.init(channels=8, heads=2, window=(2, 2, 2), patch=2, seed=int(rng.integers(1 << 30)),
                                    scale=0.4)
    x = rng.random((2, 8, 8, 8))
    u, tape = swin3d.swin_forward(net, x)
    g = rng.standard_normal(u.shape)
    gx, _ = swin3d.swin_vjp(tape, g)
    err = directional_error(lambda y: np.sum(g * swin3d.swin_forward(net, y)[0]), x, gx, rng, h=1e-6)
    return err <= 1e-3, f"rel err {err:.2e}"


def check_calibration_identity(rng):
    samples = rng.normal(0.5, 0.1, (25, 6, 6, 6))
    fixed = rng.random((6, 6, 6))
    e = uncertainty.McEnsemble(samples)
    err_map = uncertainty.calibrated_error(e, fixed)
    var = uncertainty.predictive_variance(e)
    gap = np.abs(err_map - (var + (e.mean - fixed) ** 2)).max()
    u_cal = uncertainty.uce(err_map, err_map).uce
    u_var = uncertainty.uce(var, err_map).uce
    return gap <= 1e-6 and u_cal == 0.0 and u_var > 0, f"identity gap {gap:.1e}, UCE {u_cal} vs {u_var:.3g}"


def check_erf(rng):
    pair = erf.probe_input((6, 6, 6), int(rng.integers(1 << 30)))
    net = erf.SwinNet(swin3d.SwinNetParams.init(seed=3, scale=0.3))
    a = erf.erf_probe(net, pair)
    b = erf.erf_finite_difference(net, pair)
    err = np.abs(a - b).max() / a.max()
    return err <= 1e-3, f"rel err {err:.2e}"


CHECKS = [
    ("warp identity", check_warp_identity),
    ("warp vjp", check_warp_vjp),
    ("compose translations", check_compose_translation),
    ("svf diffeomorphic + inverse", check_svf_diffeomorphic),
    ("svf vjp", check_svf_vjp),
    ("bspline adjoint", check_bspline_adjoint),
    ("jacobian affine", check_jacobian_affine),
    ("mse", check_mse),
    ("lncc", check_lncc),
    ("diffusion", check_diffusion),
    ("bending", check_bending),
    ("dice", check_dice),
    ("composite gradient", check_composite),
    ("mu^T Lambda mu cross-check", check_precision_cross),
    ("window partition (4x8x12 / 2x4x6)", check_window_partition),
    ("attention mask", check_attention_mask),
    ("swin vjp", check_swin_vjp),
    ("calibration identity", check_calibration_identity),
    ("erf vs finite differences", check_erf),
]


def run_selftest(seed: int = 0, checks=None) -> list[CheckResult]:
    results = []
    for i, (name, fn) in enumerate(checks or CHECKS):
        rng = make_rng(seed * 1000 + i)
        try:
            passed, detail = fn(rng)
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  status  detail", "-" * (width + 30)]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}    {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
