"""Command-line interface: ``morphkit <command> [options]``.

Commands write their data (volumes, CSV, JSON) plus PNG figures into
``--out``.  Settings resolve as defaults < ``--config`` TOML < explicit
flags, and the resolved settings are embedded in every report.  Wall time is
kept out of the reports (``timing.json``) so repeated runs with one seed give
byte-identical reports.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, fields, plotting, selftest, swin3d, uncertainty
from . import erf as erf_mod
from .losses import LossWeights
from .register import (
    DeformParam,
    NumericalError,
    OptimConfig,
    affine_register,
    affine_to_field,
    deform_register,
)
from .volume import (
    Volume,
    VolumeError,
    check_field,
    make_phantom,
    make_rng,
    read_stack,
    volume_read,
    volume_write,
    write_stack,
)
from .warp import warp_labels, warp_volume

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("morphkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text):
    parts = [int(p) for p in str(text).replace(",", " ").split()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 integers, got {text!r}")
    return tuple(parts)


def _floats(text):
    return tuple(float(p) for p in str(text).replace(",", " ").split())


# (flag, dest, type, default, help).  A type of None marks an on/off switch.
OPTIONS = {
    "phantom": [
        ("--kind", "kind", str, "sphere", "sphere, ellipsoid or two-blob"),
        ("--dims", "dims", _triple, (24, 24, 24), "grid size, one value or three"),
        ("--radius", "radius", float, None, "sphere / blob radius in voxels"),
        ("--radii", "radii", _floats, None, "ellipsoid radii, three values"),
        ("--separation", "separation", float, None, "two-blob centre distance"),
        ("--edge", "edge", float, 1.0, "soft edge width in voxels"),
        ("--noise", "noise", float, 0.0, "additive Gaussian noise std"),
        ("--name", "name", str, "phantom", "output file stem"),
    ],
    "register": [
        ("--moving", "moving", str, None, "moving volume path (phantom manifest is picked up for labels)"),
        ("--fixed", "fixed", str, None, "fixed volume path"),
        ("--param", "param", str, "svf", "dense, svf or bspline-svf"),
        ("--steps", "steps", int, 7, "scaling-and-squaring steps"),
        ("--spacing", "spacing", int, 2, "B-spline control-point spacing"),
        ("--sim", "sim", str, "lncc", "lncc or mse"),
        ("--reg", "reg", str, "bending", "diffusion or bending"),
        ("--lambda", "lam", float, 1.0, "regularization weight"),
        ("--gamma", "gamma", float, 1.0, "Dice weight (needs labels on both sides)"),
        ("--window", "window", int, 9, "LNCC window edge"),
        ("--iterations", "iterations", int, 300, "descent iterations per level"),
        ("--step", "step", float, 0.5, "initial step length in voxels"),
        ("--levels", "levels", int, 1, "1 or 2 pyramid levels"),
        ("--affine", "affine", None, False, "run an affine stage first"),
        ("--affine-iterations", "affine_iterations", int, 150, "affine descent iterations"),
    ],
    "uncertainty": [
        ("--moving", "moving", str, None, "moving volume path"),
        ("--fixed", "fixed", str, None, "fixed volume path"),
        ("--run", "run", str, None, "output directory of a register run"),
        ("--sampler", "sampler", str, "perturb", "perturb or dropout"),
        ("--samples", "samples", int, uncertainty.DEFAULT_SAMPLES, "Monte-Carlo sample count T"),
        ("--bins", "bins", int, uncertainty.DEFAULT_BINS, "calibration bins"),
        ("--sigma", "sigma", float, 0.5, "perturbation std in voxels"),
        ("--smooth", "smooth", float, 2.0, "perturbation smoothing radius in voxels"),
        ("--dropout", "dropout", float, swin3d.DROPOUT_P, "dropout probability"),
        ("--net-scale", "net_scale", float, 0.3, "init scale of the dropout network"),
    ],
    "erf": [
        ("--net", "net", str, "swin", "swin or conv"),
        ("--dims", "dims", _triple, (8, 8, 8), "probe grid size"),
        ("--tap", "tap", _triple, None, "output voxel (default: centre)"),
        ("--zero", "zero", None, False, "zero all network weights"),
        ("--channels", "channels", int, 8, "swin embedding channels"),
        ("--heads", "heads", int, 2, "swin attention heads"),
        ("--window", "window", _triple, (2, 2, 2), "swin window"),
        ("--patch", "patch", int, 2, "swin patch size"),
        ("--scale", "scale", float, None, "weight init scale"),
        ("--fd", "fd", None, False, "also compute the finite-difference map"),
    ],
    "selftest": [],
}
COMMON = [
    ("--seed", "seed", int, 0, "seed for all randomness"),
    ("--out", "out", str, "out", "output directory"),
    ("--threads", "threads", int, 1, "thread-count hint (recorded; kernels are single-threaded numpy)"),
]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="morphkit", description="Deformable registration numerics on synthetic 3D phantoms.")
    parser.add_argument("--version", action="version", version=f"morphkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "phantom": "write a synthetic phantom volume, label stack and manifest",
        "register": "affine and deformable registration of two volumes",
        "uncertainty": "Monte-Carlo ensemble, variance vs calibrated error, UCE",
        "erf": "effective receptive field of a network head",
        "selftest": "run the invariant suite",
    }
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="TOML file of settings (flags win)")
        for flag, dest, typ, _, text in opts + COMMON:
            if typ is None:
                p.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=text)
            elif typ in (_triple, _floats):
                p.add_argument(flag, dest=dest, nargs="+", default=None, help=text)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=None, help=text)
    return parser


def _coerce(dest, typ, value):
    if typ is None:
        if not isinstance(value, bool):
            raise UsageError(f"config key {dest!r} must be true or false")
        return value
    if typ in (_triple, _floats):
        value = " ".join(str(v) for v in value) if isinstance(value, list) else value
    try:
        return typ(value)
    except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"config key {dest!r}: {exc}") from None


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file, then explicit flags."""
    opts = OPTIONS[command] + COMMON
    settings = {dest: default for _, dest, _, default, _ in opts}
    if args.config:
        try:
            data = tomllib.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise VolumeError(f"cannot read config: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"bad config file: {exc}") from None
        section = data.pop(command, {})
        flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
        flat.update(section)
        types = {dest: typ for _, dest, typ, _, _ in opts}
        aliases = {flag.lstrip("-").replace("-", "_"): dest for flag, dest, _, _, _ in opts}
        for key, value in flat.items():
            dest = aliases.get(key, key)
            if dest not in types:
                raise UsageError(f"unknown config key {key!r} for {command}")
            settings[dest] = _coerce(dest, types[dest], value)
    for flag, dest, typ, _, _ in opts:
        value = getattr(args, dest, None)
        if value is None:
            continue
        if typ in (_triple, _floats):
            try:
                value = typ(" ".join(value))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{flag}: {exc}") from None
        settings[dest] = value
    return settings


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _embedded(settings) -> dict:
    # the output location is left out so reports compare byte-for-byte across directories
    return {k: v for k, v in settings.items() if k != "out"}


def _outdir(settings) -> Path:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_path(volume_path) -> Path:
    return Path(f"{volume_path}_manifest.json")


def _load_input(path):
    """Volume at ``path`` plus its label stack when a phantom manifest sits beside it."""
    if path is None:
        raise UsageError("input volume path is required")
    vol = volume_read(path).data.astype(np.float64)
    manifest = _manifest_path(path)
    labels = None
    if manifest.exists():
        meta = json.loads(manifest.read_text(encoding="utf-8"))
        labels = read_stack(f"{path}_labels", meta["labels"]).astype(np.float64)
    return vol, labels


# ---------------------------------------------------------------- commands


def cmd_phantom(s) -> dict:
    out = _outdir(s)
    params = {k: s[k] for k in ("radius", "radii", "separation") if s[k] is not None}
    params["edge"] = s["edge"]
    params["noise"] = s["noise"]
    rng = make_rng(s["seed"])
    image, labels = make_phantom(s["kind"], s["dims"], params, rng)
    stem = out / s["name"]
    volume_write(Volume(image), stem)
    names = [str(k) for k in range(labels.shape[0])]
    write_stack(labels, f"{stem}_labels", names)
    manifest = {
        "command": "phantom",
        "version": __version__,
        "seed": s["seed"],
        "config": _embedded(s),
        "volume": s["name"],
        "labels": names,
        "voxel_counts": [int(c) for c in labels.reshape(labels.shape[0], -1).sum(axis=1)],
    }
    _write_json(_manifest_path(stem), manifest)
    return manifest


def _loss_trace_csv(path, losses, best):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "best"])
        offset = len(losses) - len(best)
        for i, loss in enumerate(losses):
            b = best[i - offset] if i >= offset else ""
            w.writerow([i, repr(float(loss)), repr(float(b)) if b != "" else ""])


def cmd_register(s) -> dict:
    out = _outdir(s)
    Im, sm = _load_input(s["moving"])
    If, sf = _load_input(s["fixed"])
    if Im.shape != If.shape:
        raise VolumeError(f"moving {Im.shape} and fixed {If.shape} differ in shape")
    gamma = s["gamma"] if sf is not None and sm is not None else 0.0
    weights = LossWeights(lam=s["lam"], gamma=gamma, lncc_window=s["window"])
    cfg = OptimConfig(
        iterations=s["iterations"], step=s["step"], sim=s["sim"], reg=s["reg"],
        weights=weights, seed=s["seed"], levels=s["levels"],
    )
    if s["param"] not in ("dense", "svf", "bspline-svf"):
        raise UsageError(f"unknown parameterization {s['param']!r}")

    report = {"command": "register", "version": __version__, "seed": s["seed"], "config": _embedded(s)}
    u_aff = np.zeros((3,) + Im.shape)
    moving, labels_m = Im, sm
    if s["affine"]:
        a_cfg = OptimConfig(iterations=s["affine_iterations"], step=s["step"], sim=s["sim"],
                            weights=weights, seed=s["seed"])
        a, a_trace = affine_register(Im, If, a_cfg)
        u_aff = affine_to_field(a, Im.shape)
        moving = warp_volume(Im, u_aff)[0]
        labels_m = None if sm is None else warp_labels(sm, u_aff)
        report["affine"] = {"params": a.__dict__, "loss_trace": a_trace.losses, "best_trace": a_trace.best}

    param = DeformParam.zeros(s["param"], Im.shape, s["steps"], s["spacing"])
    param, u_def, rep = deform_register(moving, If, sf, labels_m, param, cfg)
    u = fields.compose(u_aff, u_def) if s["affine"] else u_def
    warped = warp_volume(Im, u)[0]
    jac = fields.jacobian_report(u)
    result = rep.as_dict()
    result.pop("config")
    result["folded_fraction"] = jac.folded_fraction
    result["folded_count"] = jac.folded_count
    result["det_min"] = float(jac.det.min())
    report["result"] = result

    volume_write(Volume(warped), out / "warped")
    write_stack(u, out / "disp", ["x", "y", "z"])
    if s["param"] != "dense":
        write_stack(param.velocity(Im.shape), out / "velocity", ["x", "y", "z"])
    if sm is not None:
        write_stack(warp_labels(sm, u), out / "warped_labels", [str(k) for k in range(sm.shape[0])])
    _loss_trace_csv(out / "loss_trace.csv", rep.loss_trace, rep.best_trace)
    _write_json(out / "report.json", report)
    plotting.plot_loss_trace(rep.loss_trace, rep.best_trace, out / "loss_trace.png")
    plotting.plot_registration(If, Im, warped, jac.det, out / "registration.png")
    return report


def _perturb_sampler(base_v, kind, steps, s):
    from scipy import ndimage

    dims = base_v.shape[1:]

    def sample(rng):
        noise = rng.standard_normal(base_v.shape)
        noise = np.stack([ndimage.gaussian_filter(c, s["smooth"], mode="nearest") for c in noise])
        peak = np.abs(noise).max()
        v = base_v + s["sigma"] * noise / (peak if peak > 0 else 1.0)
        return fields.scaling_and_squaring(v, steps) if kind != "dense" else check_field(v, dims)

    return sample


def _dropout_sampler(base_u, pair, s):
    net = swin3d.SwinNetParams.init(seed=s["seed"], scale=s["net_scale"])
    grid = swin3d.token_grid_shape(pair.shape[1:], net.patch)

    def sample(rng):
        drops = swin3d.sample_dropout(net, grid, s["dropout"], rng)
        return base_u + swin3d.swin_forward(net, pair, drops)[0]

    return sample


def cmd_uncertainty(s) -> dict:
    out = _outdir(s)
    Im, _ = _load_input(s["moving"])
    If, _ = _load_input(s["fixed"])
    if Im.shape != If.shape:
        raise VolumeError(f"moving {Im.shape} and fixed {If.shape} differ in shape")
    if s["samples"] < 2:
        raise VolumeError(f"need at least 2 Monte-Carlo samples, got {s['samples']}")
    if s["run"] is None:
        raise UsageError("--run (a register output directory) is required")
    run = Path(s["run"])
    run_report = json.loads((run / "report.json").read_text(encoding="utf-8"))
    kind = run_report["config"]["param"]
    steps = run_report["config"]["steps"]
    base_u = read_stack(run / "disp", ["x", "y", "z"]).astype(np.float64)

    if s["sampler"] == "perturb":
        if kind == "dense" or run_report["config"].get("affine"):
            base, kind = base_u, "dense"
        else:
            base = read_stack(run / "velocity", ["x", "y", "z"]).astype(np.float64)
        make_u = _perturb_sampler(base, kind, steps, s)
    elif s["sampler"] == "dropout":
        make_u = _dropout_sampler(base_u, np.stack([Im, If]), s)
    else:
        raise UsageError(f"unknown sampler {s['sampler']!r}")

    rng = make_rng(s["seed"])
    ens = uncertainty.mc_collect(lambda r: warp_volume(Im, make_u(r))[0], s["samples"], rng)
    var = uncertainty.predictive_variance(ens)
    err = uncertainty.calibrated_error(ens, If)
    observed = (ens.mean - If) ** 2
    tables = {
        "predictive_variance": uncertainty.uce(var, err, s["bins"]),
        "calibrated_error": uncertainty.uce(err, err, s["bins"]),
    }
    for name, table in tables.items():
        table.to_csv(out / f"calibration_{name}.csv", label=name)
    volume_write(Volume(var), out / "sigma_hat2")
    volume_write(Volume(err), out / "sigma2")
    volume_write(Volume(ens.mean), out / "mean_warped")
    gap = float(np.abs(err - (var + observed)).max())
    summary = {
        "command": "uncertainty",
        "version": __version__,
        "seed": s["seed"],
        "config": _embedded(s),
        "T": ens.T,
        "uce": {name: t.uce for name, t in tables.items()},
        "decomposition_max_gap": gap,
        "mean_sigma_hat2": float(var.mean()),
        "mean_sigma2": float(err.mean()),
    }
    _write_json(out / "uncertainty.json", summary)
    plotting.plot_calibration(tables, out / "calibration.png")
    return summary


def cmd_erf(s) -> dict:
    out = _outdir(s)
    dims = s["dims"]
    if s["net"] == "swin":
        scale = 0.02 if s["scale"] is None else s["scale"]
        net = erf_mod.SwinNet(swin3d.SwinNetParams.init(
            channels=s["channels"], heads=s["heads"], window=s["window"], patch=s["patch"],
            seed=s["seed"], scale=scale))
    elif s["net"] == "conv":
        scale = 0.2 if s["scale"] is None else s["scale"]
        net = erf_mod.LocalConvNet.init(seed=s["seed"], scale=scale)
    else:
        raise UsageError(f"unknown network {s['net']!r}")
    if s["zero"]:
        net = net.scaled(0.0)
    pair = erf_mod.probe_input(dims, s["seed"])
    tap = erf_mod.center_tap(dims) if s["tap"] is None else s["tap"]
    field = erf_mod.erf_probe(net, pair, tap)
    summary = {
        "command": "erf",
        "version": __version__,
        "seed": s["seed"],
        "config": _embedded(s),
        "tap": list(tap),
        "threshold": erf_mod.SUPPORT_THRESHOLD,
        "support_fraction": erf_mod.support_fraction(field),
        "max_influence": float(field.max()),
    }
    if s["fd"]:
        fd = erf_mod.erf_finite_difference(net, pair, tap)
        peak = max(float(field.max()), 1e-300)
        summary["fd_support_fraction"] = erf_mod.support_fraction(fd)
        summary["fd_max_rel_error"] = float(np.abs(field - fd).max() / peak)
    volume_write(Volume(field), out / "erf")
    _write_json(out / "erf.json", summary)
    plotting.plot_erf(field, out / "erf.png", tap)
    return summary


def cmd_selftest(s) -> dict:
    results = selftest.run_selftest(s["seed"])
    print(selftest.format_table(results))
    report = {
        "command": "selftest",
        "version": __version__,
        "seed": s["seed"],
        "results": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results],
        "passed": all(r.passed for r in results),
    }
    if s["out"]:
        _write_json(_outdir(s) / "selftest.json", report)
    return report


COMMANDS = {
    "phantom": cmd_phantom,
    "register": cmd_register,
    "uncertainty": cmd_uncertainty,
    "erf": cmd_erf,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args.command, args)
        started = time.perf_counter()
        report = COMMANDS[args.command](settings)
        elapsed = time.perf_counter() - started
        if args.command != "selftest" or settings["out"]:
            _write_json(Path(settings["out"]) / "timing.json", {"command": args.command, "wall_seconds": elapsed})
    except UsageError as exc:
        print(f"morphkit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"morphkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VolumeError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"morphkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.command == "selftest" and not report["passed"]:
        return EXIT_NUMERIC
    if args.command != "selftest":
        print(json.dumps(_summary_line(args.command, report), sort_keys=True))
    return EXIT_OK


def _summary_line(command, report):
    if command == "register":
        r = report["result"]
        return {"dice": r["dice"], "final_loss": r["final_loss"], "folded_fraction": r["folded_fraction"]}
    if command == "uncertainty":
        return report["uce"]
    if command == "erf":
        return {"support_fraction": report["support_fraction"]}
    return {"volume": report["volume"], "voxel_counts": report["voxel_counts"]}


if __name__ == "__main__":
    sys.exit(main())
