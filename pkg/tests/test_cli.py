import json

import numpy as np
import pytest

from morphkit import cli, losses
from morphkit.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from morphkit.volume import make_phantom, read_stack, volume_read


def run(*argv):
    return main([str(a) for a in argv])


def report_files(d):
    """Every output except the wall-clock record, as bytes."""
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "timing.json"}


@pytest.fixture(scope="module")
def phantoms(tmp_path_factory):
    d = tmp_path_factory.mktemp("phantoms")
    assert run("phantom", "--kind", "sphere", "--dims", 16, "--name", "fixed", "--out", d) == EXIT_OK
    assert run("phantom", "--kind", "ellipsoid", "--dims", 16, "--name", "moving", "--out", d) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def reg_run(phantoms, tmp_path_factory):
    out = tmp_path_factory.mktemp("reg")
    code = run("register", "--moving", phantoms / "moving", "--fixed", phantoms / "fixed",
               "--iterations", 30, "--out", out)
    assert code == EXIT_OK
    return out


class TestPhantom:
    def test_outputs_and_counts(self, phantoms, capsys):
        vol = volume_read(phantoms / "fixed")
        manifest = json.loads((phantoms / "fixed_manifest.json").read_text())
        labels = read_stack(phantoms / "fixed_labels", manifest["labels"])
        image, want = make_phantom("sphere", (16, 16, 16))
        assert np.array_equal(vol.data, image.astype(np.float32))
        assert manifest["voxel_counts"] == [int(want[0].sum())] == [int(labels[0].sum())]
        assert manifest["config"]["dims"] == [16, 16, 16] and "out" not in manifest["config"]

    def test_sphere_count_oracle(self, tmp_path):
        assert run("phantom", "--dims", 12, "--radius", 3, "--out", tmp_path) == EXIT_OK
        counts = json.loads((tmp_path / "phantom_manifest.json").read_text())["voxel_counts"]
        c = 5.5
        brute = sum((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2 <= 9 for x in range(12) for y in range(12)
                    for z in range(12))
        assert counts == [brute]


class TestRegister:
    def test_outputs(self, reg_run):
        names = {p.name for p in reg_run.iterdir()}
        for want in ("warped.json", "disp_x.raw", "velocity_z.json", "warped_labels_0.raw", "loss_trace.csv",
                     "report.json", "loss_trace.png", "registration.png", "timing.json"):
            assert want in names
        report = json.loads((reg_run / "report.json").read_text())
        r = report["result"]
        assert r["folded_fraction"] == 0.0 and r["folded_count"] == 0
        assert np.all(np.diff(r["best_trace"]) <= 0)
        header = (reg_run / "loss_trace.csv").read_text().splitlines()[0]
        assert header == "iteration,loss,best"

    def test_self_registration(self, phantoms, tmp_path):
        code = run("register", "--moving", phantoms / "fixed", "--fixed", phantoms / "fixed",
                   "--iterations", 5, "--out", tmp_path)
        r = json.loads((tmp_path / "report.json").read_text())["result"]
        assert code == EXIT_OK and r["dice"][0] == pytest.approx(1.0) and r["folded_fraction"] == 0.0

    def test_dense_unregularized(self, phantoms, tmp_path):
        code = run("register", "--moving", phantoms / "moving", "--fixed", phantoms / "fixed", "--param", "dense",
                   "--lambda", 0, "--iterations", 30, "--out", tmp_path)
        r = json.loads((tmp_path / "report.json").read_text())["result"]
        assert code == EXIT_OK and 0.0 <= r["folded_fraction"] <= 1.0
        assert not (tmp_path / "velocity_x.json").exists()

    def test_affine_stage(self, phantoms, tmp_path):
        code = run("register", "--moving", phantoms / "moving", "--fixed", phantoms / "fixed", "--affine",
                   "--affine-iterations", 20, "--iterations", 10, "--out", tmp_path)
        report = json.loads((tmp_path / "report.json").read_text())
        assert code == EXIT_OK and set(report["affine"]["params"]) >= {"tx", "hyz"}


class TestReproducibility:
    def test_phantom(self, tmp_path):
        for d in ("a", "b"):
            assert run("phantom", "--kind", "two-blob", "--noise", 0.05, "--seed", 3, "--out", tmp_path / d) == 0
        assert report_files(tmp_path / "a") == report_files(tmp_path / "b")

    def test_register(self, phantoms, tmp_path):
        for d in ("a", "b"):
            code = run("register", "--moving", phantoms / "moving", "--fixed", phantoms / "fixed",
                       "--param", "bspline-svf", "--iterations", 8, "--out", tmp_path / d)
            assert code == EXIT_OK
        assert report_files(tmp_path / "a") == report_files(tmp_path / "b")

    @pytest.mark.parametrize("sampler", ["perturb", "dropout"])
    def test_uncertainty(self, phantoms, reg_run, tmp_path, sampler):
        for d in ("a", "b"):
            code = run("uncertainty", "--moving", phantoms / "moving", "--fixed", phantoms / "fixed",
                       "--run", reg_run, "--sampler", sampler, "--samples", 4, "--seed", 2, "--out", tmp_path / d)
            assert code == EXIT_OK
        assert report_files(tmp_path / "a") == report_files(tmp_path / "b")
        summary = json.loads((tmp_path / "a" / "uncertainty.json").read_text())
        assert summary["decomposition_max_gap"] <= 1e-6
        assert summary["uce"]["calibrated_error"] == 0.0

    @pytest.mark.parametrize("net", ["swin", "conv"])
    def test_erf(self, tmp_path, net):
        for d in ("a", "b"):
            assert run("erf", "--net", net, "--dims", 6, "--out", tmp_path / d) == EXIT_OK
        assert report_files(tmp_path / "a") == report_files(tmp_path / "b")

    def test_selftest(self, tmp_path, capsys):
        for d in ("a", "b"):
            assert run("selftest", "--out", tmp_path / d) == EXIT_OK
        assert report_files(tmp_path / "a") == report_files(tmp_path / "b")
        assert "19/19 checks passed" in capsys.readouterr().out


class TestSettings:
    def test_config_then_flags(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('seed = 4\n[phantom]\nkind = "ellipsoid"\ndims = [10, 12, 14]\nnoise = 0.1\n')
        assert run("phantom", "--config", cfg, "--noise", 0.0, "--out", tmp_path / "o") == EXIT_OK
        conf = json.loads((tmp_path / "o" / "phantom_manifest.json").read_text())["config"]
        assert (conf["kind"], conf["dims"], conf["seed"], conf["noise"]) == ("ellipsoid", [10, 12, 14], 4, 0.0)

    def test_key_of_other_command(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[erf]\nnet = \"conv\"\nlambda = 1.0\n")
        assert run("erf", "--config", cfg, "--out", tmp_path) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("colour = 3\n")
        assert run("phantom", "--config", cfg, "--out", tmp_path) == EXIT_USAGE

    def test_register_alias_accepted(self, tmp_path):
        args = cli.build_parser().parse_args(["register", "--config", str(tmp_path / "c.toml")])
        (tmp_path / "c.toml").write_text("[register]\nlambda = 0.25\naffine_iterations = 3\n")
        s = cli.resolve("register", args)
        assert s["lam"] == 0.25 and s["affine_iterations"] == 3


class TestExitCodes:
    def test_bad_flag(self):
        with pytest.raises(SystemExit) as exc:
            run("phantom", "--bogus")
        assert exc.value.code == EXIT_USAGE

    def test_missing_input(self, tmp_path):
        assert run("register", "--moving", tmp_path / "nope", "--fixed", tmp_path / "nope", "--out", tmp_path) == EXIT_DATA

    def test_missing_path_argument(self, tmp_path):
        assert run("register", "--out", tmp_path) == EXIT_USAGE

    def test_too_few_samples(self, phantoms, reg_run, tmp_path):
        code = run("uncertainty", "--moving", phantoms / "moving", "--fixed", phantoms / "fixed", "--run", reg_run,
                   "--samples", 1, "--out", tmp_path)
        assert code == EXIT_DATA

    def test_bad_phantom_kind(self, tmp_path):
        assert run("phantom", "--kind", "torus", "--out", tmp_path) == EXIT_DATA

    def test_bad_tap(self, tmp_path):
        assert run("erf", "--dims", 6, "--tap", 9, "--out", tmp_path) == EXIT_DATA

    def test_selftest_detects_broken_gradient(self, tmp_path, monkeypatch, capsys):
        real = losses.diffusion_reg

        def flipped(u):
            value, grad = real(u)
            return value, -grad

        monkeypatch.setattr(losses, "diffusion_reg", flipped)
        assert run("selftest", "--out", tmp_path) == EXIT_NUMERIC
        report = json.loads((tmp_path / "selftest.json").read_text())
        failed = [r["name"] for r in report["results"] if not r["passed"]]
        assert "diffusion" in failed
