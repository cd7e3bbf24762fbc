import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from barron_iss import Dataset
from barron_iss.cli import main


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return path


def exact_fit_dataset(tmp_path):
    # target is a single grid atom (a, b) = (1, 0) of the default nested grid
    x = np.linspace(-1, 1, 21)[:, None]
    Dataset.uniform(x, 1.5 * np.maximum(x[:, 0], 0)).to_csv(tmp_path / "fit.csv")
    return "fit.csv"


def run(tmp_path, command, name="cfg.json", out="out", extra=(), **cfg):
    path = write_config(tmp_path / name, **cfg)
    return main([command, "--config", str(path), "--out", str(tmp_path / out), *extra])


def test_solve_smoke(tmp_path):
    assert run(tmp_path, "solve", reports=["ideal_loss"]) == 0
    out = tmp_path / "out"
    assert {"trajectory.csv", "metrics.csv", "bounds_ideal_loss.csv", "run.json"} <= {p.name for p in out.iterdir()}
    rec = json.loads((out / "run.json").read_text())
    assert rec["status"] == "ok" and rec["command"] == "solve"
    assert "version" in rec and rec["config"]["solver"] == {"kind": "exact"}
    with open(out / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "loss", "j_norm", "bregman"]
    loss = np.array([float(r[1]) for r in rows[1:]])
    assert np.all(np.diff(loss) <= 1e-12)


def test_invalid_epsilon_names_field(tmp_path, capsys):
    code = run(tmp_path, "solve", perturbation={"kind": "radon_nikodym", "value": 2})
    assert code == 2
    assert "perturbation.value" in capsys.readouterr().err


@pytest.mark.parametrize("cfg,field", [({"solver": {"kind": "euler"}, "horizon": 1.0}, "solver.step"),
                                       ({"solver": {"kind": "euler", "step": 0.1}}, "horizon"),
                                       ({"bogus": 1}, "bogus"),
                                       ({"dataset_path": "nope.csv"}, "dataset_path"),
                                       ({"reports": ["noise"]}, "reports")])
def test_validation_errors(tmp_path, capsys, cfg, field):
    assert run(tmp_path, "solve", **cfg) == 2
    assert field in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_same_seed_identical_bytes(tmp_path):
    cfg = dict(perturbation={"kind": "noise", "value": 0.05}, reports=["noise", "ideal_loss"], seed=3)
    run(tmp_path, "solve", out="a", extra=["--deterministic"], **cfg)
    run(tmp_path, "solve", out="b", extra=["--deterministic"], **cfg)
    for name in ("metrics.csv", "trajectory.csv", "bounds_noise.csv", "run.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_noise(tmp_path):
    cfg = dict(perturbation={"kind": "noise", "value": 0.05})
    run(tmp_path, "perturb", out="a", extra=["--seed", "1"], **cfg)
    run(tmp_path, "perturb", out="b", extra=["--seed", "2"], **cfg)
    assert (tmp_path / "a" / "dataset_perturbed.csv").read_bytes() != (tmp_path / "b" / "dataset_perturbed.csv").read_bytes()


def test_oracle_exact_fit_certified(tmp_path):
    assert run(tmp_path, "oracle", dataset_path=exact_fit_dataset(tmp_path)) == 0
    ora = json.loads((tmp_path / "out" / "oracle.json").read_text())
    assert ora["certified"] is True
    assert ora["loss"] <= 1e-20
    # relu(2x) = 2 relu(x), and the (2, 0) node is cheaper per unit of function: 3 * 0.75 < 2 * 1.5
    c = np.array(ora["mu_dagger"])
    atoms = np.array(ora["atoms"])
    assert np.count_nonzero(c) == 1
    np.testing.assert_allclose(atoms[np.argmax(c)], [2.0, 0.0])
    assert ora["j_value"] == pytest.approx(2.25, rel=1e-9)


def test_perturb_noise_norm(tmp_path):
    assert run(tmp_path, "perturb", perturbation={"kind": "noise", "value": 0.03, "seed": 9}) == 0
    from importlib import resources
    with resources.as_file(resources.files("barron_iss") / "data" / "toy1d.csv") as p:
        clean = Dataset.from_csv(p)
    noisy = Dataset.from_csv(tmp_path / "out" / "dataset_perturbed.csv")
    assert clean.norm(noisy.targets - clean.targets) == pytest.approx(0.03, rel=1e-12)
    rec = json.loads((tmp_path / "out" / "run.json").read_text())
    assert rec["noise_norm"] == pytest.approx(0.03, rel=1e-12)


def test_discretize(tmp_path):
    cfg = dict(discretize={"levels": 3, "lambda": 100.0, "box": [[-1, 1], [-1, 1]]})
    assert run(tmp_path, "discretize", **cfg) == 0
    lines = (tmp_path / "out" / "gamma.csv").read_text().splitlines()
    assert lines[0].startswith("N,maxdiam,F_min,loss_min,j_min,pairing_g1")
    assert len(lines) == 4
    assert json.loads((tmp_path / "out" / "run.json").read_text())["monotone"] is True


def test_report_matches_solve(tmp_path):
    data = exact_fit_dataset(tmp_path)
    run(tmp_path, "solve", out="s", dataset_path=data, reports=["ideal_bregman"])
    run(tmp_path, "oracle", out="o", dataset_path=data)
    code = run(tmp_path, "report", out="r", dataset_path=data,
               report={"trajectory": "s/trajectory.csv", "oracle": "o/oracle.json", "tag": "ideal_bregman"})
    assert code == 0
    a = np.loadtxt(tmp_path / "s" / "bounds_ideal_bregman.csv", delimiter=",", skiprows=1, usecols=(0, 1, 2))
    b = np.loadtxt(tmp_path / "r" / "bounds_ideal_bregman.csv", delimiter=",", skiprows=1, usecols=(0, 1, 2))
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_report_pairing_error(tmp_path, capsys):
    data = exact_fit_dataset(tmp_path)
    run(tmp_path, "solve", out="s", dataset_path=data, atoms={"kind": "grid", "level": 1, "box": [[-2, 2], [-2, 2]]})
    run(tmp_path, "oracle", out="o", dataset_path=data)
    capsys.readouterr()
    code = run(tmp_path, "report", out="r", dataset_path=data,
               report={"trajectory": "s/trajectory.csv", "oracle": "o/oracle.json", "tag": "ideal_loss"})
    assert code == 2
    assert "do not pair" in capsys.readouterr().err


def test_report_missing_artifact(tmp_path):
    code = run(tmp_path, "report", report={"trajectory": "none.csv", "oracle": "none.json", "tag": "ideal_loss"})
    assert code == 4


def test_missing_config_and_bad_subcommand(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "absent.json")]) == 4
    assert main(["frobnicate", "--config", "x.json"]) != 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_solver_failure_exit_code(tmp_path, capsys):
    # targets near the float limit overflow the loss, which aborts the flow before any output
    x = np.linspace(-1, 1, 11)[:, None]
    Dataset.uniform(x, np.full(11, 1e300)).to_csv(tmp_path / "huge.csv")
    with np.errstate(all="ignore"):
        code = run(tmp_path, "solve", dataset_path="huge.csv")
    rec = json.loads((tmp_path / "out" / "run.json").read_text())
    assert code == 3
    assert rec["status"] == "failed" and rec["partial_artifacts"] == []
    assert "non-finite" in rec["error"]
    assert "solver failure" in capsys.readouterr().err


@pytest.mark.skipif(shutil.which("barron-iss") is None, reason="console script not installed")
def test_console_script(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", seed=1)
    proc = subprocess.run(["barron-iss", "solve", "--config", str(cfg), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "metrics.csv").exists()
