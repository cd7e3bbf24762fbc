"""Command-line runner: ``barron-iss <subcommand> --config run.json``.

The configuration is one JSON document; every field is validated before
any computation starts.  Exit codes: 0 success, 2 invalid configuration,
3 solver failure, 4 missing artifact.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from contextlib import nullcontext
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .measure import AtomSet, DualVariable, SparseMeasure, WeightVariant, j_norm
from .operators import Activation, ActivationKind, Dataset
from .oracle import OracleError, ReferenceSolution, certify
from .perturbation import (PerturbationKind, PerturbationSpec, bias_bound_report, bregman_distance,
                           ideal_bregman_report, ideal_loss_report, noise_bound_report)
from .solver import (Breakpoint, Event, EventKind, FlowTrajectory, InnerSolverError, Problem,
                     solve_bregman, solve_euler_iss, solve_exact_iss)
from .tessellation import (Construction, Tessellation, build_refinement, discretization_bound_report,
                           gamma_convergence_experiment, nested_grid, random_iid, regular_grid)

log = logging.getLogger("barron_iss")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_MISSING = 0, 2, 3, 4
SUBCOMMANDS = ("solve", "perturb", "discretize", "oracle", "report")
REPORT_TAGS = ("ideal_loss", "ideal_bregman", "noise", "bias_general", "bias_radon", "bias_sampling",
               "bias_wasserstein", "discretization")
ORACLE_LIMIT = (2000, 2000)


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"invalid config field '{field}': {message}")
        self.field = field


class MissingArtifact(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# validation


def _get(cfg: Dict[str, Any], key: str, default=None):
    return cfg[key] if key in cfg and cfg[key] is not None else default


def _num(value, field: str, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field, f"expected a number, got {value!r}")
    v = float(value)
    if math.isnan(v):
        raise ConfigError(field, "must not be NaN")
    if integer and not v.is_integer():
        raise ConfigError(field, f"expected an integer, got {value!r}")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(field, f"must be {'>' if lo_open else '>='} {lo}, got {value!r}")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(field, f"must be {'<' if hi_open else '<='} {hi}, got {value!r}")
    return int(v) if integer else v


def _box(value, field: str) -> np.ndarray:
    try:
        box = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(field, "expected a list of [low, high] pairs")
    if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] < 2 or np.any(box[:, 1] <= box[:, 0]):
        raise ConfigError(field, "expected at least two nondegenerate [low, high] pairs")
    return box


def _file(value, field: str, base: Path) -> Path:
    if not isinstance(value, str):
        raise ConfigError(field, "expected a path string")
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(field, f"file does not exist: {p}")
    return p


def validate_config(raw: Dict[str, Any], base: Path, seed_override: Optional[int] = None) -> Dict[str, Any]:
    """Return a fully resolved configuration or raise :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    known = {"dataset_path", "atoms", "activation", "lipschitz", "weight_variant", "solver", "horizon",
             "max_events", "perturbation", "reports", "output_dir", "seed", "tolerances", "discretize",
             "report"}
    for k in raw:
        if k not in known:
            raise ConfigError(k, "unknown field")
    cfg: Dict[str, Any] = {}
    seed = seed_override if seed_override is not None else _get(raw, "seed", 0)
    cfg["seed"] = _num(seed, "seed", lo=0, hi=2 ** 64 - 1, integer=True)
    cfg["dataset_path"] = str(_file(raw["dataset_path"], "dataset_path", base)) if "dataset_path" in raw else None

    act = _get(raw, "activation", "relu")
    if act not in [k.value for k in ActivationKind if k is not ActivationKind.CUSTOM]:
        raise ConfigError("activation", f"expected relu, tanh or sigmoid, got {act!r}")
    cfg["activation"] = act
    lip = _get(raw, "lipschitz")
    cfg["lipschitz"] = None if lip is None else _num(lip, "lipschitz", lo=0, lo_open=True)
    wv = _get(raw, "weight_variant", "with_constant")
    if wv not in [v.value for v in WeightVariant]:
        raise ConfigError("weight_variant", f"expected one of {[v.value for v in WeightVariant]}")
    cfg["weight_variant"] = wv

    atoms = _get(raw, "atoms", {"kind": "grid", "construction": "nested_grid", "level": 2,
                                "box": [[-2.0, 2.0], [-2.0, 2.0]]})
    if not isinstance(atoms, dict) or "kind" not in atoms:
        raise ConfigError("atoms", "expected an object with a 'kind'")
    kind = atoms["kind"]
    if kind == "grid":
        cons = atoms.get("construction", "regular_grid")
        if cons not in (Construction.REGULAR_GRID.value, Construction.NESTED_GRID.value):
            raise ConfigError("atoms.construction", "expected regular_grid or nested_grid")
        cfg["atoms"] = {"kind": "grid", "construction": cons,
                        "level": _num(atoms.get("level", 2), "atoms.level", lo=0, hi=12, integer=True),
                        "box": _box(atoms.get("box"), "atoms.box").tolist()}
    elif kind == "random":
        cfg["atoms"] = {"kind": "random", "n": _num(atoms.get("n", 32), "atoms.n", lo=1, integer=True),
                        "box": _box(atoms.get("box"), "atoms.box").tolist(),
                        "seed": _num(atoms.get("seed", cfg["seed"]), "atoms.seed", lo=0, integer=True)}
    elif kind == "csv":
        cfg["atoms"] = {"kind": "csv", "path": str(_file(atoms.get("path"), "atoms.path", base))}
    else:
        raise ConfigError("atoms.kind", f"expected grid, random or csv, got {kind!r}")

    solver = _get(raw, "solver", {"kind": "exact"})
    if not isinstance(solver, dict) or solver.get("kind") not in ("exact", "euler", "bregman"):
        raise ConfigError("solver.kind", "expected exact, euler or bregman")
    s = {"kind": solver["kind"]}
    if s["kind"] == "euler":
        s["step"] = _num(solver.get("step"), "solver.step", lo=0, lo_open=True)
    elif s["kind"] == "bregman":
        s["lambda"] = _num(solver.get("lambda"), "solver.lambda", lo=0, lo_open=True)
        s["iters"] = _num(solver.get("iters"), "solver.iters", lo=1, integer=True)
    cfg["solver"] = s
    horizon = _get(raw, "horizon")
    cfg["horizon"] = None if horizon is None else _num(horizon, "horizon", lo=0, lo_open=True)
    if s["kind"] == "euler" and cfg["horizon"] is None:
        raise ConfigError("horizon", "required by the euler solver")
    cfg["max_events"] = _num(_get(raw, "max_events", 10_000), "max_events", lo=1, integer=True)

    pert = _get(raw, "perturbation")
    if pert is not None:
        if not isinstance(pert, dict):
            raise ConfigError("perturbation", "expected an object")
        pk = pert.get("kind")
        if pk not in [k.value for k in PerturbationKind]:
            raise ConfigError("perturbation.kind", f"expected one of {[k.value for k in PerturbationKind]}")
        if pk == "radon_nikodym":
            v = _num(pert.get("value"), "perturbation.value", lo=0, hi=1, lo_open=True, hi_open=True)
        elif pk == "subsample":
            v = _num(pert.get("value"), "perturbation.value", lo=1, integer=True)
        else:
            v = _num(pert.get("value"), "perturbation.value", lo=0, lo_open=True)
        pseed = _num(pert.get("seed", cfg["seed"]), "perturbation.seed", lo=0, integer=True)
        cfg["perturbation"] = {"kind": pk, "value": v, "seed": pseed}
    else:
        cfg["perturbation"] = None

    reports = _get(raw, "reports", [])
    if not isinstance(reports, list) or any(r not in REPORT_TAGS for r in reports):
        raise ConfigError("reports", f"expected a list drawn from {list(REPORT_TAGS)}")
    cfg["reports"] = list(reports)
    for r in reports:
        if r == "noise" and (cfg["perturbation"] is None or cfg["perturbation"]["kind"] != "noise"):
            raise ConfigError("reports", "the noise report needs a noise perturbation")
        if r.startswith("bias_") and (cfg["perturbation"] is None or cfg["perturbation"]["kind"] == "noise"):
            raise ConfigError("reports", f"{r} needs a sampling perturbation")

    tol = _get(raw, "tolerances", {})
    if not isinstance(tol, dict):
        raise ConfigError("tolerances", "expected an object")
    cfg["tolerances"] = {"flow": _num(tol.get("flow", 1e-10), "tolerances.flow", lo=0),
                         "inner": _num(tol.get("inner", 1e-10), "tolerances.inner", lo=0, lo_open=True)}
    cfg["output_dir"] = str(_get(raw, "output_dir", "barron_iss_out"))

    disc = _get(raw, "discretize", {})
    if not isinstance(disc, dict):
        raise ConfigError("discretize", "expected an object")
    cons = disc.get("construction", "nested_grid")
    if cons not in [c.value for c in Construction]:
        raise ConfigError("discretize.construction", f"expected one of {[c.value for c in Construction]}")
    cfg["discretize"] = {
        "construction": cons,
        "levels": _num(disc.get("levels", 3), "discretize.levels", lo=1, hi=8, integer=True),
        "lambda": _num(disc.get("lambda", 1.0), "discretize.lambda", lo=0, lo_open=True),
        "box": _box(disc.get("box", [[-2.0, 2.0], [-2.0, 2.0]]), "discretize.box").tolist(),
    }
    rep = _get(raw, "report", {})
    if not isinstance(rep, dict):
        raise ConfigError("report", "expected an object")
    cfg["report"] = {k: rep[k] for k in ("trajectory", "oracle", "tag", "delta") if k in rep}
    if "tag" in cfg["report"] and cfg["report"]["tag"] not in ("ideal_loss", "ideal_bregman", "noise"):
        raise ConfigError("report.tag", "expected ideal_loss, ideal_bregman or noise")
    if "delta" in cfg["report"]:
        cfg["report"]["delta"] = _num(cfg["report"]["delta"], "report.delta", lo=0, lo_open=True)
    return cfg


# --------------------------------------------------------------------------
# building blocks


def load_dataset(cfg) -> Dataset:
    if cfg["dataset_path"] is None:
        with resources.as_file(resources.files("barron_iss") / "data" / "toy1d.csv") as p:
            return Dataset.from_csv(p)
    return Dataset.from_csv(cfg["dataset_path"])


def build_atoms(cfg, dim: int) -> Tuple[AtomSet, Optional[Tessellation]]:
    a = cfg["atoms"]
    variant = WeightVariant(cfg["weight_variant"])
    tess = None
    if a["kind"] == "csv":
        atoms = AtomSet.from_csv(a["path"], weight_variant=variant)
    else:
        box = np.asarray(a["box"], dtype=float)
        if box.shape[0] != dim + 1:
            raise ConfigError("atoms.box", f"needs {dim + 1} rows for {dim}-dimensional data")
        if a["kind"] == "grid":
            make = regular_grid if a["construction"] == "regular_grid" else nested_grid
            tess = make(box, a["level"], variant)
        else:
            tess = random_iid(box, a["n"], a["seed"], variant=variant)
        atoms = tess.atoms
    if atoms.dim != dim:
        raise ConfigError("atoms", f"atom dimension {atoms.dim} does not match data dimension {dim}")
    return atoms, tess


def build_activation(cfg) -> Activation:
    return Activation(ActivationKind(cfg["activation"]), cfg["lipschitz"])


def run_flow(problem: Problem, cfg) -> FlowTrajectory:
    s = cfg["solver"]
    horizon = cfg["horizon"] if cfg["horizon"] is not None else math.inf
    if s["kind"] == "exact":
        return solve_exact_iss(problem, horizon, cfg["max_events"], cfg["tolerances"]["flow"])
    if s["kind"] == "euler":
        return solve_euler_iss(problem, s["step"], horizon, tol=cfg["tolerances"]["flow"])
    iters = solve_bregman(problem, s["lambda"], s["iters"], cfg["tolerances"]["inner"])
    bps = [Breakpoint(0.0, SparseMeasure.zeros(problem.n_atoms), DualVariable(np.zeros(problem.n_atoms)),
                      problem.loss(np.zeros(problem.n_atoms)), (), Event(EventKind.START),
                      np.zeros(problem.n_atoms))]
    for mu, p in iters:
        on = tuple(np.flatnonzero(np.abs(p.values) >= problem.V - cfg["tolerances"]["inner"]))
        bps.append(Breakpoint(p.time, mu, p, problem.loss(mu), on, Event(EventKind.ENTRY),
                              np.zeros(problem.n_atoms)))
    return FlowTrajectory(problem, bps, "iterations")


def report_horizon(trajectory: FlowTrajectory) -> Optional[float]:
    """Bounds are tabulated up to twice the last breakpoint time."""
    return 2.0 * trajectory.final.t if trajectory.final.t > 0 else None


def _small(problem: Problem) -> bool:
    return problem.n_atoms <= ORACLE_LIMIT[0] and problem.dataset.m <= ORACLE_LIMIT[1]


def write_metrics(path: Path, trajectory: FlowTrajectory, reference: Optional[ReferenceSolution]) -> None:
    atoms = trajectory.problem.atoms
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["t", "loss", "j_norm"] + (["bregman"] if reference is not None else [])
        writer.writerow(header)
        for bp in trajectory:
            row = [repr(bp.t), repr(bp.loss), repr(j_norm(bp.mu, atoms))]
            if reference is not None:
                try:
                    d = bregman_distance(reference.mu_dagger, bp.mu, bp.p, atoms)
                    row.append(repr(d))
                except ValueError:
                    row.append("nan")
            writer.writerow(row)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_record(cfg, command: str, status: str, **extra) -> Dict[str, Any]:
    rec = {"command": command, "config": cfg, "status": status, "version": __version__}
    rec.update(extra)
    return rec


def reference_to_json(ref: ReferenceSolution, atoms: AtomSet) -> Dict[str, Any]:
    return {
        "n_atoms": len(atoms),
        "atoms": atoms.points.tolist(),
        "mu_dagger": ref.mu_dagger.coefficients.tolist(),
        "p_dagger": ref.p_dagger.values.tolist(),
        "phi": None if ref.phi is None else np.asarray(ref.phi).tolist(),
        "certified": bool(ref.certified),
        "source_condition": ref.phi is not None,
        "j_value": ref.j_value,
        "loss": ref.loss,
        "orthogonality": ref.orthogonality,
    }


def reference_from_json(obj) -> ReferenceSolution:
    phi = obj.get("phi")
    return ReferenceSolution(SparseMeasure(obj["mu_dagger"]), DualVariable(obj["p_dagger"]),
                             None if phi is None else np.asarray(phi, dtype=float), bool(obj["certified"]),
                             float(obj["orthogonality"]), float(obj["j_value"]), float(obj["loss"]))


def trajectory_from_csv(path: Path, problem: Problem) -> FlowTrajectory:
    """Rebuild a trajectory written with per-atom columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    n_c = sum(1 for h in header if h.startswith("c_"))
    n_p = sum(1 for h in header if h.startswith("p_"))
    if n_c == 0:
        raise ConfigError("report.trajectory", "trajectory has no per-atom columns")
    if n_c != problem.n_atoms or n_p != problem.n_atoms:
        raise ValueError(f"trajectory has {n_c} atoms but the reference problem has {problem.n_atoms}")
    base = len(header) - n_c - n_p
    t = np.array([float(r[0]) for r in rows])
    C = np.array([[float(v) for v in r[base:base + n_c]] for r in rows])
    P = np.array([[float(v) for v in r[base + n_c:]] for r in rows])
    bps = []
    for k in range(len(rows)):
        vel = (P[k + 1] - P[k]) / (t[k + 1] - t[k]) if k + 1 < len(rows) and t[k + 1] > t[k] else np.zeros(n_c)
        on = tuple(np.flatnonzero(np.abs(P[k]) >= problem.V - 1e-9))
        kind = EventKind(rows[k][1].split("(")[0])
        bps.append(Breakpoint(t[k], SparseMeasure(C[k]), DualVariable(P[k], t[k]), problem.loss(C[k]), on,
                              Event(kind), vel))
    return FlowTrajectory(problem, bps, "loaded")


# --------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg, out: Path) -> int:
    clean = load_dataset(cfg)
    atoms, tess = build_atoms(cfg, clean.dim)
    act = build_activation(cfg)
    clean_problem = Problem.build(clean, atoms, act)
    spec = None
    problem = clean_problem
    if cfg["perturbation"] is not None:
        p = cfg["perturbation"]
        spec = PerturbationSpec(p["kind"], p["value"], p["seed"])
        problem = Problem.build(spec.apply(clean), atoms, act)
    traj = run_flow(problem, cfg)
    traj.to_csv(out / "trajectory.csv", per_atom=problem.n_atoms <= 500)
    ref = certify(clean_problem) if _small(clean_problem) else None
    write_metrics(out / "metrics.csv", traj, ref)
    written = ["trajectory.csv", "metrics.csv"]
    t_max = report_horizon(traj)
    for tag in cfg["reports"]:
        if ref is None:
            raise ConfigError("reports", "reports need a reference solution; problem exceeds oracle limits")
        if tag == "ideal_loss":
            rep = ideal_loss_report(traj, ref, t_max=t_max)
        elif tag == "ideal_bregman":
            rep = ideal_bregman_report(traj, ref, t_max=t_max)
        elif tag == "noise":
            rep = noise_bound_report(traj, ref, spec.value, t_max=t_max)
        elif tag == "discretization":
            if tess is None or cfg["atoms"]["kind"] != "grid":
                raise ConfigError("reports", "the discretization report needs grid atoms")
            fine = nested_grid(np.asarray(cfg["atoms"]["box"]), cfg["atoms"]["level"] + 2,
                               atoms.weight_variant)
            fprob = Problem.build(problem.dataset, fine.atoms, act)
            rep = discretization_bound_report(traj, certify(fprob), fprob, tess, t_max=t_max)
        else:
            ref_b = certify(problem)
            rep = bias_bound_report(traj, ref, ref_b, spec, clean_problem, variant=tag[len("bias_"):],
                                    t_max=t_max)
        rep.to_csv(out / f"bounds_{tag}.csv")
        written.append(f"bounds_{tag}.csv")
    _write_json(out / "run.json", _run_record(cfg, "solve", "ok", trajectory_status=traj.status,
                                              warnings=traj.warnings, artifacts=written,
                                              n_breakpoints=len(traj)))
    return EXIT_OK


def cmd_perturb(cfg, out: Path) -> int:
    if cfg["perturbation"] is None:
        raise ConfigError("perturbation", "required by the perturb subcommand")
    p = cfg["perturbation"]
    ds = load_dataset(cfg)
    spec = PerturbationSpec(p["kind"], p["value"], p["seed"])
    pert = spec.apply(ds)
    pert.to_csv(out / "dataset_perturbed.csv")
    extra = {}
    if spec.kind is PerturbationKind.NOISE:
        extra["noise_norm"] = ds.norm(pert.targets - ds.targets)
    _write_json(out / "run.json", _run_record(cfg, "perturb", "ok", artifacts=["dataset_perturbed.csv"], **extra))
    return EXIT_OK


def cmd_discretize(cfg, out: Path) -> int:
    ds = load_dataset(cfg)
    d = cfg["discretize"]
    box = np.asarray(d["box"])
    if box.shape[0] != ds.dim + 1:
        raise ConfigError("discretize.box", f"needs {ds.dim + 1} rows for {ds.dim}-dimensional data")
    seq = build_refinement(box, d["construction"], d["levels"], seed=cfg["seed"],
                           weight_variant=WeightVariant(cfg["weight_variant"]))
    table = gamma_convergence_experiment(ds, build_activation(cfg), seq, d["lambda"], tol=cfg["tolerances"]["inner"])
    table.to_csv(out / "gamma.csv")
    _write_json(out / "run.json", _run_record(cfg, "discretize", "ok", artifacts=["gamma.csv"],
                                              monotone=table.monotone(), cauchy_gap=table.cauchy_gap(),
                                              all_converged=all(r.converged for r in table.rows)))
    return EXIT_OK


def cmd_oracle(cfg, out: Path) -> int:
    ds = load_dataset(cfg)
    atoms, _ = build_atoms(cfg, ds.dim)
    problem = Problem.build(ds, atoms, build_activation(cfg))
    if not _small(problem):
        raise ConfigError("atoms", f"oracle limited to N <= {ORACLE_LIMIT[0]}, m <= {ORACLE_LIMIT[1]}")
    ref = certify(problem)
    _write_json(out / "oracle.json", reference_to_json(ref, atoms))
    _write_json(out / "run.json", _run_record(cfg, "oracle", "ok", artifacts=["oracle.json"],
                                              certified=bool(ref.certified)))
    return EXIT_OK


def cmd_report(cfg, out: Path, base: Path) -> int:
    r = cfg["report"]
    for key in ("trajectory", "oracle", "tag"):
        if key not in r:
            raise ConfigError(f"report.{key}", "required by the report subcommand")
    traj_path = Path(r["trajectory"]) if Path(r["trajectory"]).is_absolute() else base / r["trajectory"]
    ora_path = Path(r["oracle"]) if Path(r["oracle"]).is_absolute() else base / r["oracle"]
    for p in (traj_path, ora_path):
        if not p.exists():
            raise MissingArtifact(str(p))
    with open(ora_path) as fh:
        ora = json.load(fh)
    ds = load_dataset(cfg)
    atoms = AtomSet.from_points(np.asarray(ora["atoms"]), weight_variant=WeightVariant(cfg["weight_variant"]))
    problem = Problem.build(ds, atoms, build_activation(cfg))
    if cfg["perturbation"] is not None and r["tag"] == "noise":
        p = cfg["perturbation"]
        noisy = PerturbationSpec(p["kind"], p["value"], p["seed"]).apply(ds)
        traj_problem = Problem.build(noisy, atoms, problem.activation)
    else:
        traj_problem = problem
    try:
        traj = trajectory_from_csv(traj_path, traj_problem)
    except ValueError as exc:
        raise ConfigError("report.trajectory", f"trajectory and reference do not pair: {exc}")
    ref = reference_from_json(ora)
    t_max = report_horizon(traj)
    if r["tag"] == "ideal_loss":
        rep = ideal_loss_report(traj, ref, t_max=t_max)
    elif r["tag"] == "ideal_bregman":
        rep = ideal_bregman_report(traj, ref, t_max=t_max)
    else:
        if "delta" not in r:
            raise ConfigError("report.delta", "required for the noise report")
        rep = noise_bound_report(traj, ref, r["delta"], t_max=t_max)
    rep.to_csv(out / f"bounds_{r['tag']}.csv")
    _write_json(out / "run.json", _run_record(cfg, "report", "ok", artifacts=[f"bounds_{r['tag']}.csv"],
                                              min_slack=rep.min_slack()))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="barron-iss", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded linear algebra for reproducible output")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        print(f"error: config file not found: {cfg_path}", file=sys.stderr)
        return EXIT_MISSING
    try:
        with open(cfg_path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    base = cfg_path.resolve().parent
    try:
        cfg = validate_config(raw, base, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else base / cfg["output_dir"]
    out.mkdir(parents=True, exist_ok=True)
    if args.deterministic:
        from threadpoolctl import threadpool_limits
        ctx = threadpool_limits(limits=1)
    else:
        ctx = nullcontext()
    try:
        with ctx:
            if args.command == "solve":
                return cmd_solve(cfg, out)
            if args.command == "perturb":
                return cmd_perturb(cfg, out)
            if args.command == "discretize":
                return cmd_discretize(cfg, out)
            if args.command == "oracle":
                return cmd_oracle(cfg, out)
            return cmd_report(cfg, out, base)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FloatingPointError, InnerSolverError, OracleError, np.linalg.LinAlgError) as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        _write_json(out / "run.json", _run_record(cfg, args.command, "failed", error=str(exc),
                                                  partial_artifacts=sorted(p.name for p in out.iterdir())))
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
