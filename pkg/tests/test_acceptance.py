"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run under pytest (``pytest tests/test_acceptance.py -v -s``) or directly
(``python3 tests/test_acceptance.py``).
"""
from __future__ import annotations

import json
import math
import sys
import tempfile
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

sys.path.insert(0, str(Path(__file__).resolve().parent))

from barron_iss import Activation, Dataset, Problem  # noqa: E402
from barron_iss.cli import main as cli_main  # noqa: E402
from barron_iss.instances import random_problem  # noqa: E402
from barron_iss.measure import j_norm  # noqa: E402
from barron_iss.oracle import brute_force_flow, certify, minimal_norm_minimizer, wasserstein1  # noqa: E402
from barron_iss.perturbation import (PerturbationSpec, add_measurement_noise, bias_bound_report,  # noqa: E402
                                     density_change_checks, monte_carlo_subsample, noise_bound_report,
                                     noise_rhs, radon_nikodym_reweight, sampling_deviation_check,
                                     wasserstein_change_check, wasserstein_shift)
from barron_iss.solver import solve_exact_iss  # noqa: E402
from barron_iss.tessellation import (build_refinement, discretization_bound_report,  # noqa: E402
                                     gamma_convergence_experiment, nested_grid)
from oracles import support_enumeration  # noqa: E402


def report(k: int, ok: bool, detail: str) -> str:
    return f"[{'PASS' if ok else 'FAIL'}] criterion {k:2d}: {detail}"


# --------------------------------------------------------------------------
# shared runs for criteria 1-4


@lru_cache(maxsize=None)
def core_runs():
    rng = np.random.default_rng(2024)
    probs = []
    for k in range(50):
        d = 1 + k % 3
        n = int(rng.integers(10, 101))
        m = int(rng.integers(20, 201))
        probs.append(random_problem(1000 + k, d=d, n_atoms=n, m=m, exact_fit=k % 2 == 0,
                                    support=int(rng.integers(1, 6)), uniform_weights=k % 4 < 2))
    t0 = time.perf_counter()
    trajs = [solve_exact_iss(p) for p in probs]
    elapsed = time.perf_counter() - t0
    refs = [certify(p) for p in probs]
    return probs, trajs, refs, elapsed


def criterion_1():
    probs, trajs, _, elapsed = core_runs()
    worst_feas, worst_comp, sign_bad = -math.inf, -math.inf, 0
    for prob, traj in zip(probs, trajs):
        V = prob.V
        for bp in traj:
            p, c = bp.p.values, bp.mu.coefficients
            worst_feas = max(worst_feas, float(np.max(np.abs(p) - V)))
            on = c != 0
            if on.any():
                worst_comp = max(worst_comp, float(np.max(V[on] - np.abs(p[on]))))
                sign_bad += int(np.sum(np.sign(c[on]) != np.sign(p[on])))
    ok = worst_feas <= 1e-9 and worst_comp <= 1e-9 and sign_bad == 0 and elapsed < 60
    return ok, (f"max(|p|-V)={worst_feas:.2e}, max(V-|p|) on support={worst_comp:.2e}, "
                f"sign mismatches={sign_bad}, solve time {elapsed:.1f}s on 50 instances")


def criterion_2():
    _, trajs, _, _ = core_runs()
    worst = -math.inf
    for traj in trajs:
        L = traj.losses
        if len(L) > 1:
            worst = max(worst, float(np.max(np.diff(L))))
    return worst <= 1e-12, f"largest loss increase between breakpoints {worst:.2e}"


def criterion_3():
    probs, trajs, refs, _ = core_runs()
    worst, passed = -math.inf, 0
    for prob, traj, ref in zip(probs, trajs, refs):
        r_ref = prob.loss(ref.mu_dagger.coefficients)
        ex = [bp.loss - (r_ref + ref.j_value / bp.t) for bp in traj if bp.t > 0]
        w = max(ex, default=-math.inf)
        worst = max(worst, w)
        passed += w <= 1e-9
    return passed == 50, f"{passed}/50 instances, worst excess {worst:.2e}"


def criterion_4():
    probs, trajs, refs, _ = core_runs()
    used, excluded, worst = 0, 0, -math.inf
    for prob, traj, ref in zip(probs, trajs, refs):
        if ref.phi is None:
            excluded += 1
            continue
        used += 1
        phi_sq = prob.dataset.sq_norm(ref.phi)
        cd = ref.mu_dagger.coefficients
        for bp in traj:
            if bp.t <= 0:
                continue
            c, p = bp.mu.coefficients, bp.p.values
            D = ref.j_value - j_norm(c, prob.atoms) - float(p @ (cd - c))
            worst = max(worst, D - phi_sq / (2 * bp.t))
    return used > 0 and worst <= 1e-8, f"{used} instances with a source element, {excluded} excluded, worst excess {worst:.2e}"


def criterion_5():
    worst_j, worst_pred = 0.0, 0.0
    for k in range(20):
        prob = random_problem(2000 + k, d=1 + k % 2, n_atoms=12, m=8)
        # the limit point can sit at t ~ 1e12 on these rank-deficient designs; run to the rounding floor
        traj = solve_exact_iss(prob, tol=0.0)
        c = traj.final.mu.coefficients
        J_enum, pred = support_enumeration(prob.design.toarray(), prob.dataset.weights, prob.dataset.targets,
                                           prob.V)
        worst_j = max(worst_j, abs(j_norm(c, prob.atoms) - J_enum))
        worst_pred = max(worst_pred, float(np.max(np.abs(prob.predict(c) - pred))))
        if traj.status != "stationary":
            return False, f"instance {k} did not reach stationarity ({traj.status})"
    ok = worst_j <= 1e-8 and worst_pred <= 1e-8
    return ok, f"20 instances, max |J - J_enum|={worst_j:.2e}, max prediction gap={worst_pred:.2e}"


def criterion_6():
    worst, events = 0.0, []
    for k in range(10):
        prob = random_problem(3000 + k, d=1, n_atoms=10, m=40)
        # scale the targets so several events happen before t = 2 without stiff velocities
        g0 = np.max(np.abs(prob.gradient(np.zeros(prob.n_atoms)) / prob.V))
        prob = prob.with_dataset(prob.dataset.with_targets(prob.dataset.targets * 3.0 / g0))
        traj = solve_exact_iss(prob)
        horizon = min(2.0, 1.5 * traj[min(3, len(traj) - 1)].t)
        bf = brute_force_flow(prob, step=1e-5, horizon=horizon)
        events.append(int(np.sum(traj.times <= horizon)) - 1)
        for t in np.linspace(0, horizon, 10):
            worst = max(worst, float(np.max(np.abs(traj.dual_at(t) - bf.dual_at(t)))))
    return worst <= 1e-3, f"10 instances x 10 times, max dual gap {worst:.2e}, events per run {events}"


def criterion_7():
    ok = True
    details = []
    # bound slack on noisy runs of exact-fit instances with a source element
    worst, runs = math.inf, 0
    phis = []
    for seed in range(12):
        clean = random_problem(4000 + seed, d=1, n_atoms=30, m=60, exact_fit=True, support=3)
        ref = certify(clean)
        if ref.phi is None:
            continue
        phis.append(clean.dataset.norm(ref.phi))
        for delta in (1e-1, 1e-2):
            noisy = clean.with_dataset(add_measurement_noise(clean.dataset, delta, seed))
            traj = solve_exact_iss(noisy)
            rep = noise_bound_report(traj, ref, delta, t_max=2 * traj.final.t)
            worst = min(worst, rep.min_slack())
            runs += 1
    ok &= runs > 0 and worst >= -1e-8
    details.append(f"{runs} noisy runs, min slack {worst:.2e}")
    # numerical minimiser of the rhs over t
    slopes = []
    for phi in phis[:3]:
        ts = []
        for delta in (1e-1, 1e-2):
            res = minimize_scalar(lambda s: float(noise_rhs(np.array([math.exp(s)]), phi, delta)[0]),
                                  bounds=(-10, 20), method="bounded", options={"xatol": 1e-10})
            ts.append(math.exp(res.x))
        slopes.append((math.log(ts[1]) - math.log(ts[0])) / (math.log(1e-2) - math.log(1e-1)))
    ok &= all(abs(s + 1) <= 0.1 for s in slopes)
    details.append("t* slopes " + ", ".join(f"{s:.3f}" for s in slopes))
    # semiconvergence
    seen = 0
    for seed in range(5):
        clean = random_problem(1, d=1, n_atoms=30, m=60, exact_fit=True, support=3)
        ref = certify(clean)
        noisy = clean.with_dataset(add_measurement_noise(clean.dataset, 1e-2, seed))
        traj = solve_exact_iss(noisy)
        target = clean.predict(ref.mu_dagger.coefficients)
        err = np.array([clean.dataset.norm(clean.predict(bp.mu.coefficients) - target) for bp in traj])
        k = int(np.argmin(err))
        seen += 0 < k < len(err) - 1 and err[-1] > err[k] * (1 + 1e-6)
    ok &= seen > 0
    details.append(f"semiconvergence on {seen}/5 noise draws")
    return bool(ok), "; ".join(details)


def criterion_8():
    rng = np.random.default_rng(8)
    worst_lemma = math.inf
    for k in range(4):
        base = random_problem(5000 + k, d=2, n_atoms=5, m=60).dataset
        for eps in (0.05, 0.2):
            rw = radon_nikodym_reweight(base, eps, k)
            for _ in range(100):
                g = rng.normal(size=base.m) * rng.exponential(size=base.m)
                worst_lemma = min(worst_lemma, min(c.slack for c in density_change_checks(base, rw, g)))
    worst, runs, skipped, seed = math.inf, 0, 0, 0
    while runs < 10 and seed < 60:
        clean = random_problem(seed, d=1, n_atoms=20, m=40, exact_fit=True, support=3)
        ref = certify(clean)
        eps = (0.05, 0.2)[runs % 2]
        seed += 1
        if ref.phi is None:
            skipped += 1
            continue
        spec = PerturbationSpec("radon_nikodym", eps, seed)
        biased = clean.with_dataset(spec.apply(clean.dataset))
        traj = solve_exact_iss(biased)
        rep = bias_bound_report(traj, ref, certify(biased), spec, clean, variant="radon",
                                t_max=2 * traj.final.t)
        if not rep.applicable:
            skipped += 1
            continue
        worst = min(worst, rep.min_slack())
        runs += 1
    ok = worst_lemma >= -1e-12 and runs == 10 and worst >= -1e-8
    return ok, (f"density lemma min slack {worst_lemma:.2e} over 800 g; bound min slack {worst:.2e} "
                f"on {runs} runs ({skipped} instances without a source element skipped)")


def criterion_9():
    rng = np.random.default_rng(9)
    worst, count = math.inf, 0
    for k in range(5):
        m = int(rng.integers(10, 51))
        x = rng.uniform(-1, 1, size=(m, 2))
        w = rng.uniform(0.5, 1.5, size=m)
        ds = Dataset(x, w / w.sum(), np.zeros(m))
        sh = wasserstein_shift(ds, 0.1 + 0.1 * k, k)
        w1 = wasserstein1(ds, sh)
        for _ in range(20):
            freq, phase, amp = rng.normal(size=2), rng.uniform(0, 2 * np.pi), rng.uniform(0.1, 3)
            g = lambda z: amp * np.sin(z @ freq + phase) + np.abs(z[:, 1] - 0.2)
            worst = min(worst, wasserstein_change_check(ds, sh, g, w1).slack)
            count += 1
    return worst >= -1e-9, f"{count} Lipschitz test functions on 5 datasets, min slack {worst:.2e}"


def criterion_10():
    rng = np.random.default_rng(10)
    x = rng.uniform(-1, 1, size=(400, 2))
    ds = Dataset.uniform(x, np.zeros(400))
    g = np.sin(3 * x[:, 0]) + x[:, 1] ** 2
    full = ds.with_targets(g)
    hits = 0
    for s in range(500):
        sub = monte_carlo_subsample(full, 64, s)
        hits += sampling_deviation_check(full, sub, g, sub.targets, 0.1).slack >= 0
    need = 0.9 - 2 * math.sqrt(0.9 * 0.1 / 500)
    return hits / 500 >= need, f"bound held on {hits}/500 seeds (need >= {need:.3f} fraction)"


def criterion_11():
    box = np.array([[-1.0, 1.0], [-1.0, 1.0]])
    rng = np.random.default_rng(11)
    x = rng.uniform(-1, 1, size=(40, 1))
    ds = Dataset.uniform(x, 0.7 * np.maximum(x[:, 0] - 0.5, 0) + 0.3 * np.maximum(-x[:, 0] - 0.5, 0))
    fine = Problem.build(ds, nested_grid(box, 5).atoms)
    ref = minimal_norm_minimizer(fine)
    worst, terms = math.inf, []
    for lvl in (1, 2, 3):
        tess = nested_grid(box, lvl)
        traj = solve_exact_iss(Problem.build(ds, tess.atoms))
        rep = discretization_bound_report(traj, ref, fine, tess, t_max=2 * traj.final.t)
        worst = min(worst, rep.min_slack())
        terms.append(rep.meta["diam_term"])
    ratios = [terms[i] / terms[i + 1] for i in range(2)]
    xg = np.linspace(-1, 1, 80)[:, None]
    dsg = Dataset.uniform(xg, 0.7 * np.maximum(xg[:, 0] - 0.5, 0) + 0.3 * np.maximum(-xg[:, 0] - 0.5, 0))
    table = gamma_convergence_experiment(dsg, Activation(), build_refinement(box, "nested_grid", 4), lam=100.0)
    gap = table.cauchy_gap()
    ok = worst >= -1e-8 and all(abs(r - 4) <= 1e-9 for r in ratios) and gap <= 1e-6 and table.monotone()
    return ok, (f"min slack {worst:.2e} over 3 levels; diam-term ratios {ratios[0]:.6f}, {ratios[1]:.6f}; "
                f"F_min Cauchy gap {gap:.2e} at the last two of 4 nested levels")


def criterion_12():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = {"seed": 7, "perturbation": {"kind": "noise", "value": 0.05}, "reports": ["noise", "ideal_loss"]}
        (tmp / "cfg.json").write_text(json.dumps(cfg))
        codes = [cli_main(["solve", "--config", str(tmp / "cfg.json"), "--out", str(tmp / f"run{i}"),
                           "--deterministic"]) for i in range(3)]
        blobs = [(tmp / f"run{i}" / "metrics.csv").read_bytes() for i in range(3)]
    ok = codes == [0, 0, 0] and len(set(blobs)) == 1
    return ok, f"3 runs, exit codes {codes}, {len(set(blobs))} distinct metrics.csv"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11, criterion_12]


@pytest.mark.slow
@pytest.mark.parametrize("k", range(1, 13))
def test_criterion(k, capsys):
    ok, detail = CRITERIA[k - 1]()
    with capsys.disabled():
        print("\n" + report(k, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for k, fn in enumerate(CRITERIA, 1):
        ok, detail = fn()
        failed += not ok
        print(report(k, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
