"""Small-instance reference computations.

These are direct convex solves that do not share code paths with the flow
solver: a linear program for the minimal-``J`` least-squares solution and
its dual certificate, a quadratic program for the source element, a
transport linear program for ``W_1`` and a literal projected Euler loop.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import optimize, sparse
from scipy.spatial.distance import cdist

from .measure import DualVariable, SparseMeasure, _coeffs
from .operators import Dataset
from .solver import Breakpoint, Event, EventKind, FlowTrajectory, Problem

log = logging.getLogger(__name__)

MAX_ATOMS = 2000
MAX_SAMPLES = 2000
MAX_TRANSPORT_POINTS = 200


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReferenceSolution:
    mu_dagger: SparseMeasure
    p_dagger: DualVariable
    phi: Optional[np.ndarray]
    certified: bool
    orthogonality: float = 0.0
    j_value: float = 0.0
    loss: float = 0.0

    def with_phi(self, phi: Optional[np.ndarray], certified: bool) -> "ReferenceSolution":
        return ReferenceSolution(self.mu_dagger, self.p_dagger, phi, certified,
                                 self.orthogonality, self.j_value, self.loss)


def _ls_on(problem: Problem, S: np.ndarray) -> np.ndarray:
    c = np.zeros(problem.n_atoms)
    if S.size:
        sw = np.sqrt(problem.dataset.weights)
        B = sw[:, None] * problem.design.columns(S)
        c[S] = np.linalg.lstsq(B, sw * problem.dataset.targets, rcond=None)[0]
    return c


def orthogonality_residual(problem: Problem, mu) -> float:
    return float(np.max(np.abs(problem.gradient(_coeffs(mu)))))


def minimal_norm_minimizer(problem: Problem, tol: float = 1e-8) -> ReferenceSolution:
    """Minimal-``J`` element of the least-squares solution set.

    Least-squares minimisers are exactly the ``c`` with ``A c = y_hat`` on the
    samples of positive weight, where ``y_hat`` is the (unique) optimal
    prediction; this is equivalent to the normal equations
    ``A^T W (A c - f) = 0`` but has only ``m`` rows.  The weighted ``l^1``
    problem over that set is solved as a linear program and its support is
    re-fitted exactly.  The equality multipliers ``y`` give the dual
    certificate ``p = A^T y`` with ``|p| <= V``; ``phi = y / w`` satisfies
    ``L phi = p`` and is a feasible source element.
    """
    N, m = problem.n_atoms, problem.dataset.m
    if N > MAX_ATOMS or m > MAX_SAMPLES:
        raise ValueError(f"oracle limited to N <= {MAX_ATOMS}, m <= {MAX_SAMPLES}")
    V = problem.V
    A = problem.design.toarray()
    w = problem.dataset.weights
    rows = np.flatnonzero(w > 0)
    c_ls = _ls_on(problem, np.arange(N))
    y_hat = A @ c_ls
    if not np.any(problem.gradient(np.zeros(N))):
        c = np.zeros(N)
        return ReferenceSolution(SparseMeasure(c), DualVariable(np.zeros(N)), np.zeros(m), True,
                                 orthogonality_residual(problem, c), 0.0, problem.loss(c))
    Ar = A[rows]
    res = optimize.linprog(np.concatenate([V, V]), A_eq=np.hstack([Ar, -Ar]), b_eq=y_hat[rows],
                           bounds=(0, None), method="highs")
    if res.status != 0:
        cond = np.linalg.cond(Ar)
        raise OracleError(f"minimal-norm LP failed ({res.message}); cond(A) = {cond:.3e}")
    c_lp = res.x[:N] - res.x[N:]
    # HiGHS reports d(obj)/d(b_eq), which is the dual solution of max y_hat.y, |A^T y| <= V
    y = np.zeros(m)
    y[rows] = np.asarray(res.eqlin.marginals)
    if y_hat @ y < 0:
        y = -y
    p = A.T @ y
    scale = max(1.0, float(np.max(np.abs(p) / V)))
    y = y / scale
    p = p / scale
    phi = np.zeros(m)
    phi[rows] = y[rows] / w[rows]

    c = c_lp
    thr = 1e-9 * max(1.0, float(np.max(np.abs(c_lp))))
    S = np.flatnonzero(np.abs(c_lp) > thr)
    c_pol = _ls_on(problem, S)
    j_lp = float(V @ np.abs(c_lp))
    j_pol = float(V @ np.abs(c_pol))
    # the LP meets its equalities only to solver accuracy, so its J may sit
    # slightly below the exact value on the same support
    if (orthogonality_residual(problem, c_pol) <= orthogonality_residual(problem, c_lp)
            and j_pol <= j_lp * (1 + 1e-6) + 1e-12):
        c = c_pol
    orth = orthogonality_residual(problem, c)
    on = c != 0
    consistent = bool(np.all(np.abs(p[on]) >= V[on] - 1e-7) and np.all(np.sign(p[on]) == np.sign(c[on])))
    certified = orth <= tol and consistent
    if not certified:
        log.warning("reference solution not certified: orthogonality %.2e, consistent %s", orth, consistent)
    return ReferenceSolution(SparseMeasure(c), DualVariable(p), phi, certified, orth,
                             float(V @ np.abs(c)), problem.loss(c))


def _source_constraints(problem: Problem, c: np.ndarray, phi: np.ndarray) -> float:
    """Largest violation of the source-condition constraints at ``phi``."""
    V = problem.V
    q = problem.design.rmatvec(problem.dataset.weights * phi)
    on = c != 0
    viol = 0.0
    if np.any(on):
        viol = float(np.max(np.abs(q[on] - V[on] * np.sign(c[on]))))
    if np.any(~on):
        viol = max(viol, float(np.max(np.abs(q[~on]) - V[~on])))
    return viol


def source_element(problem: Problem, reference: ReferenceSolution,
                   tol: float = 1e-8) -> Tuple[Optional[np.ndarray], bool]:
    """Minimal ``L^2(rho)``-norm ``phi`` with ``L phi = V sgn(mu)`` on the support.

    Off the support ``|L phi| <= V`` is required.  The quadratic program is
    solved with cvxpy, then polished by an exact equality-constrained
    minimum-norm solve over the constraints that are tight.  Returns
    ``(phi, satisfied)``; ``phi`` is None when no feasible element is found.
    """
    import cvxpy as cp

    c = reference.mu_dagger.coefficients
    m = problem.dataset.m
    if not np.any(c):
        return np.zeros(m), True
    A = problem.design.toarray()
    w = problem.dataset.weights
    V = problem.V
    on = c != 0
    S = np.flatnonzero(on)
    O = np.flatnonzero(~on)
    M = A.T * w  # rows are L applied to unit vectors
    phi_var = cp.Variable(m)
    cons = [M[S] @ phi_var == V[S] * np.sign(c[S])]
    if O.size:
        cons.append(cp.abs(M[O] @ phi_var) <= V[O])
    prob = cp.Problem(cp.Minimize(cp.sum(cp.multiply(w, cp.square(phi_var)))), cons)
    phi = None
    try:
        prob.solve(solver=cp.CLARABEL)
        if prob.status in ("optimal", "optimal_inaccurate") and phi_var.value is not None:
            phi = np.asarray(phi_var.value, dtype=float)
    except cp.error.SolverError as exc:
        log.warning("source-element QP failed: %s", exc)

    candidates = []
    if phi is not None:
        q = M @ phi
        tight = on | (np.abs(q) >= V - 1e-6)
        E = np.flatnonzero(tight)
        target = np.where(on, V * np.sign(c), V * np.sign(q))[E]
        # phi = A_E z solves min ||phi||_w subject to L_E phi = target
        z = np.linalg.lstsq(M[E] @ A[:, E], target, rcond=None)[0]
        candidates.append(A[:, E] @ z)
        candidates.append(phi)
    if reference.phi is not None:
        candidates.append(np.asarray(reference.phi, dtype=float))
    feasible = [ph for ph in candidates if _source_constraints(problem, c, ph) <= tol]
    if not feasible:
        return None, False
    best = min(feasible, key=lambda ph: float(w @ (ph * ph)))
    return best, True


def certify(problem: Problem, tol: float = 1e-8) -> ReferenceSolution:
    """Reference solution with its minimal-norm source element attached."""
    ref = minimal_norm_minimizer(problem, tol)
    phi, ok = source_element(problem, ref, tol)
    return ref.with_phi(phi, ref.certified and ok)


def wasserstein1(dataset_a: Dataset, dataset_b: Dataset, ground_metric: str = "l2") -> float:
    """Optimal transport cost between two weighted point clouds."""
    metric = {"l2": "euclidean", "linf": "chebyshev"}[ground_metric.lower()]
    na, nb = dataset_a.m, dataset_b.m
    if na > MAX_TRANSPORT_POINTS or nb > MAX_TRANSPORT_POINTS:
        raise ValueError(f"transport LP limited to {MAX_TRANSPORT_POINTS} points per side")
    C = cdist(dataset_a.points, dataset_b.points, metric=metric)
    rows = sparse.kron(sparse.eye(na), np.ones((1, nb)))
    cols = sparse.kron(np.ones((1, na)), sparse.eye(nb))
    A_eq = sparse.vstack([rows, cols]).tocsr()
    b_eq = np.concatenate([dataset_a.weights, dataset_b.weights])
    res = optimize.linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise OracleError(f"transport LP failed: {res.message}")
    return max(0.0, float(res.fun))


def brute_force_flow(problem: Problem, step: float = 1e-5, horizon: float = 1.0) -> FlowTrajectory:
    """Projected explicit Euler integration of the flow.

    ``p`` is clipped to ``[-V, V]`` after every step; the primal is the
    sign-constrained least-squares fit on ``{|p_n| = V_n}``, solved with
    scipy's NNLS.  Breakpoints are recorded whenever that set or its signs
    change; between them ``p`` moves linearly with the recorded velocity.
    """
    V = problem.V
    n = problem.n_atoms
    sw = np.sqrt(problem.dataset.weights)
    A = problem.design.toarray()
    y = sw * problem.dataset.targets
    p = np.zeros(n)
    n_steps = int(math.ceil(horizon / step - 1e-9))
    bps: List[Breakpoint] = []
    key = None
    g = vel = None
    c = np.zeros(n)
    for k in range(n_steps + 1):
        t = min(k * step, horizon)
        on = np.abs(p) >= V
        new_key = on.tobytes() + np.sign(p[on]).tobytes()
        if new_key != key:
            c = np.zeros(n)
            idx = np.flatnonzero(on)
            if idx.size:
                s = np.sign(p[idx])
                x, _ = optimize.nnls(sw[:, None] * A[:, idx] * s, y)
                c[idx] = s * x
            g = problem.gradient(c)
            vel = np.where(on & (np.sign(p) * g > 0), 0.0, g)
            kind = EventKind.START if key is None else EventKind.ENTRY
            bps.append(Breakpoint(t, SparseMeasure(c), DualVariable(p, t), problem.loss(c),
                                  tuple(idx), Event(kind), vel))
            key = new_key
        if k == n_steps:
            break
        t_next = min((k + 1) * step, horizon)
        p = np.clip(p + (t_next - t) * g, -V, V)
    bps.append(Breakpoint(horizon, SparseMeasure(c), DualVariable(p, horizon), problem.loss(c),
                          tuple(np.flatnonzero(np.abs(p) >= V)), Event(EventKind.HORIZON), vel))
    return FlowTrajectory(problem, bps, "horizon")
