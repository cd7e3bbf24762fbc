"""Inverse scale space flow on a finite atom set.

Between events the primal measure is constant, so the residual is constant
and the dual grows linearly, ``p(t + s) = p(t) + s * g`` with
``g = L_rho(f - K mu)``.  :func:`solve_exact_iss` steps from one event to the
next exactly: an event is the first time an unpinned dual entry reaches its
bound ``+-V_n``.  At every event the primal is re-solved as a least-squares
fit over the pinned atoms with their signs fixed (a nonnegative least-squares
problem after flipping columns).
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .measure import AtomSet, DualVariable, SparseMeasure, _coeffs, j_norm
from .operators import Activation, Dataset, DesignMatrix, backproject, build_design_matrix

log = logging.getLogger(__name__)

EVENT_RTOL = 1e-12


@dataclass(frozen=True)
class Problem:
    dataset: Dataset
    atoms: AtomSet
    activation: Activation
    design: DesignMatrix

    def __post_init__(self):
        if self.design.shape != (self.dataset.m, len(self.atoms)):
            raise ValueError("design matrix shape does not match dataset and atoms")
        if self.design.dataset is not self.dataset or self.design.atoms is not self.atoms:
            raise ValueError("design matrix was built for a different dataset or atom set")

    @classmethod
    def build(cls, dataset: Dataset, atoms: AtomSet, activation: Optional[Activation] = None,
              **design_kwargs) -> "Problem":
        activation = Activation() if activation is None else activation
        return cls(dataset, atoms, activation,
                   build_design_matrix(dataset, atoms, activation, **design_kwargs))

    @property
    def weight_variant(self):
        return self.atoms.weight_variant

    @property
    def V(self) -> np.ndarray:
        return self.atoms.weights

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def predict(self, c) -> np.ndarray:
        return self.design.matvec(_coeffs(c))

    def residual(self, c) -> np.ndarray:
        return self.dataset.targets - self.predict(c)

    def gradient(self, c) -> np.ndarray:
        """Dual velocity ``L_rho(f - K mu)`` (minus the loss gradient)."""
        return backproject(self.residual(c), self.design)

    def loss(self, c) -> float:
        return 0.5 * self.dataset.sq_norm(self.residual(c))

    def with_dataset(self, dataset: Dataset) -> "Problem":
        return Problem.build(dataset, self.atoms, self.activation)


class EventKind(str, enum.Enum):
    START = "start"
    ENTRY = "entry"
    SIGN_FLIP = "sign_flip"
    STATIONARY = "stationary"
    HORIZON = "horizon"


@dataclass(frozen=True)
class Event:
    kind: EventKind
    atoms: Tuple[int, ...] = ()

    def __str__(self) -> str:
        if not self.atoms:
            return self.kind.value
        return f"{self.kind.value}({' '.join(str(n) for n in self.atoms)})"


@dataclass(frozen=True)
class Breakpoint:
    t: float
    mu: SparseMeasure
    p: DualVariable
    loss: float
    active_set: Tuple[int, ...]
    event: Event
    velocity: np.ndarray = field(repr=False)


class FlowTrajectory:
    """Piecewise-constant primal, piecewise-linear dual record of a flow."""

    def __init__(self, problem: Problem, breakpoints: Sequence[Breakpoint], status: str,
                 warnings: Sequence[str] = ()):
        self.problem = problem
        self.breakpoints: List[Breakpoint] = list(breakpoints)
        self.status = status
        self.warnings = list(warnings)

    def __len__(self):
        return len(self.breakpoints)

    def __iter__(self):
        return iter(self.breakpoints)

    def __getitem__(self, k) -> Breakpoint:
        return self.breakpoints[k]

    @property
    def times(self) -> np.ndarray:
        return np.array([bp.t for bp in self.breakpoints])

    @property
    def losses(self) -> np.ndarray:
        return np.array([bp.loss for bp in self.breakpoints])

    @property
    def final(self) -> Breakpoint:
        return self.breakpoints[-1]

    def coefficient_matrix(self) -> np.ndarray:
        return np.array([bp.mu.coefficients for bp in self.breakpoints])

    def segment(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        if k < 0:
            raise ValueError(f"time {t} precedes the trajectory")
        return k

    def state_at(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Primal coefficients and dual values at time ``t``."""
        k = self.segment(t)
        bp = self.breakpoints[k]
        return bp.mu.coefficients, bp.p.values + (t - bp.t) * bp.velocity

    def dual_at(self, t: float) -> np.ndarray:
        return self.state_at(t)[1]

    def rows(self):
        V = self.problem.V
        for bp in self.breakpoints:
            yield {
                "t": bp.t,
                "event": str(bp.event),
                "loss": bp.loss,
                "j_norm": float(np.sum(V * np.abs(bp.mu.coefficients))),
                "active_size": len(bp.active_set),
            }

    def to_csv(self, path, per_atom: bool = True) -> None:
        n = self.problem.n_atoms
        header = ["t", "event", "loss", "j_norm", "active_size"]
        if per_atom:
            header += [f"c_{i}" for i in range(n)] + [f"p_{i}" for i in range(n)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for bp, row in zip(self.breakpoints, self.rows()):
                out = [repr(row["t"]), row["event"], repr(row["loss"]), repr(row["j_norm"]),
                       row["active_size"]]
                if per_atom:
                    out += [repr(float(v)) for v in bp.mu.coefficients]
                    out += [repr(float(v)) for v in bp.p.values]
                writer.writerow(out)


# --------------------------------------------------------------------------
# nonnegative least squares


def nnls(B: np.ndarray, y: np.ndarray, x0: Optional[np.ndarray] = None,
         tol: Optional[float] = None, max_iter: Optional[int] = None):
    """Lawson-Hanson active-set solver for ``min ||B x - y||, x >= 0``.

    ``x0`` (feasible, e.g. a previous solution) seeds the passive set.
    Passive-set subproblems use the SVD least-squares solver, so with
    dependent columns the minimal-norm solution on the passive set is taken.

    Returns
    -------
    x : ndarray
    w : ndarray
        ``B^T (y - B x)``; at optimum ``w <= tol`` wherever ``x == 0``.
    ok : bool
        False when the iteration cap was hit.
    """
    m, n = B.shape
    if tol is None:
        scale = max(1.0, float(np.abs(B).max(initial=0.0)) * float(np.abs(y).max(initial=0.0)))
        tol = 10.0 * np.finfo(float).eps * max(m, n) * scale * max(1, m)
    if max_iter is None:
        max_iter = 3 * n + 30
    x = np.zeros(n)
    P = np.zeros(n, dtype=bool)

    def lsq(mask):
        z = np.zeros(n)
        if np.any(mask):
            z[mask] = np.linalg.lstsq(B[:, mask], y, rcond=None)[0]
        return z

    if x0 is not None and np.any(x0 > 0):
        P0 = np.asarray(x0) > 0
        z = lsq(P0)
        if np.all(z[P0] > 0):
            x, P = z, P0.copy()

    ok = True
    it = 0
    w = B.T @ (y - B @ x)
    while True:
        cand = ~P & (w > tol)
        if not np.any(cand):
            break
        if it >= max_iter:
            ok = False
            break
        j = int(np.flatnonzero(cand)[np.argmax(w[cand])])
        P[j] = True
        while True:
            it += 1
            z = lsq(P)
            bad = P & (z <= 0)
            if not np.any(bad):
                x = z
                break
            alpha = np.min(x[bad] / (x[bad] - z[bad]))
            x = x + alpha * (z - x)
            P &= x > 1e-300
            x[~P] = 0.0
            if it >= max_iter:
                ok = False
                break
        if not ok:
            break
        w = B.T @ (y - B @ x)
    x[~P] = 0.0
    return x, w, ok


def _restricted(problem: Problem, active: np.ndarray, signs: np.ndarray,
                warm: Optional[np.ndarray] = None):
    """Coefficients on ``active`` (indices) solving the sign-constrained fit."""
    n = problem.n_atoms
    c = np.zeros(n)
    if active.size == 0:
        return c, True
    sw = np.sqrt(problem.dataset.weights)
    B = sw[:, None] * problem.design.columns(active) * signs
    y = sw * problem.dataset.targets
    x0 = None if warm is None else np.maximum(warm[active] * signs, 0.0)
    x, w, ok = nnls(B, y, x0=x0)
    c[active] = signs * _min_norm_in_cone(B, x, w)
    return c, ok


def _min_norm_in_cone(B: np.ndarray, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Smallest ``x' >= 0`` with ``B x' = B x``, given an NNLS solution ``x``.

    Every minimiser is supported where the NNLS gradient ``w`` vanishes.  On
    that set ``x' = x_0 + Z z`` with ``x_0`` the pseudo-inverse solution and
    ``Z`` a null-space basis; ``min ||z||`` subject to ``Z z >= -x_0`` is a
    least-distance program, solved through NNLS on its dual.
    """
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    F = (x > 0) | (np.abs(w) <= 1e-9 * scale)
    if np.count_nonzero(F) < 2:
        return x
    BF = B[:, F]
    U, s, Vt = np.linalg.svd(BF, full_matrices=True)
    rank = int(np.sum(s > s[0] * max(BF.shape) * np.finfo(float).eps)) if s.size else 0
    if rank == BF.shape[1]:
        return x
    target = B @ x
    xF = Vt[:rank].T @ ((U[:, :rank].T @ target) / s[:rank])
    if np.all(xF >= 0):
        z = xF
    else:
        Z = Vt[rank:].T
        E = np.vstack([Z.T, -xF[None, :]])
        f = np.zeros(E.shape[0])
        f[-1] = 1.0
        u, _, _ = nnls(E, f)
        r = E @ u - f
        if abs(r[-1]) <= 1e-14:
            return x
        z = np.maximum(xF + Z @ (-r[:-1] / r[-1]), 0.0)
    out = np.zeros_like(x)
    out[F] = z
    if np.linalg.norm(B @ out - target) > 1e-9 * (1.0 + np.linalg.norm(target)) or out @ out > x @ x:
        return x
    return out


def signed_restricted_lsq(problem: Problem, active: Sequence[int], signs: Sequence[float]) -> SparseMeasure:
    """Minimise the loss over measures supported on ``active`` with fixed signs.

    Coefficient ``n`` is constrained to ``signs[n] * c_n >= 0``.  Dependent
    columns yield the minimal-norm minimiser on the final passive set.
    """
    active = np.asarray(active, dtype=int)
    signs = np.asarray(signs, dtype=float)
    if active.size == 0:
        raise ValueError("active set must be nonempty")
    if signs.shape != active.shape or not np.all(np.abs(signs) == 1.0):
        raise ValueError("one sign (+1 or -1) is required per active index")
    c, ok = _restricted(problem, active, signs)
    if not ok:
        log.warning("restricted least squares hit its iteration cap")
    return SparseMeasure(c)


def next_event_time(p, g, V, active, tol: float = 0.0) -> Tuple[float, Event]:
    """Time until the next unpinned dual entry reaches its bound.

    ``active`` is a boolean mask (or index list) of pinned entries that do not
    move.  Entries whose velocity is within ``tol`` of zero never fire.  All
    entries tied with the earliest time (relative ``1e-12``) enter together.
    """
    p = np.asarray(p, dtype=float)
    g = np.asarray(g, dtype=float)
    V = np.asarray(V, dtype=float)
    mask = np.zeros(p.shape[0], dtype=bool)
    mask[np.asarray(active, dtype=int) if np.asarray(active).dtype != bool else np.flatnonzero(active)] = True
    moving = ~mask & (np.abs(g) > tol)
    if not np.any(moving):
        return math.inf, Event(EventKind.HORIZON)
    idx = np.flatnonzero(moving)
    s = (V[idx] - np.sign(g[idx]) * p[idx]) / np.abs(g[idx])
    s = np.maximum(s, 0.0)
    smin = float(s.min())
    tied = idx[s <= smin * (1.0 + EVENT_RTOL)]
    return smin, Event(EventKind.ENTRY, tuple(int(n) for n in tied))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite value in flow state; "
                                     f"max |entry| before failure = {np.nanmax(np.abs(a[np.isfinite(a)]), initial=0)}")


def _weighted_column_norms(problem: Problem, chunk: int = 512) -> np.ndarray:
    w = problem.dataset.weights
    out = np.empty(problem.n_atoms)
    for lo in range(0, problem.n_atoms, chunk):
        cols = problem.design.columns(np.arange(lo, min(lo + chunk, problem.n_atoms)))
        out[lo:lo + chunk] = np.sqrt(w @ (cols * cols))
    return out


def gradient_floor(col_norms: np.ndarray, c: np.ndarray, f_norm: float) -> float:
    """Rounding level of ``backproject(f - K c)`` in double precision."""
    return float(np.finfo(float).eps * col_norms.max() * (col_norms @ np.abs(c) + f_norm))


def solve_exact_iss(problem: Problem, horizon: float = math.inf, max_events: int = 10_000,
                    tol: float = 1e-10, floor_factor: float = 100.0) -> FlowTrajectory:
    """Integrate the inverse scale space flow exactly, event by event.

    Parameters
    ----------
    problem : Problem
    horizon : float
        Stop at this time with a ``horizon`` breakpoint carrying ``p(T)``.
    max_events : int
        Cap on the number of events after the start.
    tol : float
        The flow is stationary once every ``|g_n| <= tol``.
    floor_factor : float
        Velocities within ``floor_factor`` times their rounding level at the
        current iterate are treated as exactly zero, and stationarity uses
        ``max(tol, that level)``.  ``tol=0`` therefore runs the flow to its
        numerical limit, which on ill-conditioned designs can lie at very
        large times.
    """
    if not (horizon > 0 or max_events >= 1):
        raise ValueError("need horizon > 0 or max_events >= 1")
    V = problem.V
    n = problem.n_atoms
    p = np.zeros(n)
    c = np.zeros(n)
    pinned = np.zeros(n, dtype=bool)
    sgn = np.zeros(n)
    last_sign = np.zeros(n)
    t = 0.0
    warnings: List[str] = []
    bps: List[Breakpoint] = []
    g = problem.gradient(c)
    event = Event(EventKind.START)
    status = "max_events"
    col_norms = _weighted_column_norms(problem)
    f_norm = problem.dataset.norm(problem.dataset.targets)

    for k in range(max_events + 1):
        _check_finite(p, g)
        loss = problem.loss(c)
        # velocities at rounding level are zero; tol only decides stationarity
        ev_tol = floor_factor * gradient_floor(col_norms, c, f_norm)
        _check_finite(np.array([ev_tol, loss]))
        g = np.where(np.abs(g) <= ev_tol, 0.0, g)
        if np.max(np.abs(g)) <= max(tol, ev_tol):
            bps.append(Breakpoint(t, SparseMeasure(c), DualVariable(p, t), loss,
                                  tuple(np.flatnonzero(pinned)), Event(EventKind.STATIONARY, event.atoms),
                                  np.zeros(n)))
            status = "stationary"
            break
        # pinned atoms with a zero coefficient and inward velocity leave the boundary now
        leaving = pinned & (c == 0) & (sgn * g < 0)
        if np.any(pinned & (sgn * g > max(tol, ev_tol))):
            warnings.append(f"KKT violation at t={t!r}: pinned dual pushed outward")
        velocity = g.copy()
        velocity[pinned & ~leaving] = 0.0
        bps.append(Breakpoint(t, SparseMeasure(c), DualVariable(p, t), loss,
                              tuple(np.flatnonzero(pinned)), event, velocity))
        pinned = pinned & ~leaving
        if k == max_events:
            break
        s, ev = next_event_time(p, g, V, pinned)
        if t + s > horizon:
            pT = p + (horizon - t) * velocity
            bps.append(Breakpoint(horizon, SparseMeasure(c), DualVariable(pT, horizon), loss,
                                  tuple(np.flatnonzero(pinned)), Event(EventKind.HORIZON), velocity))
            status = "horizon"
            break
        if not math.isfinite(s):
            warnings.append("no further event possible although velocity is nonzero")
            status = "stalled"
            break
        t = t + s
        p = p + s * velocity
        entering = np.array(ev.atoms, dtype=int)
        new_sign = np.sign(g[entering])
        p[entering] = new_sign * V[entering]
        flips = [int(j) for j, sj in zip(entering, new_sign) if last_sign[j] == -sj]
        pinned[entering] = True
        sgn[entering] = new_sign
        last_sign[entering] = new_sign
        # unpinned entries can drift past the bound by rounding only
        np.clip(p, -V, V, out=p)
        event = Event(EventKind.SIGN_FLIP if flips else EventKind.ENTRY, ev.atoms)

        active = np.flatnonzero(pinned)
        c, ok = _restricted(problem, active, sgn[active], warm=c)
        if not ok:
            warnings.append(f"restricted least squares hit its iteration cap at t={t!r}")
        g = problem.gradient(c)

    return FlowTrajectory(problem, bps, status, warnings)


def solve_euler_iss(problem: Problem, step: float, horizon: float,
                    active_tol: Optional[float] = None, tol: float = 1e-10) -> FlowTrajectory:
    """Explicit Euler discretisation ``p_{k+1} = p_k + step * L_rho(f - K mu_k)``.

    ``mu_k`` solves the sign-constrained fit over the atoms whose dual is
    within ``active_tol`` of its bound.  No projection is applied, so
    entering duals may overshoot ``V`` by ``O(step)``.  A breakpoint is
    recorded whenever the tolerance-active set changes.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    V = problem.V
    n = problem.n_atoms
    if active_tol is None:
        active_tol = 1e-12 * float(V.max())
    p = np.zeros(n)
    c = np.zeros(n)
    g = problem.gradient(c)
    key = None
    bps: List[Breakpoint] = []
    warnings: List[str] = []
    n_steps = int(math.ceil(horizon / step - 1e-9))
    status = "horizon"
    for k in range(n_steps + 1):
        t = min(k * step, horizon)
        on = np.abs(p) >= V - active_tol
        signs = np.sign(p)
        new_key = (on.tobytes(), signs[on].tobytes())
        if new_key != key:
            active = np.flatnonzero(on)
            c, ok = _restricted(problem, active, signs[active], warm=c)
            if not ok:
                warnings.append(f"restricted least squares hit its iteration cap at t={t!r}")
            g = problem.gradient(c)
            _check_finite(g)
            kind = EventKind.START if k == 0 else EventKind.ENTRY
            if np.max(np.abs(g)) <= tol:
                kind = EventKind.STATIONARY
            changed = () if key is None else tuple(np.flatnonzero(on))
            bps.append(Breakpoint(t, SparseMeasure(c), DualVariable(p, t), problem.loss(c),
                                  tuple(active), Event(kind, changed if kind is EventKind.ENTRY else ()), g.copy()))
            key = new_key
            if kind is EventKind.STATIONARY:
                status = "stationary"
                break
        if k == n_steps:
            bps.append(Breakpoint(t, SparseMeasure(c), DualVariable(p, t), problem.loss(c),
                                  tuple(np.flatnonzero(on)), Event(EventKind.HORIZON), g.copy()))
            break
        p = p + (min((k + 1) * step, horizon) - t) * g
    return FlowTrajectory(problem, bps, status, warnings)


# --------------------------------------------------------------------------
# weighted lasso with a linear term, used by Bregman iterations


def _spectral_sq(problem: Problem) -> float:
    sw = np.sqrt(problem.dataset.weights)
    M = sw[:, None] * problem.design.toarray()
    return float(np.linalg.norm(M, 2) ** 2)


def _polish(problem: Problem, lam: float, lin: np.ndarray, c: np.ndarray, tol: float):
    """Exact solve on the support and sign pattern of ``c``; None if it fails KKT."""
    S = np.flatnonzero(c)
    V = problem.V
    if S.size == 0:
        g = problem.gradient(c)
        q = lin + lam * g
        return c if np.all(np.abs(q) <= V + tol) else None
    s = np.sign(c[S])
    w = problem.dataset.weights
    A_S = problem.design.columns(S)
    H = lam * (A_S.T @ (w[:, None] * A_S))
    rhs = lam * (A_S.T @ (w * problem.dataset.targets)) + lin[S] - V[S] * s
    cs = np.linalg.lstsq(H, rhs, rcond=None)[0]
    if np.any(np.sign(cs) != s):
        return None
    out = np.zeros_like(c)
    out[S] = cs
    q = lin + lam * problem.gradient(out)
    if np.all(np.abs(q) <= V + tol) and np.allclose(q[S], V[S] * s, atol=tol, rtol=0):
        return out
    return None


def solve_weighted_lasso(problem: Problem, lam: float, linear: Optional[np.ndarray] = None,
                         tol: float = 1e-10, max_iter: int = 200_000,
                         x0: Optional[np.ndarray] = None):
    """Minimise ``J(c) - <linear, c> + lam * R_f(c)`` by restarted FISTA.

    The prox-gradient result is polished by an exact solve on its support
    when the resulting point passes the optimality check.  Returns the
    coefficients and the final prox-gradient residual (sup-norm).
    """
    V = problem.V
    n = problem.n_atoms
    lin = np.zeros(n) if linear is None else np.asarray(linear, dtype=float)
    L = lam * _spectral_sq(problem)
    if L <= 0:
        return np.zeros(n), 0.0
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    y = x.copy()
    theta = 1.0
    res = math.inf
    for it in range(max_iter):
        grad = -lin - lam * problem.gradient(y)
        z = y - grad / L
        x_new = np.sign(z) * np.maximum(np.abs(z) - V / L, 0.0)
        res = L * float(np.max(np.abs(x_new - y)))
        if np.dot(y - x_new, x_new - x) > 0:
            theta = 1.0
            y = x_new.copy()
        else:
            theta_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
            y = x_new + ((theta - 1.0) / theta_new) * (x_new - x)
            theta = theta_new
        x = x_new
        if res <= tol:
            break
        if it % 50 == 49:
            pol = _polish(problem, lam, lin, x, tol)
            if pol is not None:
                return pol, 0.0
    pol = _polish(problem, lam, lin, x, tol)
    if pol is not None:
        return pol, 0.0
    return x, res


class InnerSolverError(RuntimeError):
    pass


def solve_bregman(problem: Problem, lam: float, iters: int, inner_tol: float = 1e-10,
                  max_inner: int = 200_000) -> List[Tuple[SparseMeasure, DualVariable]]:
    """Bregman iterations ``mu_k = argmin D_J^{p_{k-1}}(mu, mu_{k-1}) + lam R_f(mu)``.

    The dual update is ``p_k = p_{k-1} + lam * L_rho(f - K mu_k)``.  The
    ``time`` attached to ``p_k`` is ``k * lam``.  Returns ``[(mu_k, p_k)]``
    for ``k = 1..iters``.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    n = problem.n_atoms
    p = np.zeros(n)
    c = np.zeros(n)
    out = []
    for k in range(1, iters + 1):
        c, res = solve_weighted_lasso(problem, lam, linear=p, tol=inner_tol,
                                      max_iter=max_inner, x0=c)
        if res > inner_tol:
            raise InnerSolverError(f"Bregman step {k}: prox-gradient residual {res:.3e} "
                                   f"> inner_tol {inner_tol:.1e} after {max_inner} iterations")
        p = p + lam * problem.gradient(c)
        out.append((SparseMeasure(c), DualVariable(p, k * lam)))
    return out
