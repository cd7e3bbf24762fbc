"""Data perturbations, Bregman-distance bound reports and early stopping.

Every generator draws from a Philox counter-based stream seeded by the
caller, so a (dataset, spec) pair always maps to the same perturbed data.

Bound reports compare ``D^{q_t}(mu_dagger, nu_t)`` along a perturbed flow
against the closed-form right-hand sides of the noise and sampling-bias
estimates.  Since ``nu_t`` is piecewise constant, the dual is piecewise
linear and so is the left-hand side; it is evaluated at breakpoints and at
interior points of every segment.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.spatial.distance import cdist

from .measure import AtomSet, _coeffs, _dual, dual_feasibility, j_norm, subgradient_consistency
from .operators import Dataset, DesignMatrix, build_design_matrix
from .oracle import ReferenceSolution
from .solver import FlowTrajectory, Problem


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


class PerturbationKind(str, enum.Enum):
    NOISE = "noise"
    RADON_NIKODYM = "radon_nikodym"
    SUBSAMPLE = "subsample"
    WASSERSTEIN_SHIFT = "wasserstein_shift"


@dataclass(frozen=True)
class PerturbationSpec:
    """``value`` is delta, epsilon or m_sub depending on ``kind``."""

    kind: PerturbationKind
    value: float
    seed: int = 0

    def __post_init__(self):
        kind = PerturbationKind(self.kind)
        object.__setattr__(self, "kind", kind)
        v = self.value
        if kind is PerturbationKind.NOISE and not v > 0:
            raise ValueError(f"noise delta must be positive, got {v}")
        if kind is PerturbationKind.RADON_NIKODYM and not 0 < v < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {v}")
        if kind is PerturbationKind.WASSERSTEIN_SHIFT and not v > 0:
            raise ValueError(f"epsilon must be positive, got {v}")
        if kind is PerturbationKind.SUBSAMPLE:
            if not (float(v).is_integer() and v >= 1):
                raise ValueError(f"m_sub must be a positive integer, got {v}")
            object.__setattr__(self, "value", int(v))
        if not math.isfinite(float(v)):
            raise ValueError("perturbation value must be finite")

    def apply(self, dataset: Dataset) -> Dataset:
        fn = {
            PerturbationKind.NOISE: add_measurement_noise,
            PerturbationKind.RADON_NIKODYM: radon_nikodym_reweight,
            PerturbationKind.SUBSAMPLE: monte_carlo_subsample,
            PerturbationKind.WASSERSTEIN_SHIFT: wasserstein_shift,
        }[self.kind]
        return fn(dataset, self.value, self.seed)


def add_measurement_noise(dataset: Dataset, delta: float, seed: int) -> Dataset:
    """Targets ``f + eta`` with ``||eta||_{L^2(rho)} = delta`` exactly."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    eta = philox(seed).standard_normal(dataset.m)
    nrm = dataset.norm(eta)
    if nrm == 0.0:
        raise ValueError("dataset has no positive weight to carry noise")
    eta *= delta / nrm
    return Dataset(dataset.points, dataset.weights, dataset.targets + eta, None)


def radon_nikodym_reweight(dataset: Dataset, epsilon: float, seed: int) -> Dataset:
    """Weights ``w_i (1 + eta_i)`` with ``|eta_i| <= epsilon`` and ``sum w eta = 0``."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    u = philox(seed).uniform(-1.0, 1.0, dataset.m)
    w = dataset.weights
    v = u - float(w @ u)
    scale = float(np.max(np.abs(v[w > 0]), initial=0.0))
    if scale == 0.0:
        return dataset
    # the small shrink keeps the density bound after the final renormalisation
    eta = epsilon * (1.0 - 1e-12) * v / scale
    w_new = w * (1.0 + eta)
    w_new /= w_new.sum()
    return Dataset(dataset.points, w_new, dataset.targets, dataset.target_fn)


def monte_carlo_subsample(dataset: Dataset, m_sub: int, seed: int) -> Dataset:
    """``m_sub`` i.i.d. draws from ``rho`` (with replacement), weights ``1/m_sub``."""
    m_sub = int(m_sub)
    if not 1 <= m_sub <= dataset.m:
        raise ValueError(f"m_sub must lie in [1, {dataset.m}]")
    idx = philox(seed).choice(dataset.m, size=m_sub, replace=True, p=dataset.weights)
    return Dataset(dataset.points[idx], np.full(m_sub, 1.0 / m_sub), dataset.targets[idx],
                   dataset.target_fn)


def wasserstein_shift(dataset: Dataset, epsilon: float, seed: int) -> Dataset:
    """Move every point by a random vector of Euclidean norm at most ``epsilon``.

    The identity coupling certifies ``W_1 <= epsilon``.  Targets are
    re-evaluated when the dataset carries ``target_fn``; otherwise the old
    labels are kept (see :func:`labels_reevaluated`).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    rng = philox(seed)
    d = rng.standard_normal((dataset.m, dataset.dim))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    r = epsilon * rng.uniform(0.0, 1.0, (dataset.m, 1))
    x = dataset.points + r * d
    if dataset.target_fn is not None:
        return Dataset(x, dataset.weights, dataset.target_fn(x), dataset.target_fn)
    return Dataset(x, dataset.weights, dataset.targets, None)


def labels_reevaluated(dataset: Dataset) -> bool:
    return dataset.target_fn is not None


# --------------------------------------------------------------------------
# Bregman distance and norm helpers


def bregman_distance(mu_ref, mu, p, atoms: AtomSet, tol: float = 1e-9) -> float:
    """``J(mu_ref) - J(mu) - <p, mu_ref - mu>`` for ``p`` in the subdifferential at ``mu``."""
    c_ref, c, q = _coeffs(mu_ref), _coeffs(mu), _dual(p)
    if not (dual_feasibility(q, atoms, tol).feasible and subgradient_consistency(c, q, atoms, tol)):
        raise ValueError("p is not a subgradient of J at mu; the Bregman distance is undefined")
    return j_norm(c_ref, atoms) - j_norm(c, atoms) - float(q @ (c_ref - c))


def signed_sq_norm(values_a, weights_a, values_b, weights_b) -> float:
    """``||g||^2`` against the signed measure ``rho_a - rho_b``."""
    return float(np.dot(weights_a, np.square(values_a)) - np.dot(weights_b, np.square(values_b)))


def lp_norm(dataset: Dataset, values, p: float) -> float:
    return float(np.dot(dataset.weights, np.abs(values) ** p) ** (1.0 / p))


_METRICS = {"l2": "euclidean", "linf": "chebyshev"}


def lipschitz_seminorm(points, values, ground_metric: str = "l2") -> float:
    """Largest difference quotient over all pairs of distinct points.

    On a finite point set this is the exact Lipschitz constant, which a
    McShane extension carries over to the whole space.
    """
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    if points.shape[0] < 2:
        return 0.0
    D = cdist(points, points, metric=_METRICS[ground_metric.lower()])
    dv = np.abs(values[:, None] - values[None, :])
    same = D == 0
    if np.any(dv[same] > 0):
        return math.inf
    D[same] = 1.0
    return float(np.max(dv / D))


def c01_norm(points, values, ground_metric: str = "l2") -> float:
    """``sup |g| + Lip(g)`` over a finite point set."""
    values = np.asarray(values, dtype=float)
    return float(np.max(np.abs(values))) + lipschitz_seminorm(points, values, ground_metric)


def double_integral(times: np.ndarray, H: np.ndarray, t: float) -> float:
    """``int_0^t int_0^tau h(nu_tau - nu_s) ds dtau`` for piecewise-constant ``nu``.

    ``times`` are segment start times (``times[0] == 0``) and
    ``H[i, j] = h(nu_i - nu_j)`` with ``h(0) = 0``.  Each pair of segments
    ``i > j`` contributes ``H[i, j]`` times the product of their lengths
    clipped to ``[0, t]``.
    """
    times = np.asarray(times, dtype=float)
    ends = np.append(times[1:], np.inf)
    lengths = np.clip(np.minimum(ends, t) - times, 0.0, None)
    L = np.tril(np.outer(lengths, lengths), k=-1)
    return float(np.sum(L * H))


def quadrature_double_integral(nu_at: Callable[[float], int], H: np.ndarray, t: float,
                               dt: float = 1e-3) -> float:
    """Midpoint-rule version of :func:`double_integral` (test oracle)."""
    n = int(round(t / dt))
    mids = (np.arange(n) + 0.5) * (t / n)
    seg = np.array([nu_at(s) for s in mids])
    before = np.zeros(H.shape[0])
    total = 0.0
    for lo in range(0, n, 65536):
        chunk = seg[lo:lo + 65536]
        onehot = np.zeros((chunk.size, H.shape[0]))
        onehot[np.arange(chunk.size), chunk] = 1.0
        counts = before + np.cumsum(onehot, axis=0) - onehot  # steps strictly before each k
        total += float(np.sum(H[chunk] * counts)) + 0.5 * float(np.sum(H[chunk, chunk]))
        before = counts[-1] + onehot[-1]
    return total * (t / n) ** 2


# --------------------------------------------------------------------------
# reports


@dataclass
class BoundReport:
    times: List[float]
    lhs: List[float]
    rhs: List[float]
    slack: List[float]
    theorem_id: str
    applicable: bool
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.times) == len(self.lhs) == len(self.rhs) == len(self.slack)):
            raise ValueError("report columns must have equal lengths")

    @classmethod
    def not_applicable(cls, theorem_id: str, reason: str) -> "BoundReport":
        return cls([], [], [], [], theorem_id, False, {"reason": reason})

    def min_slack(self) -> float:
        return float(np.min(self.slack)) if self.slack else math.nan

    def holds(self, tol: float) -> bool:
        return self.applicable and bool(np.all(np.asarray(self.slack) >= -tol))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "lhs", "rhs", "slack", "theorem_id", "applicable"])
            if not self.applicable:
                writer.writerow(["nan", "nan", "nan", "nan", self.theorem_id, "false"])
                return
            for row in zip(self.times, self.lhs, self.rhs, self.slack):
                writer.writerow([repr(float(v)) for v in row] + [self.theorem_id, "true"])


def evaluation_times(trajectory: FlowTrajectory, interior: int = 3,
                     t_max: Optional[float] = None) -> np.ndarray:
    """Breakpoint times ``> 0`` plus ``interior`` equispaced points per segment.

    Times past the last breakpoint are only added up to ``t_max``.
    """
    bt = trajectory.times
    if t_max is not None and t_max > bt[-1]:
        bt = np.append(bt, t_max)
    pts = [bt]
    for k in range(1, interior + 1):
        pts.append(bt[:-1] + (bt[1:] - bt[:-1]) * k / (interior + 1))
    t = np.unique(np.concatenate(pts))
    return t[t > 0]


def _bregman_along(trajectory: FlowTrajectory, mu_dagger, times) -> np.ndarray:
    atoms = trajectory.problem.atoms
    out = np.empty(len(times))
    for k, t in enumerate(times):
        c, q = trajectory.state_at(t)
        out[k] = bregman_distance(mu_dagger, c, q, atoms)
    return out


def noise_rhs(t, phi_norm: float, delta: float):
    t = np.asarray(t, dtype=float)
    return (phi_norm + delta * t) ** 2 / (2.0 * t) + delta * delta * t / 8.0


def noise_optimal_time(phi_norm: float, delta: float) -> float:
    """Minimiser of :func:`noise_rhs` found numerically on a log-time scale."""
    res = optimize.minimize_scalar(lambda s: float(noise_rhs(math.exp(s), phi_norm, delta)),
                                   bracket=(-30.0, 30.0), tol=1e-12)
    return math.exp(res.x)


def noise_bound_report(trajectory_noisy: FlowTrajectory, reference_clean: ReferenceSolution,
                       delta: float, interior: int = 3, t_max: Optional[float] = None) -> BoundReport:
    """Noise bound ``D <= (||phi|| + delta t)^2 / 2t + delta^2 t / 8``.

    ``delta`` bounds ``||f^delta - f||_{L^2(rho)}`` (a norm, not its square).
    Meta data carry the rhs-minimising time, its closed form
    ``2 ||phi|| / (sqrt(5) delta)`` and the largest slope of the lhs
    between breakpoints next to the cap ``delta^2 / 4``.
    """
    tag = "noise"
    if reference_clean.phi is None:
        return BoundReport.not_applicable(tag, "no source element for the clean problem")
    ds = trajectory_noisy.problem.dataset
    phi_norm = ds.norm(reference_clean.phi)
    times = evaluation_times(trajectory_noisy, interior, t_max)
    lhs = _bregman_along(trajectory_noisy, reference_clean.mu_dagger, times)
    rhs = noise_rhs(times, phi_norm, delta)
    bt = trajectory_noisy.times
    D_bp = _bregman_along(trajectory_noisy, reference_clean.mu_dagger, bt)
    slopes = np.diff(D_bp) / np.diff(bt) if len(bt) > 1 else np.zeros(0)
    meta = {
        "phi_norm": phi_norm,
        "t_star": noise_optimal_time(phi_norm, delta),
        "t_star_closed_form": 2.0 * phi_norm / (math.sqrt(5.0) * delta),
        "max_slope": float(slopes.max()) if slopes.size else -math.inf,
        "slope_cap": delta * delta / 4.0,
        "delta_semantics": "norm",
    }
    return BoundReport(list(times), list(lhs), list(rhs), list(rhs - lhs), tag, True, meta)


def ideal_loss_report(trajectory: FlowTrajectory, reference: ReferenceSolution, interior: int = 3,
                      t_max: Optional[float] = None) -> BoundReport:
    """Loss rate ``R_f(mu_t) <= R_f(mu_dagger) + J(mu_dagger) / t`` on unperturbed data."""
    prob = trajectory.problem
    times = evaluation_times(trajectory, interior, t_max)
    lhs = np.array([prob.loss(trajectory.state_at(t)[0]) for t in times])
    rhs = reference.loss + j_norm(reference.mu_dagger, prob.atoms) / times
    return BoundReport(list(times), list(lhs), list(rhs), list(rhs - lhs), "ideal_loss", True)


def ideal_bregman_report(trajectory: FlowTrajectory, reference: ReferenceSolution, interior: int = 3,
                         t_max: Optional[float] = None) -> BoundReport:
    """Bregman rate ``D^{p_t}(mu_dagger, mu_t) <= ||phi||^2 / 2t`` under the source condition."""
    tag = "ideal_bregman"
    if reference.phi is None:
        return BoundReport.not_applicable(tag, "no source element")
    ds = trajectory.problem.dataset
    phi_sq = ds.sq_norm(reference.phi)
    times = evaluation_times(trajectory, interior, t_max)
    lhs = _bregman_along(trajectory, reference.mu_dagger, times)
    rhs = phi_sq / (2.0 * times)
    return BoundReport(list(times), list(lhs), list(rhs), list(rhs - lhs), tag, True, {"phi_norm": math.sqrt(phi_sq)})


def _predictions(trajectory: FlowTrajectory, design: DesignMatrix) -> np.ndarray:
    return np.array([design.matvec(bp.mu.coefficients) for bp in trajectory.breakpoints])


def _pairwise_sq(P: np.ndarray, weights: np.ndarray) -> np.ndarray:
    diff = P[:, None, :] - P[None, :, :]
    return np.einsum("ijk,k->ij", diff * diff, weights)


def bias_bound_report(trajectory_biased: FlowTrajectory, reference_clean: ReferenceSolution,
                      reference_biased: ReferenceSolution, spec: PerturbationSpec,
                      clean_problem: Problem, variant: Optional[str] = None,
                      delta_prob: float = 0.1, ground_metric: str = "l2",
                      interior: int = 3, t_max: Optional[float] = None) -> BoundReport:
    """Sampling-bias bounds on ``D^{q_t}(mu_dagger, nu_t)``.

    ``variant`` is one of ``general``, ``radon``, ``sampling`` or
    ``wasserstein``; by default it follows ``spec.kind``.  ``nu_t`` runs on
    the biased data ``rho^eps`` and ``mu_dagger`` is the clean reference.
    Wasserstein seminorms are maxima over the union of both point sets and
    carry the ``estimate`` flag.
    """
    if variant is None:
        variant = {
            PerturbationKind.RADON_NIKODYM: "radon",
            PerturbationKind.SUBSAMPLE: "sampling",
            PerturbationKind.WASSERSTEIN_SHIFT: "wasserstein",
        }.get(spec.kind, "general")
    tag = f"bias_{variant}"
    if reference_clean.phi is None or reference_biased.phi is None:
        return BoundReport.not_applicable(tag, "source element missing for clean or biased problem")
    if variant not in ("general", "radon", "sampling", "wasserstein"):
        raise ValueError(f"unknown bias bound variant {variant!r}")
    prob_b = trajectory_biased.problem
    ds_b, ds = prob_b.dataset, clean_problem.dataset
    if len(prob_b.atoms) != len(clean_problem.atoms) or not np.array_equal(prob_b.atoms.points,
                                                                           clean_problem.atoms.points):
        raise ValueError("clean and biased problems must share the atom set")
    eps = float(spec.value)
    A_b, A = prob_b.design, clean_problem.design
    c_dag = reference_clean.mu_dagger.coefficients
    c_nu_dag = reference_biased.mu_dagger.coefficients
    phi_norm = ds.norm(reference_clean.phi)

    P_b = _predictions(trajectory_biased, A_b)   # K nu_i on biased points
    P = _predictions(trajectory_biased, A)       # K nu_i on clean points
    r_dag = ds.targets - A.matvec(c_dag)          # f - K mu_dagger on rho
    r_dag_b = ds_b.targets - A_b.matvec(c_dag)    # same on rho^eps
    dagger_gap_b = ds_b.sq_norm(A_b.matvec(c_nu_dag) - A_b.matvec(c_dag))
    meta: Dict[str, object] = {"epsilon": eps}

    if variant == "general":
        H = _pairwise_sq(P_b, ds_b.weights) - _pairwise_sq(P, ds.weights)
        coef_int = lambda t: 1.0 / (2.0 * t)
        const = lambda t: t / 4.0 * signed_sq_norm(r_dag_b, ds_b.weights, r_dag, ds.weights) \
            + t / 8.0 * dagger_gap_b
    elif variant == "radon":
        H = _pairwise_sq(P_b, ds_b.weights)
        coef_int = lambda t: eps / (1.0 + eps) / (2.0 * t)
        fit_b = ds_b.sq_norm(ds_b.targets - A_b.matvec(c_nu_dag))
        const = lambda t: (2.0 * eps + 1.0) * t / 4.0 * ds.sq_norm(r_dag) + t / 4.0 * fit_b
        meta["realised_epsilon"] = float(np.max(np.abs(ds_b.weights / ds.weights - 1.0))) \
            if ds_b.m == ds.m and np.array_equal(ds_b.points, ds.points) else math.nan
    elif variant == "sampling":
        m_sub = ds_b.m
        root = math.sqrt(m_sub * delta_prob)
        diff = P[:, None, :] - P[None, :, :]
        H = np.sqrt(np.einsum("ijk,k->ij", diff ** 4, ds.weights)) / root
        r4 = lp_norm(ds, r_dag, 4) ** 2 / root
        coef_int = lambda t: 1.0 / (2.0 * t)
        const = lambda t: t / 4.0 * r4 + t / 8.0 * dagger_gap_b
        meta.update(m_sub=m_sub, delta_prob=delta_prob)
    else:
        pts = np.vstack([ds.points, ds_b.points])
        n_bp = P.shape[0]
        H = np.zeros((n_bp, n_bp))
        both = np.hstack([P, P_b])
        for i in range(n_bp):
            for j in range(i):
                H[i, j] = H[j, i] = c01_norm(pts, both[i] - both[j], ground_metric) ** 2
        c_res = c01_norm(pts, np.concatenate([r_dag, r_dag_b]), ground_metric) ** 2
        coef_int = lambda t: eps / t
        const = lambda t: eps * t / 2.0 * c_res + t / 8.0 * dagger_gap_b
        meta.update(estimate=True, ground_metric=ground_metric,
                    labels_reevaluated=labels_reevaluated(ds_b))

    times = evaluation_times(trajectory_biased, interior, t_max)
    lhs = _bregman_along(trajectory_biased, c_dag, times)
    bt = trajectory_biased.times
    rhs = np.array([phi_norm ** 2 / (2.0 * t) + coef_int(t) * double_integral(bt, H, t) + const(t)
                    for t in times])
    return BoundReport(list(times), list(lhs), list(rhs), list(rhs - lhs), tag, True, meta)


# --------------------------------------------------------------------------
# lemma checks


class LemmaCheck(NamedTuple):
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


def density_change_checks(dataset: Dataset, reweighted: Dataset, g) -> List[LemmaCheck]:
    """The three norm-transfer inequalities for a reweighted dataset.

    ``epsilon`` is taken as the realised ``max |w'/w - 1|``.
    """
    if not np.array_equal(dataset.points, reweighted.points):
        raise ValueError("reweighting must keep the sample points")
    w, w2 = dataset.weights, reweighted.weights
    pos = w > 0
    eps = float(np.max(np.abs(w2[pos] / w[pos] - 1.0)))
    g = np.asarray(g, dtype=float)
    n_rho = dataset.sq_norm(g)
    n_eps = reweighted.sq_norm(g)
    return [
        LemmaCheck(float(np.dot(w - w2, g * g)), eps * n_rho),
        LemmaCheck(n_eps, (1.0 + eps) * n_rho),
        LemmaCheck((1.0 - eps) * n_rho, n_eps),
    ]


def wasserstein_change_check(dataset: Dataset, shifted: Dataset, g_fn: Callable[[np.ndarray], np.ndarray],
                             w1: float, ground_metric: str = "l2") -> LemmaCheck:
    """``||g||^2_{L^2(rho^eps - rho)} <= 2 ||g||^2_{C^{0,1}} W_1``."""
    ga, gb = g_fn(shifted.points), g_fn(dataset.points)
    lhs = signed_sq_norm(ga, shifted.weights, gb, dataset.weights)
    pts = np.vstack([dataset.points, shifted.points])
    rhs = 2.0 * c01_norm(pts, np.concatenate([gb, ga]), ground_metric) ** 2 * w1
    return LemmaCheck(lhs, rhs)


def sampling_deviation_check(dataset: Dataset, subsample: Dataset, g_full, g_sub,
                             delta_prob: float) -> LemmaCheck:
    """``| ||g||^2_{rho^eps} - ||g||^2_rho | <= ||g||^2_{L^4(rho)} / sqrt(m delta)``."""
    lhs = abs(subsample.sq_norm(g_sub) - dataset.sq_norm(g_full))
    rhs = lp_norm(dataset, g_full, 4) ** 2 / math.sqrt(subsample.m * delta_prob)
    return LemmaCheck(lhs, rhs)


# --------------------------------------------------------------------------
# early stopping


class StopResult(NamedTuple):
    time: float
    index: int
    reached: bool


def discrepancy_stop(trajectory: FlowTrajectory, delta: float, tau: float = 1.0) -> StopResult:
    """First breakpoint with ``||f^delta - K nu_t||_{L^2(rho)} <= tau delta``.

    ``tau = inf`` disables stopping and returns the final time.  When the
    threshold is never met the final time is returned with ``reached``
    False.
    """
    if not tau >= 1:
        raise ValueError("tau must be at least 1")
    last = len(trajectory) - 1
    if math.isinf(tau):
        return StopResult(trajectory.final.t, last, False)
    for k, bp in enumerate(trajectory):
        if math.sqrt(2.0 * bp.loss) <= tau * delta:
            return StopResult(bp.t, k, True)
    return StopResult(trajectory.final.t, last, False)
