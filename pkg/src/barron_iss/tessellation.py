"""Voronoi discretisation of the parameter box.

Grid constructions have box-shaped Voronoi cells, so their diameters are
exact.  For i.i.d. atoms the cell diameters are estimated by assigning a
dense uniform sample of the box to its nearest atom.
"""
from __future__ import annotations

import csv
import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .measure import AtomSet, SparseMeasure, WeightVariant, _coeffs, j_norm, total_variation
from .operators import Activation, Dataset
from .oracle import ReferenceSolution, minimal_norm_minimizer
from .perturbation import BoundReport, evaluation_times
from .solver import FlowTrajectory, Problem, solve_weighted_lasso

DIAMETER_SAFETY = 1.1


class Construction(str, enum.Enum):
    REGULAR_GRID = "regular_grid"
    NESTED_GRID = "nested_grid"
    RANDOM_IID = "random_iid"


@dataclass(frozen=True)
class Tessellation:
    """Atom set with per-atom Voronoi cell diameter bounds.

    ``cell_diameters`` are Euclidean diameters in parameter space.
    ``mixed_diameters`` measure the cells in ``||a||_2 + |b|``, the norm in
    which the activation argument is Lipschitz in the parameters.
    """

    atoms: AtomSet
    cell_diameters: np.ndarray
    mixed_diameters: np.ndarray
    construction: Construction
    level: int
    estimated: bool = False

    def __post_init__(self):
        for name in ("cell_diameters", "mixed_diameters"):
            d = np.array(getattr(self, name), dtype=float)
            if d.shape != (len(self.atoms),) or not np.all(np.isfinite(d)) or np.any(d <= 0):
                raise ValueError(f"{name} must be positive and finite, one per atom")
            d.setflags(write=False)
            object.__setattr__(self, name, d)

    @property
    def n(self) -> int:
        return len(self.atoms)

    @property
    def max_diameter(self) -> float:
        return float(self.cell_diameters.max())

    @property
    def max_mixed_diameter(self) -> float:
        return float(self.mixed_diameters.max())


@dataclass(frozen=True)
class RefinementSequence:
    tessellations: List[Tessellation]

    def __post_init__(self):
        ns = [t.n for t in self.tessellations]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("refinements need strictly increasing atom counts")
        if not self.tessellations[0].estimated:
            ds = [t.max_diameter for t in self.tessellations]
            if any(b > a * (1 + 1e-12) for a, b in zip(ds, ds[1:])):
                raise ValueError("refinements need non-increasing maximal diameters")

    def __len__(self):
        return len(self.tessellations)

    def __getitem__(self, k) -> Tessellation:
        return self.tessellations[k]

    def __iter__(self):
        return iter(self.tessellations)


def _box(domain_box) -> np.ndarray:
    box = np.asarray(domain_box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] < 2:
        raise ValueError("domain_box must have shape (d+1, 2) with d >= 1")
    if np.any(box[:, 1] <= box[:, 0]):
        raise ValueError("domain_box must be nondegenerate on every axis")
    return box


def _box_diameters(widths: np.ndarray):
    """Euclidean and mixed diameters of boxes with the given side lengths."""
    eucl = np.sqrt(np.sum(widths ** 2, axis=1))
    mixed = np.sqrt(np.sum(widths[:, :-1] ** 2, axis=1)) + widths[:, -1]
    return eucl, mixed


def regular_grid(box: np.ndarray, level: int, variant=WeightVariant.WITH_CONSTANT) -> Tessellation:
    """Cell midpoints of the ``2^level`` per-axis subdivision of the box."""
    k = 2 ** level
    h = (box[:, 1] - box[:, 0]) / k
    axes = [box[i, 0] + h[i] * (np.arange(k) + 0.5) for i in range(box.shape[0])]
    pts = np.array(list(itertools.product(*axes)))
    eucl, mixed = _box_diameters(np.tile(h, (pts.shape[0], 1)))
    atoms = AtomSet(pts[:, :-1], pts[:, -1], variant, box)
    return Tessellation(atoms, eucl, mixed, Construction.REGULAR_GRID, level)


def nested_grid(box: np.ndarray, level: int, variant=WeightVariant.WITH_CONSTANT) -> Tessellation:
    """Vertices of the ``2^level`` per-axis subdivision; level ``l`` is a subset of ``l + 1``.

    Voronoi cells are boxes of width ``h`` around interior vertices and
    ``h / 2`` on the boundary.
    """
    k = 2 ** level
    h = (box[:, 1] - box[:, 0]) / k
    axes, widths = [], []
    for i in range(box.shape[0]):
        axes.append(box[i, 0] + h[i] * np.arange(k + 1))
        w = np.full(k + 1, h[i])
        w[0] = w[-1] = h[i] / 2
        widths.append(w)
    pts = np.array(list(itertools.product(*axes)))
    wid = np.array(list(itertools.product(*widths)))
    eucl, mixed = _box_diameters(wid)
    atoms = AtomSet(pts[:, :-1], pts[:, -1], variant, box)
    return Tessellation(atoms, eucl, mixed, Construction.NESTED_GRID, level)


def _mixed_dist(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    d = u - v
    return np.linalg.norm(d[..., :-1], axis=-1) + np.abs(d[..., -1])


def random_iid(box: np.ndarray, n: int, seed: int, level: int = 0, samples_per_atom: int = 200,
               variant=WeightVariant.WITH_CONSTANT) -> Tessellation:
    """``n`` uniform atoms; cell diameters from a nearest-atom assignment of a dense sample.

    Each cell's diameter is estimated as twice the largest distance from the
    atom to a sample assigned to it, times a safety factor of 1.1.  Cells
    that receive no sample inherit the largest estimate.
    """
    rng = np.random.default_rng(seed)
    lo, hi = box[:, 0], box[:, 1]
    pts = lo + (hi - lo) * rng.random((n, box.shape[0]))
    S = lo + (hi - lo) * rng.random((n * samples_per_atom, box.shape[0]))
    corners = np.array(list(itertools.product(*box)))
    S = np.vstack([S, corners])
    _, owner = cKDTree(pts).query(S)
    r_e = np.zeros(n)
    r_m = np.zeros(n)
    np.maximum.at(r_e, owner, np.linalg.norm(S - pts[owner], axis=1))
    np.maximum.at(r_m, owner, _mixed_dist(S, pts[owner]))
    empty = r_e == 0
    r_e[empty] = r_e.max()
    r_m[empty] = r_m.max()
    atoms = AtomSet(pts[:, :-1], pts[:, -1], variant, box)
    return Tessellation(atoms, 2 * DIAMETER_SAFETY * r_e, 2 * DIAMETER_SAFETY * r_m,
                        Construction.RANDOM_IID, level, estimated=True)


def build_refinement(domain_box, construction, levels: int, seed: int = 0, base_atoms: int = 8,
                     weight_variant=WeightVariant.WITH_CONSTANT) -> RefinementSequence:
    """Levels ``1..levels`` of a grid, or i.i.d. sets with ``base_atoms * 2^l`` atoms."""
    box = _box(domain_box)
    construction = Construction(construction)
    if levels < 1:
        raise ValueError("levels must be at least 1")
    if construction is Construction.REGULAR_GRID:
        seq = [regular_grid(box, l, weight_variant) for l in range(1, levels + 1)]
    elif construction is Construction.NESTED_GRID:
        seq = [nested_grid(box, l, weight_variant) for l in range(1, levels + 1)]
    else:
        seq = [random_iid(box, base_atoms * 2 ** l, seed + l, l, variant=weight_variant)
               for l in range(1, levels + 1)]
    return RefinementSequence(seq)


def nearest_atoms(points: np.ndarray, atoms: AtomSet, chunk: int = 2048) -> np.ndarray:
    """Index of the nearest atom (Euclidean) for each point; ties go to the lowest index."""
    P = atoms.points
    out = np.empty(points.shape[0], dtype=int)
    for lo in range(0, points.shape[0], chunk):
        blk = points[lo:lo + chunk]
        d2 = np.sum((blk[:, None, :] - P[None, :, :]) ** 2, axis=2)
        out[lo:lo + chunk] = np.argmin(d2, axis=1)
    return out


def project_measure(mu_fine, fine_atoms: AtomSet, coarse: Tessellation) -> SparseMeasure:
    """Move each fine atom's mass onto its nearest coarse atom."""
    c = _coeffs(mu_fine)
    if c.shape[0] != len(fine_atoms):
        raise ValueError("measure and fine atom set differ in length")
    box = coarse.atoms.domain_box
    pts = fine_atoms.points
    slack = 1e-12 * (1.0 + np.abs(box))
    if np.any(pts < box[:, 0] - slack[:, 0]) or np.any(pts > box[:, 1] + slack[:, 1]):
        raise ValueError("fine atoms must lie in the coarse domain box")
    owner = nearest_atoms(pts, coarse.atoms)
    out = np.zeros(coarse.n)
    np.add.at(out, owner, c)
    return SparseMeasure(out)


# --------------------------------------------------------------------------
# Gamma-convergence experiment


def default_test_functions() -> Dict[str, Callable[[np.ndarray], np.ndarray]]:
    """Continuous functions of the parameter ``(a, b)`` used to probe weak-* limits."""
    return {
        "g1": lambda w: np.ones(w.shape[0]),
        "g2": lambda w: w.sum(axis=1),
        "g3": lambda w: np.exp(-np.sum(w * w, axis=1)),
    }


@dataclass
class ExperimentRow:
    n: int
    maxdiam: float
    f_min: float
    loss_min: float
    j_min: float
    pairings: Dict[str, float]
    converged: bool
    mu: SparseMeasure = field(repr=False)


@dataclass
class ExperimentTable:
    rows: List[ExperimentRow]
    lam: float

    @property
    def f_values(self) -> np.ndarray:
        return np.array([r.f_min for r in self.rows])

    def monotone(self, tol: float = 1e-9) -> bool:
        f = self.f_values
        return bool(np.all(np.diff(f) <= tol * (1.0 + np.abs(f[:-1]))))

    def cauchy_gap(self) -> float:
        """``|F_last - F_second_to_last|``."""
        f = self.f_values
        return float(abs(f[-1] - f[-2])) if len(f) > 1 else math.nan

    def to_csv(self, path) -> None:
        names = list(self.rows[0].pairings) if self.rows else []
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["N", "maxdiam", "F_min", "loss_min", "j_min"]
                            + [f"pairing_{k}" for k in names] + ["converged"])
            for r in self.rows:
                writer.writerow([r.n, repr(r.maxdiam), repr(r.f_min), repr(r.loss_min), repr(r.j_min)]
                                + [repr(r.pairings[k]) for k in names] + [str(r.converged).lower()])


def minimize_lagrangian(problem: Problem, lam: float = 1.0, tol: float = 1e-11,
                        max_iter: int = 500_000):
    """Minimise ``F(mu) = J(mu) + lam R_f(mu)``; returns ``(c, F, converged)``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    c, res = solve_weighted_lasso(problem, lam, tol=tol, max_iter=max_iter)
    F = float(problem.V @ np.abs(c)) + lam * problem.loss(c)
    return c, F, res <= tol


def gamma_convergence_experiment(dataset: Dataset, activation: Activation, refinement: RefinementSequence,
                                 lam: float = 1.0, test_functions=None, tol: float = 1e-11) -> ExperimentTable:
    """Minimise the discretised Lagrangian on every level of a refinement."""
    tests = default_test_functions() if test_functions is None else dict(test_functions)
    rows = []
    for tess in refinement:
        prob = Problem.build(dataset, tess.atoms, activation)
        c, F, ok = minimize_lagrangian(prob, lam, tol)
        pts = tess.atoms.points
        pair = {k: float(g(pts) @ c) for k, g in tests.items()}
        rows.append(ExperimentRow(tess.n, tess.max_diameter, F, prob.loss(c), j_norm(c, tess.atoms),
                                  pair, ok, SparseMeasure(c)))
    return ExperimentTable(rows, lam)


# --------------------------------------------------------------------------
# discretisation bound


def discretization_bound_report(trajectory_on_coarse: FlowTrajectory, reference_fine: ReferenceSolution,
                                fine_problem: Problem, tessellation: Tessellation,
                                reference_coarse: Optional[ReferenceSolution] = None,
                                diameter_norm: str = "mixed", interior: int = 3,
                                t_max: Optional[float] = None) -> BoundReport:
    """``||K nu_t - f||^2 <= 2||K mu - f||^2 + 2 J(nu)/t + 2 ||mu||^2 diam^2 Lip^2 M``.

    ``mu`` is the fine reference, ``nu`` the minimal-``J`` least-squares
    solution on the coarse atoms and ``M = int max(1, |x|)^2 d rho``.
    ``diameter_norm`` selects which cell diameters enter: ``mixed``
    (``||a|| + |b|``, what the Lipschitz estimate needs) or ``euclidean``.
    """
    prob = trajectory_on_coarse.problem
    if prob.atoms is not tessellation.atoms and not np.array_equal(prob.atoms.points, tessellation.atoms.points):
        raise ValueError("trajectory was not computed on the tessellation's atoms")
    ds = prob.dataset
    if not (np.array_equal(ds.points, fine_problem.dataset.points)
            and np.array_equal(ds.targets, fine_problem.dataset.targets)):
        raise ValueError("coarse and fine problems must share the dataset")
    if reference_coarse is None:
        reference_coarse = minimal_norm_minimizer(prob)
    if diameter_norm == "mixed":
        diam = tessellation.max_mixed_diameter
    elif diameter_norm == "euclidean":
        diam = tessellation.max_diameter
    else:
        raise ValueError("diameter_norm must be 'mixed' or 'euclidean'")
    c_fine = reference_fine.mu_dagger.coefficients
    fit = ds.sq_norm(fine_problem.predict(c_fine) - ds.targets)
    j_nu = j_norm(reference_coarse.mu_dagger, prob.atoms)
    lip = prob.activation.lipschitz_constant
    diam_term = 2.0 * total_variation(c_fine) ** 2 * diam ** 2 * lip ** 2 * ds.second_moment_factor()
    times = evaluation_times(trajectory_on_coarse, interior, t_max)
    lhs = np.array([ds.sq_norm(prob.residual(trajectory_on_coarse.state_at(t)[0])) for t in times])
    rhs = 2.0 * fit + 2.0 * j_nu / times + diam_term
    meta = {"diam_term": diam_term, "maxdiam": diam, "diameter_norm": diameter_norm,
            "estimated_diameters": tessellation.estimated}
    return BoundReport(list(times), list(lhs), list(rhs), list(rhs - lhs), "discretization", True, meta)
