"""Atoms, atomic measures and dual variables on a finite parameter set.

An atom is a neuron parameter ``(a, b)`` with ``a`` in R^d and ``b`` in R.
A :class:`SparseMeasure` carries one coefficient per atom of an
:class:`AtomSet`; the penalty ``J(mu) = sum_n V(a_n, b_n) |c_n|`` is the
weighted total variation that the flow minimises.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


class WeightVariant(str, enum.Enum):
    WITH_CONSTANT = "with_constant"
    RELU_HOMOGENEOUS = "relu_homogeneous"


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Atom:
    a: np.ndarray
    b: float

    def __post_init__(self):
        a = _frozen(np.atleast_1d(self.a))
        if a.ndim != 1:
            raise ValueError("atom inner weight must be a vector")
        if not (np.all(np.isfinite(a)) and np.isfinite(self.b)):
            raise ValueError("atom entries must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))

    @property
    def point(self) -> np.ndarray:
        return np.append(self.a, self.b)


def weight_of(atom: Atom, variant: WeightVariant = WeightVariant.WITH_CONSTANT) -> float:
    """Penalty weight ``V(a, b)`` of a single atom."""
    w = float(np.linalg.norm(atom.a)) + abs(atom.b)
    if WeightVariant(variant) is WeightVariant.WITH_CONSTANT:
        w += 1.0
    return w


def weights_of(a: np.ndarray, b: np.ndarray, variant: WeightVariant) -> np.ndarray:
    w = np.linalg.norm(a, axis=1) + np.abs(b)
    if WeightVariant(variant) is WeightVariant.WITH_CONSTANT:
        w = w + 1.0
    return w


@dataclass(frozen=True)
class AtomSet:
    """Ordered finite subset of the parameter box.

    Stored column-wise: ``a`` is ``(N, d)`` and ``b`` is ``(N,)``.  When
    ``domain_box`` is omitted the bounding box of the atoms is used.
    """

    a: np.ndarray
    b: np.ndarray
    weight_variant: WeightVariant = WeightVariant.WITH_CONSTANT
    domain_box: np.ndarray | None = None
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        b = np.array(self.b, dtype=float).reshape(-1)
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"a has {a.shape[0]} rows but b has {b.shape[0]} entries")
        if a.shape[0] < 1:
            raise ValueError("an atom set needs at least one atom")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("atom entries must be finite")
        pts = np.column_stack([a, b])
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise ValueError("atoms must be pairwise distinct")
        variant = WeightVariant(self.weight_variant)
        if self.domain_box is None:
            box = np.column_stack([pts.min(axis=0), pts.max(axis=0)])
        else:
            box = np.array(self.domain_box, dtype=float)
            if box.shape != (pts.shape[1], 2):
                raise ValueError(f"domain_box must have shape ({pts.shape[1]}, 2)")
            if np.any(box[:, 0] > box[:, 1]):
                raise ValueError("domain_box lower bounds exceed upper bounds")
            slack = 1e-12 * (1.0 + np.abs(box))
            if np.any(pts < box[:, 0] - slack[:, 0]) or np.any(pts > box[:, 1] + slack[:, 1]):
                raise ValueError("every atom must lie inside domain_box")
        w = weights_of(a, b, variant)
        if np.any(w <= 0.0):
            bad = int(np.flatnonzero(w <= 0.0)[0])
            raise ValueError(f"atom {bad} has zero weight under {variant.value}; remove it")
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "b", _frozen(b))
        object.__setattr__(self, "weight_variant", variant)
        object.__setattr__(self, "domain_box", _frozen(box))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def from_atoms(cls, atoms: Sequence[Atom], **kwargs) -> "AtomSet":
        return cls(np.array([at.a for at in atoms]), np.array([at.b for at in atoms]), **kwargs)

    @classmethod
    def from_points(cls, points: np.ndarray, **kwargs) -> "AtomSet":
        """Build from an ``(N, d+1)`` array whose last column is the bias."""
        points = np.asarray(points, dtype=float)
        return cls(points[:, :-1], points[:, -1], **kwargs)

    def __len__(self) -> int:
        return self.b.shape[0]

    def __getitem__(self, n: int) -> Atom:
        return Atom(self.a[n], self.b[n])

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.a, self.b])

    def to_csv(self, path) -> None:
        header = [f"a_{i + 1}" for i in range(self.dim)] + ["b"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in self.points:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, **kwargs) -> "AtomSet":
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[-1].strip() != "b" or any(
                h.strip() != f"a_{i + 1}" for i, h in enumerate(header[:-1])
            ):
                raise ValueError(f"{path}: expected header a_1,...,a_d,b; got {header}")
            rows = [[float(v) for v in row] for row in reader if row]
        return cls.from_points(np.array(rows, dtype=float).reshape(-1, len(header)), **kwargs)


@dataclass(frozen=True)
class SparseMeasure:
    """``mu = sum_n c_n delta_{omega_n}`` over a fixed atom set."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = _frozen(np.atleast_1d(np.asarray(self.coefficients, dtype=float)))
        if c.ndim != 1 or not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be a finite vector")
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def zeros(cls, n: int) -> "SparseMeasure":
        return cls(np.zeros(n))

    def __len__(self) -> int:
        return self.coefficients.shape[0]

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients)

    def __add__(self, other: "SparseMeasure") -> "SparseMeasure":
        return SparseMeasure(self.coefficients + other.coefficients)

    def __sub__(self, other: "SparseMeasure") -> "SparseMeasure":
        return SparseMeasure(self.coefficients - other.coefficients)

    def __mul__(self, s: float) -> "SparseMeasure":
        return SparseMeasure(s * self.coefficients)

    __rmul__ = __mul__


@dataclass(frozen=True)
class DualVariable:
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        v = _frozen(np.atleast_1d(np.asarray(self.values, dtype=float)))
        if not np.all(np.isfinite(v)):
            raise ValueError("dual values must be finite")
        if not self.time >= 0.0:
            raise ValueError("dual time must be nonnegative")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "time", float(self.time))

    def __len__(self) -> int:
        return self.values.shape[0]


def _coeffs(mu) -> np.ndarray:
    return mu.coefficients if isinstance(mu, SparseMeasure) else np.asarray(mu, dtype=float)


def _dual(p) -> np.ndarray:
    return p.values if isinstance(p, DualVariable) else np.asarray(p, dtype=float)


def _check_len(n: int, atoms: AtomSet, what: str) -> None:
    if n != len(atoms):
        raise ValueError(f"{what} has length {n} but the atom set has {len(atoms)} atoms")


def j_norm(mu, atoms: AtomSet) -> float:
    c = _coeffs(mu)
    _check_len(c.shape[0], atoms, "measure")
    return float(np.sum(atoms.weights * np.abs(c)))


def total_variation(mu) -> float:
    return float(np.sum(np.abs(_coeffs(mu))))


class FeasibilityReport(NamedTuple):
    max_violation: float
    feasible: bool


def dual_feasibility(p, atoms: AtomSet, tol: float = 1e-9) -> FeasibilityReport:
    """Check the dual constraint ``|p_n| <= V_n``.

    ``max_violation`` is ``max_n (|p_n| - V_n)``; it is negative when every
    constraint is strictly slack.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    v = _dual(p)
    _check_len(v.shape[0], atoms, "dual variable")
    viol = float(np.max(np.abs(v) - atoms.weights))
    return FeasibilityReport(viol, viol <= tol)


def subgradient_consistency(mu, p, atoms: AtomSet, tol: float = 1e-9) -> bool:
    """Whether ``p`` is a subgradient of ``J`` at ``mu`` (given feasibility).

    Every atom carrying mass must sit on the boundary ``|p_n| = V_n`` with
    ``sign(p_n) == sign(c_n)``.
    """
    c = _coeffs(mu)
    v = _dual(p)
    _check_len(c.shape[0], atoms, "measure")
    _check_len(v.shape[0], atoms, "dual variable")
    on = c != 0.0
    if not np.any(on):
        return True
    tight = np.abs(v[on]) >= atoms.weights[on] - tol
    same_sign = np.sign(v[on]) == np.sign(c[on])
    return bool(np.all(tight & same_sign))


def pairing(p, mu) -> float:
    """``<p, mu>`` for a dual sampled on the same atoms."""
    return float(np.dot(_dual(p), _coeffs(mu)))
