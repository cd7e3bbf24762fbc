"""Empirical data model and the forward/adjoint network operators.

The data distribution is a weighted point cloud, so every ``L^2(rho)``
quantity is a finite weighted sum.  ``K`` maps atom coefficients to network
outputs at the sample points; its adjoint ``L_rho`` back-projects a function
on the samples onto the atoms.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .measure import AtomSet, SparseMeasure, _coeffs


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    CUSTOM = "custom"


def _sigmoid(s):
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_BUILTIN = {
    ActivationKind.RELU: (lambda s: np.maximum(s, 0.0), 1.0),
    ActivationKind.TANH: (np.tanh, 1.0),
    ActivationKind.SIGMOID: (_sigmoid, 0.25),
}


@dataclass(frozen=True)
class Activation:
    kind: ActivationKind = ActivationKind.RELU
    lipschitz_constant: Optional[float] = None
    fn: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        kind = ActivationKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ActivationKind.CUSTOM:
            if self.fn is None or self.lipschitz_constant is None:
                raise ValueError("a custom activation needs fn and lipschitz_constant")
        else:
            fn, lip = _BUILTIN[kind]
            object.__setattr__(self, "fn", fn)
            if self.lipschitz_constant is None:
                object.__setattr__(self, "lipschitz_constant", lip)
        if not (self.lipschitz_constant > 0 and np.isfinite(self.lipschitz_constant)):
            raise ValueError("lipschitz_constant must be positive and finite")

    def __call__(self, s):
        return self.fn(np.asarray(s, dtype=float))

    @classmethod
    def named(cls, name: str) -> "Activation":
        return cls(ActivationKind(name.lower()))


@dataclass(frozen=True)
class Dataset:
    """Weighted samples ``(x_i, w_i, f(x_i))`` of the data distribution.

    ``target_fn`` optionally attaches the analytic target so that
    perturbations which move the points can re-evaluate labels.
    """

    points: np.ndarray
    weights: np.ndarray
    targets: np.ndarray
    target_fn: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        x = np.array(self.points, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        w = np.array(self.weights, dtype=float).reshape(-1)
        f = np.array(self.targets, dtype=float).reshape(-1)
        m = x.shape[0]
        if m < 1:
            raise ValueError("a dataset needs at least one sample")
        if w.shape[0] != m or f.shape[0] != m:
            raise ValueError("points, weights and targets must have the same length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w)) and np.all(np.isfinite(f))):
            raise ValueError("dataset entries must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")
        for name, arr in (("points", x), ("weights", w), ("targets", f)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def uniform(cls, points, targets, target_fn=None) -> "Dataset":
        points = np.asarray(points, dtype=float)
        m = points.shape[0]
        return cls(points, np.full(m, 1.0 / m), targets, target_fn)

    @classmethod
    def from_function(cls, points, fn, weights=None) -> "Dataset":
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if weights is None:
            weights = np.full(points.shape[0], 1.0 / points.shape[0])
        return cls(points, weights, fn(points), fn)

    @property
    def m(self) -> int:
        return self.targets.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def with_targets(self, targets) -> "Dataset":
        return Dataset(self.points, self.weights, targets, None)

    def with_weights(self, weights) -> "Dataset":
        return Dataset(self.points, weights, self.targets, self.target_fn)

    def norm(self, g) -> float:
        """``||g||_{L^2(rho)}`` for values ``g`` at the sample points."""
        return float(np.sqrt(self.sq_norm(g)))

    def sq_norm(self, g) -> float:
        g = np.asarray(g, dtype=float)
        return float(np.dot(self.weights, g * g))

    def inner(self, g, h) -> float:
        return float(np.dot(self.weights, np.asarray(g) * np.asarray(h)))

    def second_moment_factor(self) -> float:
        """``int max(1, ||x||)^2 d rho``."""
        r = np.maximum(1.0, np.linalg.norm(self.points, axis=1))
        return float(np.dot(self.weights, r * r))

    def to_csv(self, path, include_weights: bool = True) -> None:
        header = [f"x_{i + 1}" for i in range(self.dim)] + ["f"]
        if include_weights:
            header.append("w")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.m):
                row = [repr(float(v)) for v in self.points[i]] + [repr(float(self.targets[i]))]
                if include_weights:
                    row.append(repr(float(self.weights[i])))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            rows = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
        has_w = header[-1] == "w"
        xcols = header[:-2] if has_w else header[:-1]
        fcol = header[-2] if has_w else header[-1]
        if fcol != "f" or not xcols or any(h != f"x_{i + 1}" for i, h in enumerate(xcols)):
            raise ValueError(f"{path}: expected header x_1,...,x_d,f[,w]; got {header}")
        rows = rows.reshape(-1, len(header))
        d = len(xcols)
        if has_w:
            return cls(rows[:, :d], rows[:, d + 1], rows[:, d])
        return cls.uniform(rows[:, :d], rows[:, d])


class DesignMatrix:
    """``A[i, n] = sigma(a_n . x_i + b_n)``.

    Dense when ``m * N`` is at most ``dense_limit`` entries, otherwise the
    products are formed on the fly in fixed-size row blocks.  Either way the
    reduction order is fixed, so results are reproducible for a fixed BLAS
    thread count.
    """

    def __init__(self, dataset: Dataset, atoms: AtomSet, activation: Activation,
                 dense_limit: int = 20_000_000, block_rows: int = 4096):
        if dataset.dim != atoms.dim:
            raise ValueError(f"data dimension {dataset.dim} != atom dimension {atoms.dim}")
        self.dataset = dataset
        self.atoms = atoms
        self.activation = activation
        self.block_rows = int(block_rows)
        self.shape = (dataset.m, len(atoms))
        self._dense = None
        if self.shape[0] * self.shape[1] <= dense_limit:
            self._dense = self._rows(0, self.shape[0])
            self._dense.setflags(write=False)

    @property
    def is_dense(self) -> bool:
        return self._dense is not None

    def _rows(self, lo: int, hi: int, cols=None) -> np.ndarray:
        a, b = self.atoms.a, self.atoms.b
        if cols is not None:
            a, b = a[cols], b[cols]
        return self.activation(self.dataset.points[lo:hi] @ a.T + b)

    def toarray(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense
        return self._rows(0, self.shape[0])

    def columns(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=int)
        if self._dense is not None:
            return self._dense[:, idx]
        return self._rows(0, self.shape[0], idx)

    def matvec(self, c: np.ndarray) -> np.ndarray:
        if self._dense is not None:
            return self._dense @ c
        out = np.empty(self.shape[0])
        for lo in range(0, self.shape[0], self.block_rows):
            hi = min(lo + self.block_rows, self.shape[0])
            out[lo:hi] = self._rows(lo, hi) @ c
        return out

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        if self._dense is not None:
            return self._dense.T @ v
        out = np.zeros(self.shape[1])
        for lo in range(0, self.shape[0], self.block_rows):
            hi = min(lo + self.block_rows, self.shape[0])
            out += self._rows(lo, hi).T @ v[lo:hi]
        return out


def build_design_matrix(dataset: Dataset, atoms: AtomSet, activation: Activation,
                        **kwargs) -> DesignMatrix:
    return DesignMatrix(dataset, atoms, activation, **kwargs)


def predict(mu, A: DesignMatrix) -> np.ndarray:
    """Network output ``K mu`` at the sample points."""
    c = _coeffs(mu)
    if c.shape[0] != A.shape[1]:
        raise ValueError(f"measure has {c.shape[0]} atoms, design matrix has {A.shape[1]}")
    return A.matvec(c)


def backproject(residual, A: DesignMatrix, weights=None) -> np.ndarray:
    """Adjoint ``L_rho phi``: ``(L phi)_n = sum_i w_i phi_i A[i, n]``."""
    phi = np.asarray(residual, dtype=float)
    w = A.dataset.weights if weights is None else np.asarray(weights, dtype=float)
    if phi.shape[0] != A.shape[0] or w.shape[0] != A.shape[0]:
        raise ValueError(f"expected length {A.shape[0]} vectors")
    return A.rmatvec(w * phi)


def loss_rf(mu, A: DesignMatrix, dataset: Optional[Dataset] = None) -> float:
    """``R_f(mu) = 1/2 ||K mu - f||^2_{L^2(rho)}``."""
    ds = A.dataset if dataset is None else dataset
    r = predict(mu, A) - ds.targets
    return 0.5 * ds.sq_norm(r)


def as_measure(c) -> SparseMeasure:
    return c if isinstance(c, SparseMeasure) else SparseMeasure(c)
