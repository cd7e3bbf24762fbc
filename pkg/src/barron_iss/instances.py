"""Random problem instances for tests, examples and the acceptance suite."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .measure import AtomSet, WeightVariant
from .operators import Activation, Dataset
from .solver import Problem


def random_atoms(rng: np.random.Generator, n: int, d: int, scale: float = 1.0,
                 variant: WeightVariant = WeightVariant.WITH_CONSTANT) -> AtomSet:
    pts = rng.uniform(-scale, scale, size=(n, d + 1))
    box = np.tile([-scale, scale], (d + 1, 1))
    return AtomSet(pts[:, :-1], pts[:, -1], variant, box)


def random_problem(seed: int, d: int = 1, n_atoms: int = 10, m: int = 50,
                   exact_fit: bool = False, support: int = 3,
                   activation: Optional[Activation] = None,
                   uniform_weights: bool = True) -> Problem:
    """Random instance on ``[-1, 1]^d`` with atoms in ``[-1, 1]^{d+1}``.

    With ``exact_fit`` the targets are ``K mu`` for a random ``mu`` with
    ``support`` nonzero coefficients, otherwise a smooth nonlinear function.
    """
    rng = np.random.default_rng(seed)
    activation = Activation() if activation is None else activation
    atoms = random_atoms(rng, n_atoms, d)
    x = rng.uniform(-1.0, 1.0, size=(m, d))
    if uniform_weights:
        w = np.full(m, 1.0 / m)
    else:
        w = rng.uniform(0.5, 1.5, size=m)
        w /= w.sum()
    if exact_fit:
        c = np.zeros(n_atoms)
        idx = rng.choice(n_atoms, size=min(support, n_atoms), replace=False)
        c[idx] = rng.normal(size=idx.size)
        f = activation(x @ atoms.a.T + atoms.b) @ c
    else:
        freq = rng.normal(size=d)
        f = np.sin(2.0 * x @ freq) + 0.5 * np.cos(x.sum(axis=1))
    return Problem.build(Dataset(x, w, f), atoms, activation)


def toy_target(x: np.ndarray) -> np.ndarray:
    """Target of the bundled 1D toy dataset: two ReLU kinks."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)[:, 0]
    return 0.8 * np.maximum(x - 0.2, 0.0) - 0.5 * np.maximum(-x - 0.4, 0.0) + 0.1
