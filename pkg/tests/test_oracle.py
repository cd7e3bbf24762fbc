import numpy as np
import pytest

from barron_iss import AtomSet, Dataset, Problem, dual_feasibility, subgradient_consistency
from barron_iss.instances import random_problem
from barron_iss.measure import j_norm
from barron_iss.oracle import (brute_force_flow, certify, minimal_norm_minimizer, orthogonality_residual,
                               source_element, wasserstein1)
from barron_iss.solver import solve_exact_iss
from oracles import support_enumeration, transport_by_permutations


def test_single_column_target():
    x = np.linspace(-1, 1, 15)[:, None]
    atoms = AtomSet(np.array([[1.0], [-0.5], [0.3]]), np.array([0.2, 0.1, -0.4]))
    f = 1.7 * np.maximum(x[:, 0] + 0.2, 0)
    prob = Problem.build(Dataset.uniform(x, f), atoms)
    ref = minimal_norm_minimizer(prob)
    c = ref.mu_dagger.coefficients
    assert c[0] == pytest.approx(1.7, rel=1e-9)
    assert np.allclose(c[1:], 0, atol=1e-10)
    assert ref.j_value == pytest.approx(prob.V[0] * 1.7, rel=1e-9)


def test_zero_target():
    prob = random_problem(0)
    prob = prob.with_dataset(prob.dataset.with_targets(np.zeros(prob.dataset.m)))
    ref = certify(prob)
    assert not np.any(ref.mu_dagger.coefficients)
    assert ref.certified
    np.testing.assert_array_equal(ref.phi, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_matches_support_enumeration(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(8, 1))
    atoms = AtomSet(rng.uniform(-1, 1, size=(5, 1)), rng.uniform(-1, 1, size=5))
    f = rng.normal(size=8)
    prob = Problem.build(Dataset.uniform(x, f), atoms)
    ref = minimal_norm_minimizer(prob)
    J_enum, pred = support_enumeration(prob.design.toarray(), prob.dataset.weights, f, prob.V)
    assert ref.j_value == pytest.approx(J_enum, abs=1e-8)
    np.testing.assert_allclose(prob.predict(ref.mu_dagger), pred, atol=1e-8)


@pytest.mark.parametrize("seed", range(6))
def test_certificate(seed):
    prob = random_problem(seed, d=2, n_atoms=25, m=30, uniform_weights=seed % 2 == 0)
    ref = minimal_norm_minimizer(prob)
    assert ref.certified
    assert orthogonality_residual(prob, ref.mu_dagger) <= 1e-8
    assert dual_feasibility(ref.p_dagger, prob.atoms, 1e-9).feasible
    assert subgradient_consistency(ref.mu_dagger, ref.p_dagger, prob.atoms, 1e-7)


@pytest.mark.parametrize("seed", range(4))
def test_j_optimal_against_null_space_moves(seed):
    prob = random_problem(seed, d=1, n_atoms=30, m=12)
    ref = minimal_norm_minimizer(prob)
    A = prob.design.toarray()
    _, s, Vt = np.linalg.svd(A)
    rank = int(np.sum(s > s[0] * 1e-12))
    null = Vt[rank:]
    assert null.shape[0] > 0
    rng = np.random.default_rng(seed)
    c = ref.mu_dagger.coefficients
    for _ in range(20):
        move = rng.normal(size=null.shape[0]) @ null
        for scale in (1e-3, 1e-1, 1.0):
            alt = c + scale * move
            assert prob.loss(alt) == pytest.approx(prob.loss(c), abs=1e-10)
            assert j_norm(alt, prob.atoms) >= ref.j_value - 1e-8


def test_oracle_size_limit():
    prob = random_problem(0, n_atoms=2001, m=10)
    with pytest.raises(ValueError, match="limited"):
        minimal_norm_minimizer(prob)


# source element

def test_source_element_single_atom_by_hand():
    # one constraint: (L phi)_0 = V_0; minimal norm gives phi proportional to column 0
    x = np.linspace(-1, 1, 11)[:, None]
    atoms = AtomSet(np.array([[1.0]]), np.array([0.5]))
    a0 = np.maximum(x[:, 0] + 0.5, 0)
    prob = Problem.build(Dataset.uniform(x, 0.9 * a0), atoms)
    ref = certify(prob)
    assert ref.certified
    w = prob.dataset.weights
    expected = prob.V[0] * a0 / float(w @ (a0 * a0))
    np.testing.assert_allclose(ref.phi, expected, rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_source_element_constraints(seed):
    prob = random_problem(seed, d=1, n_atoms=20, m=25, exact_fit=True, support=2)
    ref = minimal_norm_minimizer(prob)
    phi, ok = source_element(prob, ref)
    c = ref.mu_dagger.coefficients
    if ok:
        Lphi = prob.design.rmatvec(prob.dataset.weights * phi)
        on = c != 0
        assert np.max(np.abs(Lphi[on] - prob.V[on] * np.sign(c[on])), initial=0.0) <= 1e-8
        assert np.max(np.abs(Lphi[~on]) - prob.V[~on], initial=-np.inf) <= 1e-8
    else:
        assert phi is None


def lp_feasible(prob, c):
    """Feasibility of the source constraints as a HiGHS linear program."""
    from scipy.optimize import linprog

    M = prob.design.toarray().T * prob.dataset.weights
    on, off = c != 0, c == 0
    A_ub = np.vstack([M[off], -M[off]])
    b_ub = np.concatenate([prob.V[off], prob.V[off]])
    res = linprog(np.zeros(prob.dataset.m), A_ub=A_ub, b_ub=b_ub, A_eq=M[on],
                  b_eq=prob.V[on] * np.sign(c[on]), bounds=(None, None), method="highs")
    return res.status == 0


@pytest.mark.parametrize("flip", [False, True])
def test_source_element_matches_feasibility_oracle(flip):
    """Adversarial sign patterns on a pair of atoms, one exactly parallel to the other."""
    x = np.linspace(-1, 1, 20)[:, None]
    atoms = AtomSet(np.array([[1.0], [2.0], [-1.0], [0.5]]), np.array([0.2, 0.4, 0.3, -0.1]))
    prob = Problem.build(Dataset.uniform(x, np.sin(3 * x[:, 0])), atoms)
    ref = minimal_norm_minimizer(prob)
    c = np.array([1.0, -1.0 if flip else 1.0, 0.0, 0.0])
    fake = ref.__class__(ref.mu_dagger.__class__(c), ref.p_dagger, None, False)
    phi, ok = source_element(prob, fake)
    assert ok == lp_feasible(prob, c)
    assert (phi is None) == (not ok)


@pytest.mark.parametrize("seed", range(4))
def test_source_satisfied_flag_matches_lp(seed):
    prob = random_problem(seed, d=1, n_atoms=10, m=20)
    ref = minimal_norm_minimizer(prob)
    _, ok = source_element(prob, ref)
    assert ok == lp_feasible(prob, ref.mu_dagger.coefficients)


# Wasserstein

def ds(points, weights=None):
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if weights is None:
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
    return Dataset(points, weights, np.zeros(points.shape[0]))


def test_w1_identical_is_zero(rng):
    a = ds(rng.normal(size=(6, 2)))
    assert wasserstein1(a, a) == pytest.approx(0.0, abs=1e-12)


def test_w1_unit_masses():
    assert wasserstein1(ds([[0.0]]), ds([[1.0]])) == pytest.approx(1.0)


@pytest.mark.parametrize("metric,fn", [("l2", lambda u, v: np.linalg.norm(u - v)),
                                       ("linf", lambda u, v: np.max(np.abs(u - v)))])
@pytest.mark.parametrize("seed", range(3))
def test_w1_matches_vertex_enumeration(metric, fn, seed):
    rng = np.random.default_rng(seed)
    xa, xb = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    assert wasserstein1(ds(xa), ds(xb), metric) == pytest.approx(transport_by_permutations(xa, xb, fn),
                                                                 abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_w1_symmetry_and_triangle(seed):
    rng = np.random.default_rng(seed)
    sets = []
    for k in range(3):
        n = rng.integers(3, 8)
        w = rng.uniform(0.2, 1, size=n)
        sets.append(ds(rng.normal(size=(n, 2)), w / w.sum()))
    a, b, c = sets
    ab, ba = wasserstein1(a, b), wasserstein1(b, a)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert wasserstein1(a, c) <= ab + wasserstein1(b, c) + 1e-9


def test_w1_size_limit():
    big = ds(np.zeros((201, 1)) + np.arange(201)[:, None])
    with pytest.raises(ValueError, match="limited"):
        wasserstein1(big, big)


# brute force flow

def test_brute_force_zero_target():
    prob = random_problem(0)
    prob = prob.with_dataset(prob.dataset.with_targets(np.zeros(prob.dataset.m)))
    traj = brute_force_flow(prob, step=1e-3, horizon=0.1)
    for bp in traj:
        assert not np.any(bp.mu.coefficients) and not np.any(bp.p.values)


def test_brute_force_single_atom_entry_time():
    x = np.linspace(-1, 1, 21)[:, None]
    atoms = AtomSet(np.array([[1.0]]), np.array([0.1]))
    prob = Problem.build(Dataset.uniform(x, 3.0 * np.sin(x[:, 0]) + 2.0), atoms)
    g0 = prob.gradient(np.zeros(1))[0]
    t1 = prob.V[0] / abs(g0)
    step = 1e-4
    traj = brute_force_flow(prob, step=step, horizon=2 * t1)
    assert traj[1].t == pytest.approx(t1, abs=step)
    exact = solve_exact_iss(prob)
    np.testing.assert_allclose(traj.final.mu.coefficients, exact.final.mu.coefficients, rtol=1e-12)
