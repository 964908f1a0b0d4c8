import numpy as np
import pytest
from conftest import random_stochastic
from hypothesis import given
from hypothesis import strategies as st

from optresponse.discretization import (assemble_transfer_matrix, build_grid, discrete_kernel_norm,
                                        discrete_l2_norm, project_observable)
from optresponse.dynamics import affine, bump_noise, pomeau_manneville
from optresponse.errors import DegenerateObjectiveError, InfeasibleError, InvalidParameterError
from optresponse.optimal import (KernelFeasibility, MapFeasibility, certify_expectation_kernel,
                                 certify_expectation_map, certify_mixing_kernel, certify_mixing_map,
                                 feasible_kernel_basis, kernel_feasibility, map_feasibility,
                                 optimal_kernel_for_expectation, optimal_kernel_for_mixing,
                                 optimal_map_for_expectation, optimal_map_for_mixing, perturbed_operator,
                                 random_feasible_kernels)
from optresponse.response import build_Ehat_field, factor_grid
from optresponse.spectral import invariant_density, subdominant_eigenpair


def assert_kernel_feasible(k, feas):
    assert np.all(k.values[~feas.mask] == 0)
    np.testing.assert_allclose(k.values.sum(axis=0), 0.0, atol=1e-12 * feas.n)
    assert discrete_kernel_norm(k) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(3, 12), st.integers(0, 2 ** 31 - 1))
def test_kernel_optima_are_feasible_unit_vectors(n, seed):
    rng = np.random.default_rng(seed)
    A = random_stochastic(n, rng)
    feas = kernel_feasibility(A, l=min(0.5 * float(np.median(A.kernel)), 0.9))
    f0 = invariant_density(A)
    assert_kernel_feasible(optimal_kernel_for_expectation(A, f0, rng.standard_normal(n), feas), feas)
    assert_kernel_feasible(optimal_kernel_for_mixing(subdominant_eigenpair(A), feas), feas)


@given(st.integers(3, 12), st.integers(0, 2 ** 31 - 1))
def test_kernel_optima_certified(n, seed):
    rng = np.random.default_rng(seed)
    A = random_stochastic(n, rng)
    feas = kernel_feasibility(A, l=min(0.8 * float(np.median(A.kernel)), 0.9))
    c1 = certify_expectation_kernel(A, rng.standard_normal(n), feas, samples=500, rng=seed)
    c2 = certify_mixing_kernel(A, feas, samples=500, rng=seed)
    assert c1.passed and c2.passed, (c1.as_dict(), c2.as_dict())


@given(st.integers(4, 12), st.floats(0.2, 0.6), st.integers(0, 2 ** 31 - 1))
def test_map_optima_certified(n, eps, seed):
    g, m, nz = build_grid(n), pomeau_manneville(), bump_noise(eps)
    A = assemble_transfer_matrix(g, m, nz)
    c = project_observable(g, lambda x: np.sin(5 * x + seed % 7))
    c1 = certify_expectation_map(A, c, m, nz, samples=500, rng=seed)
    c2 = certify_mixing_map(A, m, nz, samples=500, rng=seed)
    assert c1.passed and c2.passed, (c1.as_dict(), c2.as_dict())


def test_basis_is_orthonormal(rng):
    A = random_stochastic(6, rng)
    feas = kernel_feasibility(A, 0.6)
    B = feasible_kernel_basis(feas)
    flat = B.reshape(len(B), -1) / feas.n
    np.testing.assert_allclose(flat @ flat.T, np.eye(len(B)), atol=1e-12)
    expected = sum(max(int(c) - 1, 0) for c in feas.mask.sum(axis=0))
    assert len(B) == expected


def test_random_candidates_feasible(rng):
    A = random_stochastic(8, rng)
    feas = kernel_feasibility(A, 0.5)
    K = random_feasible_kernels(feas, 50, rng)
    np.testing.assert_allclose(np.sqrt((K ** 2).sum(axis=(1, 2))) / 8, 1.0)
    np.testing.assert_allclose(K.sum(axis=1), 0.0, atol=1e-12)
    assert np.all(K[:, ~feas.mask] == 0)


def test_constant_observable_is_degenerate(pm200):
    A, f0, g = pm200["A"], pm200["f0"], pm200["grid"]
    c = np.full(g.n, 3.0)
    with pytest.raises(DegenerateObjectiveError):
        optimal_kernel_for_expectation(A, f0, c, kernel_feasibility(A))
    with pytest.raises(DegenerateObjectiveError):
        optimal_map_for_expectation(A, f0, c, pm200["map"], pm200["noise"], map_feasibility(g, pm200["map"]))


def test_empty_mask_is_infeasible(rng):
    A = random_stochastic(4, rng)
    with pytest.raises(InfeasibleError):
        optimal_kernel_for_expectation(A, invariant_density(A), rng.standard_normal(4),
                                       KernelFeasibility(0.5, np.zeros((4, 4), bool)))
    with pytest.raises(InfeasibleError):
        optimal_kernel_for_mixing(subdominant_eigenpair(A), KernelFeasibility(0.5, np.zeros((4, 4), bool)))


def test_threshold_validation(rng):
    A = random_stochastic(4, rng)
    with pytest.raises(InvalidParameterError):
        kernel_feasibility(A, 0.0)
    with pytest.raises(InvalidParameterError):
        map_feasibility(build_grid(4), pomeau_manneville(), 0.5)
    assert map_feasibility(build_grid(4), pomeau_manneville()).mask.all()
    assert kernel_feasibility(A).l == pytest.approx(1e-3 * A.kernel.max())


def test_scaling_invariance(pm200):
    A, f0, g = pm200["A"], pm200["f0"], pm200["grid"]
    feas = kernel_feasibility(A)
    c = project_observable(g, lambda x: -np.cos(x))
    k1 = optimal_kernel_for_expectation(A, f0, c, feas).values
    k2 = optimal_kernel_for_expectation(A, f0, 7.5 * c, feas).values
    assert np.abs(k1 - k2).max() <= 1e-12 * np.abs(k1).max()


def test_step_within_threshold_keeps_kernel_nonnegative(pm200):
    A, f0, g = pm200["A"], pm200["f0"], pm200["grid"]
    feas = kernel_feasibility(A)
    k = optimal_kernel_for_expectation(A, f0, project_observable(g, lambda x: -np.cos(x)), feas)
    B = perturbed_operator(A, k, feas.l / (2 * np.abs(k.values).max()))
    assert B.entries.min() >= 0


def test_full_mask_mixing_matches_real_closed_form(rng):
    A = random_stochastic(9, rng)
    pair = subdominant_eigenpair(A, "largest-modulus-real")
    feas = KernelFeasibility(1e-9, np.ones((9, 9), bool))
    k = optimal_kernel_for_mixing(pair, feas).values
    e, eh = pair.right, pair.left
    xpart = eh.mean() - eh
    ref = np.sign(pair.lam) * np.outer(xpart / discrete_l2_norm(xpart), e / discrete_l2_norm(e))
    assert np.abs(k - ref).max() <= 1e-10


def test_interior_map_mixing_matches_closed_form():
    g, nz = build_grid(30), bump_noise(0.3)
    m = affine(0.8, 0.1)     # range [0.1, 0.9]
    A = assemble_transfer_matrix(g, m, nz)
    pair = subdominant_eigenpair(A, "largest-modulus-real")
    G = factor_grid(A, m, nz)
    feas = map_feasibility(g, m, ell=0.1)
    assert feas.mask.all()
    t = optimal_map_for_mixing(pair, m, nz, feas, factor=G).values
    v = pair.right * (G.T @ pair.left) / g.n
    ref = np.sign(pair.lam) * v / discrete_l2_norm(v)
    assert np.abs(t - ref).max() <= 1e-10
    Ehat = build_Ehat_field(pair, factor=G)
    assert (t @ Ehat) / (np.linalg.norm(t) * np.linalg.norm(Ehat)) == pytest.approx(-1.0, abs=1e-12)


def test_map_mask_restricts_support():
    g, m, nz = build_grid(40), pomeau_manneville(), bump_noise(0.2)
    A = assemble_transfer_matrix(g, m, nz)
    feas = map_feasibility(g, m, ell=0.2)
    t = optimal_map_for_mixing(subdominant_eigenpair(A), m, nz, feas).values
    assert np.all(t[~feas.mask] == 0) and discrete_l2_norm(t) == pytest.approx(1.0, abs=1e-12)
    f0 = invariant_density(A)
    t2 = optimal_map_for_expectation(A, f0, project_observable(g, np.sin), m, nz, feas).values
    assert np.all(t2[~feas.mask] == 0)
    assert isinstance(feas, MapFeasibility)


def test_expectation_kernel_has_red_above_blue_structure(pm200):
    """For c = -cos the optimum pushes mass to the right: in most columns the positive part sits above."""
    A, f0, g = pm200["A"], pm200["f0"], pm200["grid"]
    k = optimal_kernel_for_expectation(A, f0, project_observable(g, lambda x: -np.cos(x)),
                                       kernel_feasibility(A)).values
    x = g.centers[:, None]
    w = np.abs(k)
    pos = (np.where(k > 0, w, 0) * x).sum(0) / np.maximum(np.where(k > 0, w, 0).sum(0), 1e-300)
    neg = (np.where(k < 0, w, 0) * x).sum(0) / np.maximum(np.where(k < 0, w, 0).sum(0), 1e-300)
    active = np.abs(k).sum(0) > 0
    assert np.mean(pos[active] > neg[active]) > 0.8
