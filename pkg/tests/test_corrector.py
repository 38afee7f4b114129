import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sunfold.corrector import (
    CoercivityError,
    QuadraticIntegrand,
    ScalarConvexIntegrand,
    assemble_homogenized_tensor,
    brute_force_tensor,
    corrector_basis,
    solve_corrector,
)
from sunfold.graph import LatticeGraph
from sunfold.probability import disjoint_union, make_torus_space

LINE = LatticeGraph([(1,)])
TRIANGLE = LatticeGraph([(1, 0), (0, 1), (1, 1)])


def two_phase(a=(1.0, 4.0)):
    return QuadraticIntegrand(make_torus_space((2,)), LINE, np.array(a).reshape(2, 1, 1))


def test_harmonic_mean_layered():
    a0, a1 = 1.0, 4.0
    # closed form: strains p + c and p - c; minimizing 1/2 (a0 (p+c)^2 + a1 (p-c)^2) / 2 over c
    c = (a1 - a0) / (a0 + a1)
    closed = 0.5 * (a0 * (1 + c) ** 2 + a1 * (1 - c) ** 2) / 2 * 2
    assert abs(closed - 1.6) < 1e-15
    t = assemble_homogenized_tensor(two_phase((a0, a1)))
    assert abs(t.A_hom[0, 0] - 1.6) < 1e-10
    sol = solve_corrector(two_phase(), np.array([[1.0]]))
    assert abs(sol.value - 0.8) < 1e-12
    np.testing.assert_allclose(sol.strain[:, 0], [1 + c, 1 - c], atol=1e-12)


def test_singleton_space_has_no_corrector():
    s = make_torus_space((1, 1))
    rng = np.random.default_rng(0)
    B = rng.normal(size=(3, 3))
    A = B @ B.T + np.eye(3)
    integ = QuadraticIntegrand(s, TRIANGLE, A[None])
    F = rng.normal(size=(2, 2))
    sol = solve_corrector(integ, F)
    assert np.all(sol.chi.chi.values == 0)
    Fs = TRIANGLE.symmetrize_matrix(F)
    assert abs(sol.value - 0.5 * Fs @ A @ Fs) < 1e-12


def test_constant_coefficients_give_same_tensor():
    s = make_torus_space((2, 3))
    rng = np.random.default_rng(1)
    B = rng.normal(size=(3, 3))
    A = B @ B.T + np.eye(3)
    integ = QuadraticIntegrand(s, TRIANGLE, np.broadcast_to(A, (6, 3, 3)))
    t = assemble_homogenized_tensor(integ)
    np.testing.assert_allclose(t.A_hom, A, atol=1e-12)
    chis = corrector_basis(integ)
    np.testing.assert_allclose(chis, 0, atol=1e-12)
    ident = QuadraticIntegrand(s, TRIANGLE, np.broadcast_to(np.eye(3), (6, 3, 3)))
    np.testing.assert_array_equal(assemble_homogenized_tensor(ident).A_hom, np.eye(3))


def test_elastoplastic_block_tensor():
    a = np.array([1.0, 4.0])
    h = np.array([0.5, 1.0])
    A = np.zeros((2, 2, 2))
    A[:, 0, 0] = a
    A[:, 1, 1] = h
    integ = QuadraticIntegrand(make_torus_space((2,)), LINE, A)
    t = assemble_homogenized_tensor(integ)
    np.testing.assert_allclose(t.A_hom, brute_force_tensor(integ), atol=1e-12)
    np.testing.assert_allclose(t.A_hom, np.diag([1.6, 0.75]), atol=1e-12)
    assert t.min_eigenvalue > 0


@settings(max_examples=25, deadline=None)
@given(
    st.sampled_from([((1,), [(1,)]), ((2,), [(1,)]), ((6,), [(1,)]), ((2, 3), [(1, 0), (0, 1), (1, 1)]), ((2, 2), [(1, 0), (0, 1)])]),
    st.booleans(),
    st.integers(0, 2**32 - 1),
)
def test_probe_route_matches_brute_force(case, plastic, seed):
    period, gens = case
    graph = LatticeGraph(gens)
    s = make_torus_space(period)
    rng = np.random.default_rng(seed)
    K = graph.k * (2 if plastic else 1)
    B = rng.normal(size=(s.m, K, K))
    A = np.einsum("mij,mkj->mik", B, B) + 0.5 * np.eye(K)
    integ = QuadraticIntegrand(s, graph, A)
    t = assemble_homogenized_tensor(integ)
    np.testing.assert_allclose(t.A_hom, brute_force_tensor(integ), atol=1e-9)
    assert t.min_eigenvalue > 0


def test_qr_and_svd_bases_agree():
    rng = np.random.default_rng(2)
    s = disjoint_union(make_torus_space((2,)), make_torus_space((2,)), 0.3)
    A = rng.uniform(1, 3, size=(4, 1, 1))
    integ = QuadraticIntegrand(s, LINE, A)
    np.testing.assert_allclose(
        assemble_homogenized_tensor(integ, "svd").A_hom, assemble_homogenized_tensor(integ, "qr").A_hom, atol=1e-12
    )


def test_scalar_convex_route_matches_quadratic():
    a = np.array([1.0, 4.0])
    s = make_torus_space((2,))
    V = lambda samples, G: 0.5 * a[samples] * G[:, 0] ** 2
    dV = lambda samples, G: (a[samples] * G[:, 0])[:, None]
    integ = ScalarConvexIntegrand(s, LINE, V, dV)
    sol = solve_corrector(integ, np.array([[1.0]]))
    assert abs(sol.value - 0.8) < 1e-9
    # a quartic density: closed-form optimum balances a0 (1+c)^3 = a1 (1-c)^3
    Vq = lambda samples, G: 0.25 * a[samples] * G[:, 0] ** 4
    q = solve_corrector(ScalarConvexIntegrand(s, LINE, Vq), np.array([[1.0]]), tol=1e-6)
    r = (a[1] / a[0]) ** (1 / 3)
    c = (r - 1) / (r + 1)
    assert abs(q.strain[0, 0] - (1 + c)) < 1e-4


def test_coercivity_and_shape_errors():
    s = make_torus_space((2,))
    with pytest.raises(CoercivityError):
        QuadraticIntegrand(s, LINE, np.array([[[1.0]], [[0.0]]]))
    with pytest.raises(ValueError):
        QuadraticIntegrand(s, LINE, np.ones((2, 3, 3)))
    with pytest.raises(ValueError):
        QuadraticIntegrand(s, LatticeGraph([(1,), (2,)]), np.array([[[1.0, 0.5], [0.0, 1.0]]] * 2))


def test_tensor_json_has_provenance():
    t = assemble_homogenized_tensor(two_phase())
    data = json.loads(t.to_json())
    assert set(data["provenance"]) == {"space", "graph", "coefficients"}
    assert abs(data["A_hom"][0][0] - 1.6) < 1e-10
    assert t.to_json() == assemble_homogenized_tensor(two_phase()).to_json()
