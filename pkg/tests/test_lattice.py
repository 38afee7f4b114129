import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sunfold.lattice import (
    PERIODIC,
    ZERO,
    Grid,
    LatticeFunction,
    cell_quadrature,
    discrete_divergence,
    discrete_gradient,
    discretize,
    divergence_array,
    floor_index,
    freudenthal_interpolant,
    from_bytes,
    from_csv,
    gradient_array,
    gradient_matrix,
    piecewise_constant,
    quadrature_points,
    to_bytes,
    to_csv,
)


def test_constant_has_zero_gradient_and_divergence():
    g = Grid.window(0.5, (4, 3))
    u = LatticeFunction(g, np.full((4, 3, 2), 1.7), PERIODIC)
    assert np.all(discrete_gradient(u).values == 0)
    gv = LatticeFunction(g, np.full((4, 3, 4), -0.3), PERIODIC)
    assert np.all(discrete_divergence(gv).values == 0)


def test_gradient_of_bump_by_hand():
    g = Grid.window(1.0, (5,))
    u = LatticeFunction(g, np.array([0.0, 1.0, 0.0, 0.0, 0.0]))
    # forward differences: site 0 sees +1, site 1 sees -1
    np.testing.assert_array_equal(discrete_gradient(u).values[:, 0], [1.0, -1.0, 0.0, 0.0, 0.0])


@pytest.mark.parametrize("boundary", [ZERO, PERIODIC])
def test_integration_by_parts_on_cube(boundary):
    rng = np.random.default_rng(0)
    g = Grid.window(0.25, (4, 4, 4))
    u = LatticeFunction(g, rng.normal(size=(4, 4, 4, 2)), boundary)
    for _ in range(10):
        v = LatticeFunction(g, rng.normal(size=(4, 4, 4, 6)), boundary)
        lhs = discrete_gradient(u).inner(v)
        rhs = u.inner(discrete_divergence(v))
        # oracle: explicit double loop over sites and directions
        eps, uu, vv = g.epsilon, u.values, v.values.reshape(4, 4, 4, 2, 3)
        direct = 0.0
        for idx in np.ndindex(4, 4, 4):
            for i in range(3):
                nb = list(idx)
                nb[i] += 1
                if nb[i] == 4:
                    if boundary == ZERO:
                        un = np.zeros(2)
                    else:
                        nb[i] = 0
                        un = uu[tuple(nb)]
                else:
                    un = uu[tuple(nb)]
                direct += np.dot((un - uu[idx]) / eps, vv[idx][:, i]) * eps**3
        assert abs(lhs - rhs) < 1e-12
        assert abs(lhs - direct) < 1e-12


def test_laplacian_symbol_matches_fft():
    n, eps = 8, 0.5
    g = Grid.window(eps, (n, n))
    rng = np.random.default_rng(1)
    u = rng.normal(size=(n, n))
    lap = divergence_array(gradient_array(u, eps, 2, 0, True), eps, 2, 0, True)
    k = np.fft.fftfreq(n) * n
    symbol = 4 / eps**2 * (np.sin(np.pi * k[:, None] / n) ** 2 + np.sin(np.pi * k[None, :] / n) ** 2)
    via_fft = np.real(np.fft.ifft2(symbol * np.fft.fft2(u)))
    np.testing.assert_allclose(lap, via_fft, atol=1e-11)


def test_piecewise_constant_rounding_and_isometry():
    g = Grid.window(0.5, (6,), origin=(-2,))
    rng = np.random.default_rng(2)
    u = LatticeFunction(g, rng.normal(size=(6, 1)))
    site = g.points()[2]
    np.testing.assert_array_equal(piecewise_constant(u, site[None]), u.values[2][None])
    np.testing.assert_array_equal(piecewise_constant(u, (site + 0.49 * 0.5)[None]), u.values[2][None])
    np.testing.assert_array_equal(piecewise_constant(u, (site + 0.51 * 0.5)[None]), u.values[3][None])
    # L^p isometry of the piecewise-constant extension, via many interior points per cell
    t = (np.arange(200) + 0.5) / 200 - 0.5
    for p in (1, 2, 3):
        pts = (g.points()[:, None, 0] + 0.5 * t[None, :]).reshape(-1, 1)
        cont = (np.mean(np.abs(piecewise_constant(u, pts)) ** p) * 6 * 0.5) ** (1 / p)
        assert abs(cont - u.norm(p)) < 1e-12


def test_floor_index_rejects_outside():
    g = Grid.window(1.0, (3,))
    with pytest.raises(ValueError):
        floor_index(g, [[5.0]])


def test_discretize_constant_and_linear():
    g = Grid.window(0.25, (4,))
    np.testing.assert_allclose(discretize(lambda x: np.full(len(x), 2.5), g).values[:, 0], 2.5)
    # cells are centred on the sites, so the average of x is the site position
    np.testing.assert_allclose(discretize(lambda x: x[:, 0], g).values[:, 0], [0, 0.25, 0.5, 0.75], atol=1e-15)
    # corner-anchored cells [k/4, (k+1)/4) correspond to a shift by eps/2
    np.testing.assert_allclose(
        discretize(lambda x: x[:, 0] + 0.125, g).values[:, 0], [1 / 8, 3 / 8, 5 / 8, 7 / 8], atol=1e-15
    )


def test_discretize_inverts_piecewise_constant():
    g = Grid.window(0.5, (3, 4), origin=(1, -1))
    rng = np.random.default_rng(3)
    u = LatticeFunction(g, rng.normal(size=(3, 4, 2)))
    back = discretize(lambda x: piecewise_constant(u, x), g, order=3)
    np.testing.assert_allclose(back.values, u.values, atol=1e-14)


def test_cell_quadrature_weights():
    for d in (1, 2, 3):
        for order in (1, 2, 3):
            nodes, w = cell_quadrature(d, order)
            assert abs(w.sum() - 1) < 1e-14
            assert np.all(np.abs(nodes) < 0.5)


def test_gradient_of_smooth_function_converges_first_order():
    U = lambda x: np.sin(2 * x[:, 0]) * np.cos(x[:, 1])
    errs = []
    for eps in (1 / 8, 1 / 16, 1 / 32):
        g = Grid.window(eps, (int(round(1 / eps)),) * 2)
        u = discretize(U, g, order=2)
        grad = discrete_gradient(u).values.reshape(-1, 2)
        pts = g.points()
        exact = np.stack([2 * np.cos(2 * pts[:, 0]) * np.cos(pts[:, 1]), -np.sin(2 * pts[:, 0]) * np.sin(pts[:, 1])], 1)
        inner = np.all(g.coordinates() < np.asarray(g.shape) - 1, axis=1)
        errs.append(np.sqrt(np.mean(np.sum((grad - exact)[inner] ** 2, axis=1))))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 2) < 2 * 0.2), ratios


def test_from_box_halo_is_dilation():
    g = Grid.from_box(0.25, (0.0, 0.0), (1.0, 1.0), [(1, 0), (0, 1), (1, 1)])
    assert g.domain_mask.sum() == 9
    assert np.all(g.halo_mask >= g.domain_mask)
    pts = g.points()[g.domain_mask.ravel()]
    assert np.all((pts > 0) & (pts < 1))
    # halo: a site belongs iff it or a forward neighbour is a domain site
    dom = {tuple(c) for c in g.coordinates()[g.domain_mask.ravel()]}
    for c, h in zip(g.coordinates(), g.halo_mask.ravel()):
        want = any(tuple(c + np.array(b)) in dom for b in [(0, 0), (1, 0), (0, 1), (1, 1)])
        assert want == h


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid.window(0.0, (3,))
    dom = np.array([True, False])
    with pytest.raises(ValueError):
        Grid(1.0, (2,), None, dom, np.array([False, False]))


def test_support_method():
    g = Grid.from_box(0.5, (0.0,), (2.0,))
    v = np.zeros(g.shape + (1,))
    v[g.domain_mask] = 1.0
    assert LatticeFunction(g, v).vanishes_off_domain()
    v[0] = 1.0
    assert not LatticeFunction(g, v).vanishes_off_domain()


def test_gradient_matrix_matches_array():
    rng = np.random.default_rng(4)
    g = Grid.window(0.5, (3, 4))
    u = rng.normal(size=(3, 4))
    for periodic in (False, True):
        G = gradient_matrix(g, periodic)
        np.testing.assert_allclose(G @ u.ravel(), gradient_array(u, 0.5, 2, 0, periodic).ravel(), atol=1e-14)


def test_freudenthal_reproduces_affine_functions():
    g = Grid.window(0.5, (6, 6), origin=(-1, -1))
    F = np.array([[1.0, -2.0]])
    vals = (g.points() @ F.T + 0.3).reshape(6, 6, 1)
    rng = np.random.default_rng(5)
    pts = rng.uniform(0.0, 1.5, size=(50, 2))
    v, grad = freudenthal_interpolant(vals, g, pts, with_gradient=True)
    np.testing.assert_allclose(v[:, 0], pts @ F[0] + 0.3, atol=1e-13)
    np.testing.assert_allclose(grad[:, 0, :], np.broadcast_to(F, (50, 2)), atol=1e-12)
    nodal = freudenthal_interpolant(vals, g, g.points())
    np.testing.assert_allclose(nodal, vals.reshape(-1, 1), atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(2, 5),
    st.sampled_from([1.0, 0.5, 0.25]),
    st.sampled_from([ZERO, PERIODIC]),
    st.integers(0, 2**32 - 1),
)
def test_serialization_round_trip(d, n, eps, boundary, seed):
    rng = np.random.default_rng(seed)
    g = Grid.window(eps, (n,) * d, origin=tuple(rng.integers(-3, 3, size=d)))
    u = LatticeFunction(g, rng.normal(size=(n,) * d + (2,)), boundary)
    for back in (from_csv(to_csv(u)), from_bytes(to_bytes(u))):
        np.testing.assert_array_equal(back.values, u.values)
        assert back.grid.origin == g.origin and back.boundary == boundary


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(2, 5), st.sampled_from([ZERO, PERIODIC]), st.integers(0, 2**32 - 1))
def test_integration_by_parts_property(d, n, boundary, seed):
    rng = np.random.default_rng(seed)
    g = Grid.window(float(rng.choice([1.0, 0.5, 0.25])), (n,) * d)
    u = LatticeFunction(g, rng.normal(size=(n,) * d + (1,)), boundary)
    v = LatticeFunction(g, rng.normal(size=(n,) * d + (d,)), boundary)
    assert abs(discrete_gradient(u).inner(v) - u.inner(discrete_divergence(v))) < 1e-12 * max(1, abs(u.inner(discrete_divergence(v))))


def test_quadrature_points_cover_cells():
    g = Grid.window(0.5, (2, 2))
    pts, w = quadrature_points(g, 2)
    j = floor_index(g, pts.reshape(-1, 2)).reshape(4, -1, 2)
    np.testing.assert_array_equal(j, np.repeat(np.indices((2, 2)).reshape(2, -1).T[:, None, :], 4, axis=1))
