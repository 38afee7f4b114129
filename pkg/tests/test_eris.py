import numpy as np
import pytest

from sunfold.eris import (
    ERISSpec,
    ERISState,
    HomogenizedERISSpec,
    L1QuadraticBlock,
    assemble_eps,
    elastoplastic_block,
    eps_energy,
    evolution_convergence_study,
    evolve,
    evolve_homogenized,
    incremental_step,
    initial_state,
    soft_threshold,
    stability_check,
)
from sunfold.graph import LatticeGraph
from sunfold.probability import RandomField, make_torus_space

LINE = LatticeGraph([(1,)])
ONE = make_torus_space((1,))
TWO = make_torus_space((2,))


def spring_spec(a=1.0, h=1.0, sigma=0.025, rate=0.1):
    """A single free site at x = 1 held by two edges to the clamped ends of [0, 2]."""
    return ERISSpec(ONE, LINE, 1.0, ((0.0,), (2.0,)), elastoplastic_block([a], [h]), [[sigma]],
                    lambda t, x: np.full((len(x), 1), rate * t))


def spring_oracle(t, a, h, sigma, rate):
    # by symmetry z_right = -z_left = -zeta; the energy a (u - zeta)^2 + h zeta^2 - l u
    # with dissipation 2 sigma |d zeta| has u = zeta + l / (2a) and zeta = (l/2 - sigma)^+ / h
    l = rate * np.asarray(t)
    zeta = np.maximum(l / 2 - sigma, 0.0) / h
    return zeta + l / (2 * a), zeta


def spring_path(traj, n):
    us, zs = [], []
    for k in range(n):
        st = traj.state(k)
        grid = st.u.grid
        site = int(np.flatnonzero(grid.domain_mask.ravel())[0])
        us.append(st.u.values.reshape(-1)[site])
        zs.append(st.z.values.reshape(-1)[site - 1])
    return np.array(us), np.array(zs)


def two_phase_spec(eps=0.25, sigma=(0.1, 0.2), load=None, **kw):
    load = load or (lambda t, x: t * np.sin(np.pi * x[:, :1]))
    return ERISSpec(TWO, LINE, eps, ((0.0,), (1.0,)), elastoplastic_block([[0.5], [1.0]], [[0.5], [1.0]]),
                    np.array(sigma).reshape(2, 1), load, **kw)


def test_soft_threshold_and_block_layout():
    np.testing.assert_array_equal(soft_threshold(np.array([-3.0, 0.5, 2.0]), 1.0), [-2.0, 0.0, 1.0])
    A = elastoplastic_block([2.0], [3.0])
    # 1/2 a (e - z)^2 + 1/2 h z^2 at e = 1, z = 0.25
    y = np.array([1.0, 0.25])
    assert A.shape == (2, 2)
    assert abs(0.5 * y @ A @ y - (0.5 * 2 * 0.75**2 + 0.5 * 3 * 0.0625)) < 1e-15


def test_l1_block_scalar_oracle():
    # min 1/2 q z^2 - g z + w |z - z0| has the closed form z0 + soft(g/q - z0, w/q)
    q, w = 2.0, 0.3
    blk = L1QuadraticBlock(np.array([[q]]), 0, np.array([w]))
    for g, z0 in [(1.0, 0.0), (0.2, 0.0), (-1.5, 0.4)]:
        big = L1QuadraticBlock(np.array([[1.0, -1.0], [-1.0, 1.0 + q]]), 1, np.array([w]))
        v, z, _, r = big.step(np.array([g]), np.array([z0]))
        # eliminating v = g + z leaves 1/2 q z^2 - g z + w |z - z0|
        assert abs(z[0] - (z0 + soft_threshold(g / q - z0, w / q))) < 1e-10
        assert abs(v[0] - (g + z[0])) < 1e-10 and r < 1e-9
    assert blk.nz == 1


def test_single_spring_closed_form():
    times = np.linspace(0, 2, 201)
    traj = evolve(spring_spec(), times)
    u, z = spring_path(traj, len(times))
    ue, ze = spring_oracle(times, 1.0, 1.0, 0.025, 0.1)
    np.testing.assert_allclose(u, ue, atol=1e-9)
    np.testing.assert_allclose(z, ze, atol=1e-9)


def test_zero_load_keeps_zero_state():
    spec = two_phase_spec(load=lambda t, x: np.zeros((len(x), 1)))
    traj = evolve(spec, np.linspace(0, 1, 5))
    for k in range(5):
        st = traj.state(k)
        assert np.all(st.u.values == 0) and np.all(st.z.values == 0)
    assert traj.balance_residual == 0


def test_infinite_yield_freezes_plastic_strain():
    spec = two_phase_spec(sigma=(np.inf, np.inf))
    traj = evolve(spec, np.linspace(0, 1, 4))
    assert all(np.all(traj.state(k).z.values == 0) for k in range(4))
    assert np.all(np.array(traj.dissipation) == 0)


def test_constant_load_gives_constant_trajectory():
    spec = two_phase_spec(load=lambda t, x: 0.5 * np.sin(np.pi * x[:, :1]))
    y0 = initial_state(spec)
    traj = evolve(spec, np.linspace(0, 1, 4), y0=y0)
    for k in range(1, 4):
        np.testing.assert_allclose(traj.states[k][0], traj.states[0][0], atol=1e-9)
        np.testing.assert_allclose(traj.states[k][1], traj.states[0][1], atol=1e-9)


def test_energy_balance_residual_halves_under_refinement():
    spec = two_phase_spec()
    res = [evolve(spec, np.linspace(0, 1, n + 1)).balance_residual for n in (20, 40, 80)]
    ratios = np.array(res[1:]) / np.array(res[:-1])
    assert np.all(np.abs(ratios - 0.5) < 0.1), ratios


def test_lipschitz_estimate():
    traj = evolve(two_phase_spec(), np.linspace(0, 1, 11))
    assert traj.coercivity > 0
    assert traj.lipschitz_check() <= 1.0


def test_energy_routes_agree():
    spec = two_phase_spec()
    traj = evolve(spec, np.linspace(0, 1, 6))
    for k in (1, 5):
        st = traj.state(k)
        assert abs(eps_energy(spec, traj.times[k], st) - traj.energy[k]) < 1e-10


def test_stability_of_computed_states_and_certificate():
    spec = two_phase_spec()
    t = 1.0
    st = incremental_step(spec, t, initial_state(spec, 0.0))
    rep = stability_check(spec, t, st)
    assert rep.stable
    # push the plastic strain of one site far past equilibrium: the check must flag it
    z = st.z.values.copy()
    z[0, st.z.grid.halo_mask] += 5.0
    bad = ERISState(st.u, RandomField(spec.space, st.z.grid, z))
    rep = stability_check(spec, t, bad)
    assert not rep.stable and rep.certificate is not None
    w, dv = rep.certificate
    # the certificate really lowers energy plus dissipation
    asm = assemble_eps(spec)
    b = asm.blocks[w]
    y = asm.from_state(bad)[w]
    f = asm.load_vector(t)
    trial = y + dv
    assert b.energy(trial[: b.nv], trial[b.nv:], f) + b.dissipation(dv[b.nv:]) < b.energy(y[: b.nv], y[b.nv:], f)


def test_elastic_equilibrium_is_stable():
    spec = two_phase_spec(sigma=(10.0, 10.0))
    st = incremental_step(spec, 1.0, initial_state(spec))
    assert np.all(st.z.values == 0)
    assert stability_check(spec, 1.0, st).stable


def test_homogenized_routes_agree_for_constant_coefficients():
    A = elastoplastic_block([1.0], [0.5])
    load = lambda t, x: t * np.sin(np.pi * x[:, :1])
    times = np.linspace(0, 1, 6)
    out = {}
    for mode in ("two_scale", "two_scale_shared_z", "deterministic"):
        hs = HomogenizedERISSpec(TWO, LINE, 1 / 16, ((0.0,), (1.0,)), A, [[0.1]], load, mode)
        out[mode] = evolve_homogenized(hs, times)
    ref = out["deterministic"].state(5)
    for mode in ("two_scale", "two_scale_shared_z"):
        st = out[mode].state(5)
        np.testing.assert_allclose(st["U"], ref["U"], atol=1e-8)
        np.testing.assert_allclose(np.atleast_3d(st["Z"]).reshape(-1, ref["Z"].shape[0], 1).mean(axis=0), ref["Z"], atol=1e-8)
        np.testing.assert_allclose(out[mode].energy, out["deterministic"].energy, atol=1e-10)


def test_homogenized_zero_yield_is_elastic_limit():
    # with zero yield stress z relaxes freely, leaving the series stiffness a h / (a + h)
    load = lambda t, x: t * np.sin(np.pi * x[:, :1])
    a, h = 1.0, 1.0
    hs = HomogenizedERISSpec(ONE, LINE, 1 / 16, ((0.0,), (1.0,)), elastoplastic_block([a], [h]), [[0.0]], load, "deterministic")
    el = HomogenizedERISSpec(ONE, LINE, 1 / 16, ((0.0,), (1.0,)), elastoplastic_block([a * h / (a + h)], [1.0]), [[np.inf]], load, "deterministic")
    t = np.linspace(0, 1, 3)
    np.testing.assert_allclose(evolve_homogenized(hs, t).state(2)["U"], evolve_homogenized(el, t).state(2)["U"], atol=1e-8)


def test_nonstable_initial_state_rejected():
    spec = two_phase_spec(load=lambda t, x: np.full((len(x), 1), 5.0))
    with pytest.raises(ValueError):
        evolve(spec, [0.0, 1.0])
    with pytest.raises(ValueError):
        evolve(two_phase_spec(), [0.0, 0.0])
    with pytest.raises(ValueError):
        two_phase_spec(gamma=1.5, G=1.0)


def test_evolution_study_trends():
    spec = two_phase_spec()
    times = np.linspace(0, 1, 31)
    study, _ = evolution_convergence_study(spec, [1 / 8, 1 / 16, 1 / 32], times, [1 / 3, 2 / 3, 1.0])
    for t in study.sample_times:
        assert np.all(np.diff(study.error_u[t]) < 0)
        assert np.all(np.diff(study.error_z[t]) < 0)
    assert study.to_csv().count("\n") == 1 + 9
