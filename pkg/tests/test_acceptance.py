"""Acceptance suite: one PASS/FAIL line per criterion, printed before the assertion."""

import time
from pathlib import Path

import numpy as np

from sunfold.cli import (
    build_eris_spec,
    build_graph,
    build_integrand,
    build_load,
    build_space,
    identity_suite,
    load_config,
    main,
    time_grid,
)
from sunfold.corrector import (
    QuadraticIntegrand,
    assemble_homogenized_tensor,
    brute_force_tensor,
    corrector_basis,
)
from sunfold.eris import evolution_convergence_study, evolve
from sunfold.graph import LatticeGraph, verify_korn
from sunfold.lattice import Grid
from sunfold.probability import RandomField, disjoint_union, make_torus_space
from sunfold.statics import run_convergence_study
from sunfold.unfolding import transform_energy

CONFIGS = Path(__file__).resolve().parents[1] / "scripts" / "configs"


def report(n, ok, detail):
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def config(name):
    return load_config(CONFIGS / name, None)


def test_criterion_01_operator_identities():
    t0 = time.perf_counter()
    res = identity_suite(seed=0, instances=50)
    elapsed = time.perf_counter() - t0
    worst = max(res.values())
    ok = worst < 1e-12 and elapsed < 10 and len(res) >= 9
    report(1, ok, f"worst residual {worst:.2e} over {len(res)} identities x 50 instances in {elapsed:.2f} s")


def _loop_orders(V, v):
    """Both evaluation orders by explicit loops over samples and sites."""
    space, grid = v.space, v.grid
    coords = grid.coordinates()
    flat = v.flat()
    direct = unfolded = 0.0
    for w in range(space.m):
        for s, y in enumerate(coords):
            direct += space.weights[w] * V(np.array([space.shift_perm(y)[w]]), flat[w, s][None])[0]
            back = space.shift_perm(-y)[w]
            unfolded += space.weights[w] * V(np.array([w]), flat[back, s][None])[0]
    return direct * grid.cell_volume, unfolded * grid.cell_volume


def test_criterion_02_transformation_formula():
    rng = np.random.default_rng(2)
    worst = 0.0
    cases = [((2,), (4,), 0.5), ((3, 2), (3, 4), 0.25), ((1, 1), (2, 2), 1.0), ((6,), (6,), 0.5)]
    for period, shape, eps in cases:
        space = make_torus_space(period)
        if rng.random() < 0.5:
            space = disjoint_union(space, make_torus_space(period), 0.3)
        grid = Grid(eps, shape, tuple(int(o) for o in rng.integers(-3, 3, size=len(shape))))
        n = 2
        v = RandomField(space, grid, rng.normal(size=(space.m,) + shape + (n,)))
        A = rng.normal(size=(space.m, n, n))
        A = np.einsum("mij,mkj->mik", A, A) + np.eye(n)
        c = rng.uniform(0.5, 2.0, size=space.m)
        quad = lambda w, F: 0.5 * np.einsum("ki,kij,kj->k", F, A[w], F)
        quart = lambda w, F: c[w] * np.sum(F**2, axis=1) ** 2
        for V in (quad, quart):
            value = transform_energy(V, v)
            a, b = _loop_orders(V, v)
            worst = max(worst, abs(a - b) / max(1.0, abs(a)), abs(a - value) / max(1.0, abs(a)))
    report(2, worst < 1e-12, f"quadratic and quartic densities, worst relative gap {worst:.2e}")


def test_criterion_03_korn():
    pos = verify_korn(LatticeGraph([(1, 0), (0, 1), (1, 1)]), (8, 12, 16))
    neg = verify_korn(LatticeGraph([(1, 0), (0, 1)]), (8, 12, 16))
    growth = neg.constants[-1] / neg.constants[0]
    spread = (max(pos.constants) - min(pos.constants)) / max(pos.constants)
    ok = pos.passed and growth >= 10
    report(
        3,
        ok,
        f"triangle constants {np.round(pos.constants, 3).tolist()} spread {spread:.3f}; "
        f"square constants {np.round(neg.constants, 2).tolist()} growth {growth:.2f}x (need >= 10x)",
    )


def test_criterion_04_corrector_oracle():
    a0, a1 = 1.0, 4.0
    harmonic = 2.0 / (1 / a0 + 1 / a1)
    two = make_torus_space((2,))
    line = LatticeGraph([(1,)])
    t = assemble_homogenized_tensor(QuadraticIntegrand(two, line, np.array([[[a0]], [[a1]]])))
    err = abs(t.A_hom[0, 0] - harmonic)
    s = make_torus_space((2, 3))
    tri = LatticeGraph([(1, 0), (0, 1), (1, 1)])
    B = np.random.default_rng(4).normal(size=(3, 3))
    A = B @ B.T + np.eye(3)
    const = QuadraticIntegrand(s, tri, np.broadcast_to(A, (6, 3, 3)))
    exact = np.array_equal(assemble_homogenized_tensor(const).A_hom, A) and not np.any(corrector_basis(const))
    report(4, err < 1e-10 and exact, f"|A_hom - 1.6| = {err:.2e}; constant case exact: {exact}")


def test_criterion_05_brute_force_equivalence():
    rng = np.random.default_rng(5)
    cases = [((1,), [(1,)]), ((2,), [(1,)]), ((6,), [(1,)]), ((2, 3), [(1, 0), (0, 1), (1, 1)]),
             ((3, 2), [(1, 0), (0, 1), (2, -1)]), ((2, 2), [(1, 0), (0, 1)])]
    worst = 0.0
    for period, gens in cases:
        for _ in range(5):
            graph = LatticeGraph(gens)
            s = make_torus_space(period)
            B = rng.normal(size=(s.m, graph.k, graph.k))
            A = np.einsum("mij,mkj->mik", B, B) + 0.5 * np.eye(graph.k)
            integ = QuadraticIntegrand(s, graph, A)
            gap = np.abs(assemble_homogenized_tensor(integ).A_hom - brute_force_tensor(integ)).max()
            worst = max(worst, gap)
    report(5, worst < 1e-9, f"max |A_hom - brute force| = {worst:.2e} over 30 instances")


def test_criterion_06_static_study():
    cfg = config("static_layered.yaml")
    space, graph = build_space(cfg), build_graph(cfg)
    t0 = time.perf_counter()
    study = run_convergence_study(
        build_integrand(cfg, space, graph), (tuple(cfg.box[0]), tuple(cfg.box[1])), build_load(cfg, graph.d), cfg.epsilons
    )
    elapsed = time.perf_counter() - t0
    e = np.array(study.strong_error_u)
    gaps = np.abs(np.array(study.recovery_energy) - study.homogenized_energy)
    lower = min(np.array(study.energy) - study.homogenized_energy)
    ok = (
        np.all(np.diff(e) < 0)
        and e[-1] < 0.25 * e[0]
        and lower >= -1e-9
        and np.all(np.diff(gaps) < 0)
        and elapsed < 60
    )
    report(
        6,
        ok,
        f"errors {np.round(e, 5).tolist()} ratio {e[-1] / e[0]:.4f}; min E_eps - E_hom {lower:.2e}; "
        f"recovery gaps {[f'{g:.2e}' for g in gaps]}; {elapsed:.1f} s",
    )


def _spring_errors(steps):
    cfg = config("evolve_single_spring.yaml")
    cfg.times = dict(cfg.times, steps=steps)
    space, graph = build_space(cfg), build_graph(cfg)
    spec = build_eris_spec(cfg, space, graph, cfg.epsilons[0])
    times = time_grid(cfg)
    traj = evolve(spec, times)
    site = int(np.flatnonzero(spec.grid.domain_mask.ravel())[0])
    u = np.array([traj.state(k).u.values.reshape(-1)[site] for k in range(len(times))])
    z = np.array([traj.state(k).z.values.reshape(-1)[site - 1] for k in range(len(times))])
    # closed form: u = zeta + l/(2a), zeta = (l/2 - sigma)^+ / h with a = h = 1, sigma = 0.025, l = 0.1 t
    fine = np.linspace(times[0], times[-1], 20 * steps + 1)
    l = 0.1 * fine
    ze = np.maximum(l / 2 - 0.025, 0.0)
    ue = ze + l / 2
    idx = np.clip(np.searchsorted(times, fine, side="right") - 1, 0, steps)
    return max(np.abs(u[idx] - ue).max(), np.abs(z[idx] - ze).max()), traj


def test_criterion_07_single_spring_oracle():
    e1, _ = _spring_errors(200)
    e2, _ = _spring_errors(400)
    ratio = e2 / e1
    ok = e1 < 1e-3 and abs(ratio - 0.5) <= 0.3 * 0.5
    report(7, ok, f"max error {e1:.3e} at T/200, {e2:.3e} at T/400, ratio {ratio:.3f}")


def test_criterion_08_energy_balance_and_lipschitz():
    lines, ok = [], True
    _, s1 = _spring_errors(200)
    _, s2 = _spring_errors(400)
    runs = [("spring", s1, s2)]
    for name in ("evolve_two_phase.yaml", "evolve_gradient_plasticity.yaml"):
        cfg = config(name)
        space, graph = build_space(cfg), build_graph(cfg)
        spec = build_eris_spec(cfg, space, graph, cfg.epsilons[0])
        t = time_grid(cfg)
        t2 = np.linspace(t[0], t[-1], 2 * (len(t) - 1) + 1)
        runs.append((name.split(".")[0], evolve(spec, t), evolve(spec, t2)))
    for name, coarse, fine in runs:
        factor = coarse.balance_residual / fine.balance_residual
        lip = max(coarse.lipschitz_check(), fine.lipschitz_check())
        ok &= 1.5 <= factor <= 2.5 and lip <= 1.0
        lines.append(f"{name}: balance factor {factor:.3f}, Lipschitz ratio {lip:.3f}")
    report(8, ok, "; ".join(lines))


def _study(name):
    cfg = config(name)
    space, graph = build_space(cfg), build_graph(cfg)
    spec = build_eris_spec(cfg, space, graph, cfg.epsilons[0])
    study, _ = evolution_convergence_study(spec, cfg.epsilons, time_grid(cfg), cfg.sample_times)
    return study


def test_criterion_09_evolution_study():
    t0 = time.perf_counter()
    plain = _study("evolve_two_phase.yaml")
    grad = _study("evolve_gradient_plasticity.yaml")
    elapsed = time.perf_counter() - t0
    dec = lambda xs: bool(np.all(np.diff(xs) < 0))
    ok = all(dec(plain.error_u[t]) and dec(plain.error_z[t]) for t in plain.sample_times)
    ok &= all(dec(grad.error_u[t]) and dec(grad.error_z[t]) and dec(grad.grad_z_norm[t]) for t in grad.sample_times)
    ok &= elapsed < 300
    t = plain.sample_times[-1]
    tg = grad.sample_times[-1]
    report(
        9,
        ok,
        f"t={t:.3g}: u errors {np.round(plain.error_u[t], 5).tolist()}, z errors {np.round(plain.error_z[t], 5).tolist()}; "
        f"gradient plasticity t={tg:.3g}: scaled grad z {np.round(grad.grad_z_norm[tg], 4).tolist()}; {elapsed:.1f} s",
    )


def test_criterion_10_reproducibility(tmp_path):
    runs = [("verify", None), ("korn", "korn_triangle.yaml"), ("corrector", "corrector_random.yaml"),
            ("static", "static_layered.yaml"), ("evolve", "evolve_single_spring.yaml")]
    mismatched, compared = [], 0
    for cmd, name in runs:
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{cmd}_{rep}"
            args = [cmd, "--out", str(out), "--seed", "13"]
            if name:
                args += ["--config", str(CONFIGS / name)]
            main(args)
            outs.append(out)
        for f in sorted(outs[0].iterdir()):
            compared += 1
            if f.read_bytes() != (outs[1] / f.name).read_bytes():
                mismatched.append(f"{cmd}/{f.name}")
    report(10, compared > 0 and not mismatched, f"{compared} output files compared, mismatches: {mismatched or 'none'}")
