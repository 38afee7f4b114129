"""Command line driver: verify | korn | corrector | static | evolve.

Each run is fully described by one YAML file plus the ``--seed`` flag.  Outputs
are JSON (sorted keys) and CSV files written to ``--out``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    seed: int = 0
    space: dict = field(default_factory=lambda: {"kind": "torus", "period": [2]})
    generators: list = field(default_factory=lambda: [[1]])
    coefficients: dict = field(default_factory=lambda: {"phases": [1.0, 4.0]})
    hardening: list = None
    yield_stress: list = None
    box: list = field(default_factory=lambda: [[0.0], [1.0]])
    load: dict = field(default_factory=lambda: {"profile": "sine", "amplitude": 1.0})
    epsilons: list = field(default_factory=lambda: [0.125, 0.0625, 0.03125])
    times: dict = field(default_factory=lambda: {"start": 0.0, "stop": 1.0, "steps": 30})
    sample_times: list = field(default_factory=lambda: [0.5, 0.75, 1.0])
    gradient_plasticity: dict = None
    korn: dict = field(default_factory=lambda: {"windows": [8, 12, 16], "expect_failure": False})
    verify: dict = field(default_factory=lambda: {"instances": 50})
    oracle: str = None
    tolerance: float = 1e-9


def load_config(path=None, seed=None) -> RunConfig:
    import yaml

    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"YAML parse error: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("top level of the config must be a mapping")
    known = set(RunConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = RunConfig(**raw)
    if seed is not None:
        cfg.seed = int(seed)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
    if not isinstance(cfg.generators, list) or not cfg.generators:
        raise ConfigError("generators must be a nonempty list of integer vectors")
    if not isinstance(cfg.epsilons, list) or not cfg.epsilons:
        raise ConfigError("epsilons must be a nonempty list")
    if any(not isinstance(e, (int, float)) or e <= 0 for e in cfg.epsilons):
        raise ConfigError("epsilons must be positive numbers")
    if not isinstance(cfg.box, list) or len(cfg.box) != 2:
        raise ConfigError("box must be [lower, upper]")
    if cfg.space.get("kind") not in ("torus", "union"):
        raise ConfigError("space.kind must be 'torus' or 'union'")
    if cfg.load.get("profile") not in ("sine", "constant", "linear"):
        raise ConfigError("load.profile must be sine, constant or linear")


# ------------------------------------------------------------------ builders


def build_space(cfg: RunConfig):
    from .probability import disjoint_union, make_torus_space

    s = cfg.space
    try:
        if s["kind"] == "torus":
            return make_torus_space(s["period"])
        a = make_torus_space(s["periods"][0])
        b = make_torus_space(s["periods"][1])
        return disjoint_union(a, b, float(s.get("weight", 0.5)))
    except (KeyError, IndexError, TypeError) as exc:
        raise ConfigError(f"bad space section: {exc!r}") from exc


def build_graph(cfg: RunConfig):
    from .graph import LatticeGraph

    try:
        return LatticeGraph([tuple(b) for b in cfg.generators])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad generators: {exc}") from exc


def _per_sample(spec, space, seed, name):
    """Per-sample scalars from a list, a random choice among values, or a uniform range."""
    import numpy as np

    if isinstance(spec, list):
        vals = np.asarray(spec, float)
        if vals.shape[0] != space.m:
            raise ConfigError(f"{name}: need one entry per sample ({space.m})")
        return vals
    if isinstance(spec, dict):
        rng = np.random.default_rng(seed)
        if "choice" in spec:
            return rng.choice(np.asarray(spec["choice"], float), size=space.m)
        if "uniform" in spec:
            lo, hi = spec["uniform"]
            return rng.uniform(lo, hi, size=space.m)
    raise ConfigError(f"{name}: expected a list, {{choice: [...]}} or {{uniform: [lo, hi]}}")


def spring_constants(cfg: RunConfig, space, graph):
    """(m, k) edge spring constants."""
    import numpy as np

    c = cfg.coefficients
    if "matrices" in c:
        raise ConfigError("matrix coefficients are only used by the corrector command")
    vals = _per_sample(c.get("phases"), space, cfg.seed, "coefficients.phases")
    vals = np.asarray(vals, float)
    if vals.ndim == 1:
        vals = np.repeat(vals[:, None], graph.k, axis=1)
    if vals.shape != (space.m, graph.k):
        raise ConfigError("coefficients.phases must give a scalar or k values per sample")
    return vals


def build_integrand(cfg: RunConfig, space, graph):
    import numpy as np

    from .corrector import CoercivityError, QuadraticIntegrand

    c = cfg.coefficients
    if "matrices" in c:
        A = np.asarray(c["matrices"], float)
    else:
        A = np.einsum("mk,kl->mkl", spring_constants(cfg, space, graph), np.eye(graph.k))
    try:
        return QuadraticIntegrand(space, graph, A)
    except CoercivityError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad coefficients: {exc}") from exc


def build_load(cfg: RunConfig, d):
    """Static load profile x -> (npts, d)."""
    import numpy as np

    lo = np.asarray(cfg.box[0], float)
    hi = np.asarray(cfg.box[1], float)
    amp = float(cfg.load.get("amplitude", 1.0))
    profile = cfg.load["profile"]

    def load(x):
        x = np.atleast_2d(x)
        if profile == "sine":
            v = np.prod(np.sin(np.pi * (x - lo) / (hi - lo)), axis=1)
        elif profile == "constant":
            v = np.ones(x.shape[0])
        else:
            v = x[:, 0]
        return amp * np.repeat(v[:, None], d, axis=1)

    return load


def time_grid(cfg: RunConfig):
    import numpy as np

    t = cfg.times
    try:
        return np.linspace(float(t["start"]), float(t["stop"]), int(t["steps"]) + 1)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad times section: {exc!r}") from exc


def build_eris_spec(cfg: RunConfig, space, graph, eps):
    import numpy as np

    from .eris import ERISSpec, elastoplastic_block

    a = spring_constants(cfg, space, graph)
    if cfg.hardening is None or cfg.yield_stress is None:
        raise ConfigError("evolve needs hardening and yield_stress")
    h = np.broadcast_to(np.asarray(cfg.hardening, float).reshape(space.m, -1), a.shape)
    sy = np.broadcast_to(np.asarray(cfg.yield_stress, float).reshape(space.m, -1), a.shape)
    static = build_load(cfg, graph.d)
    gp = cfg.gradient_plasticity or {}
    box = (tuple(cfg.box[0]), tuple(cfg.box[1]))
    return ERISSpec(
        space,
        graph,
        float(eps),
        box,
        elastoplastic_block(a, h),
        sy,
        lambda t, x: t * static(x),
        gp.get("gamma"),
        float(gp.get("G", 0.0)),
    )


# ------------------------------------------------------------------ identity suite


def _random_instance(rng):
    """Random space, grid and field with d in {1, 2}, |Omega| in {1, 2, 6}, eps in {1, 1/2, 1/4}."""
    import numpy as np

    from .lattice import Grid
    from .probability import disjoint_union, make_torus_space

    d = int(rng.integers(1, 3))
    m = int(rng.choice([1, 2, 6]))
    if m == 6 and rng.random() < 0.5:
        # non-uniform weights through two invariant pieces
        first = (2,) + (1,) * (d - 1)
        second = (4,) + (1,) * (d - 1)
        space = disjoint_union(make_torus_space(first), make_torus_space(second), float(rng.uniform(0.2, 0.8)))
    else:
        period = {1: (1,), 2: (2,), 6: (6,)}[m] if d == 1 else {1: (1, 1), 2: (2, 1), 6: (2, 3)}[m]
        space = make_torus_space(period)
    eps = float(rng.choice([1.0, 0.5, 0.25]))
    shape = tuple(int(rng.integers(2, 6)) for _ in range(d))
    origin = tuple(int(rng.integers(-3, 3)) for _ in range(d))
    grid = Grid.window(eps, shape, origin)
    n = int(rng.integers(1, 3))
    return space, grid, n


def _periodic_instance(rng):
    """Torus space with a window that is a multiple of the period."""
    from .lattice import Grid
    from .probability import make_torus_space

    d = int(rng.integers(1, 3))
    period = tuple(int(rng.choice([1, 2, 3])) for _ in range(d))
    shape = tuple(p * int(rng.integers(1, 4)) for p in period)
    eps = float(rng.choice([1.0, 0.5, 0.25]))
    return make_torus_space(period), Grid.window(eps, shape, tuple(int(rng.integers(-2, 3)) for _ in range(d)))


def identity_suite(seed=0, instances=50):
    """Max residual of every exact operator identity over randomized instances."""
    import numpy as np

    from .lattice import divergence_array, gradient_array
    from .probability import RandomField, hderiv_array, hdiv_array
    from .unfolding import (
        TwoScaleFunction,
        cell_average,
        commutator_check,
        evaluate_unfolded,
        fold,
        invariant_projection_field,
        l2_norm_two_scale,
        pairing_unfolded,
        transform_energy,
        unfold,
    )

    rng = np.random.default_rng(seed)
    worst = {
        "unfold_isometry": 0.0,
        "fold_contraction": 0.0,
        "fold_unfold_identity": 0.0,
        "unfold_fold_cell_average": 0.0,
        "unfold_fold_adjoint": 0.0,
        "discrete_integration_by_parts": 0.0,
        "horizontal_integration_by_parts": 0.0,
        "commutator": 0.0,
        "invariant_projection_unfold": 0.0,
        "transformation_formula": 0.0,
    }

    def rel(a, b):
        return abs(a - b) / max(1.0, abs(a), abs(b))

    for _ in range(instances):
        space, grid, n = _random_instance(rng)
        m, d = space.m, grid.d
        u = RandomField(space, grid, rng.normal(size=(m,) + grid.shape + (n,)))
        freq = rng.normal(size=(m, d, n))
        phase = rng.normal(size=(m, n))

        def V_eval(x, freq=freq, phase=phase):
            return np.sin(np.einsum("pd,mdn->mpn", x, freq) + phase[:, None, :])

        V = TwoScaleFunction(space, V_eval, n)
        Tu = unfold(u)
        worst["unfold_isometry"] = max(worst["unfold_isometry"], rel(Tu.norm(), u.norm()))
        FV = fold(V, grid)
        worst["fold_contraction"] = max(worst["fold_contraction"], max(0.0, FV.norm() - l2_norm_two_scale(V, grid)))
        Tu_fun = TwoScaleFunction(space, lambda x, u=u: evaluate_unfolded(u, x), n)
        worst["fold_unfold_identity"] = max(
            worst["fold_unfold_identity"], float(np.max(np.abs(fold(Tu_fun, grid).values - u.values)))
        )
        worst["unfold_fold_cell_average"] = max(
            worst["unfold_fold_cell_average"], float(np.max(np.abs(unfold(FV).values - cell_average(V, grid))))
        )
        worst["unfold_fold_adjoint"] = max(worst["unfold_fold_adjoint"], rel(pairing_unfolded(u, V), u.inner(FV)))
        for periodic in (False, True):
            g = rng.normal(size=u.values.shape + (d,))
            gu = gradient_array(u.values, grid.epsilon, d, 1, periodic)
            lhs = float(space.weights @ np.sum((gu * g).reshape(m, -1), axis=1))
            rhs = float(space.weights @ np.sum((u.values * divergence_array(g, grid.epsilon, d, 1, periodic)).reshape(m, -1), axis=1))
            worst["discrete_integration_by_parts"] = max(worst["discrete_integration_by_parts"], rel(lhs, rhs))
        psi = rng.normal(size=(m, n, d))
        phi = rng.normal(size=(m, n))
        lhs = float(space.weights @ np.sum((hderiv_array(space, phi) * psi).reshape(m, -1), axis=1))
        rhs = float(space.weights @ np.sum(phi * hdiv_array(space, psi), axis=1))
        worst["horizontal_integration_by_parts"] = max(worst["horizontal_integration_by_parts"], rel(lhs, rhs))
        worst["commutator"] = max(worst["commutator"], commutator_check(u, False))
        pspace, pgrid = _periodic_instance(rng)
        pu = RandomField(pspace, pgrid, rng.normal(size=(pspace.m,) + pgrid.shape + (1,)))
        worst["commutator"] = max(worst["commutator"], commutator_check(pu, True))
        worst["invariant_projection_unfold"] = max(
            worst["invariant_projection_unfold"],
            float(np.max(np.abs(invariant_projection_field(Tu).values - invariant_projection_field(u).values))),
        )
        A = rng.normal(size=(m, n, n))
        A = np.einsum("mij,mkj->mik", A, A) + np.eye(n)
        for V_dens in (
            lambda s, F, A=A: 0.5 * np.einsum("ki,kij,kj->k", F, A[s], F),
            lambda s, F: np.sum(F**2, axis=1) ** 2 * (1.0 + s),
        ):
            # transform_energy raises if its two orders disagree; recompute the gap here
            space_w = space.weights
            vals = u.flat()
            perms = space.site_perms(grid.coordinates())
            direct = V_dens(perms.T.reshape(-1), vals.reshape(m * grid.size, -1)).reshape(m, grid.size)
            unf = unfold(u).flat().reshape(m * grid.size, -1)
            other = V_dens(np.repeat(np.arange(m), grid.size), unf).reshape(m, grid.size)
            a = math.fsum((space_w[:, None] * direct).ravel()) * grid.cell_volume
            b = math.fsum((space_w[:, None] * other).ravel()) * grid.cell_volume
            worst["transformation_formula"] = max(worst["transformation_formula"], rel(a, b))
            transform_energy(V_dens, u)
    return worst


# ------------------------------------------------------------------ output helpers


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")


def _json_default(o):
    import numpy as np

    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def spring_ramp_solution(t, rate, a, h, sigma):
    """Closed form for one elasto-plastic site held by two opposite springs."""
    import numpy as np

    load = rate * np.asarray(t, float)
    zeta = np.maximum(load / 2 - sigma, 0.0) / h
    return zeta + load / (2 * a), zeta


# ------------------------------------------------------------------ commands


def cmd_verify(cfg: RunConfig, out: Path):
    from .graph import verify_korn

    tol = 1e-12
    t0 = time.perf_counter()
    res = identity_suite(cfg.seed, int(cfg.verify.get("instances", 50)))
    report = {name: {"residual": r, "passed": r < tol} for name, r in sorted(res.items())}
    graph = build_graph(cfg)
    expect_fail = bool(cfg.korn.get("expect_failure", False))
    korn = None
    if graph.d == 2:
        korn = verify_korn(graph, tuple(cfg.korn.get("windows", (8, 12, 16))))
        report["korn"] = {
            **korn.to_dict(),
            "expected_failure": expect_fail,
            "passed": korn.passed != expect_fail,
        }
    ok = all(v["passed"] for v in report.values())
    _write_json(out / "verify.json", {"seed": cfg.seed, "invariants": report, "all_passed": ok})
    for name, v in report.items():
        print(f"{'PASS' if v['passed'] else 'FAIL'} {name}")
    print(f"elapsed {time.perf_counter() - t0:.2f} s", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_korn(cfg: RunConfig, out: Path):
    from .graph import verify_korn, verify_stochastic_korn

    graph = build_graph(cfg)
    space = build_space(cfg)
    rep = verify_korn(graph, tuple(cfg.korn.get("windows", (8, 12, 16))))
    stoch = verify_stochastic_korn(space, graph, seed=cfg.seed) if space.d == graph.d else None
    expect_fail = bool(cfg.korn.get("expect_failure", False))
    _write_json(
        out / "korn.json",
        {
            "deterministic": rep.to_dict(),
            "stochastic": None if stoch is None else stoch.to_dict(),
            "expected_failure": expect_fail,
        },
    )
    print(f"{'PASS' if rep.passed else 'FAIL'} korn constants {rep.constants} ({rep.note})")
    return EXIT_OK if rep.passed != expect_fail else EXIT_FAIL


def cmd_corrector(cfg: RunConfig, out: Path):
    import csv

    from .corrector import assemble_homogenized_tensor

    space = build_space(cfg)
    graph = build_graph(cfg)
    integ = build_integrand(cfg, space, graph)
    tensor = assemble_homogenized_tensor(integ)
    _write_json(out / "a_hom.json", tensor.to_dict())
    with open(out / "probes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["probe", "value", "kkt_residual"])
        for p in tensor.probes:
            w.writerow([p["probe"], repr(float(p["value"])), repr(float(p["kkt_residual"]))])
    print(json.dumps({"A_hom": tensor.A_hom.tolist()}))
    return EXIT_OK


def cmd_static(cfg: RunConfig, out: Path):
    from .statics import run_convergence_study

    space = build_space(cfg)
    graph = build_graph(cfg)
    integ = build_integrand(cfg, space, graph)
    box = (tuple(cfg.box[0]), tuple(cfg.box[1]))
    study = run_convergence_study(integ, box, build_load(cfg, graph.d), cfg.epsilons)
    (out / "static.csv").write_text(study.to_csv())
    _write_json(out / "static.json", study.manifest())
    print(study.to_csv(), end="")
    return EXIT_OK


def cmd_evolve(cfg: RunConfig, out: Path):
    import numpy as np

    from .eris import evolution_convergence_study, evolve

    space = build_space(cfg)
    graph = build_graph(cfg)
    times = time_grid(cfg)
    summary = {"seed": cfg.seed, "runs": []}
    ok = True
    for i, eps in enumerate(cfg.epsilons):
        spec = build_eris_spec(cfg, space, graph, eps)
        traj = evolve(spec, times, tol=cfg.tolerance)
        (out / f"trajectory_{i}.csv").write_text(traj.to_csv())
        run = {
            "epsilon": float(eps),
            "balance_residual": traj.balance_residual,
            "lipschitz_ratio": traj.lipschitz_check(),
            "coercivity": traj.coercivity,
            "load_lipschitz": traj.load_lipschitz,
            "max_stability_residual": float(max(traj.stability)),
        }
        ok &= run["lipschitz_ratio"] <= 1.0
        if cfg.oracle == "single_spring":
            grid = spec.grid
            site = int(np.flatnonzero(grid.domain_mask.ravel())[0])
            edge = site - 1
            us = np.array([traj.state(k).u.values.reshape(space.m, -1)[0, site] for k in range(len(times))])
            zs = np.array([traj.state(k).z.values.reshape(space.m, -1)[0, edge] for k in range(len(times))])
            a = float(spec.A[0, 0, 0])
            h = float(spec.A[0, 1, 1] - a)
            rate = float(build_load(cfg, 1)(np.zeros((1, 1)))[0, 0])
            ue, ze = spring_ramp_solution(times, rate, a, h, float(spec.yield_stress[0, 0]))
            run["oracle_max_error_grid"] = float(max(np.abs(us - ue).max(), np.abs(zs - ze).max()))
            # piecewise-constant interpolant in time, sampled 20x finer than the grid
            fine = np.linspace(times[0], times[-1], 20 * (len(times) - 1) + 1)
            idx = np.clip(np.searchsorted(times, fine, side="right") - 1, 0, len(times) - 1)
            ue, ze = spring_ramp_solution(fine, rate, a, h, float(spec.yield_stress[0, 0]))
            run["oracle_max_error"] = float(max(np.abs(us[idx] - ue).max(), np.abs(zs[idx] - ze).max()))
        summary["runs"].append(run)
    if len(cfg.epsilons) >= 2:
        spec = build_eris_spec(cfg, space, graph, cfg.epsilons[0])
        study, _ = evolution_convergence_study(spec, cfg.epsilons, times, cfg.sample_times, tol=cfg.tolerance)
        (out / "evolution.csv").write_text(study.to_csv())
        summary["study_balance_residual"] = study.balance_residual
    _write_json(out / "evolve.json", summary)
    print(json.dumps(summary, sort_keys=True, default=_json_default))
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "verify": cmd_verify,
    "korn": cmd_korn,
    "corrector": cmd_corrector,
    "static": cmd_static,
    "evolve": cmd_evolve,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="sunfold", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path("out"))
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    args = parser.parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg = load_config(args.config, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
