"""Single elasto-plastic spring under a ramp: time-step refinement against the closed form."""

import argparse
from dataclasses import dataclass, field

import numpy as np

from sunfold.cli import spring_ramp_solution
from sunfold.eris import ERISSpec, elastoplastic_block, evolve
from sunfold.graph import LatticeGraph
from sunfold.probability import make_torus_space


@dataclass
class SpringConfig:
    a: float = 1.0
    h: float = 1.0
    sigma: float = 0.025
    rate: float = 0.1
    T: float = 1.0
    steps: list = field(default_factory=lambda: [50, 100, 200, 400, 800])


def run(cfg: SpringConfig):
    spec = ERISSpec(
        make_torus_space((1,)), LatticeGraph([(1,)]), 1.0, ((0.0,), (2.0,)),
        elastoplastic_block([cfg.a], [cfg.h]), [[cfg.sigma]], lambda t, x: np.full((len(x), 1), cfg.rate * t),
    )
    site = int(np.flatnonzero(spec.grid.domain_mask.ravel())[0])
    print(f"{'steps':>6s} {'grid err':>10s} {'interp err':>10s} {'balance':>10s} {'Lipschitz':>9s}")
    for n in cfg.steps:
        t = np.linspace(0, cfg.T, n + 1)
        traj = evolve(spec, t)
        u = np.array([traj.state(k).u.values.reshape(-1)[site] for k in range(n + 1)])
        z = np.array([traj.state(k).z.values.reshape(-1)[site - 1] for k in range(n + 1)])
        ue, ze = spring_ramp_solution(t, cfg.rate, cfg.a, cfg.h, cfg.sigma)
        grid_err = max(np.abs(u - ue).max(), np.abs(z - ze).max())
        fine = np.linspace(0, cfg.T, 20 * n + 1)
        idx = np.clip(np.searchsorted(t, fine, side="right") - 1, 0, n)
        uf, zf = spring_ramp_solution(fine, cfg.rate, cfg.a, cfg.h, cfg.sigma)
        interp = max(np.abs(u[idx] - uf).max(), np.abs(z[idx] - zf).max())
        print(f"{n:6d} {grid_err:10.2e} {interp:10.3e} {traj.balance_residual:10.3e} {traj.lipschitz_check():9.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sigma", type=float, default=SpringConfig.sigma)
    ap.add_argument("--steps", type=int, nargs="+", default=None)
    args = ap.parse_args()
    cfg = SpringConfig(sigma=args.sigma)
    if args.steps:
        cfg.steps = args.steps
    run(cfg)
