"""Static eps sweep for a layered or random network, printed as a table."""

import argparse
from dataclasses import dataclass, field
from pathlib import Path

from sunfold.cli import build_graph, build_integrand, build_load, build_space, load_config
from sunfold.statics import run_convergence_study

CONFIGS = Path(__file__).resolve().parent / "configs"


@dataclass
class StaticStudyConfig:
    config: Path = CONFIGS / "static_layered.yaml"
    epsilons: list = field(default_factory=lambda: [1 / 8, 1 / 16, 1 / 32, 1 / 64])
    seed: int = None


def run(cfg: StaticStudyConfig):
    rc = load_config(cfg.config, cfg.seed)
    space, graph = build_space(rc), build_graph(rc)
    box = (tuple(rc.box[0]), tuple(rc.box[1]))
    study = run_convergence_study(build_integrand(rc, space, graph), box, build_load(rc, graph.d), cfg.epsilons)
    print(f"A_hom = {study.A_hom}")
    print(f"{'eps':>9s} {'E_eps':>12s} {'E_rec - E_hom':>14s} {'|u - U|':>10s} {'|grad err|':>10s}")
    for i, e in enumerate(study.epsilons):
        gap = study.recovery_energy[i] - study.homogenized_energy
        print(f"{e:9.5f} {study.energy[i]:12.6f} {gap:14.3e} {study.strong_error_u[i]:10.3e} {study.strong_error_grad[i]:10.3e}")
    return study


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=StaticStudyConfig.config)
    ap.add_argument("--epsilons", type=float, nargs="+", default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    cfg = StaticStudyConfig(args.config, seed=args.seed)
    if args.epsilons:
        cfg.epsilons = args.epsilons
    run(cfg)
