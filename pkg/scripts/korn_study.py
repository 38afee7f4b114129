"""Empirical Korn constants on growing windows for a few edge sets."""

import argparse
import json
from dataclasses import dataclass, field

from sunfold.graph import LatticeGraph, verify_korn


@dataclass
class KornStudyConfig:
    windows: tuple = (4, 8, 12, 16, 20)
    edge_sets: dict = field(
        default_factory=lambda: {
            "triangle": [(1, 0), (0, 1), (1, 1)],
            "square": [(1, 0), (0, 1)],
            "square_both_diagonals": [(1, 0), (0, 1), (1, 1), (1, -1)],
        }
    )


def run(cfg: KornStudyConfig):
    rows = {}
    for name, gens in cfg.edge_sets.items():
        rep = verify_korn(LatticeGraph(gens), cfg.windows)
        rows[name] = {"windows": list(cfg.windows), "constants": rep.constants, "stable": rep.passed}
        print(f"{name:24s} " + " ".join(f"{c:9.3f}" for c in rep.constants) + f"  {rep.note}")
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--windows", type=int, nargs="+", default=None)
    ap.add_argument("--json", default=None, help="write results here")
    args = ap.parse_args()
    cfg = KornStudyConfig() if args.windows is None else KornStudyConfig(tuple(args.windows))
    rows = run(cfg)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
