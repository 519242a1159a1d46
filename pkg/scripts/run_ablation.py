"""Rules/iteration ablation on the composition graph with noisy r edges.

    python scripts/run_ablation.py --noise 0.2 --seeds 0 1 2

Variants: full (rules + iteration), no iteration, neither. Reports MRR per seed
and the median per-seed gaps full - no_iteration and no_iteration - no_rules.
"""

from __future__ import annotations

import argparse
import json

from _common import add_experiment_flags, experiment_from
from squire.experiments import run_ablation


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_experiment_flags(p)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    exp = experiment_from(args, args.noise)
    print(json.dumps({"config": exp.to_dict(), "result": run_ablation(exp, args.seeds)}, indent=2))


if __name__ == "__main__":
    main()
