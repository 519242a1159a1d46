"""Edge-constraint study: train on a subsample, filter generated paths by edge sets.

    python scripts/run_constraints.py --fraction 0.2

Hits@1 is reported with no constraint, with the full graph's train edges, and with
the subsample's own edges; "walk_and_complete" counts correct answers whose path
uses an edge the model never saw.
"""

from __future__ import annotations

import argparse
import json

from _common import add_experiment_flags, experiment_from
from squire.experiments import run_constraint_study


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_experiment_flags(p)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    exp = experiment_from(args, seed=args.seed)
    print(json.dumps({"config": exp.to_dict(), "result": run_constraint_study(exp, args.fraction)}, indent=2))


if __name__ == "__main__":
    main()
