"""Learn r = r1 . r2 on a random graph and score the held-out r edges.

    python scripts/run_composition.py
    python scripts/run_composition.py --no-iterative --epochs 30

Prints one JSON object: filtered MRR/Hits@N on forward test queries, the share
of Hits@1 answers whose best path is (r1, e, r2, t), and timings.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import replace

from _common import add_experiment_flags, experiment_from
from squire.experiments import run_composition


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_experiment_flags(p)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-rules", dest="rules", action="store_false")
    p.add_argument("--no-iterative", dest="iterative", action="store_false")
    args = p.parse_args()
    exp = experiment_from(args, args.noise, args.seed)
    exp = replace(exp, use_rules=args.rules, train=replace(exp.train, iterative=args.iterative))
    report = run_composition(exp)
    print(json.dumps({"config": exp.to_dict(), "report": report}, indent=2))


if __name__ == "__main__":
    main()
