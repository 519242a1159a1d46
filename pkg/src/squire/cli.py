"""Command-line entry point: prepare, mine, train, predict, eval.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from collections import Counter
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import torch

from .evaluate import compute_metrics, constraint_hits1, directed_queries, generate, rank_all
from .inference import rank_max, rank_self_consistency
from .kg import DataError, KnowledgeGraph, known_true, load_dataset
from .model import ModelConfig, SquireModel, export_attention
from .numeric import NumericError
from .paths import dump_pairs, load_pairs
from .rules import mine_rules, read_rules, select_golden_rules, write_rules
from .synthetic import composition_kg, subsample
from .train import TrainConfig, Trainer, TrainingSet, resume_training, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ENV = "SQUIRE_DATA"
MODEL_KEYS = ("layers", "d", "ff_dim", "heads", "dropout", "init_std")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        raise UsageError(f"{self.prog}: {message}")


def _data_dir(args) -> Path:
    d = args.data or os.environ.get(DATA_ENV)
    if not d:
        raise UsageError("--data is required (or set SQUIRE_DATA)")
    return Path(d)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---- prepare ---------------------------------------------------------------


def cmd_prepare(args) -> int:
    splits = composition_kg(
        args.entities, args.r1_degree, args.r2_degree, args.test_frac, args.valid_frac, args.noise, args.seed
    )
    if args.subsample < 1.0:
        splits = subsample(splits, args.subsample, args.seed)
    out = Path(args.out)
    splits.write(out)
    params = {k: v for k, v in vars(args).items() if not callable(v)}
    _write_json(out / "prepare.json", params | {"command": "prepare"})
    print(json.dumps({"train": len(splits.train), "valid": len(splits.valid), "test": len(splits.test)}))
    return EXIT_OK


# ---- mine ------------------------------------------------------------------


def cmd_mine(args) -> int:
    if args.max_body_len < 1:
        raise UsageError("--max-body-len must be >= 1")
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    graph = load_dataset(_data_dir(args))
    rules = mine_rules(graph, args.max_body_len, args.min_support, args.sample_budget, args.seed)
    kept = select_golden_rules(rules, args.threshold)
    out = Path(args.out)
    write_rules(out, kept, graph.vocab)
    bins = Counter(min(int(r.confidence * 10), 9) for r in kept)
    summary = {
        "mined": len(rules),
        "kept": len(kept),
        "threshold": args.threshold,
        "max_body_len": args.max_body_len,
        "min_support": args.min_support,
        "confidence_histogram": {f"{b / 10:.1f}-{(b + 1) / 10:.1f}": bins.get(b, 0) for b in range(10)},
    }
    _write_json(Path(str(out) + ".summary.json"), summary)
    print(json.dumps(summary))
    return EXIT_OK


# ---- train -----------------------------------------------------------------


def load_run_config(path: str | None, vocab_size: int) -> tuple[TrainConfig, ModelConfig]:
    """Split one flat JSON object into training and model settings; report every problem at once."""
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise DataError(f"{path}: expected a JSON object")
    train_keys = {f.name for f in fields(TrainConfig)}
    errors = [f"unknown key {k!r}" for k in sorted(raw) if k not in train_keys and k not in MODEL_KEYS]
    tc = TrainConfig.from_dict({k: v for k, v in raw.items() if k in train_keys})
    mc = ModelConfig(
        vocab_size=vocab_size,
        max_seq_len=2 + 2 * tc.max_hops + 1,
        seed=tc.seed,
        **{k: raw[k] for k in MODEL_KEYS if k in raw},
    )
    errors += tc.validate() + mc.validate()
    if errors:
        raise DataError("invalid config:\n  " + "\n  ".join(errors))
    return tc, mc


def _completed_round(out: Path) -> int:
    """Highest round k whose checkpoint, trainer state and pair dump are all on disk (0 if none)."""
    done = 0
    for ckpt in out.glob("checkpoint_k*.bin"):
        k = int(ckpt.stem.removeprefix("checkpoint_k"))
        if (out / f"state_k{k}.pt").exists() and (out / f"pairs_k{k}.tsv").exists():
            done = max(done, k)
    return done


def _resume_config(out: Path, data: Path, rules: str | None, vocab_size: int) -> tuple[TrainConfig, ModelConfig]:
    try:
        saved = json.loads((out / "config.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot resume from {out}: {exc}") from None
    problems = []
    if Path(saved["data"]).resolve() != data.resolve():
        problems.append(f"run used --data {saved['data']}")
    if saved.get("rules_sha256") != (_sha(Path(rules)) if rules else None):
        problems.append("rule file differs from the one the run started with")
    tc, mc = TrainConfig(**saved["train"]), ModelConfig(**saved["model"])
    if mc.vocab_size != vocab_size:
        problems.append(f"run vocabulary size {mc.vocab_size} != dataset {vocab_size}")
    if problems:
        raise DataError("cannot resume: " + "; ".join(problems))
    return tc, mc


def cmd_train(args) -> int:
    data = _data_dir(args)
    graph = load_dataset(data)
    out = Path(args.out)
    if args.resume:
        tc, mc = _resume_config(out, data, args.rules, graph.vocab.size)
    else:
        tc, mc = load_run_config(args.config, graph.vocab.size)
        if args.no_iterative:
            tc.iterative = False
        if args.seed is not None:
            tc.seed = mc.seed = args.seed
    torch.set_num_threads(max(args.threads, 1))
    rules = read_rules(args.rules, graph.vocab) if args.rules else []
    golden = select_golden_rules(rules, tc.rule_threshold)
    out.mkdir(parents=True, exist_ok=True)
    done = _completed_round(out) if args.resume else 0
    if done == 0:
        graph.vocab.dump(out / "vocab.txt")
        run_cfg = {"data": str(data), "rules": args.rules, "train": asdict(tc), "model": asdict(mc)}
        if args.rules:
            run_cfg["rules_sha256"] = _sha(Path(args.rules))
        _write_json(out / "config.json", run_cfg)

    def on_record(rec: dict) -> None:
        log.write(json.dumps(rec) + "\n")
        log.flush()

    def on_iteration(k: int, dataset: TrainingSet, trainer: Trainer) -> None:
        model.save(out / f"checkpoint_k{k}.bin")
        dump_pairs(out / f"pairs_k{k}.tsv", dataset.pairs, graph.vocab)
        torch.save({"trainer": trainer.state_dict(), "initial_size": dataset.initial_size}, out / f"state_k{k}.pt")

    valid_fn = None
    if graph.valid and tc.valid_every_epochs:
        valid_fn = lambda m: _valid_mrr(m, graph, tc)  # noqa: E731

    if done:
        model = _load_model(str(out / f"checkpoint_k{done}.bin"), graph)
        state = torch.load(out / f"state_k{done}.pt", weights_only=False)
        dataset = TrainingSet(load_pairs(out / f"pairs_k{done}.tsv", graph.vocab), state["initial_size"])
        step = state["trainer"]["step"]
        # drop log records written after the checkpoint by an interrupted round
        kept = [line for line in _read_lines(out / "log.jsonl") if json.loads(line)["step"] <= step]
        (out / "log.jsonl").write_text("".join(line + "\n" for line in kept), encoding="utf-8")
        log = open(out / "log.jsonl", "a", encoding="utf-8")
        try:
            resume_training(model, graph, golden, tc, done, dataset, state["trainer"], valid_fn, on_iteration, on_record)
        finally:
            log.close()
    else:
        log = open(out / "log.jsonl", "w", encoding="utf-8")
        model = SquireModel(mc)
        try:
            run_training(model, graph, golden, tc, valid_fn, on_iteration, on_record)
        finally:
            log.close()
    final = out / f"checkpoint_k{_completed_round(out)}.bin"
    print(json.dumps({"checkpoint": str(final), "sha256": _sha(final)}))
    return EXIT_OK


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        return []
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _valid_mrr(model: SquireModel, graph: KnowledgeGraph, tc: TrainConfig) -> float:
    queries = directed_queries(graph, graph.valid)
    hyps = generate(model, graph, queries, tc.valid_beam, tc.max_hops)
    return compute_metrics(rank_all(hyps, queries, known_true(graph), graph.vocab.n_entities)).mrr


# ---- shared by predict / eval ---------------------------------------------


def _load_model(path: str, graph: KnowledgeGraph) -> SquireModel:
    try:
        model = SquireModel.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if model.config.vocab_size != graph.vocab.size:
        raise DataError(
            f"checkpoint vocabulary size {model.config.vocab_size} does not match dataset ({graph.vocab.size})"
        )
    vocab_file = Path(path).parent / "vocab.txt"
    if vocab_file.exists() and vocab_file.read_text(encoding="utf-8").split("\n")[:-1] != graph.vocab.tokens():
        raise DataError(f"{vocab_file}: token order differs from the dataset")
    model.eval()
    return model


def _max_hops(model: SquireModel) -> int:
    return (model.config.max_seq_len - 3) // 2


def _path_str(graph: KnowledgeGraph, tokens: Sequence[int]) -> str:
    return " ".join(graph.vocab.token_of(t) for t in tokens)


# ---- predict ---------------------------------------------------------------


def _read_queries(args, graph: KnowledgeGraph) -> list[tuple[int, int]]:
    rows = []
    if args.query:
        rows.append(args.query)
    if args.queries:
        for lineno, line in enumerate(Path(args.queries).read_text(encoding="utf-8").splitlines(), 1):
            if line.strip():
                parts = line.split("\t")
                if len(parts) < 2:
                    raise DataError(f"{args.queries}: line {lineno}: expected head<TAB>relation")
                rows.append(parts[:2])
    if not rows:
        raise UsageError("give --query HEAD REL or --queries FILE")
    out = []
    for h, r in rows:
        try:
            out.append((graph.vocab.entity_id(h), graph.vocab.relation_token_id(r)))
        except KeyError as exc:
            raise DataError(f"unknown name {exc}") from None
    return out


def cmd_predict(args) -> int:
    graph = load_dataset(_data_dir(args))
    model = _load_model(args.checkpoint, graph)
    torch.set_num_threads(max(args.threads, 1))
    queries = _read_queries(args, graph)
    hyps = generate(model, graph, [(h, r, -1) for h, r in queries], args.beam, _max_hops(model), args.threads)
    ranker = rank_self_consistency if args.self_consistency else rank_max
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for (h, r), hs in zip(queries, hyps):
            ranking = ranker(hs)
            answers = [
                {
                    "entity": graph.vocab.token_of(e),
                    "score": ranking.scores[e],
                    "path": [graph.vocab.token_of(x) for x in ranking.best_path[e].tokens],
                }
                for e in ranking.order[: args.top]
            ]
            rec = {"head": graph.vocab.token_of(h), "relation": graph.vocab.token_of(r), "ranked": answers}
            if args.attention and answers:
                prefix = ranking.best_path[ranking.order[0]].tokens[:-1]
                rec["attention"] = export_attention(model, (h, r), prefix).tolist()
            out.write(json.dumps(rec) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# ---- eval ------------------------------------------------------------------


def parse_constraints(spec: str, graph: KnowledgeGraph) -> dict[str, frozenset]:
    """``name=FILE,name=FILE`` -> directed edge sets; triples naming unknown entities are skipped."""
    vocab = graph.vocab
    out = {}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"bad --constraints item {item!r}; expected name=FILE")
        edges = set()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 fields")
            try:
                h, t = vocab.entity_id(parts[0]), vocab.entity_id(parts[2])
                rel = vocab.relation_token_id(parts[1])
            except KeyError:
                continue
            edges.add((h, rel, t))
            edges.add((t, vocab.inverse_token(rel), h))
        out[name] = frozenset(edges)
    return out


def cmd_eval(args) -> int:
    graph = load_dataset(_data_dir(args))
    model = _load_model(args.checkpoint, graph)
    torch.set_num_threads(max(args.threads, 1))
    split = {"test": graph.test, "valid": graph.valid}[args.split]
    if not split:
        raise DataError(f"the {args.split} split is empty")
    queries = directed_queries(graph, split)
    known = known_true(graph)
    n = graph.vocab.n_entities
    hyps = generate(model, graph, queries, args.beam, _max_hops(model), args.threads)
    ranks = rank_all(hyps, queries, known, n, args.self_consistency)
    report = compute_metrics(ranks)
    if args.constraints:
        edge_sets = parse_constraints(args.constraints, graph)
        report.constraints = constraint_hits1(hyps, queries, edge_sets, known, n, args.self_consistency)
    result = report.to_dict() | {
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": _sha(Path(args.checkpoint)),
        "beam": args.beam,
        "self_consistency": args.self_consistency,
    }
    if args.per_query:
        ranker = rank_self_consistency if args.self_consistency else rank_max
        lines = ["head\trelation\tgold\trank\ttop_path\n"]
        for (h, r, t), hs, rank in zip(queries, hyps, ranks):
            ranking = ranker(hs)
            top = ranking.best_path[ranking.order[0]].tokens if ranking.scores else ()
            v = graph.vocab
            lines.append(f"{v.token_of(h)}\t{v.token_of(r)}\t{v.token_of(t)}\t{rank}\t{_path_str(graph, top)}\n")
        Path(args.per_query).write_text("".join(lines), encoding="utf-8")
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# ---- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="squire", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="write a synthetic composition dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--entities", type=int, default=200)
    s.add_argument("--r1-degree", type=int, default=2)
    s.add_argument("--r2-degree", type=int, default=1)
    s.add_argument("--test-frac", type=float, default=0.3)
    s.add_argument("--valid-frac", type=float, default=0.0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--subsample", type=float, default=1.0, help="keep this fraction of train triples")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("mine", help="mine chain rules from the train split")
    s.add_argument("--data")
    s.add_argument("--max-body-len", type=int, default=3)
    s.add_argument("--min-support", type=int, default=1)
    s.add_argument("--threshold", type=float, default=0.0)
    s.add_argument("--sample-budget", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("train", help="train a model, optionally with iterative aggregation")
    s.add_argument("--data")
    s.add_argument("--rules")
    s.add_argument("--config", help="JSON object with training and model settings")
    s.add_argument("--no-iterative", action="store_true")
    s.add_argument("--resume", action="store_true", help="continue the run in --out from its last finished round")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="answer (head, relation) queries with paths")
    s.add_argument("--data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query", nargs=2, metavar=("HEAD", "REL"))
    s.add_argument("--queries", help="TSV of head<TAB>relation")
    s.add_argument("--beam", type=int, default=32)
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--self-consistency", action="store_true")
    s.add_argument("--attention", action="store_true", help="include attention weights of the top path")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="filtered MRR / Hits@N and constraint analysis")
    s.add_argument("--data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--beam", type=int, default=256)
    s.add_argument("--split", choices=("test", "valid"), default="test")
    s.add_argument("--self-consistency", action="store_true")
    s.add_argument("--constraints", help="name=FILE[,name=FILE...] triple files")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--per-query", help="write a per-query TSV here")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "beam", 1) < 1:
            raise UsageError("--beam must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
