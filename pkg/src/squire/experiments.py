"""Desk-scale experiments on synthetic composition graphs.

Shared by ``scripts/`` and the acceptance tests: the composition task, the
rules/iteration ablation under label noise, and the edge-constraint study on a
subsampled graph.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import torch

from .evaluate import compute_metrics, constraint_hits1, generate, rank_all
from .inference import Hypothesis, path_edges
from .kg import KnowledgeGraph, known_true
from .model import ModelConfig, SquireModel
from .rules import ChainRule, mine_rules, select_golden_rules
from .synthetic import SyntheticSplits, composition_kg, graph_from_names, subsample
from .train import TrainConfig, run_training


@dataclass
class DataSetup:
    entities: int = 200
    r1_degree: int = 1
    r2_degree: int = 4
    test_frac: float = 0.3
    noise: float = 0.0
    seed: int = 0

    def splits(self) -> SyntheticSplits:
        return composition_kg(
            self.entities, self.r1_degree, self.r2_degree, self.test_frac, noise_frac=self.noise, seed=self.seed
        )


def desk_train_config(**overrides) -> TrainConfig:
    """Hyperparameters that fit the 200-entity task in a few CPU minutes."""
    base = dict(
        lr=3e-3,
        epsilon=0.75,
        mask_prob=0.0,
        warmup_ratio=0.1,
        epochs=40,
        pairs_per_triple=3,
        batch_size=64,
        lr_schedule="round",
        log_every=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class Experiment:
    data: DataSetup = field(default_factory=DataSetup)
    train: TrainConfig = field(default_factory=desk_train_config)
    layers: int = 1
    d: int = 128
    ff_dim: int = 512
    heads: int = 4
    dropout: float = 0.0
    use_rules: bool = True
    max_body_len: int = 3
    min_support: int = 2
    beam: int = 32

    def with_seed(self, seed: int) -> "Experiment":
        """Same experiment on a fresh graph and a fresh initialisation."""
        return replace(self, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return asdict(self)


def golden_rules_for(graph: KnowledgeGraph, exp: Experiment) -> list[ChainRule]:
    if not exp.use_rules:
        return []
    rules = mine_rules(graph, exp.max_body_len, min_support=exp.min_support)
    return select_golden_rules(rules, exp.train.rule_threshold)


def train_model(graph: KnowledgeGraph, exp: Experiment) -> tuple[SquireModel, dict]:
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    golden = golden_rules_for(graph, exp)
    mc = ModelConfig(
        vocab_size=graph.vocab.size,
        layers=exp.layers,
        d=exp.d,
        ff_dim=exp.ff_dim,
        heads=exp.heads,
        dropout=exp.dropout,
        seed=exp.train.seed,
    )
    model = SquireModel(mc)
    run_training(model, graph, golden, exp.train)
    return model, {"golden_rules": len(golden), "train_seconds": time.perf_counter() - t0}


def forward_test_queries(graph: KnowledgeGraph) -> list[tuple[int, int, int]]:
    return [graph.directed(t)[0] for t in graph.test]


def best_path_to(hyps: Sequence[Hypothesis], entity: int) -> Hypothesis | None:
    cands = [h for h in hyps if h.entity == entity]
    return max(cands, key=lambda h: h.score) if cands else None


def composition_share(graph: KnowledgeGraph, queries, hyps, ranks) -> float:
    """Among Hits@1 answers, the share whose best path has relations (r1, r2)."""
    body = (graph.vocab.relation_token_id("r1"), graph.vocab.relation_token_id("r2"))
    hits = used = 0
    for (_, _, t), hs, rank in zip(queries, hyps, ranks):
        if rank != 1:
            continue
        hits += 1
        best = best_path_to(hs, t)
        if best is not None and tuple(best.tokens[0:-1:2]) == body:
            used += 1
    return used / hits if hits else 0.0


def run_composition(exp: Experiment) -> dict:
    """Train with the configured pipeline and score held-out forward ``r`` queries."""
    t0 = time.perf_counter()
    graph = exp.data.splits().to_graph()
    model, info = train_model(graph, exp)
    queries = forward_test_queries(graph)
    hyps = generate(model, graph, queries, exp.beam, exp.train.max_hops)
    ranks = rank_all(hyps, queries, known_true(graph), graph.vocab.n_entities)
    report = compute_metrics(ranks).to_dict()
    report["composition_share"] = composition_share(graph, queries, hyps, ranks)
    report.update(info)
    report["total_seconds"] = time.perf_counter() - t0
    return report


ABLATION_VARIANTS = {
    "full": {"use_rules": True, "iterative": True},
    "no_iteration": {"use_rules": True, "iterative": False},
    "no_iteration_no_rules": {"use_rules": False, "iterative": False},
}


def run_ablation(exp: Experiment, seeds: Sequence[int]) -> dict:
    """MRR of each variant per seed, plus the per-seed gaps and their medians."""
    mrr: dict[str, list[float]] = {name: [] for name in ABLATION_VARIANTS}
    for seed in seeds:
        base = exp.with_seed(seed)
        for name, v in ABLATION_VARIANTS.items():
            e = replace(base, use_rules=v["use_rules"], train=replace(base.train, iterative=v["iterative"]))
            mrr[name].append(run_composition(e)["mrr"])
    gaps = {
        "full_minus_no_iteration": [a - b for a, b in zip(mrr["full"], mrr["no_iteration"])],
        "no_iteration_minus_no_rules": [
            a - b for a, b in zip(mrr["no_iteration"], mrr["no_iteration_no_rules"])
        ],
    }
    return {
        "seeds": list(seeds),
        "mrr": mrr,
        "gaps": gaps,
        "median_gaps": {k: statistics.median(v) for k, v in gaps.items()},
    }


def _edges_by_name(graph: KnowledgeGraph, rows) -> frozenset:
    """Directed edge set of named triples, in ``graph``'s ids; unknown names are skipped."""
    v = graph.vocab
    out = set()
    for h, r, t in rows:
        if not (v.has_entity(h) and v.has_entity(t) and v.has_relation(r)):
            continue
        hi, ti, ri = v.entity_id(h), v.entity_id(t), v.relation_token_id(r)
        out.add((hi, ri, ti))
        out.add((ti, v.inverse_token(ri), hi))
    return frozenset(out)


def run_constraint_study(exp: Experiment, fraction: float = 0.2) -> dict:
    """Train on a subsample; compare Hits@1 with no constraint, full-graph edges, subsample edges.

    Also counts "walk and complete" answers: Hits@1 queries whose best path to the
    gold entity uses at least one edge missing from the subsampled training graph.
    """
    full = exp.data.splits()
    sub = subsample(full, fraction, exp.data.seed)
    graph = graph_from_names(sub.train, sub.valid, sub.test)
    model, info = train_model(graph, exp)
    queries = forward_test_queries(graph)
    hyps = generate(model, graph, queries, exp.beam, exp.train.max_hops)
    known = known_true(graph)
    n = graph.vocab.n_entities
    full_edges = _edges_by_name(graph, full.train)
    sub_edges = _edges_by_name(graph, sub.train)
    hits = constraint_hits1(hyps, queries, {"full_graph": full_edges, "subsample": sub_edges}, known, n)
    ranks = rank_all(hyps, queries, known, n)
    completions = []
    for (h, r, t), hs, rank in zip(queries, hyps, ranks):
        best = best_path_to(hs, t)
        if rank != 1 or best is None:
            continue
        missing = [e for e in path_edges(h, best) if e not in sub_edges]
        if missing:
            v = graph.vocab
            completions.append(
                {
                    "query": [v.token_of(h), v.token_of(r)],
                    "answer": v.token_of(t),
                    "path": [v.token_of(x) for x in best.tokens],
                    "edges_in_full_graph": all(e in full_edges for e in missing),
                }
            )
    return {
        "hits1": hits,
        "train_triples": len(sub.train),
        "walk_and_complete": len(completions),
        "examples": completions[:5],
        **info,
    }


__all__ = [
    "ABLATION_VARIANTS",
    "DataSetup",
    "Experiment",
    "desk_train_config",
    "run_ablation",
    "run_composition",
    "run_constraint_study",
    "train_model",
]
