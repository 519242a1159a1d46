"""Filtered link-prediction metrics and the edge-constraint analysis."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .inference import (
    Hypothesis,
    RankingResult,
    beam_search_batch,
    filter_by_edge_constraint,
    rank_max,
    rank_self_consistency,
)
from .kg import KnowledgeGraph, Triple, known_true
from .model import SquireModel

HITS_AT = (1, 3, 10)


@dataclass
class EvalReport:
    mrr: float
    hits: dict[int, float]
    ranks: list[int]
    constraints: dict[str, float] | None = None

    def to_dict(self) -> dict:
        out = {
            "mrr": self.mrr,
            "hits1": self.hits[1],
            "hits3": self.hits[3],
            "hits10": self.hits[10],
            "n_queries": len(self.ranks),
        }
        if self.constraints is not None:
            out["constraints"] = dict(self.constraints)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def filtered_rank(
    ranking: RankingResult,
    query: tuple[int, int],
    gold: int,
    known: frozenset | set,
    n_entities: int,
) -> int:
    """Rank of ``gold`` after dropping other known-true answers.

    Competitors scoring equal to gold are placed ahead of it. A gold entity that
    no path reaches gets rank ``n_entities``.
    """
    if gold not in ranking.scores:
        return n_entities
    h, r = query
    g = ranking.scores[gold]
    better = sum(
        1 for e, s in ranking.scores.items() if e != gold and s >= g and (h, r, e) not in known
    )
    return better + 1


def compute_metrics(ranks: Sequence[int]) -> EvalReport:
    if not ranks:
        raise ValueError("compute_metrics: no ranks")
    n = len(ranks)
    mrr = sum(1.0 / r for r in ranks) / n
    hits = {k: sum(1 for r in ranks if r <= k) / n for k in HITS_AT}
    return EvalReport(mrr, hits, list(ranks))


def directed_queries(graph: KnowledgeGraph, triples: Iterable[Triple]) -> list[tuple[int, int, int]]:
    """(h, rel-token, gold) for each triple in both directions."""
    out = []
    for tr in triples:
        out.extend(graph.directed(tr))
    return out


def generate(
    model: SquireModel,
    graph: KnowledgeGraph,
    queries: Sequence[tuple[int, int, int]],
    beam_size: int,
    max_hops: int = 3,
    threads: int = 1,
    chunk: int = 256,
) -> list[list[Hypothesis]]:
    """Beam-search hypotheses for every query, in query order."""
    qs = [(h, r) for h, r, _ in queries]
    chunks = [qs[i : i + chunk] for i in range(0, len(qs), chunk)]
    vocab = graph.vocab
    if threads <= 1:
        parts = [beam_search_batch(model, c, beam_size, vocab, max_hops) for c in chunks]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: beam_search_batch(model, c, beam_size, vocab, max_hops), chunks))
    return [hyps for part in parts for hyps in part]


def rank_all(
    hypotheses: Sequence[Sequence[Hypothesis]],
    queries: Sequence[tuple[int, int, int]],
    known: frozenset,
    n_entities: int,
    self_consistency: bool = False,
) -> list[int]:
    ranker: Callable = rank_self_consistency if self_consistency else rank_max
    return [
        filtered_rank(ranker(hyps), (h, r), t, known, n_entities)
        for hyps, (h, r, t) in zip(hypotheses, queries)
    ]


def constraint_hits1(
    hypotheses: Sequence[Sequence[Hypothesis]],
    queries: Sequence[tuple[int, int, int]],
    edge_sets: Mapping[str, frozenset | set],
    known: frozenset,
    n_entities: int,
    self_consistency: bool = False,
) -> dict[str, float]:
    """Hits@1 when only paths made of edges from each named set are kept.

    The ``unconstrained`` entry uses every generated path.
    """
    out = {"unconstrained": _hits1(rank_all(hypotheses, queries, known, n_entities, self_consistency))}
    for name, edges in edge_sets.items():
        kept = [filter_by_edge_constraint(hyps, h, edges) for hyps, (h, _, _) in zip(hypotheses, queries)]
        out[name] = _hits1(rank_all(kept, queries, known, n_entities, self_consistency))
    return out


def _hits1(ranks: Sequence[int]) -> float:
    return sum(1 for r in ranks if r == 1) / len(ranks) if ranks else 0.0


def constraint_analysis(
    model: SquireModel,
    graph: KnowledgeGraph,
    queries: Sequence[tuple[int, int, int]],
    edge_sets: Mapping[str, frozenset | set],
    beam_size: int,
    max_hops: int = 3,
) -> dict[str, float]:
    hyps = generate(model, graph, queries, beam_size, max_hops)
    return constraint_hits1(hyps, queries, edge_sets, known_true(graph), graph.vocab.n_entities)


def evaluate(
    model: SquireModel,
    graph: KnowledgeGraph,
    triples: Iterable[Triple],
    beam_size: int,
    max_hops: int = 3,
    self_consistency: bool = False,
    edge_sets: Mapping[str, frozenset | set] | None = None,
    threads: int = 1,
) -> EvalReport:
    queries = directed_queries(graph, triples)
    known = known_true(graph)
    n = graph.vocab.n_entities
    hyps = generate(model, graph, queries, beam_size, max_hops, threads)
    report = compute_metrics(rank_all(hyps, queries, known, n, self_consistency))
    if edge_sets is not None:
        report.constraints = constraint_hits1(hyps, queries, edge_sets, known, n, self_consistency)
    return report


def closed_edges(graph: KnowledgeGraph, triples: Iterable[Triple]) -> frozenset:
    """Directed edge set (both directions) of some triples, for constraint analysis."""
    out = set()
    for tr in triples:
        out.update(graph.directed(tr))
    return frozenset(out)
