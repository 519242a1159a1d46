"""Chain-rule mining with exact confidence counting, and rule-guided path search.

A chain rule ``head(X, Y) <- b1(X, A1), b2(A1, A2), ..., bn(An-1, Y)`` is grounded
with object identity: the intermediate entities are pairwise distinct and
differ from both X and Y. Bodies may contain inverse relation tokens.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .kg import DataError, KnowledgeGraph, Vocabulary


@dataclass(frozen=True)
class ChainRule:
    head: int  # relation token
    body: tuple[int, ...]  # relation tokens
    confidence: float
    support: int

    def sort_key(self):
        return (-self.confidence, -self.support, self.body, self.head)


def simple_paths(
    graph: KnowledgeGraph,
    start: int,
    max_hops: int,
    end: int | None = None,
    prefixes: set[tuple[int, ...]] | None = None,
) -> Iterator[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Yield ``(relations, entities)`` for simple paths out of ``start``.

    ``entities`` lists every entity after ``start``. Intermediates never repeat and
    never equal ``start`` or the final entity. With ``end`` set, only paths that
    finish there are yielded and ``end`` is never used as an intermediate.
    ``prefixes`` (relation tuples) prunes the search to those relation prefixes.
    """
    rels: list[int] = []
    ents: list[int] = []

    def rec(node: int) -> Iterator[tuple[tuple[int, ...], tuple[int, ...]]]:
        depth = len(rels)
        for rel, nxt in graph.adjacency.get(node, ()):
            if prefixes is not None and (*rels, rel) not in prefixes:
                continue
            if nxt in ents:
                continue
            if end is not None:
                if nxt == end:
                    yield (*rels, rel), (*ents, nxt)
                    continue
                if nxt == start:
                    continue
                if depth + 1 < max_hops:
                    rels.append(rel)
                    ents.append(nxt)
                    yield from rec(nxt)
                    rels.pop()
                    ents.pop()
                continue
            # open-ended: nxt may end the path; as an intermediate it must differ from start
            yield (*rels, rel), (*ents, nxt)
            if nxt != start and depth + 1 < max_hops:
                rels.append(rel)
                ents.append(nxt)
                yield from rec(nxt)
                rels.pop()
                ents.pop()

    if max_hops >= 1:
        yield from rec(start)


def body_pairs(graph: KnowledgeGraph, bodies: set[tuple[int, ...]]) -> dict[tuple[int, ...], set[tuple[int, int]]]:
    """All (x, y) connected by a grounding of each body, in one pass over the graph."""
    if not bodies:
        return {}
    max_len = max(len(b) for b in bodies)
    prefixes = {b[:i] for b in bodies for i in range(1, len(b) + 1)}
    out: dict[tuple[int, ...], set[tuple[int, int]]] = defaultdict(set)
    for x in sorted(graph.adjacency):
        for rels, ents in simple_paths(graph, x, max_len, prefixes=prefixes):
            if rels in bodies:
                out[rels].add((x, ents[-1]))
    return out


def mine_rules(
    graph: KnowledgeGraph,
    max_body_len: int,
    min_support: int = 1,
    sample_budget: int | None = None,
    rng_seed: int = 0,
) -> list[ChainRule]:
    """Abstract alternative h->t paths of sampled train triples into rule bodies and score them.

    Triples are used in both directions, so rules exist for inverse heads as well.
    Confidence is exact: over all (x, y) joined by a grounding of the body, the
    fraction for which (x, head, y) is a train fact. Support is that numerator.
    """
    if max_body_len < 1:
        raise ValueError("max_body_len must be >= 1")
    train = graph.train
    if sample_budget is None or sample_budget >= len(train):
        sampled = train
    else:
        rng = np.random.default_rng(rng_seed)
        idx = np.sort(rng.choice(len(train), size=sample_budget, replace=False))
        sampled = [train[i] for i in idx]

    candidates: set[tuple[int, tuple[int, ...]]] = set()
    for tr in sampled:
        for h, head, t in graph.directed(tr):
            for rels, _ in simple_paths(graph, h, max_body_len, end=t):
                if rels != (head,):
                    candidates.add((head, rels))

    pairs = body_pairs(graph, {body for _, body in candidates})
    facts = graph.train_facts
    rules = []
    for head, body in candidates:
        grounded = pairs.get(body, set())
        if not grounded:
            continue
        support = sum(1 for x, y in grounded if (x, head, y) in facts)
        if support < min_support:
            continue
        rules.append(ChainRule(head, body, support / len(grounded), support))
    rules.sort(key=ChainRule.sort_key)
    return rules


def select_golden_rules(rules: Sequence[ChainRule], threshold: float) -> list[ChainRule]:
    return [r for r in rules if r.confidence > threshold]


def rules_by_head(rules: Sequence[ChainRule]) -> dict[int, list[ChainRule]]:
    out: dict[int, list[ChainRule]] = defaultdict(list)
    for r in rules:
        out[r.head].append(r)
    return dict(out)


def rule_instantiations(
    graph: KnowledgeGraph, h: int, t: int, rule: ChainRule, mask_literal: bool = True
) -> list[tuple[int, ...]]:
    """Every grounding of ``rule.body`` from h to t as (r1, e1, ..., rn, t).

    With ``mask_literal`` the fact (h, rule.head, t) being explained is not usable
    as a hop in either direction.
    """
    body = rule.body
    masked = set()
    if mask_literal:
        masked = {(h, rule.head, t), (t, graph.vocab.inverse_token(rule.head), h)}
    found = []
    ents: list[int] = []

    def rec(node: int, depth: int) -> None:
        rel = body[depth]
        last = depth == len(body) - 1
        for nxt in sorted(graph.neighbors(node, rel)):
            if (node, rel, nxt) in masked:
                continue
            if last:
                if nxt == t:
                    found.append(tuple(x for pair in zip(body, (*ents, t)) for x in pair))
                continue
            if nxt in (h, t) or nxt in ents:
                continue
            ents.append(nxt)
            rec(nxt, depth + 1)
            ents.pop()

    rec(h, 0)
    return found


def rule_guided_path(
    graph: KnowledgeGraph,
    h: int,
    t: int,
    rule: ChainRule,
    rng: np.random.Generator,
    mask_literal: bool = True,
) -> tuple[int, ...] | None:
    """One grounding of the rule from h to t, uniformly at random; None if there is none."""
    paths = rule_instantiations(graph, h, t, rule, mask_literal)
    if not paths:
        return None
    return paths[int(rng.integers(len(paths)))]


def write_rules(path: str | Path, rules: Sequence[ChainRule], vocab: Vocabulary) -> None:
    lines = []
    for r in rules:
        body = ",".join(vocab.token_of(b) for b in r.body)
        lines.append(f"{vocab.token_of(r.head)}\t{body}\t{r.confidence!r}\t{r.support}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_rules(path: str | Path, vocab: Vocabulary) -> list[ChainRule]:
    rules = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(fields)}")
            head, body, conf, support = fields
            try:
                rules.append(
                    ChainRule(
                        vocab.relation_token_id(head),
                        tuple(vocab.relation_token_id(b) for b in body.split(",")),
                        float(conf),
                        int(support),
                    )
                )
            except KeyError as exc:
                raise DataError(f"{path}: line {lineno}: unknown relation {exc}") from None
    return rules
