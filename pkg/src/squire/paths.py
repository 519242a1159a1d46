"""Query-path training pairs: rule-guided, randomly sampled, or the single-hop fallback."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kg import KnowledgeGraph, Triple
from .rules import ChainRule, rule_guided_path, simple_paths

ENUMERATION_CAP = 10_000
WALK_ATTEMPTS = 32
PROVENANCES = ("rule", "random", "fallback", "aggregated")


@dataclass(frozen=True)
class QueryPathPair:
    head: int
    relation: int  # relation token
    path: tuple[int, ...]  # r1, e1, ..., rn, en, <eos>
    provenance: str

    @property
    def query(self) -> tuple[int, int]:
        return self.head, self.relation

    @property
    def hops(self) -> int:
        return (len(self.path) - 1) // 2


def _enumerate_paths(graph, h, t, max_hops, exclude, cap, avoid):
    out = []
    for rels, ents in simple_paths(graph, h, max_hops, end=t):
        if exclude is not None and len(rels) == 1 and rels[0] == exclude:
            continue
        if avoid and not avoid.isdisjoint(ents[:-1]):
            continue
        out.append(tuple(x for pair in zip(rels, ents) for x in pair))
        if len(out) > cap:
            return None
    return out


def _walk(graph, h, t, max_hops, exclude, rng, avoid):
    rels, ents = [], []
    node = h
    for depth in range(max_hops):
        options = [
            (rel, nxt)
            for rel, nxt in graph.adjacency.get(node, ())
            if nxt not in ents
            and (nxt == t or (nxt != h and nxt not in avoid and depth + 1 < max_hops))
            and not (depth == 0 and nxt == t and rel == exclude)
        ]
        if not options:
            return None
        rel, nxt = options[int(rng.integers(len(options)))]
        rels.append(rel)
        ents.append(nxt)
        if nxt == t:
            return tuple(x for pair in zip(rels, ents) for x in pair)
        node = nxt
    return None


def random_path(
    graph: KnowledgeGraph,
    h: int,
    t: int,
    max_hops: int,
    rng: np.random.Generator,
    exclude_relation: int | None = None,
    enumeration_cap: int = ENUMERATION_CAP,
    walk_attempts: int = WALK_ATTEMPTS,
    avoid: frozenset[int] = frozenset(),
) -> tuple[int, ...] | None:
    """A path of at most ``max_hops`` hops from h to t, ending in <eos>.

    Uniform over all simple paths when there are at most ``enumeration_cap`` of
    them; otherwise the first of ``walk_attempts`` random walks that reaches t.
    ``exclude_relation`` drops the direct one-hop edge (h, exclude_relation, t).
    ``avoid`` lists entities that may not appear as intermediates, so a path
    appended to an existing prefix keeps the whole path simple.
    """
    if max_hops < 1:
        raise ValueError("max_hops must be >= 1")
    eos = graph.vocab.eos
    paths = _enumerate_paths(graph, h, t, max_hops, exclude_relation, enumeration_cap, avoid)
    if paths is not None:
        if not paths:
            return None
        return (*paths[int(rng.integers(len(paths)))], eos)
    for _ in range(walk_attempts):
        p = _walk(graph, h, t, max_hops, exclude_relation, rng, avoid)
        if p is not None:
            return (*p, eos)
    return None


def make_training_pairs(
    graph: KnowledgeGraph,
    fact: tuple[int, int, int],
    golden_rules: Sequence[ChainRule],
    pairs_per_triple: int,
    rng: np.random.Generator,
    max_hops: int = 3,
) -> list[QueryPathPair]:
    """Exactly ``pairs_per_triple`` pairs for one directed fact (h, rel-token, t).

    Golden rules for the relation are tried in the given (confidence) order, one
    slot each; remaining slots get random paths over all paths from h to t; any
    slot still empty gets the direct edge (r, t, <eos>). A random draw that lands
    on the direct edge is labelled ``fallback`` since it carries the same target.
    """
    if pairs_per_triple < 1:
        raise ValueError("pairs_per_triple must be >= 1")
    h, rel, t = fact
    eos = graph.vocab.eos
    out: list[QueryPathPair] = []
    for rule in golden_rules:
        if len(out) == pairs_per_triple:
            break
        if rule.head != rel or len(rule.body) > max_hops:
            continue
        p = rule_guided_path(graph, h, t, rule, rng)
        if p is not None:
            out.append(QueryPathPair(h, rel, (*p, eos), "rule"))
    while len(out) < pairs_per_triple:
        p = random_path(graph, h, t, max_hops, rng)
        if p is None:
            break
        out.append(QueryPathPair(h, rel, p, "fallback" if p == (rel, t, eos) else "random"))
    while len(out) < pairs_per_triple:
        out.append(QueryPathPair(h, rel, (rel, t, eos), "fallback"))
    return out


def pairs_for_triples(
    graph: KnowledgeGraph,
    triples: Iterable[Triple],
    golden_rules: Sequence[ChainRule],
    pairs_per_triple: int,
    seed: int,
    max_hops: int = 3,
) -> list[QueryPathPair]:
    """Pairs for every triple in both directions; each triple draws from its own rng stream."""
    by_head: dict[int, list[ChainRule]] = {}
    for r in golden_rules:
        by_head.setdefault(r.head, []).append(r)
    out = []
    for i, tr in enumerate(triples):
        rng = np.random.default_rng([seed, i])
        for fact in graph.directed(tr):
            out.extend(
                make_training_pairs(graph, fact, by_head.get(fact[1], ()), pairs_per_triple, rng, max_hops)
            )
    return out


def entity_positions(path: Sequence[int]) -> range:
    """Indices of entity tokens in a path (odd positions before <eos>)."""
    return range(1, len(path) - 1, 2)


def mask_entities(
    pair: QueryPathPair, p: float, rng: np.random.Generator, mask_token: int
) -> tuple[tuple[int, ...], tuple[bool, ...]]:
    """Replace each path entity by <mask> with probability p; flag those positions."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("mask probability must lie in [0, 1]")
    tokens = list(pair.path)
    excluded = [False] * len(tokens)
    idx = entity_positions(tokens)
    draws = rng.random(len(idx))
    for pos, u in zip(idx, draws):
        if u < p:
            tokens[pos] = mask_token
            excluded[pos] = True
    return tuple(tokens), tuple(excluded)


def dump_pairs(path: str | Path, pairs: Iterable[QueryPathPair], vocab) -> None:
    lines = []
    for pr in pairs:
        toks = ",".join(vocab.token_of(x) for x in pr.path)
        lines.append(f"{vocab.token_of(pr.head)}\t{vocab.token_of(pr.relation)}\t{toks}\t{pr.provenance}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_pairs(path: str | Path, vocab) -> list[QueryPathPair]:
    names = {tok: i for i, tok in enumerate(vocab.tokens())}
    # entity and relation names may coincide; resolve by position parity
    ent = {n: i for i, n in enumerate(vocab.entities)}
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                continue
            h, r, toks, prov = line.split("\t")
            items = toks.split(",")
            path_ids = []
            for j, tok in enumerate(items):
                if j == len(items) - 1:
                    path_ids.append(vocab.eos)
                elif j % 2 == 0:
                    path_ids.append(vocab.relation_token_id(tok))
                else:
                    path_ids.append(ent[tok] if tok in ent else names[tok])
            out.append(QueryPathPair(ent[h], vocab.relation_token_id(r), tuple(path_ids), prov))
    return out
