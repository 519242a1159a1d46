"""Beam-search path generation, entity ranking and edge-constraint filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

from .kg import Vocabulary
from .model import SquireModel

CHUNK_ROWS = 4096


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # r1, e1, ..., rn, en[, <eos>]
    sum_logprob: float
    finished: bool = True

    @property
    def score(self) -> float:
        """Mean token log-probability over the path, <eos> included."""
        return self.sum_logprob / len(self.tokens)

    @property
    def entity(self) -> int:
        return self.tokens[-2] if self.finished else self.tokens[-1]

    @property
    def hops(self) -> list[tuple[int, int]]:
        toks = self.tokens[:-1] if self.finished else self.tokens
        return list(zip(toks[0::2], toks[1::2]))


@dataclass
class RankingResult:
    scores: dict[int, float] = field(default_factory=dict)
    best_path: dict[int, Hypothesis] = field(default_factory=dict)

    @property
    def order(self) -> list[int]:
        return sorted(self.scores, key=lambda e: (-self.scores[e], e))


def grammar_masks(vocab: Vocabulary, max_hops: int) -> list[torch.Tensor]:
    """Allowed next tokens at each path position 0..2N.

    Even positions take a relation token (or <eos> once a hop is complete);
    odd positions take an entity token. Position 2N only takes <eos>.
    """
    V = vocab.size
    rel = torch.zeros(V, dtype=torch.bool)
    rel[vocab.n_entities : vocab.n_entities + 2 * vocab.n_relations] = True
    ent = torch.zeros(V, dtype=torch.bool)
    ent[: vocab.n_entities] = True
    masks = []
    for pos in range(2 * max_hops + 1):
        if pos % 2:
            masks.append(ent)
            continue
        m = rel.clone() if pos < 2 * max_hops else torch.zeros(V, dtype=torch.bool)
        if pos >= 2:
            m[vocab.eos] = True
        masks.append(m)
    return masks


def _step_logprobs(model: SquireModel, ids: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, ids.shape[0], CHUNK_ROWS):
            logits = model(ids[start : start + CHUNK_ROWS])[:, -1]
            logits = logits.masked_fill(~allowed, float("-inf"))
            outs.append(torch.log_softmax(logits, dim=-1))
    return torch.cat(outs) if outs else torch.empty(0, allowed.shape[0])


def _search(
    model: SquireModel,
    queries: Sequence[tuple[int, int]],
    beam_size: int,
    vocab: Vocabulary,
    max_hops: int,
    prefix_hops: int | None = None,
) -> list[list[Hypothesis]]:
    """Shared beam loop. With ``prefix_hops`` set, <eos> is forbidden and the
    search stops after exactly that many hops, returning unfinished prefixes."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    masks = grammar_masks(vocab, max_hops)
    eos = vocab.eos
    n_pos = 2 * max_hops + 1 if prefix_hops is None else 2 * prefix_hops
    if prefix_hops is not None:
        masks = [m.clone() for m in masks]
        for m in masks:
            m[eos] = False
    finished: list[list[Hypothesis]] = [[] for _ in queries]
    # alive rows: (query index, tokens, sum logprob)
    alive_q = list(range(len(queries)))
    alive_tok: list[tuple[int, ...]] = [() for _ in queries]
    alive_lp = torch.zeros(len(queries), dtype=torch.float64)
    for pos in range(n_pos):
        if not alive_q:
            break
        ids = torch.tensor([[*queries[q], *toks] for q, toks in zip(alive_q, alive_tok)], dtype=torch.long)
        lp = _step_logprobs(model, ids, masks[pos]).to(torch.float64)
        cand = alive_lp.unsqueeze(1) + lp
        V = cand.shape[1]
        new_q, new_tok, new_lp = [], [], []
        rows_by_query: dict[int, list[int]] = {}
        for row, q in enumerate(alive_q):
            rows_by_query.setdefault(q, []).append(row)
        for q, rows in rows_by_query.items():
            flat = cand[rows].reshape(-1)
            top = torch.sort(flat, descending=True, stable=True).indices[:beam_size]
            for idx, val in zip(top.tolist(), flat[top].tolist()):
                if val == float("-inf"):
                    break
                row, tok = rows[idx // V], idx % V
                toks = (*alive_tok[row], tok)
                if tok == eos:
                    finished[q].append(Hypothesis(toks, val, True))
                else:
                    new_q.append(q)
                    new_tok.append(toks)
                    new_lp.append(val)
        alive_q, alive_tok = new_q, new_tok
        alive_lp = torch.tensor(new_lp, dtype=torch.float64)
    if prefix_hops is not None:
        out: list[list[Hypothesis]] = [[] for _ in queries]
        for q, toks, val in zip(alive_q, alive_tok, alive_lp.tolist()):
            out[q].append(Hypothesis(toks, val, False))
        for hyps in out:
            hyps.sort(key=lambda h: (-h.sum_logprob, h.tokens))
        return out
    for hyps in finished:
        hyps.sort(key=lambda h: (-h.score, h.tokens))
        del hyps[beam_size:]
    return finished


def beam_search_batch(
    model: SquireModel, queries: Sequence[tuple[int, int]], beam_size: int, vocab: Vocabulary, max_hops: int = 3
) -> list[list[Hypothesis]]:
    return _search(model, queries, beam_size, vocab, max_hops)


def beam_search(
    model: SquireModel, query: tuple[int, int], beam_size: int, vocab: Vocabulary, max_hops: int = 3
) -> list[Hypothesis]:
    """Up to ``beam_size`` finished paths for the query, best length-normalised score first.

    Expansion is not tied to graph edges; only the relation/entity alternation is enforced.
    """
    return _search(model, [query], beam_size, vocab, max_hops)[0]


def beam_prefixes(
    model: SquireModel,
    queries: Sequence[tuple[int, int]],
    hops: int,
    beam_size: int,
    vocab: Vocabulary,
    max_hops: int = 3,
) -> list[list[Hypothesis]]:
    """Top unfinished prefixes of exactly ``hops`` hops per query."""
    if not 1 <= hops <= max_hops:
        raise ValueError("hops must lie in 1..max_hops")
    return _search(model, queries, beam_size, vocab, max_hops, prefix_hops=hops)


def rank_max(hypotheses: Iterable[Hypothesis]) -> RankingResult:
    """Entity score = best length-normalised score among paths ending there."""
    res = RankingResult()
    for hyp in hypotheses:
        e = hyp.entity
        if e not in res.scores or hyp.score > res.scores[e]:
            res.scores[e] = hyp.score
            res.best_path[e] = hyp
    return res


def rank_self_consistency(hypotheses: Iterable[Hypothesis]) -> RankingResult:
    """Entity score = summed raw sequence probability of all paths ending there."""
    res = RankingResult()
    for hyp in hypotheses:
        e = hyp.entity
        res.scores[e] = res.scores.get(e, 0.0) + math.exp(hyp.sum_logprob)
        best = res.best_path.get(e)
        if best is None or hyp.score > best.score:
            res.best_path[e] = hyp
    return res


def path_edges(head: int, hyp: Hypothesis) -> list[tuple[int, int, int]]:
    edges = []
    prev = head
    for rel, ent in hyp.hops:
        edges.append((prev, rel, ent))
        prev = ent
    return edges


def filter_by_edge_constraint(
    hypotheses: Iterable[Hypothesis], head: int, allowed_edges: set | frozenset
) -> list[Hypothesis]:
    """Keep paths whose every hop, starting from ``head``, is an allowed edge."""
    return [h for h in hypotheses if all(e in allowed_edges for e in path_edges(head, h))]
