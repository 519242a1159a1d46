import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from squire.inference import (
    Hypothesis,
    beam_prefixes,
    beam_search,
    beam_search_batch,
    filter_by_edge_constraint,
    grammar_masks,
    rank_max,
    rank_self_consistency,
)
from squire.train import TrainConfig, run_training

import oracles
from conftest import fixture_graph, tiny_model

A, B, C, D, R1, R2, R, EOS = 0, 1, 2, 3, 4, 5, 6, 11


def trained_toy_model(seed=0):
    """Small float64 model fitted on the fixture graph; shared by the exactness checks."""
    g = fixture_graph()
    m = tiny_model(seed=seed)
    cfg = TrainConfig(lr=1e-2, epsilon=0.75, epochs=30, batch_size=8, pairs_per_triple=3, iterative=False, seed=seed, log_every=0)
    run_training(m, g, [], cfg)
    m.eval()
    return g, m


@pytest.fixture(scope="module")
def toy():
    return trained_toy_model()


def test_score_is_mean_logprob():
    h = Hypothesis((R, C, EOS), -0.1 - 0.2 - 0.3)
    assert h.score == pytest.approx(-0.2)


def test_hypothesis_accessors():
    h = Hypothesis((R1, B, R2, C, EOS), -1.0)
    assert h.entity == C and h.hops == [(R1, B), (R2, C)]
    p = Hypothesis((R1, B), -0.5, finished=False)
    assert p.entity == B and p.hops == [(R1, B)]


def test_grammar_masks(F):
    v = F.vocab
    masks = grammar_masks(v, 2)
    assert len(masks) == 5
    assert not masks[0][v.eos] and masks[2][v.eos] and masks[4][v.eos]
    assert masks[4].sum() == 1
    assert masks[1][:4].all() and not masks[1][4:].any()
    assert not masks[0][v.bos] and not masks[0][v.mask]


@pytest.mark.parametrize("max_hops", [1, 2])
def test_beam_matches_exhaustive_search(toy, max_hops):
    g, m = toy
    v = g.vocab
    universe = oracles.grammatical_sequences(v, max_hops)
    k = len(universe)
    for query in [(A, R), (D, R1), (C, 9)]:
        scores = oracles.exhaustive_scores(m, query, v, max_hops)
        want = sorted(scores, key=lambda s: (-scores[s] / len(s), s))[:k]
        got = beam_search(m, query, k, v, max_hops)
        assert [h.tokens for h in got] == want
        for h in got:
            assert h.sum_logprob == pytest.approx(scores[h.tokens], abs=1e-9)
        assert rank_max(got).order == rank_max(
            [Hypothesis(s, scores[s]) for s in want]
        ).order


def test_beam_size_one_is_greedy(toy):
    g, m = toy
    v = g.vocab
    masks = grammar_masks(v, 3)
    prefix = []
    while True:
        ids = torch.tensor([[A, R, *prefix]])
        with torch.no_grad():
            logits = m(ids)[0, -1].masked_fill(~masks[len(prefix)], float("-inf"))
        tok = int(logits.argmax())
        prefix.append(tok)
        if tok == v.eos:
            break
    got = beam_search(m, (A, R), 1, v, 3)
    assert len(got) == 1 and list(got[0].tokens) == prefix


def test_hypotheses_are_grammatical(toy):
    g, m = toy
    v = g.vocab
    for hyps in beam_search_batch(m, [(A, R), (B, R2), (D, 7)], 20, v, 3):
        assert 0 < len(hyps) <= 20
        for h in hyps:
            assert h.finished and h.tokens[-1] == v.eos and len(h.hops) <= 3
            assert all(v.is_relation(x) for x in h.tokens[0:-1:2])
            assert all(v.is_entity(x) for x in h.tokens[1:-1:2])
        assert [h.score for h in hyps] == sorted((h.score for h in hyps), reverse=True)


def test_batch_equals_single_queries(toy):
    g, m = toy
    qs = [(A, R), (B, R2), (D, 7)]
    batch = beam_search_batch(m, qs, 8, g.vocab, 3)
    for q, hyps in zip(qs, batch):
        single = beam_search(m, q, 8, g.vocab, 3)
        assert [h.tokens for h in hyps] == [h.tokens for h in single]


def test_beam_prefixes_exact_hops(toy):
    g, m = toy
    for hops in (1, 2):
        (pre,) = beam_prefixes(m, [(A, R)], hops, 5, g.vocab, 3)
        assert len(pre) == 5
        for h in pre:
            assert not h.finished and len(h.tokens) == 2 * hops and g.vocab.eos not in h.tokens
    with pytest.raises(ValueError):
        beam_prefixes(m, [(A, R)], 4, 5, g.vocab, 3)


def test_rank_max_order():
    hyps = [Hypothesis((R, B, EOS), -0.9 * 3), Hypothesis((R, C, EOS), -1.2 * 3), Hypothesis((R, C, EOS), -1.5 * 3)]
    res = rank_max(hyps)
    assert res.order == [B, C]
    assert res.scores[C] == pytest.approx(-1.2)


def test_rank_max_single_and_ties():
    assert rank_max([Hypothesis((R, C, EOS), -1.0)]).order == [C]
    tie = rank_max([Hypothesis((R, D, EOS), -1.0), Hypothesis((R, B, EOS), -1.0)])
    assert tie.order == [B, D]
    assert rank_max([]).order == []


def test_self_consistency_sums_probabilities():
    hyps = [
        Hypothesis((R, C, EOS), math.log(0.3)),
        Hypothesis((R1, B, R2, C, EOS), math.log(0.2)),
        Hypothesis((R, B, EOS), math.log(0.4)),
    ]
    sc = rank_self_consistency(hyps)
    assert sc.order == [C, B]
    assert sc.scores[C] == pytest.approx(0.5)
    assert rank_max(hyps).order == [B, C]


def test_self_consistency_one_path_each_orders_by_probability():
    hyps = [Hypothesis((R, B, EOS), math.log(0.1)), Hypothesis((R, C, EOS), math.log(0.6))]
    assert rank_self_consistency(hyps).order == [C, B]


def test_edge_filter_examples(F):
    path = Hypothesis((R1, B, R2, C, EOS), -1.0)
    allowed = set(F.train_facts)
    assert filter_by_edge_constraint([path], A, allowed) == [path]
    assert filter_by_edge_constraint([path], A, allowed - {(B, R2, C)}) == []
    assert filter_by_edge_constraint([path], A, set()) == []


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_edge_filter_superset_monotone(data):
    g = fixture_graph()
    facts = sorted(g.train_facts)
    small = set(data.draw(st.lists(st.sampled_from(facts), unique=True)))
    extra = set(data.draw(st.lists(st.sampled_from(facts), unique=True)))
    big = small | extra
    toks = st.tuples(st.sampled_from(range(4, 10)), st.sampled_from(range(4)))
    hyps = [
        Hypothesis((*[x for hop in hops for x in hop], EOS), -1.0)
        for hops in data.draw(st.lists(st.lists(toks, min_size=1, max_size=3), max_size=10))
    ]
    kept_small = filter_by_edge_constraint(hyps, A, small)
    kept_big = filter_by_edge_constraint(hyps, A, big)
    assert all(h in kept_big for h in kept_small)


def test_beam_size_validated(toy):
    g, m = toy
    with pytest.raises(ValueError):
        beam_search(m, (A, R), 0, g.vocab)
