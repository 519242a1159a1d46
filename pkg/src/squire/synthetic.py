"""Synthetic knowledge graphs where one relation is an exact composition of two others."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import KnowledgeGraph, Triple, Vocabulary, build_graph, write_triples

NameTriple = tuple[str, str, str]


@dataclass
class SyntheticSplits:
    train: list[NameTriple]
    valid: list[NameTriple]
    test: list[NameTriple]

    def to_graph(self) -> KnowledgeGraph:
        return graph_from_names(self.train, self.valid, self.test)

    def write(self, data_dir: str | Path) -> None:
        data_dir = Path(data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        write_triples(data_dir / "train.txt", self.train)
        write_triples(data_dir / "valid.txt", self.valid)
        write_triples(data_dir / "test.txt", self.test)


def graph_from_names(train, valid=(), test=()) -> KnowledgeGraph:
    vocab = Vocabulary()

    def ids(rows):
        return [Triple(vocab.add_entity(h), vocab.add_relation(r), vocab.add_entity(t)) for h, r, t in rows]

    tr, va, te = ids(train), ids(valid), ids(test)
    return build_graph(tr, va, te, vocab)


def composition_kg(
    n_entities: int = 200,
    r1_degree: int = 2,
    r2_degree: int = 1,
    test_frac: float = 0.3,
    valid_frac: float = 0.0,
    noise_frac: float = 0.0,
    seed: int = 0,
) -> SyntheticSplits:
    """Random ``r1`` and ``r2`` edges plus ``r = r1 . r2`` (all compositions).

    ``test_frac`` (and ``valid_frac``) of the ``r`` edges are held out. With
    ``noise_frac`` > 0, that many random ``r`` edges (relative to the train ``r``
    count) that do not follow the composition are added to train.
    """
    rng = np.random.default_rng(seed)
    names = [f"e{i}" for i in range(n_entities)]
    r1 = set()
    r2 = set()
    for h in range(n_entities):
        for t in rng.choice(n_entities - 1, size=r1_degree, replace=False):
            r1.add((h, int(t) + (t >= h)))
        for t in rng.choice(n_entities - 1, size=r2_degree, replace=False):
            r2.add((h, int(t) + (t >= h)))
    r2_out: dict[int, list[int]] = {}
    for a, b in sorted(r2):
        r2_out.setdefault(a, []).append(b)
    comp = sorted({(h, t) for h, m in r1 for t in r2_out.get(m, ())})
    order = rng.permutation(len(comp))
    n_test = int(round(test_frac * len(comp)))
    n_valid = int(round(valid_frac * len(comp)))
    test_idx = set(order[:n_test].tolist())
    valid_idx = set(order[n_test : n_test + n_valid].tolist())

    def row(h, rel, t):
        return names[h], rel, names[t]

    train = [row(h, "r1", t) for h, t in sorted(r1)] + [row(h, "r2", t) for h, t in sorted(r2)]
    test, valid = [], []
    train_r = []
    for i, (h, t) in enumerate(comp):
        if i in test_idx:
            test.append(row(h, "r", t))
        elif i in valid_idx:
            valid.append(row(h, "r", t))
        else:
            train_r.append((h, t))
    train += [row(h, "r", t) for h, t in train_r]
    if noise_frac > 0:
        comp_set = set(comp)
        n_noise = int(round(noise_frac * len(train_r)))
        noise = set()
        while len(noise) < n_noise:
            h, t = (int(x) for x in rng.integers(n_entities, size=2))
            if h != t and (h, t) not in comp_set:
                noise.add((h, t))
        train += [row(h, "r", t) for h, t in sorted(noise)]
    return SyntheticSplits(train, valid, test)


def subsample(splits: SyntheticSplits, frac: float, seed: int = 0) -> SyntheticSplits:
    """Keep ``frac`` of the train triples (valid/test unchanged)."""
    rng = np.random.default_rng(seed)
    keep = rng.random(len(splits.train)) < frac
    return SyntheticSplits([t for t, k in zip(splits.train, keep) if k], list(splits.valid), list(splits.test))
