"""Triple loading, token vocabulary and the train-split adjacency index."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

INVERSE_SUFFIX = "^-1"
SPECIAL_TOKENS = ("<bos>", "<eos>", "<mask>")


class Triple(NamedTuple):
    head: int  # entity id
    relation: int  # base relation index, 0..R-1
    tail: int  # entity id


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class Vocabulary:
    """Token ids: entities first, then base relations, their inverses, specials.

    Entity ``e`` is token ``e``; base relation ``r`` is token ``E + r`` and its
    inverse is ``E + R + r``. The layout is only final once :meth:`freeze` has
    been called (new names shift the relation and special ranges).
    """

    def __init__(self) -> None:
        self.entities: list[str] = []
        self.relations: list[str] = []
        self._entity_ids: dict[str, int] = {}
        self._relation_ids: dict[str, int] = {}
        self.frozen = False

    def add_entity(self, name: str) -> int:
        idx = self._entity_ids.get(name)
        if idx is None:
            if self.frozen:
                raise DataError(f"unknown entity {name!r} (vocabulary is frozen)")
            idx = self._entity_ids[name] = len(self.entities)
            self.entities.append(name)
        return idx

    def add_relation(self, name: str) -> int:
        idx = self._relation_ids.get(name)
        if idx is None:
            if self.frozen:
                raise DataError(f"unknown relation {name!r} (vocabulary is frozen)")
            idx = self._relation_ids[name] = len(self.relations)
            self.relations.append(name)
        return idx

    def freeze(self) -> None:
        clash = {n + INVERSE_SUFFIX for n in self.relations} & set(self.relations)
        if clash:
            raise DataError(f"relation names collide with inverse tokens: {sorted(clash)}")
        self.frozen = True

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def size(self) -> int:
        return self.n_entities + 2 * self.n_relations + len(SPECIAL_TOKENS)

    def entity_id(self, name: str) -> int:
        return self._entity_ids[name]

    def relation_index(self, name: str) -> int:
        return self._relation_ids[name]

    def has_entity(self, name: str) -> bool:
        return name in self._entity_ids

    def has_relation(self, name: str) -> bool:
        return name in self._relation_ids

    def rel_token(self, relation: int, inverse: bool = False) -> int:
        return self.n_entities + relation + (self.n_relations if inverse else 0)

    def inverse_token(self, token: int) -> int:
        base = self.n_entities
        R = self.n_relations
        if base <= token < base + R:
            return token + R
        if base + R <= token < base + 2 * R:
            return token - R
        raise ValueError(f"token {token} is not a relation token")

    def is_entity(self, token: int) -> bool:
        return 0 <= token < self.n_entities

    def is_relation(self, token: int) -> bool:
        return self.n_entities <= token < self.n_entities + 2 * self.n_relations

    def is_inverse(self, token: int) -> bool:
        return self.n_entities + self.n_relations <= token < self.n_entities + 2 * self.n_relations

    @property
    def relation_tokens(self) -> range:
        return range(self.n_entities, self.n_entities + 2 * self.n_relations)

    def special(self, name: str) -> int:
        return self.n_entities + 2 * self.n_relations + SPECIAL_TOKENS.index(name)

    @property
    def bos(self) -> int:
        return self.special("<bos>")

    @property
    def eos(self) -> int:
        return self.special("<eos>")

    @property
    def mask(self) -> int:
        return self.special("<mask>")

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < self.size:
            raise IndexError(f"token id {idx} out of range 0..{self.size - 1}")
        if idx < self.n_entities:
            return self.entities[idx]
        idx -= self.n_entities
        if idx < self.n_relations:
            return self.relations[idx]
        idx -= self.n_relations
        if idx < self.n_relations:
            return self.relations[idx] + INVERSE_SUFFIX
        return SPECIAL_TOKENS[idx - self.n_relations]

    def tokens(self) -> list[str]:
        return [self.token_of(i) for i in range(self.size)]

    def relation_token_id(self, name: str) -> int:
        """Relation token id for a base or ``^-1``-suffixed inverse name."""
        if name in self._relation_ids:
            return self.rel_token(self._relation_ids[name])
        if name.endswith(INVERSE_SUFFIX):
            base = name[: -len(INVERSE_SUFFIX)]
            if base in self._relation_ids:
                return self.rel_token(self._relation_ids[base], inverse=True)
        raise KeyError(name)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens()), encoding="utf-8")


def load_triples(path: str | Path, vocab: Vocabulary) -> list[Triple]:
    """Parse a head<TAB>relation<TAB>tail file, registering unseen names in ``vocab``."""
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 fields, got {len(fields)}")
            h, r, t = fields
            triples.append(Triple(vocab.add_entity(h), vocab.add_relation(r), vocab.add_entity(t)))
    return triples


@dataclass
class KnowledgeGraph:
    vocab: Vocabulary
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    # entity -> [(relation token, entity)], train edges only, both directions
    adjacency: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    _by_rel: dict[tuple[int, int], frozenset[int]] = field(default_factory=dict, repr=False)
    _by_pair: dict[tuple[int, int], tuple[int, ...]] = field(default_factory=dict, repr=False)
    train_facts: frozenset[tuple[int, int, int]] = frozenset()

    def directed(self, triple: Triple) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        """The forward and inverse facts (h, rel-token, t) induced by a triple."""
        h, r, t = triple
        return (h, self.vocab.rel_token(r), t), (t, self.vocab.rel_token(r, inverse=True), h)

    def directed_train(self) -> list[tuple[int, int, int]]:
        out = []
        for tr in self.train:
            out.extend(self.directed(tr))
        return out

    def neighbors(self, e: int, rel: int) -> frozenset[int]:
        return self._by_rel.get((e, rel), frozenset())

    def relations_between(self, x: int, y: int) -> tuple[int, ...]:
        """Relation tokens labelling train edges x -> y."""
        return self._by_pair.get((x, y), ())

    def has_edge(self, x: int, rel: int, y: int) -> bool:
        return (x, rel, y) in self.train_facts

    @property
    def entities(self) -> range:
        return range(self.vocab.n_entities)


def build_graph(
    train: Iterable[Triple],
    valid: Iterable[Triple],
    test: Iterable[Triple],
    vocab: Vocabulary,
) -> KnowledgeGraph:
    """Index train edges in both directions; deduplicate train; reject split overlap."""
    train = list(dict.fromkeys(train))
    valid, test = list(valid), list(test)
    train_set, valid_set, test_set = set(train), set(valid), set(test)
    for name_a, a, name_b, b in (
        ("train", train_set, "valid", valid_set),
        ("train", train_set, "test", test_set),
        ("valid", valid_set, "test", test_set),
    ):
        common = a & b
        if common:
            raise DataError(f"{len(common)} triple(s) appear in both {name_a} and {name_b}")
    vocab.freeze()

    g = KnowledgeGraph(vocab=vocab, train=train, valid=valid, test=test)
    adjacency: dict[int, list[tuple[int, int]]] = defaultdict(list)
    by_rel: dict[tuple[int, int], set[int]] = defaultdict(set)
    by_pair: dict[tuple[int, int], list[int]] = defaultdict(list)
    facts = []
    for tr in train:
        for x, rel, y in g.directed(tr):
            adjacency[x].append((rel, y))
            by_rel[(x, rel)].add(y)
            by_pair[(x, y)].append(rel)
            facts.append((x, rel, y))
    g.adjacency = dict(adjacency)
    g._by_rel = {k: frozenset(v) for k, v in by_rel.items()}
    g._by_pair = {k: tuple(v) for k, v in by_pair.items()}
    g.train_facts = frozenset(facts)
    return g


def load_dataset(data_dir: str | Path) -> KnowledgeGraph:
    """Read train.txt / valid.txt / test.txt (the latter two optional) from a directory."""
    data_dir = Path(data_dir)
    vocab = Vocabulary()
    splits = {}
    for name in ("train", "valid", "test"):
        path = data_dir / f"{name}.txt"
        if not path.exists():
            if name == "train":
                raise FileNotFoundError(f"missing {path}")
            splits[name] = []
            continue
        splits[name] = load_triples(path, vocab)
    return build_graph(splits["train"], splits["valid"], splits["test"], vocab)


def known_true(graph: KnowledgeGraph) -> frozenset[tuple[int, int, int]]:
    """Every fact from any split, closed under inversion (for filtered ranking)."""
    out = set()
    for split in (graph.train, graph.valid, graph.test):
        for tr in split:
            out.update(graph.directed(tr))
    return frozenset(out)


def write_triples(path: str | Path, rows: Iterable[tuple[str, str, str]]) -> None:
    Path(path).write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in rows), encoding="utf-8")
