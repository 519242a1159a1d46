"""Training loop, warmup/decay schedule and iterative data aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch

from . import numeric as nx
from .inference import beam_prefixes
from .kg import KnowledgeGraph
from .model import SquireModel, batch_loss, make_batch
from .paths import QueryPathPair, make_training_pairs, mask_entities, pairs_for_triples, random_path
from .rules import ChainRule, rules_by_head


LR_SCHEDULES = ("run", "round")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    epsilon: float = 0.25
    mask_prob: float = 0.15
    warmup_ratio: float = 1 / 3
    epochs: int = 30
    max_hops: int = 3
    pairs_per_triple: int = 6
    batch_size: int = 256
    beam_size: int = 256
    rule_threshold: float = 0.5
    iterative: bool = True
    seed: int = 0
    log_every: int = 10
    valid_every_epochs: int = 0
    valid_beam: int = 32
    lr_schedule: str = "run"  # "run": one warmup/decay over all rounds; "round": restart it every round

    def validate(self) -> list[str]:
        errors = []
        if self.max_hops < 1:
            errors.append("max_hops must be >= 1")
        if self.pairs_per_triple < 1:
            errors.append("pairs_per_triple must be >= 1")
        if not 0.0 <= self.mask_prob <= 1.0:
            errors.append("mask_prob must lie in [0, 1]")
        if not 0.0 < self.epsilon <= 1.0:
            errors.append("epsilon must lie in (0, 1]")
        if not 0.0 < self.warmup_ratio < 1.0:
            errors.append("warmup_ratio must lie in (0, 1)")
        if self.lr <= 0:
            errors.append("lr must be positive")
        if self.epochs < 0:
            errors.append("epochs must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.beam_size < 1:
            errors.append("beam_size must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            errors.append(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0.0 <= self.rule_threshold <= 1.0:
            errors.append("rule_threshold must lie in [0, 1]")
        return errors

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class TrainingSet:
    pairs: list[QueryPathPair]
    initial_size: int

    def __len__(self) -> int:
        return len(self.pairs)


def build_initial_dataset(graph: KnowledgeGraph, golden_rules: Sequence[ChainRule], config: TrainConfig) -> TrainingSet:
    """``pairs_per_triple`` pairs for every train triple, in both directions."""
    pairs = pairs_for_triples(
        graph, graph.train, golden_rules, config.pairs_per_triple, config.seed, config.max_hops
    )
    return TrainingSet(pairs, len(pairs))


def steps_per_epoch(n_pairs: int, batch_size: int) -> int:
    return math.ceil(n_pairs / batch_size) if n_pairs else 0


def planned_steps(initial_size: int, config: TrainConfig) -> int:
    """Optimisation steps over the whole run: n epochs, then ceil(n/k) epochs on k times the data."""
    total = config.epochs * steps_per_epoch(initial_size, config.batch_size)
    if config.iterative:
        for k in range(2, config.max_hops + 1):
            total += math.ceil(config.epochs / k) * steps_per_epoch(k * initial_size, config.batch_size)
    return total


class Trainer:
    """Owns the optimiser, the global step counter and the log for one model."""

    def __init__(
        self,
        model: SquireModel,
        config: TrainConfig,
        total_steps: int,
        valid_fn: Callable[[SquireModel], float] | None = None,
    ):
        self.model = model
        self.config = config
        self.total_steps = max(total_steps, 1)
        self.phase_start = 0
        self.phase_steps = self.total_steps
        self.valid_fn = valid_fn
        self.opt = nx.Adam(model.parameters())
        self.step = 0
        self.epoch = 0
        self.log: list[dict] = []
        self.rng = np.random.default_rng([config.seed, 7])
        self.on_record: Callable[[dict], None] | None = None

    def _record(self, rec: dict) -> None:
        self.log.append(rec)
        if self.on_record is not None:
            self.on_record(rec)

    def lr(self) -> float:
        c = self.config
        step = min(self.step - self.phase_start, self.phase_steps)
        return nx.lr_at(step, self.phase_steps, c.warmup_ratio, c.lr)

    def state_dict(self) -> dict:
        """Everything besides the model weights needed to continue bit-for-bit."""
        return {
            "step": self.step,
            "epoch": self.epoch,
            "total_steps": self.total_steps,
            "phase_start": self.phase_start,
            "phase_steps": self.phase_steps,
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "dropout_rng": self.model.dropout_gen.get_state(),
            "adam_t": self.opt.t,
            "adam_m": [m.clone() for m in self.opt.m],
            "adam_v": [v.clone() for v in self.opt.v],
        }

    def load_state_dict(self, state: dict) -> None:
        for key in ("step", "epoch", "total_steps", "phase_start", "phase_steps"):
            setattr(self, key, int(state[key]))
        self.rng.bit_generator.state = state["rng"]
        torch.set_rng_state(state["torch_rng"])
        self.model.dropout_gen.set_state(state["dropout_rng"])
        if len(state["adam_m"]) != len(self.opt.m):
            raise ValueError("optimizer state does not match the model's parameter blocks")
        with torch.no_grad():
            for dst, src in zip(self.opt.m + self.opt.v, state["adam_m"] + state["adam_v"]):
                dst.copy_(src)
        self.opt.t = int(state["adam_t"])

    def restart_schedule(self, steps: int) -> None:
        """Begin a fresh warmup/decay cycle of ``steps`` steps at the current step."""
        self.phase_start = self.step
        self.phase_steps = max(steps, 1)

    def train_epochs(self, pairs: Sequence[QueryPathPair], epochs: int, iteration: int = 1) -> list[dict]:
        c = self.config
        mask_id = self.model.config.vocab_size - 1  # <mask> is the last token
        start = len(self.log)
        loss = torch.tensor(float("nan"))
        lr = self.lr()
        for _ in range(epochs):
            self.epoch += 1
            order = self.rng.permutation(len(pairs))
            self.model.train()
            for b in range(0, len(order), c.batch_size):
                samples = []
                for i in order[b : b + c.batch_size]:
                    pr = pairs[i]
                    toks, excl = mask_entities(pr, c.mask_prob, self.rng, mask_id)
                    samples.append((pr.query, toks, excl))
                batch = make_batch(samples, pad_id=mask_id)
                self.step += 1
                lr = self.lr()
                loss = batch_loss(self.model, batch, c.epsilon, train=True)
                nx.check_finite(loss.detach(), f"loss at step {self.step}")
                nx.backward(loss)
                self.opt.step(lr)
                if c.log_every and self.step % c.log_every == 0:
                    self._record(
                        {"step": self.step, "epoch": self.epoch, "iteration_k": iteration, "loss": loss.item(), "lr": lr}
                    )
            self.model.eval()
            if self.valid_fn is not None and c.valid_every_epochs and self.epoch % c.valid_every_epochs == 0:
                self._record(
                    {
                        "step": self.step,
                        "epoch": self.epoch,
                        "iteration_k": iteration,
                        "loss": loss.item(),
                        "lr": lr,
                        "valid_mrr": self.valid_fn(self.model),
                    }
                )
        return self.log[start:]


def train_epochs(model: SquireModel, dataset: TrainingSet, epochs: int, config: TrainConfig) -> list[dict]:
    """Stand-alone training with the schedule spread over exactly these epochs."""
    total = epochs * steps_per_epoch(len(dataset), config.batch_size)
    return Trainer(model, config, total).train_epochs(dataset.pairs, epochs)


def aggregate(
    model: SquireModel,
    graph: KnowledgeGraph,
    k: int,
    golden_rules: Sequence[ChainRule],
    config: TrainConfig,
) -> list[QueryPathPair]:
    """New pairs for round ``k``: model prefixes of k-1 hops completed by graph search.

    Every directed train fact yields ``pairs_per_triple`` pairs; a slot whose
    prefix cannot be continued to the tail gets a freshly searched full path.
    """
    m, N = config.pairs_per_triple, config.max_hops
    vocab = graph.vocab
    facts = graph.directed_train()
    prefixes = beam_prefixes(model, [(h, r) for h, r, _ in facts], k - 1, m, vocab, N)
    by_head = rules_by_head(golden_rules)
    out: list[QueryPathPair] = []
    for i, ((h, r, t), hyps) in enumerate(zip(facts, prefixes)):
        rng = np.random.default_rng([config.seed, k, i])
        new: list[QueryPathPair] = []
        for hyp in hyps[:m]:
            e = hyp.tokens[-1]
            if e == t:
                cont = (vocab.eos,)
            else:
                visited = frozenset((h, *hyp.tokens[1::2]))
                cont = random_path(graph, e, t, N - k + 1, rng, avoid=visited)
            if cont is not None:
                new.append(QueryPathPair(h, r, (*hyp.tokens, *cont), "aggregated"))
        missing = m - len(new)
        if missing:
            fresh = make_training_pairs(graph, (h, r, t), by_head.get(r, ()), m, rng, N)
            new.extend(fresh[:missing])
        out.extend(new)
    return out


def iterative_training(
    trainer: Trainer,
    graph: KnowledgeGraph,
    dataset: TrainingSet,
    golden_rules: Sequence[ChainRule],
    on_iteration: Callable[[int, TrainingSet, Trainer], None] | None = None,
    start_k: int = 2,
) -> SquireModel:
    """Rounds k = start_k..N: aggregate, then train ceil(n/k) epochs on the enlarged set."""
    c = trainer.config
    for k in range(start_k, c.max_hops + 1):
        dataset.pairs.extend(aggregate(trainer.model, graph, k, golden_rules, c))
        epochs = math.ceil(c.epochs / k)
        if c.lr_schedule == "round":
            trainer.restart_schedule(epochs * steps_per_epoch(len(dataset), c.batch_size))
        trainer.train_epochs(dataset.pairs, epochs, iteration=k)
        if on_iteration is not None:
            on_iteration(k, dataset, trainer)
    return trainer.model


def run_training(
    model: SquireModel,
    graph: KnowledgeGraph,
    golden_rules: Sequence[ChainRule],
    config: TrainConfig,
    valid_fn: Callable[[SquireModel], float] | None = None,
    on_iteration: Callable[[int, TrainingSet, Trainer], None] | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[SquireModel, Trainer, TrainingSet]:
    """The full procedure: initial pairs, n epochs, then (optionally) iterative rounds."""
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    torch.manual_seed(config.seed)
    dataset = build_initial_dataset(graph, golden_rules, config)
    first = config.epochs * steps_per_epoch(dataset.initial_size, config.batch_size)
    total = first if config.lr_schedule == "round" else planned_steps(dataset.initial_size, config)
    trainer = Trainer(model, config, total, valid_fn)
    trainer.on_record = on_record
    trainer.train_epochs(dataset.pairs, config.epochs, iteration=1)
    if on_iteration is not None:
        on_iteration(1, dataset, trainer)
    if config.iterative:
        iterative_training(trainer, graph, dataset, golden_rules, on_iteration)
    return model, trainer, dataset


def resume_training(
    model: SquireModel,
    graph: KnowledgeGraph,
    golden_rules: Sequence[ChainRule],
    config: TrainConfig,
    completed_k: int,
    dataset: TrainingSet,
    trainer_state: dict,
    valid_fn: Callable[[SquireModel], float] | None = None,
    on_iteration: Callable[[int, TrainingSet, Trainer], None] | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[SquireModel, Trainer, TrainingSet]:
    """Continue a run whose rounds 1..completed_k finished (weights already loaded into ``model``)."""
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    trainer = Trainer(model, config, 1, valid_fn)
    trainer.load_state_dict(trainer_state)
    trainer.on_record = on_record
    if config.iterative:
        iterative_training(trainer, graph, dataset, golden_rules, on_iteration, start_k=completed_k + 1)
    return model, trainer, dataset
