"""Command-line flags shared by the experiment scripts."""

from __future__ import annotations

import argparse

from squire.experiments import DataSetup, Experiment, desk_train_config


def add_experiment_flags(p: argparse.ArgumentParser) -> None:
    d, e, t = DataSetup(), Experiment(), desk_train_config()
    g = p.add_argument_group("data")
    g.add_argument("--entities", type=int, default=d.entities)
    g.add_argument("--r1-degree", type=int, default=d.r1_degree)
    g.add_argument("--r2-degree", type=int, default=d.r2_degree)
    g.add_argument("--test-frac", type=float, default=d.test_frac)
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int, default=e.layers)
    g.add_argument("--d", type=int, default=e.d)
    g.add_argument("--ff-dim", type=int, default=e.ff_dim)
    g.add_argument("--heads", type=int, default=e.heads)
    g.add_argument("--dropout", type=float, default=e.dropout)
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=t.lr)
    g.add_argument("--epsilon", type=float, default=t.epsilon)
    g.add_argument("--mask-prob", type=float, default=t.mask_prob)
    g.add_argument("--warmup", type=float, default=t.warmup_ratio)
    g.add_argument("--epochs", type=int, default=t.epochs)
    g.add_argument("--pairs", type=int, default=t.pairs_per_triple)
    g.add_argument("--batch-size", type=int, default=t.batch_size)
    g.add_argument("--lr-schedule", choices=("run", "round"), default=t.lr_schedule)
    g.add_argument("--max-body-len", type=int, default=e.max_body_len)
    g.add_argument("--min-support", type=int, default=e.min_support)
    g.add_argument("--threshold", type=float, default=t.rule_threshold)
    g.add_argument("--beam", type=int, default=e.beam)


def experiment_from(args, noise: float = 0.0, seed: int = 0) -> Experiment:
    data = DataSetup(args.entities, args.r1_degree, args.r2_degree, args.test_frac, noise, seed)
    train = desk_train_config(
        lr=args.lr,
        epsilon=args.epsilon,
        mask_prob=args.mask_prob,
        warmup_ratio=args.warmup,
        epochs=args.epochs,
        pairs_per_triple=args.pairs,
        batch_size=args.batch_size,
        lr_schedule=args.lr_schedule,
        rule_threshold=args.threshold,
        seed=seed,
    )
    exp = Experiment(
        data=data,
        train=train,
        layers=args.layers,
        d=args.d,
        ff_dim=args.ff_dim,
        heads=args.heads,
        dropout=args.dropout,
        max_body_len=args.max_body_len,
        min_support=args.min_support,
        beam=args.beam,
    )
    return exp
