"""Masked Transformer encoder mapping (query, path prefix) to a next-token distribution."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numeric as nx

QUERY_LEN = 2


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 6
    d: int = 256
    ff_dim: int = 512
    heads: int = 4
    dropout: float = 0.1
    max_seq_len: int = 2 + 2 * 3 + 1
    seed: int = 0
    init_std: float = 0.02

    def validate(self) -> list[str]:
        errors = []
        if self.vocab_size < 1:
            errors.append("vocab_size must be positive")
        if self.layers < 1:
            errors.append("layers must be >= 1")
        if self.heads < 1 or self.d % self.heads:
            errors.append(f"d={self.d} must be divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            errors.append("dropout must lie in [0, 1)")
        if self.init_std <= 0:
            errors.append("init_std must be positive")
        if self.max_seq_len < QUERY_LEN + 1:
            errors.append("max_seq_len too small")
        return errors

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def visibility_mask(seq_len: int, query_len: int = QUERY_LEN, dtype=torch.float32) -> torch.Tensor:
    """Additive mask: position i sees j iff j < query_len or j <= i."""
    if seq_len < query_len:
        raise ValueError("seq_len must be >= query_len")
    i = torch.arange(seq_len).unsqueeze(1)
    j = torch.arange(seq_len).unsqueeze(0)
    visible = (j < query_len) | (j <= i)
    return torch.zeros(seq_len, seq_len, dtype=dtype).masked_fill(~visible, nx.NEG_INF)


class EncoderLayer(nn.Module):
    # pre-norm: x + attn(ln(x)), then x + ff(ln(x))
    def __init__(self, d: int, ff_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1_w = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.qkv_w = nn.Parameter(torch.empty(d, 3 * d))
        self.qkv_b = nn.Parameter(torch.zeros(3 * d))
        self.out_w = nn.Parameter(torch.empty(d, d))
        self.out_b = nn.Parameter(torch.zeros(d))
        self.ln2_w = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.ff1_w = nn.Parameter(torch.empty(d, ff_dim))
        self.ff1_b = nn.Parameter(torch.zeros(ff_dim))
        self.ff2_w = nn.Parameter(torch.empty(ff_dim, d))
        self.ff2_b = nn.Parameter(torch.zeros(d))

    def forward(self, x, mask, rate, train, gen):
        B, L, d = x.shape
        H = self.heads
        hd = d // H
        y = nx.layer_norm(x, self.ln1_w, self.ln1_b)
        q, k, v = (nx.matmul(y, self.qkv_w) + self.qkv_b).split(d, dim=-1)
        q = q.view(B, L, H, hd).transpose(1, 2)
        k = k.view(B, L, H, hd).transpose(1, 2)
        v = v.view(B, L, H, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        attn = nx.masked_softmax(scores, mask)
        ctx = nx.dropout(attn, rate, train, gen) @ v
        ctx = ctx.transpose(1, 2).reshape(B, L, d)
        x = x + nx.dropout(nx.matmul(ctx, self.out_w) + self.out_b, rate, train, gen)
        y = nx.layer_norm(x, self.ln2_w, self.ln2_b)
        y = nx.gelu(nx.matmul(y, self.ff1_w) + self.ff1_b)
        y = nx.matmul(nx.dropout(y, rate, train, gen), self.ff2_w) + self.ff2_b
        return x + nx.dropout(y, rate, train, gen), attn


class SquireModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        errors = config.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.config = config
        d = config.d
        self.embedding = nn.Parameter(torch.empty(config.vocab_size, d))
        self.position = nn.Parameter(torch.empty(config.max_seq_len, d))
        self.layers = nn.ModuleList(EncoderLayer(d, config.ff_dim, config.heads) for _ in range(config.layers))
        self.final_w = nn.Parameter(torch.ones(d))
        self.final_b = nn.Parameter(torch.zeros(d))
        self.mlp1_w = nn.Parameter(torch.empty(d, d))
        self.mlp1_b = nn.Parameter(torch.zeros(d))
        self.mlp2_w = nn.Parameter(torch.empty(d, d))
        self.mlp2_b = nn.Parameter(torch.zeros(d))
        self.dropout_gen = torch.Generator().manual_seed(config.seed + 1)
        self.reset_parameters(config.seed, config.init_std)

    def reset_parameters(self, seed: int, std: float = 0.02) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("_b") or "ln" in name or name.startswith("final"):
                    continue
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)

    def forward(self, ids: torch.Tensor, pad: torch.Tensor | None = None, train: bool = False, return_attention: bool = False):
        """Logits at every position of ``ids`` (B, L); ``pad`` flags padded positions."""
        B, L = ids.shape
        if L > self.config.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {self.config.max_seq_len}")
        dtype = self.embedding.dtype
        mask = visibility_mask(L, QUERY_LEN, dtype)
        if pad is not None:
            mask = mask.unsqueeze(0).masked_fill(pad.unsqueeze(1), nx.NEG_INF).unsqueeze(1)
        x = nx.embedding_lookup(self.embedding, ids) + self.position[:L]
        rate = self.config.dropout
        x = nx.dropout(x, rate, train, self.dropout_gen)
        attns = []
        for layer in self.layers:
            x, a = layer(x, mask, rate, train, self.dropout_gen)
            attns.append(a)
        x = nx.layer_norm(x, self.final_w, self.final_b)
        h = nx.matmul(nx.gelu(nx.matmul(x, self.mlp1_w) + self.mlp1_b), self.mlp2_w) + self.mlp2_b
        logits = nx.matmul(h, self.embedding.t())
        if return_attention:
            return logits, attns
        return logits

    def named_blocks(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def save(self, path: str | Path) -> None:
        c = self.config
        nx.save_checkpoint(path, self.named_blocks(), c.vocab_size, c.d, c.layers)
        Path(str(path) + ".json").write_text(c.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SquireModel":
        cfg_path = Path(str(path) + ".json")
        config = ModelConfig(**json.loads(cfg_path.read_text(encoding="utf-8")))
        header, params = nx.load_checkpoint(path)
        if (header["vocab_size"], header["d"], header["layers"]) != (config.vocab_size, config.d, config.layers):
            raise ValueError(f"{path}: checkpoint header does not match {cfg_path}")
        model = cls(config)
        own = model.named_blocks()
        if set(own) != set(params):
            raise ValueError(f"{path}: parameter names do not match the model")
        with torch.no_grad():
            for name, value in params.items():
                if own[name].shape != value.shape:
                    raise ValueError(f"{path}: block {name} has shape {tuple(value.shape)}, expected {tuple(own[name].shape)}")
                own[name].copy_(value)
        return model


def encode(query: tuple[int, int], prefix: Sequence[int]) -> list[int]:
    return [query[0], query[1], *prefix]


def next_token_distribution(model: SquireModel, query: tuple[int, int], prefix: Sequence[int], train: bool = False) -> torch.Tensor:
    """p(. | q, prefix) over the full vocabulary."""
    ids = torch.tensor([encode(query, prefix)])
    with torch.set_grad_enabled(train):
        logits = model(ids, train=train)[0, -1]
    return torch.softmax(logits, dim=-1)


@dataclass
class Batch:
    ids: torch.Tensor  # (B, L): h, r, path[:-1]
    pad: torch.Tensor  # (B, L) bool
    targets: torch.Tensor  # (B, L): target for position i is path[i - 1]; position 0 unused
    weights: torch.Tensor  # (B, L) 1 where the loss applies
    lengths: torch.Tensor  # (B,) |path| including <eos>


def make_batch(samples: Sequence[tuple[tuple[int, int], Sequence[int], Sequence[bool]]], pad_id: int) -> Batch:
    """Teacher-forcing batch from (query, masked path, loss-excluded flags) samples."""
    B = len(samples)
    L = max(len(path) for _, path, _ in samples) + 1
    ids = np.full((B, L), pad_id, dtype=np.int64)
    targets = np.full((B, L), pad_id, dtype=np.int64)
    weights = np.zeros((B, L), dtype=np.float32)
    lengths = np.zeros(B, dtype=np.float32)
    for b, ((h, r), path, excluded) in enumerate(samples):
        n = len(path)
        ids[b, 0] = h
        ids[b, 1] = r
        ids[b, 2 : n + 1] = path[:-1]
        targets[b, 1 : n + 1] = path
        weights[b, 1 : n + 1] = 1.0
        weights[b, 1 : n + 1][np.asarray(excluded, dtype=bool)] = 0.0
        lengths[b] = n
    pad = np.arange(L)[None, :] > lengths[:, None]
    return Batch(
        torch.from_numpy(ids), torch.from_numpy(pad), torch.from_numpy(targets),
        torch.from_numpy(weights), torch.from_numpy(lengths),
    )


def smoothed_nll(logits: torch.Tensor, targets: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Per-position loss with target mass ``epsilon`` and (1 - epsilon)/(V - 1) elsewhere."""
    V = logits.shape[-1]
    logp = torch.log_softmax(logits, dim=-1)
    tgt = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if epsilon == 1.0:
        return -tgt
    other = logp.sum(-1) - tgt
    return -(epsilon * tgt + (1.0 - epsilon) / (V - 1) * other)


def batch_loss(model: SquireModel, batch: Batch, epsilon: float, train: bool = False) -> torch.Tensor:
    """Mean over sequences of the length-normalised smoothed loss; excluded positions add 0."""
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must lie in (0, 1]")
    logits = model(batch.ids, batch.pad, train=train)
    w = batch.weights.to(logits.dtype)
    per_pos = smoothed_nll(logits, batch.targets, epsilon) * w
    per_seq = per_pos.sum(-1) / batch.lengths.to(logits.dtype)
    return per_seq.mean()


def sequence_loss(
    model: SquireModel,
    query: tuple[int, int],
    path: Sequence[int],
    excluded: Sequence[bool],
    epsilon: float,
    train: bool = False,
) -> torch.Tensor:
    pad_id = path[-1]
    return batch_loss(model, make_batch([(query, path, excluded)], pad_id), epsilon, train)


def export_attention(model: SquireModel, query: tuple[int, int], prefix: Sequence[int]) -> torch.Tensor:
    """Attention weights as a (layers, heads, L, L) tensor for the sequence [h, r, prefix...]."""
    ids = torch.tensor([encode(query, prefix)])
    with torch.no_grad():
        _, attns = model(ids, return_attention=True)
    return torch.stack([a[0] for a in attns])
