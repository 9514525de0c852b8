"""Frame-causal transformer over visual tokens with trigger/target/action heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .codebook import UTTERANCE_DIM, ActionEncoder, CodebookInputs, HashedBagEmbedder
from .errors import ConfigError, TrainingError
from .tokens import PADDING, PERSON, TokenEmbedder


@dataclass
class ModelConfig:
    m: int = 20
    n: int = 10
    feature_dim: int = 64
    pos_dim: int = 16
    class_dim: int = 8
    d_model: int = 128
    blocks: int = 6
    heads: int = 4
    ffn_mult: int = 4
    k: int = 8
    utterance_dim: int = UTTERANCE_DIM
    embedder: str = HashedBagEmbedder.name

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        for name in ("m", "n", "feature_dim", "d_model", "blocks", "heads", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def build_causal_mask(m: int, n: int) -> torch.Tensor:
    """Additive (mn x mn) mask: token a sees token b iff frame(b) <= frame(a)."""
    frame = torch.arange(m * n) // m
    allowed = frame.unsqueeze(0) <= frame.unsqueeze(1)
    return torch.where(allowed, 0.0, nx.MASK_VALUE)


def attention_mask(pad_mask: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """Per-clip additive mask (B, L, L) from a (B, N, M) padding mask.

    Frame causality plus padding keys hidden from every query except
    themselves, so every row keeps at least one visible key.
    """
    b, n, m = pad_mask.shape
    length = n * m
    frame = torch.arange(length) // m
    causal = frame.unsqueeze(0) <= frame.unsqueeze(1)
    key_ok = ~pad_mask.reshape(b, 1, length)
    allowed = causal.unsqueeze(0) & (key_ok | torch.eye(length, dtype=torch.bool).unsqueeze(0))
    return torch.zeros(allowed.shape, dtype=dtype).masked_fill(~allowed, nx.MASK_VALUE)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(d_model, d_model)
        # a key bias shifts every score of a query equally, so it is left out
        self.key = nn.Linear(d_model, d_model, bias=False)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        return x.view(b, length, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        y = nx.attention(q, k, v, mask.unsqueeze(1))
        return self.out(y.transpose(1, 2).reshape(b, length, d))


class Block(nn.Module):
    """Pre-norm residual block: attention then a GELU feed-forward."""

    def __init__(self, d_model: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_mult * d_model),
            nn.GELU(),
            nn.Linear(ffn_mult * d_model, d_model),
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.ffn(self.norm2(x))


@dataclass
class DecisionOutput:
    trigger: torch.Tensor  # (B, N) in (0, 1)
    target: torch.Tensor  # (B, N, M) in (0, 1)
    action_dist: torch.Tensor  # (B, N, K+1), rows sum to 1
    fallback: torch.Tensor  # (B, N) bool, frame had no real token

    def last(self) -> "DecisionOutput":
        return DecisionOutput(self.trigger[:, -1], self.target[:, -1], self.action_dist[:, -1], self.fallback[:, -1])


class DecisionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tokens = TokenEmbedder(cfg.feature_dim, cfg.pos_dim, cfg.class_dim)
        self.proj = nn.Linear(self.tokens.token_dim, cfg.d_model)
        self.frame_embedding = nn.Parameter(torch.randn(cfg.n, cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.heads, cfg.ffn_mult) for _ in range(cfg.blocks))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.pool_fallback = nn.Parameter(torch.zeros(cfg.d_model))
        self.trigger_head = nn.Linear(cfg.d_model, 1)
        self.target_head = nn.Linear(cfg.d_model, 1)
        self.actions = ActionEncoder(cfg.d_model, cfg.utterance_dim)

    def phi(self, inputs: CodebookInputs) -> torch.Tensor:
        return self.actions(inputs.utterance, inputs.expression_ids, inputs.motion_ids)

    def encode(self, features: torch.Tensor, pos_bins: torch.Tensor, class_ids: torch.Tensor) -> torch.Tensor:
        """Per-token block outputs, shape (B, N, M, D)."""
        b, n, m, _ = features.shape
        if (n, m) != (self.cfg.n, self.cfg.m):
            raise ConfigError(f"window is {m}x{n}, model expects {self.cfg.m}x{self.cfg.n}")
        x = self.proj(self.tokens(features, pos_bins, class_ids))
        x = x + self.frame_embedding[:, None, :]
        x = x.reshape(b, n * m, -1)
        mask = attention_mask(class_ids == PADDING, x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return self.final_norm(x).reshape(b, n, m, -1)

    def forward(self, features, pos_bins, class_ids, phi: torch.Tensor | None = None,
                codebook: CodebookInputs | None = None) -> DecisionOutput:
        """Outputs for every frame of the window.

        Pass either a precomputed action matrix ``phi`` (K+1, D) or the
        codebook inputs to encode it here.
        """
        if phi is None:
            phi = self.phi(codebook)
        if phi.shape[-1] != self.cfg.d_model:
            raise ConfigError(f"action matrix width {phi.shape[-1]} != d_model {self.cfg.d_model}")
        o = self.encode(features, pos_bins, class_ids)
        pad = class_ids == PADDING
        empty = pad.all(dim=-1)
        pooled = o.masked_fill(pad.unsqueeze(-1), float("-inf")).amax(dim=2)
        pooled = torch.where(empty.unsqueeze(-1), self.pool_fallback.expand_as(pooled), pooled)
        trigger = nx.sigmoid(self.trigger_head(pooled).squeeze(-1))
        target = nx.sigmoid(self.target_head(o).squeeze(-1))
        action = nx.softmax(nx.matmul(pooled, phi.transpose(0, 1)), dim=-1)
        return DecisionOutput(trigger, target, action, empty)

    def predict_last(self, features, pos_bins, class_ids, phi) -> DecisionOutput:
        return self.forward(features, pos_bins, class_ids, phi).last()


def forward(model: DecisionModel, batch: dict, phi: torch.Tensor) -> DecisionOutput:
    return model(batch["features"], batch["pos_bins"], batch["class_ids"], phi)


def predict_last(model: DecisionModel, batch: dict, phi: torch.Tensor) -> DecisionOutput:
    return forward(model, batch, phi).last()


@dataclass
class ClipLabels:
    trigger: torch.Tensor  # (B, N) 0/1
    target: torch.Tensor  # (B, N, M) 0/1
    action: torch.Tensor  # (B, N) index into K+1, NULL where no trigger

    @classmethod
    def stack(cls, labels: list["ClipLabels"]) -> "ClipLabels":
        return cls(*(torch.cat([getattr(l, f) for l in labels]) for f in ("trigger", "target", "action")))


@dataclass
class LossTerms:
    total: torch.Tensor
    trigger: torch.Tensor
    action: torch.Tensor
    target: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "trigger", "action", "target")}


def compute_loss(output: DecisionOutput, labels: ClipLabels, class_ids: torch.Tensor,
                 final_frame_only: bool = False, null_weight: float = 0.0) -> LossTerms:
    """Gated multi-task cross-entropy, averaged over clips and summed over frames.

    Action and target terms only count on frames whose trigger label is 1.
    ``null_weight`` > 0 adds a NULL-action term on trigger-free frames
    (off by default, which keeps the gating exact).
    """
    b, n = output.trigger.shape
    if labels.trigger.shape != (b, n) or labels.target.shape != output.target.shape \
            or labels.action.shape != (b, n) or class_ids.shape != output.target.shape:
        raise TrainingError(
            f"labels {tuple(labels.trigger.shape)}/{tuple(labels.target.shape)} do not align with "
            f"outputs {tuple(output.trigger.shape)}/{tuple(output.target.shape)}"
        )
    dtype = output.trigger.dtype
    y = labels.trigger.to(dtype)
    frame_w = torch.ones_like(y)
    if final_frame_only:
        frame_w = torch.zeros_like(y)
        frame_w[:, -1] = 1.0

    trig = (frame_w * nx.binary_cross_entropy(y, output.trigger)).sum(dim=1)

    k1 = output.action_dist.shape[-1]
    onehot = nn.functional.one_hot(labels.action, k1).to(dtype)
    act_ce = nx.categorical_cross_entropy(onehot, output.action_dist)
    act = (frame_w * y * act_ce).sum(dim=1)
    if null_weight > 0:
        null_hot = torch.zeros_like(onehot)
        null_hot[..., -1] = 1.0
        null_ce = nx.categorical_cross_entropy(null_hot, output.action_dist)
        act = act + null_weight * (frame_w * (1.0 - y) * null_ce).sum(dim=1)

    person = (class_ids == PERSON).to(dtype)
    tgt_ce = nx.binary_cross_entropy(labels.target.to(dtype), output.target) * person
    tgt = (frame_w * y * tgt_ce.sum(dim=-1)).sum(dim=1)

    trig, act, tgt = trig.mean(), act.mean(), tgt.mean()
    return LossTerms(trig + act + tgt, trig, act, tgt)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def set_seed(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    return torch.Generator().manual_seed(seed)
