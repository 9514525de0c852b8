"""Multi-modal action set and its learned encoding.

An action is an (utterance, expression, motion) triplet. The codebook holds the
K distinct triplets seen in annotations plus a trailing NULL entry meaning
"do not initiate". Each real action is encoded as
``FFN(embed(utterance) + EMB(expression) + EMB(motion))`` (concatenation),
while NULL gets its own learned vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .errors import BuildError, InputError

EXPRESSION_VOCAB = 32
MOTION_VOCAB = 32
MODALITY_DIM = 16
UTTERANCE_DIM = 64


@dataclass(frozen=True)
class MultiModalAction:
    utterance: str
    expression_id: int
    motion_id: int

    def to_dict(self) -> dict:
        return {"utterance": self.utterance, "expression_id": self.expression_id, "motion_id": self.motion_id}

    @classmethod
    def from_dict(cls, d: dict) -> "MultiModalAction":
        return cls(str(d["utterance"]), int(d["expression_id"]), int(d["motion_id"]))


class UtteranceEmbedder(Protocol):
    name: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


FNV_OFFSET = 0x811C9DC5
FNV_PRIME = 0x01000193


def fnv1a_32(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFF
    return h


def stub_embed(utterance: str, dim: int = UTTERANCE_DIM) -> np.ndarray:
    """Hashed bag-of-tokens vector.

    Text is lowercased and split on whitespace; each token's UTF-8 bytes go
    through 32-bit FNV-1a and land in bucket ``hash % dim``. Bucket counts are
    L2-normalized; empty text gives the zero vector.
    """
    v = np.zeros(dim, dtype=np.float64)
    for token in utterance.lower().split():
        v[fnv1a_32(token.encode("utf-8")) % dim] += 1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


class HashedBagEmbedder:
    name = "hashed-bow-fnv1a"

    def __init__(self, dim: int = UTTERANCE_DIM):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        return stub_embed(text, self.dim)


def make_embedder(name: str, dim: int) -> UtteranceEmbedder:
    if name == HashedBagEmbedder.name:
        return HashedBagEmbedder(dim)
    raise BuildError(f"unknown utterance embedder {name!r}")


class ActionCodebook:
    """Ordered distinct actions; index K (one past the last) is NULL."""

    def __init__(self, actions: Sequence[MultiModalAction]):
        self.actions = list(actions)
        if len(set(self.actions)) != len(self.actions):
            raise BuildError("duplicate actions in codebook")
        self._index = {a: i for i, a in enumerate(self.actions)}

    @property
    def k(self) -> int:
        return len(self.actions)

    @property
    def null_index(self) -> int:
        return len(self.actions)

    def __len__(self) -> int:
        return len(self.actions) + 1

    def index_of(self, action: MultiModalAction | None) -> int:
        if action is None:
            return self.null_index
        try:
            return self._index[action]
        except KeyError:
            raise BuildError(f"action {action} is not in the codebook") from None

    def action(self, index: int) -> MultiModalAction | None:
        return None if index == self.null_index else self.actions[index]

    def to_dict(self) -> list[dict]:
        return [a.to_dict() for a in self.actions]

    @classmethod
    def from_dict(cls, rows: list[dict]) -> "ActionCodebook":
        return cls([MultiModalAction.from_dict(r) for r in rows])

    def __eq__(self, other) -> bool:
        return isinstance(other, ActionCodebook) and self.actions == other.actions


def _action_of(item) -> MultiModalAction:
    if isinstance(item, MultiModalAction):
        return item
    if isinstance(item, dict):
        return MultiModalAction.from_dict(item.get("action", item))
    action = item.action
    return action() if callable(action) else action


def build_codebook(annotations: Iterable) -> ActionCodebook:
    """Distinct triplets in first-occurrence order.

    Accepts MultiModalAction instances, annotation objects with an ``action``
    attribute, or dicts (either the action itself or ``{"action": ...}``).
    """
    seen: dict[MultiModalAction, None] = {}
    for item in annotations:
        seen.setdefault(_action_of(item), None)
    if not seen:
        raise BuildError("no annotated actions to build a codebook from")
    return ActionCodebook(list(seen))


class ActionEncoder(nn.Module):
    """Learned part of the action representation, width ``d_model``."""

    def __init__(self, d_model: int, utterance_dim: int = UTTERANCE_DIM,
                 expression_vocab: int = EXPRESSION_VOCAB, motion_vocab: int = MOTION_VOCAB,
                 modality_dim: int = MODALITY_DIM):
        super().__init__()
        self.d_model = d_model
        self.utterance_dim = utterance_dim
        self.expression = nn.Embedding(expression_vocab, modality_dim)
        self.motion = nn.Embedding(motion_vocab, modality_dim)
        self.ffn = nn.Sequential(
            nn.Linear(utterance_dim + 2 * modality_dim, 2 * d_model),
            nn.GELU(),
            nn.Linear(2 * d_model, d_model),
        )
        self.null = nn.Parameter(torch.randn(d_model) * 0.1)

    def ffn_input(self, utterance: torch.Tensor, expression_ids: torch.Tensor, motion_ids: torch.Tensor) -> torch.Tensor:
        if bool((expression_ids < 0).any()) or bool((expression_ids >= self.expression.num_embeddings).any()):
            raise InputError("expression id outside vocabulary")
        if bool((motion_ids < 0).any()) or bool((motion_ids >= self.motion.num_embeddings).any()):
            raise InputError("motion id outside vocabulary")
        return torch.cat([utterance, self.expression(expression_ids), self.motion(motion_ids)], dim=-1)

    def forward(self, utterance: torch.Tensor, expression_ids: torch.Tensor, motion_ids: torch.Tensor) -> torch.Tensor:
        """Rows for the K real actions followed by the NULL row."""
        phi = self.ffn(self.ffn_input(utterance, expression_ids, motion_ids))
        return torch.cat([phi, self.null.unsqueeze(0)], dim=0)


@dataclass
class CodebookInputs:
    """Fixed (non-learned) encoder inputs for every real action."""

    utterance: torch.Tensor  # (K, E)
    expression_ids: torch.Tensor  # (K,)
    motion_ids: torch.Tensor  # (K,)

    @classmethod
    def build(cls, codebook: ActionCodebook, embedder: UtteranceEmbedder, dtype=torch.float32) -> "CodebookInputs":
        utt = np.stack([embedder.embed(a.utterance) for a in codebook.actions])
        if utt.shape[1] != embedder.dim:
            raise InputError(f"embedder produced width {utt.shape[1]}, declared {embedder.dim}")
        return cls(
            torch.as_tensor(utt, dtype=dtype),
            torch.tensor([a.expression_id for a in codebook.actions]),
            torch.tensor([a.motion_id for a in codebook.actions]),
        )

    def to(self, dtype) -> "CodebookInputs":
        return CodebookInputs(self.utterance.to(dtype), self.expression_ids, self.motion_ids)


def encode_action(action: MultiModalAction, embedder: UtteranceEmbedder, encoder: ActionEncoder) -> torch.Tensor:
    dtype = encoder.null.dtype
    utt = torch.as_tensor(embedder.embed(action.utterance), dtype=dtype).unsqueeze(0)
    phi = encoder(utt, torch.tensor([action.expression_id]), torch.tensor([action.motion_id]))
    return phi[0]


def encode_all(codebook: ActionCodebook, embedder: UtteranceEmbedder, encoder: ActionEncoder) -> torch.Tensor:
    inputs = CodebookInputs.build(codebook, embedder, encoder.null.dtype)
    return encoder(inputs.utterance, inputs.expression_ids, inputs.motion_ids)
