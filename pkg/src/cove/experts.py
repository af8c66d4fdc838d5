"""Expert models exposing (hidden, item embeddings, item biases, gate input).

Long-term experts (BPR, FPMC) read the user identity; short-term experts
(GRU, ATTN) read only the current session, truncated to its last
``max_len`` items.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_MAX_LEN = 50


class ExpertKind(str, Enum):
    BPR = "BPR"
    FPMC = "FPMC"
    GRU = "GRU"
    ATTN = "ATTN"

    @property
    def term(self) -> str:
        return "short" if self in (ExpertKind.GRU, ExpertKind.ATTN) else "long"

    @property
    def tag(self) -> int:
        return list(ExpertKind).index(self)

    @classmethod
    def from_tag(cls, tag: int) -> "ExpertKind":
        return list(cls)[tag]

    @classmethod
    def parse(cls, name: str) -> "ExpertKind":
        key = name.strip().upper()
        aliases = {"GRU4REC": "GRU", "SAS": "ATTN", "SASREC": "ATTN", "MF": "BPR"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown expert kind {name!r}; choose from {[k.value for k in cls]}") from None


class ExpertOutput(NamedTuple):
    hidden: torch.Tensor
    gate_input: torch.Tensor


@dataclass
class QueryBatch:
    """A batch of (user, context) queries.

    ``items`` holds the current session, left-padded to a common width, so the
    most recent item is always ``items[:, -1]``. ``users`` uses -1 for users
    unknown to the model.
    """

    users: torch.Tensor
    items: torch.Tensor
    mask: torch.Tensor

    def __len__(self):
        return self.users.shape[0]

    @property
    def last_items(self) -> torch.Tensor:
        return self.items[:, -1]


def make_batch(queries: Sequence[tuple[int, Sequence[Sequence[int]]]], max_len: int = DEFAULT_MAX_LEN) -> QueryBatch:
    """Encode ``(user, sessions)`` queries; only the final session is kept."""
    if not queries:
        raise ValueError("empty batch")
    currents = []
    for user, context in queries:
        if not context or not len(context[-1]):
            raise ValueError(f"user {user}: current session is empty")
        currents.append(list(context[-1])[-max_len:])
    width = max(len(c) for c in currents)
    items = torch.zeros(len(currents), width, dtype=torch.long)
    mask = torch.zeros(len(currents), width, dtype=torch.bool)
    for row, cur in enumerate(currents):
        items[row, width - len(cur):] = torch.as_tensor(cur, dtype=torch.long)
        mask[row, width - len(cur):] = True
    users = torch.as_tensor([u for u, _ in queries], dtype=torch.long)
    return QueryBatch(users, items, mask)


def _uniform(shape, dim: int) -> nn.Parameter:
    bound = 0.1 / math.sqrt(dim)
    return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))


def _glorot(fan_in: int, fan_out: int) -> nn.Parameter:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return nn.Parameter(torch.empty(fan_in, fan_out).uniform_(-bound, bound))


class Expert(nn.Module):
    kind: ExpertKind

    def __init__(self, num_items: int, dim: int):
        super().__init__()
        self.num_items = num_items
        self.dim = dim
        self.item_embeddings = _uniform((num_items, dim), dim)
        self.item_biases = nn.Parameter(torch.zeros(num_items))

    def hidden(self, batch: QueryBatch) -> torch.Tensor:
        raise NotImplementedError

    def gate_input(self, batch: QueryBatch) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, batch: QueryBatch) -> ExpertOutput:
        return ExpertOutput(self.hidden(batch), self.gate_input(batch))

    def scores(self, hidden: torch.Tensor, items: torch.Tensor | None = None) -> torch.Tensor:
        """``hidden @ Psi[items].T + beta[items]``; all items when ``items`` is None."""
        if items is None:
            return hidden @ self.item_embeddings.T + self.item_biases
        return hidden @ self.item_embeddings[items].T + self.item_biases[items]


class _UserExpert(Expert):
    def __init__(self, num_users: int, num_items: int, dim: int, gate_input_mode: str = "hidden"):
        super().__init__(num_items, dim)
        if gate_input_mode not in ("hidden", "last_item"):
            raise ValueError(f"gate_input_mode must be 'hidden' or 'last_item', got {gate_input_mode!r}")
        self.num_users = num_users
        self.gate_input_mode = gate_input_mode
        self.user_embeddings = _uniform((num_users, dim), dim)

    def user_vectors(self, users: torch.Tensor) -> torch.Tensor:
        known = (users >= 0) & (users < self.num_users)
        if bool(known.all()):
            return self.user_embeddings[users]
        # cold users fall back to the mean user embedding
        fallback = self.user_embeddings.mean(dim=0).expand(len(users), -1)
        rows = self.user_embeddings[users.clamp(0, self.num_users - 1)]
        return torch.where(known[:, None], rows, fallback)

    def gate_input(self, batch: QueryBatch) -> torch.Tensor:
        if self.gate_input_mode == "last_item":
            return self.item_embeddings[batch.last_items]
        return self.hidden(batch)


class BPRExpert(_UserExpert):
    """Matrix factorisation: the hidden state is the user's embedding."""

    kind = ExpertKind.BPR

    def hidden(self, batch: QueryBatch) -> torch.Tensor:
        return self.user_vectors(batch.users)


class FPMCExpert(_UserExpert):
    """User embedding plus the transition embedding of the most recent item."""

    kind = ExpertKind.FPMC

    def __init__(self, num_users: int, num_items: int, dim: int, gate_input_mode: str = "hidden"):
        super().__init__(num_users, num_items, dim, gate_input_mode)
        self.transition_embeddings = _uniform((num_items, dim), dim)

    def hidden(self, batch: QueryBatch) -> torch.Tensor:
        return self.user_vectors(batch.users) + self.transition_embeddings[batch.last_items]


class _SessionExpert(Expert):
    def __init__(self, num_items: int, dim: int, max_len: int = DEFAULT_MAX_LEN):
        super().__init__(num_items, dim)
        self.max_len = max_len
        self.input_embeddings = _uniform((num_items, dim), dim)

    def _window(self, batch: QueryBatch) -> tuple[torch.Tensor, torch.Tensor]:
        return batch.items[:, -self.max_len:], batch.mask[:, -self.max_len:]

    def gate_input(self, batch: QueryBatch) -> torch.Tensor:
        return self.input_embeddings[batch.last_items]


class GRUExpert(_SessionExpert):
    """Gated recurrent encoder over the current session, from a zero state.

    z = sig(x W_z + h U_z + b_z), r = sig(x W_r + h U_r + b_r),
    c = tanh(x W_c + (r * h) U_c + b_c), h' = (1 - z) * h + z * c.
    Padded steps leave the state unchanged.
    """

    kind = ExpertKind.GRU

    def __init__(self, num_items: int, dim: int, max_len: int = DEFAULT_MAX_LEN):
        super().__init__(num_items, dim, max_len)
        self.w_input = _glorot(dim, 3 * dim)
        self.w_hidden = _glorot(dim, 3 * dim)
        self.b_gates = nn.Parameter(torch.zeros(3 * dim))

    def hidden(self, batch: QueryBatch) -> torch.Tensor:
        items, mask = self._window(batch)
        d = self.dim
        x = self.input_embeddings[items] @ self.w_input + self.b_gates
        u_zr, u_c = self.w_hidden[:, : 2 * d], self.w_hidden[:, 2 * d:]
        h = x.new_zeros(len(batch), d)
        for t in range(items.shape[1]):
            xz, xr, xc = x[:, t, :d], x[:, t, d: 2 * d], x[:, t, 2 * d:]
            hzr = h @ u_zr
            z = torch.sigmoid(xz + hzr[:, :d])
            r = torch.sigmoid(xr + hzr[:, d:])
            c = torch.tanh(xc + (r * h) @ u_c)
            step = (1 - z) * h + z * c
            h = torch.where(mask[:, t, None], step, h)
        return h


class AttentionExpert(_SessionExpert):
    """One causal self-attention block, one head, learned positions.

    Only the final position is needed, and it may attend to every item of the
    (truncated) session, so the block is evaluated at that position alone:
    a = softmax(q k^T / sqrt(d)) v, y = a + x_last, h = y + FFN(y).
    """

    kind = ExpertKind.ATTN

    def __init__(self, num_items: int, dim: int, max_len: int = DEFAULT_MAX_LEN):
        super().__init__(num_items, dim, max_len)
        self.position_embeddings = _uniform((max_len, dim), dim)
        self.w_query = _glorot(dim, dim)
        self.w_key = _glorot(dim, dim)
        self.w_value = _glorot(dim, dim)
        self.w_ffn1 = _glorot(dim, dim)
        self.b_ffn1 = nn.Parameter(torch.zeros(dim))
        self.w_ffn2 = _glorot(dim, dim)
        self.b_ffn2 = nn.Parameter(torch.zeros(dim))

    def hidden(self, batch: QueryBatch) -> torch.Tensor:
        items, mask = self._window(batch)
        width = items.shape[1]
        # position 0 is the first item of the truncated session
        lengths = mask.sum(dim=1, keepdim=True)
        pos = (torch.arange(width) - (width - lengths)).clamp(min=0)
        x = self.input_embeddings[items] + self.position_embeddings[pos]
        x_last = x[:, -1]
        q = x_last @ self.w_query
        k = x @ self.w_key
        v = x @ self.w_value
        logits = torch.einsum("bd,bld->bl", q, k) / math.sqrt(self.dim)
        logits = logits.masked_fill(~mask, float("-inf"))
        att = torch.softmax(logits, dim=-1)
        y = torch.einsum("bl,bld->bd", att, v) + x_last
        return y + F.gelu(y @ self.w_ffn1 + self.b_ffn1) @ self.w_ffn2 + self.b_ffn2


def make_expert(
    kind: ExpertKind | str,
    num_users: int,
    num_items: int,
    dim: int,
    max_len: int = DEFAULT_MAX_LEN,
    gate_input_mode: str = "hidden",
) -> Expert:
    kind = ExpertKind.parse(kind) if isinstance(kind, str) else kind
    if kind is ExpertKind.BPR:
        return BPRExpert(num_users, num_items, dim, gate_input_mode)
    if kind is ExpertKind.FPMC:
        return FPMCExpert(num_users, num_items, dim, gate_input_mode)
    if kind is ExpertKind.GRU:
        return GRUExpert(num_items, dim, max_len)
    return AttentionExpert(num_items, dim, max_len)


def expert_scores(expert: Expert, batch: QueryBatch, items: torch.Tensor | None = None) -> torch.Tensor:
    """Standalone full-catalog (or candidate) scores of a single expert."""
    return expert.scores(expert.hidden(batch), items)
