"""Hidden-level (CoVE_h) and score-level (CoVE_s) fusion of expert outputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .experts import DEFAULT_MAX_LEN, Expert, ExpertKind, QueryBatch, make_expert
from .gating import Gate, GateWeights, topk_gate, uniform_gate

VARIANTS = ("hidden", "score")
GATE_MODES = ("learned", "uniform")


def _check_weights(weights: torch.Tensor, n: int) -> None:
    if weights.shape[-1] != n:
        raise ValueError(f"{n} experts but {weights.shape[-1]} gate weights")


@dataclass
class FusedRepresentation:
    """Gate-weighted hidden state; item embeddings and biases are fused on demand.

    ``weights`` is (B, n). Experts whose weight column is zero for the whole
    batch are never touched.
    """

    h: torch.Tensor
    weights: torch.Tensor
    experts: Sequence[Expert]

    def _active(self) -> list[int]:
        return [i for i in range(len(self.experts)) if bool((self.weights[:, i] != 0).any())]

    def item_embedding(self, items: torch.Tensor) -> torch.Tensor:
        """Fused Psi for ``items``: shape (B, len(items), d)."""
        return sum(self.weights[:, i, None, None] * self.experts[i].item_embeddings[items] for i in self._active())

    def item_bias(self, items: torch.Tensor) -> torch.Tensor:
        return sum(self.weights[:, i, None] * self.experts[i].item_biases[items] for i in self._active())


def fuse_hidden(hiddens: Sequence[torch.Tensor | None], experts: Sequence[Expert], weights: torch.Tensor) -> FusedRepresentation:
    """h(u) = sum_i g_i h_i; ``hiddens[i]`` may be None for a zero-weight expert."""
    _check_weights(weights, len(experts))
    if len(hiddens) != len(experts):
        raise ValueError("one hidden state per expert required")
    dims = {e.dim for e in experts}
    if len(dims) != 1:
        raise ValueError(f"hidden fusion needs a shared dimension, got {sorted(dims)}")
    fused = FusedRepresentation(None, weights, experts)
    active = fused._active()
    if any(hiddens[i] is None for i in active):
        raise ValueError("missing hidden state for an active expert")
    fused.h = sum(weights[:, i, None] * hiddens[i] for i in active)
    return fused


def score_hidden(fused: FusedRepresentation, items: torch.Tensor | None = None) -> torch.Tensor:
    """r[u, p] = h(u) . Psi(p) + beta(p), without materialising a per-query Psi."""
    total = None
    for i in fused._active():
        e = fused.experts[i]
        emb = e.item_embeddings if items is None else e.item_embeddings[items]
        bias = e.item_biases if items is None else e.item_biases[items]
        g = fused.weights[:, i, None]
        term = g * (fused.h @ emb.T) + g * bias
        total = term if total is None else total + term
    return total


def fuse_scores(per_expert_scores: Sequence[torch.Tensor | None], weights: torch.Tensor) -> torch.Tensor:
    """r = sum_i g_i r_i; entries for zero-weight experts may be None."""
    _check_weights(weights, len(per_expert_scores))
    total = None
    for i, r in enumerate(per_expert_scores):
        if not bool((weights[..., i] != 0).any()):
            continue
        if r is None:
            raise ValueError(f"missing scores for active expert {i}")
        if total is not None and r.shape != total.shape:
            raise ValueError(f"score vectors differ in shape: {tuple(r.shape)} vs {tuple(total.shape)}")
        term = weights[..., i, None] * r
        total = term if total is None else total + term
    return total


class CoVEModel(nn.Module):
    """Expert roster, gate ``W_g`` and fusion variant."""

    def __init__(
        self,
        experts: Sequence[Expert],
        variant: str = "score",
        gate_mode: str = "learned",
    ):
        super().__init__()
        if not experts:
            raise ValueError("roster must contain at least one expert")
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {gate_mode!r}")
        dims = {e.dim for e in experts}
        if len(dims) != 1:
            raise ValueError(f"experts must share the hidden dimension, got {sorted(dims)}")
        self.experts = nn.ModuleList(experts)
        self.variant = variant
        self.gate_mode = gate_mode
        self.dim = dims.pop()
        self.num_items = experts[0].num_items
        self.gate = Gate(len(experts), self.dim)

    @classmethod
    def build(
        cls,
        roster: Sequence[ExpertKind | str],
        num_users: int,
        num_items: int,
        dim: int,
        variant: str = "score",
        gate_mode: str = "learned",
        max_len: int = DEFAULT_MAX_LEN,
        gate_input_mode: str = "hidden",
    ) -> "CoVEModel":
        experts = [make_expert(k, num_users, num_items, dim, max_len, gate_input_mode) for k in roster]
        return cls(experts, variant, gate_mode)

    @property
    def roster(self) -> list[ExpertKind]:
        return [e.kind for e in self.experts]

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def gate_weights(self, batch: QueryBatch, k: int | None = None) -> GateWeights:
        if self.gate_mode == "uniform":
            g = uniform_gate(self.num_experts, (len(batch),), dtype=self.gate.weight.dtype)
            return g if k is None else topk_gate(g.weights, k)
        inputs = [e.gate_input(batch) for e in self.experts]
        return self.gate(inputs, k)

    def score(
        self,
        batch: QueryBatch,
        items: torch.Tensor | None = None,
        k: int | None = None,
        weights: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Fused scores, shape (B, N) or (B, len(items)).

        ``k`` switches to the sparse top-k gate; ``weights`` (n,) or (B, n)
        overrides the gate entirely.
        """
        if weights is None:
            weights = self.gate_weights(batch, k).weights
        else:
            weights = torch.as_tensor(weights, dtype=self.gate.weight.dtype).expand(len(batch), self.num_experts)
        active = [i for i in range(self.num_experts) if bool((weights[:, i] != 0).any())]
        hiddens = [self.experts[i].hidden(batch) if i in active else None for i in range(self.num_experts)]
        if self.variant == "hidden":
            return score_hidden(fuse_hidden(hiddens, list(self.experts), weights), items)
        per_expert = [self.experts[i].scores(hiddens[i], items) if i in active else None
                      for i in range(self.num_experts)]
        return fuse_scores(per_expert, weights)

    def forward(self, batch: QueryBatch, items: torch.Tensor | None = None) -> torch.Tensor:
        return self.score(batch, items)


def infer(model: CoVEModel, batch: QueryBatch, k: int | None = None) -> torch.Tensor:
    """Full-catalog scores under the sparse top-k gate (continuous gate when k is None)."""
    with torch.no_grad():
        return model.score(batch, k=k)
