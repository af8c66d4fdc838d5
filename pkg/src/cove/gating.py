"""Mixture weights over experts: softmax gate, sparse top-k gate, uniform gate."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
from torch import nn


class GateWeights(NamedTuple):
    """Gate output along the last axis: weights on the simplex and the active mask."""

    weights: torch.Tensor
    active: torch.Tensor

    @property
    def active_set(self) -> list[int]:
        if self.active.dim() != 1:
            raise ValueError("active_set is defined for a single query; index the batch first")
        return torch.nonzero(self.active).flatten().tolist()


def _masked_softmax(z: torch.Tensor, active: torch.Tensor) -> torch.Tensor:
    # Inactive entries are left out of the normalisation rather than set to -inf.
    top = torch.where(active, z, torch.finfo(z.dtype).min).amax(dim=-1, keepdim=True)
    e = torch.where(active, torch.exp(z - top), torch.zeros((), dtype=z.dtype))
    return e / e.sum(dim=-1, keepdim=True)


def softmax(z) -> torch.Tensor:
    """Max-shifted softmax over the last axis."""
    z = torch.as_tensor(z, dtype=torch.get_default_dtype() if not torch.is_tensor(z) else None)
    if z.shape[-1] < 1:
        raise ValueError("softmax needs at least one logit")
    return _masked_softmax(z, torch.ones_like(z, dtype=torch.bool))


def topk_mask(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean mask of the k largest logits; ties go to the lower index."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    mask = torch.zeros(logits.shape, dtype=torch.bool, device=logits.device)
    return mask.scatter(-1, order, True)


def topk_gate(logits, k: int) -> GateWeights:
    logits = torch.as_tensor(logits, dtype=torch.get_default_dtype() if not torch.is_tensor(logits) else None)
    mask = topk_mask(logits, k)
    return GateWeights(_masked_softmax(logits, mask), mask)


def uniform_gate(n: int, batch_shape: Sequence[int] = (), dtype=None) -> GateWeights:
    if n < 1:
        raise ValueError("need at least one expert")
    w = torch.full((*batch_shape, n), 1.0 / n, dtype=dtype or torch.get_default_dtype())
    return GateWeights(w, torch.ones(w.shape, dtype=torch.bool))


def gate_logits(gate_inputs: Sequence[torch.Tensor], w_gate: torch.Tensor) -> torch.Tensor:
    """Linear map of the roster-ordered concatenation of gate inputs."""
    n = w_gate.shape[1]
    if len(gate_inputs) != n:
        raise ValueError(f"expected {n} gate inputs, got {len(gate_inputs)}")
    x = torch.cat([torch.as_tensor(e, dtype=w_gate.dtype) for e in gate_inputs], dim=-1)
    if x.shape[-1] != w_gate.shape[0]:
        raise ValueError(f"concatenated gate input has width {x.shape[-1]}, W_g expects {w_gate.shape[0]}")
    return x @ w_gate


def gate_forward(gate_inputs: Sequence[torch.Tensor], w_gate: torch.Tensor) -> GateWeights:
    logits = gate_logits(gate_inputs, w_gate)
    return GateWeights(softmax(logits), torch.ones(logits.shape, dtype=torch.bool))


class Gate(nn.Module):
    """Trainable ``W_g`` of shape (n*d, n)."""

    def __init__(self, num_experts: int, dim: int):
        super().__init__()
        self.num_experts = num_experts
        self.dim = dim
        bound = 0.1 / dim ** 0.5
        self.weight = nn.Parameter(torch.empty(num_experts * dim, num_experts).uniform_(-bound, bound))

    def logits(self, gate_inputs: Sequence[torch.Tensor]) -> torch.Tensor:
        return gate_logits(gate_inputs, self.weight)

    def forward(self, gate_inputs: Sequence[torch.Tensor], k: int | None = None) -> GateWeights:
        z = self.logits(gate_inputs)
        if k is None:
            return GateWeights(softmax(z), torch.ones(z.shape, dtype=torch.bool))
        return topk_gate(z, k)
