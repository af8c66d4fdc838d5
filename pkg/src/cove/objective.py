"""BPR and BPR-max ranking losses and their gradients."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

LOSSES = ("bpr", "bpr-max")
_LOG_FLOOR = math.log(1e-12)


def _prepare(positive, negatives, mask):
    pos = torch.as_tensor(positive)
    neg = torch.as_tensor(negatives)
    if not pos.is_floating_point():
        pos = pos.to(torch.get_default_dtype())
    neg = neg.to(pos.dtype)
    if pos.dim() == 0:
        pos, neg = pos[None], neg.reshape(1, -1)
    if neg.shape[-1] < 1:
        raise ValueError("at least one negative per instance is required")
    if mask is None:
        mask = torch.ones(neg.shape, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    # instances left without any negative drop out of the loss
    keep = mask.any(dim=-1)
    return pos[keep], neg[keep], mask[keep]


def bpr_loss(positive, negatives, mask=None, reduction: str = "mean") -> torch.Tensor:
    """-log sigmoid(r_i - r_j) averaged over all valid (positive, negative) pairs.

    ``positive`` is (B,), ``negatives`` (B, N_I); ``mask`` marks valid pairs.
    With ``reduction="sum"`` each instance is averaged over its own negatives
    and the instance losses are summed.
    """
    pos, neg, mask = _prepare(positive, negatives, mask)
    pair = -F.logsigmoid(pos[:, None] - neg) * mask
    if reduction == "sum":
        return (pair.sum(dim=-1) / mask.sum(dim=-1)).sum()
    return pair.sum() / mask.sum()


def bpr_max_loss(positive, negatives, mask=None, reduction: str = "mean") -> torch.Tensor:
    """Mean over instances of -log sum_j s_j sigmoid(r_i - r_j), s = softmax(r_neg).

    Evaluated in log space; the inner sum is floored at 1e-12.
    """
    pos, neg, mask = _prepare(positive, negatives, mask)
    neg_inf = torch.tensor(float("-inf"), dtype=neg.dtype)
    log_norm = torch.logsumexp(neg.masked_fill(~mask, float("-inf")), dim=-1)
    weighted = torch.where(mask, neg + F.logsigmoid(pos[:, None] - neg), neg_inf)
    inner = torch.logsumexp(weighted, dim=-1) - log_norm
    per_instance = -inner.clamp(min=_LOG_FLOOR)
    return per_instance.sum() if reduction == "sum" else per_instance.mean()


def ranking_loss(kind: str, positive, negatives, mask=None, reduction: str = "mean") -> torch.Tensor:
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if kind == "bpr":
        return bpr_loss(positive, negatives, mask, reduction)
    if kind == "bpr-max":
        return bpr_max_loss(positive, negatives, mask, reduction)
    raise ValueError(f"loss must be one of {LOSSES}, got {kind!r}")


def candidate_loss(model, batch, positives: torch.Tensor, extras: torch.Tensor, kind: str,
                   reduction: str = "mean") -> torch.Tensor:
    """Loss over in-batch negatives plus shared uniform extras.

    Candidates are ``[positives, extras]``; any candidate equal to an
    instance's own positive is masked out for that instance.
    """
    candidates = torch.cat([positives, extras])
    scores = model.score(batch, items=candidates)
    rows = torch.arange(len(positives))
    pos_scores = scores[rows, rows]
    mask = candidates[None, :] != positives[:, None]
    return ranking_loss(kind, pos_scores, scores, mask, reduction)


def loss_gradients(model, batch, positives, extras, kind: str) -> dict[str, torch.Tensor]:
    """Gradient of the candidate loss w.r.t. every trainable block, keyed by parameter name."""
    params = dict(model.named_parameters())
    loss = candidate_loss(model, batch, torch.as_tensor(positives), torch.as_tensor(extras, dtype=torch.long), kind)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {name: (torch.zeros_like(p) if g is None else g) for (name, p), g in zip(params.items(), grads)}
