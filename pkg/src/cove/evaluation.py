"""Full-catalog ranking metrics, paired t-tests and the long-term preference bit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import stats

from .data import SplitDataset
from .errors import DataError
from .experts import make_batch

DEFAULT_KS = (10, 20)


@dataclass(frozen=True)
class RankResult:
    rank: int
    num_items: int

    def __post_init__(self):
        if not 1 <= self.rank <= self.num_items:
            raise ValueError(f"rank {self.rank} outside [1, {self.num_items}]")


@dataclass
class MetricsReport:
    ranks: np.ndarray
    num_items: int
    ks: tuple[int, ...]
    aggregates: dict[str, float]
    users: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.ranks)

    def per_interaction(self, metric: str) -> np.ndarray:
        return metric_terms(self.ranks, self.num_items, metric)

    def to_dict(self, with_ranks: bool = True) -> dict:
        out = {"count": self.count, "num_items": self.num_items, "ks": list(self.ks),
               "metrics": dict(self.aggregates), "meta": dict(self.meta)}
        if with_ranks:
            out["ranks"] = self.ranks.tolist()
            if self.users is not None:
                out["users"] = self.users.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        users = np.asarray(d["users"], dtype=np.int64) if "users" in d else None
        return cls(np.asarray(d["ranks"], dtype=np.int64), int(d["num_items"]), tuple(d["ks"]),
                   dict(d["metrics"]), users, dict(d.get("meta", {})))


def rank_ground_truth(scores, truth: int) -> RankResult:
    """1-based rank of ``truth``; ties take the mean tied position, rounded half up."""
    scores = torch.as_tensor(scores)
    n = scores.shape[-1]
    if not 0 <= truth < n:
        raise ValueError(f"truth index {truth} outside catalog of {n}")
    return RankResult(int(_ranks(scores[None], torch.tensor([truth]))[0]), n)


def _ranks(scores: torch.Tensor, truths: torch.Tensor) -> torch.Tensor:
    target = scores.gather(1, truths[:, None])
    greater = (scores > target).sum(dim=1)
    equal = (scores == target).sum(dim=1)
    # tied block occupies positions greater+1 .. greater+equal
    return greater + (equal + 2) // 2


def metric_terms(ranks, num_items: int, metric: str) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.float64)
    if metric == "MRR":
        return 1.0 / r
    if metric == "AUC":
        return (num_items - r) / (num_items - 1) if num_items > 1 else np.ones_like(r)
    name, _, k = metric.partition("@")
    k = int(k)
    if name == "NDCG":
        return np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    if name == "Recall":
        return (r <= k).astype(np.float64)
    raise ValueError(f"unknown metric {metric!r}")


def metric_names(ks: Iterable[int] = DEFAULT_KS) -> list[str]:
    ks = list(ks)
    return ["AUC", "MRR"] + [f"NDCG@{k}" for k in ks] + [f"Recall@{k}" for k in ks]


def compute_metrics(ranks: Sequence[RankResult] | np.ndarray, ks: Iterable[int] = DEFAULT_KS,
                    num_items: int | None = None, users=None) -> MetricsReport:
    if isinstance(ranks, np.ndarray) or (len(ranks) and not isinstance(ranks[0], RankResult)):
        if num_items is None:
            raise ValueError("num_items is required with raw ranks")
        arr = np.asarray(ranks, dtype=np.int64)
    else:
        if not ranks:
            raise ValueError("no ranks to aggregate")
        sizes = {r.num_items for r in ranks}
        if len(sizes) != 1:
            raise ValueError("rank results come from different catalogs")
        num_items = sizes.pop()
        arr = np.array([r.rank for r in ranks], dtype=np.int64)
    if arr.size == 0:
        raise ValueError("no ranks to aggregate")
    ks = tuple(ks)
    agg = {m: float(metric_terms(arr, num_items, m).mean()) for m in metric_names(ks)}
    return MetricsReport(arr, num_items, ks, agg, None if users is None else np.asarray(users))


def evaluation_queries(split: SplitDataset, mode: str, last_item_only: bool = False):
    """Yield (user, context, truth) for every prefix of every held-out session."""
    train = split.train
    for u, held in enumerate(split.held_out(mode)):
        history = tuple(s.items for s in train.sessions_by_user[u])
        positions = [len(held.items) - 1] if last_item_only else range(1, len(held.items))
        for k in positions:
            if k < 1:
                continue
            yield u, history + (held.items[:k],), held.items[k]


def evaluate(model, split: SplitDataset, mode: str = "test", k_gate: int | None = None,
             ks: Iterable[int] = DEFAULT_KS, weights=None, batch_size: int = 256,
             last_item_only: bool = False, max_len: int | None = None) -> MetricsReport:
    """Rank the true next item against the whole catalog for each held-out prefix.

    ``model`` needs ``score(batch, k=..., weights=...)`` and ``num_items``.
    """
    if model.num_items != split.train.num_items:
        raise DataError(f"model scores {model.num_items} items, dataset has {split.train.num_items}")
    queries = list(evaluation_queries(split, mode, last_item_only))
    if not queries:
        raise DataError(f"no {mode} interactions to evaluate")
    if max_len is None:
        max_len = max((e.max_len for e in getattr(model, "experts", []) if hasattr(e, "max_len")), default=50)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    ranks, users = [], []
    with torch.no_grad():
        for start in range(0, len(queries), batch_size):
            chunk = queries[start: start + batch_size]
            batch = make_batch([(u, ctx) for u, ctx, _ in chunk], max_len)
            scores = model.score(batch, k=k_gate, weights=weights)
            truths = torch.as_tensor([t for _, _, t in chunk])
            ranks.append(_ranks(scores, truths).numpy())
            users.extend(u for u, _, _ in chunk)
    if was_training:
        model.train()
    report = compute_metrics(np.concatenate(ranks), ks, split.train.num_items, users)
    report.meta.update(mode=mode, k_gate=k_gate, last_item_only=last_item_only)
    return report


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """One-tailed paired t-test of mean(a - b) > 0."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d and of equal length")
    if len(a) < 2:
        raise ValueError("need at least two paired observations")
    diff = a - b
    if np.ptp(diff) == 0:
        mean = float(diff.mean())
        return TTestResult(math.copysign(math.inf, mean) if mean else 0.0, 0.0 if mean > 0 else 1.0, True)
    res = stats.ttest_rel(a, b, alternative="greater")
    return TTestResult(float(res.statistic), float(res.pvalue))


@dataclass
class PreferenceBits:
    bits: np.ndarray
    users: np.ndarray
    user_means: dict[int, float]
    histogram: list[tuple[float, int]]

    @property
    def mean(self) -> float:
        return float(self.bits.mean())

    @property
    def user_mean(self) -> float:
        return float(np.mean(list(self.user_means.values())))


def preference_histogram(values, bins: int = 10) -> list[tuple[float, int]]:
    """Counts over [0, 0.1), ..., [0.9, 1.0]; the last bin is closed."""
    v = np.asarray(values, dtype=np.float64)
    # small epsilon keeps e.g. 0.3 (stored as 0.2999...) in its nominal bin
    idx = np.minimum(np.floor(v * bins + 1e-9).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return [(round(i / bins, 10), int(c)) for i, c in enumerate(counts)]


def preference_bits(long_ranks, short_ranks, users) -> PreferenceBits:
    """1 where the long-term model ranks the truth higher, 0 where the short-term one does, 0.5 on ties."""
    lr, sr = np.asarray(long_ranks), np.asarray(short_ranks)
    users = np.asarray(users)
    if not (lr.shape == sr.shape == users.shape) or lr.ndim != 1:
        raise ValueError("rank series must be paired over the same interactions")
    if lr.size == 0:
        raise DataError("no test interactions to analyse")
    bits = np.where(lr < sr, 1.0, np.where(lr > sr, 0.0, 0.5))
    means = {int(u): float(bits[users == u].mean()) for u in np.unique(users)}
    return PreferenceBits(bits, users, means, preference_histogram(list(means.values())))
