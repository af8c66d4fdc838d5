"""Joint SGD training of all experts and the gate, with validation-based selection."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .data import Dataset, SplitDataset
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import evaluate
from .experts import DEFAULT_MAX_LEN, ExpertKind, make_batch
from .fusion import GATE_MODES, VARIANTS, CoVEModel
from .objective import LOSSES, candidate_loss

logger = logging.getLogger(__name__)

LR_RANGE = (0.005, 0.1)
BATCH_RANGE = (32, 512)


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    loss: str = "bpr-max"
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 50
    negatives_per_positive: int = 32
    seed: int = 0
    experts: tuple[ExpertKind, ...] = (ExpertKind.GRU, ExpertKind.ATTN, ExpertKind.BPR, ExpertKind.FPMC)
    variant: str = "score"
    init_from: tuple[str, ...] = ()
    gate_mode: str = "learned"
    gate_learning_rate: float | None = None
    gate_input_mode: str = "hidden"
    max_len: int = DEFAULT_MAX_LEN
    patience: int = 10
    eval_k_gate: int | None = None
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(
            ExpertKind.parse(k) if isinstance(k, str) else k for k in self.experts))
        object.__setattr__(self, "init_from", tuple(self.init_from))

    def validate(self) -> "TrainConfig":
        lo, hi = LR_RANGE
        if not lo <= self.learning_rate <= hi:
            raise ConfigError(f"learning_rate {self.learning_rate} outside [{lo}, {hi}]")
        if self.gate_learning_rate is not None and not lo <= self.gate_learning_rate <= hi:
            raise ConfigError(f"gate_learning_rate {self.gate_learning_rate} outside [{lo}, {hi}]")
        lo, hi = BATCH_RANGE
        if not lo <= self.batch_size <= hi:
            raise ConfigError(f"batch_size {self.batch_size} outside [{lo}, {hi}]")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.gate_input_mode not in ("hidden", "last_item"):
            raise ConfigError(f"gate_input_mode must be 'hidden' or 'last_item', got {self.gate_input_mode!r}")
        if not self.experts:
            raise ConfigError("expert roster is empty")
        for name, value in (("dim", self.dim), ("max_len", self.max_len), ("patience", self.patience)):
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.epochs < 0 or self.negatives_per_positive < 0:
            raise ConfigError("epochs and negatives_per_positive must be non-negative")
        if self.eval_k_gate is not None and not 1 <= self.eval_k_gate <= len(self.experts):
            raise ConfigError(f"eval_k_gate must lie in [1, {len(self.experts)}]")
        return self


class Instance(NamedTuple):
    user: int
    session: int
    prefix: int
    target: int


def make_training_instances(train: Dataset, seed: int | None = None) -> list[Instance]:
    """One instance per next-item position of every training session.

    The context of ``Instance(u, t, k, p)`` is the user's sessions before
    ``t`` plus the first ``k`` items of session ``t``; ``p`` is item ``k``.
    With a seed the list is shuffled deterministically.
    """
    out = [Instance(u, t, k, s.items[k])
           for u, sessions in enumerate(train.sessions_by_user)
           for t, s in enumerate(sessions)
           for k in range(1, len(s.items))]
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(out))
        out = [out[i] for i in order]
    return out


def instance_context(train: Dataset, inst: Instance) -> tuple[tuple[int, ...], ...]:
    sessions = train.sessions_by_user[inst.user]
    return tuple(s.items for s in sessions[: inst.session]) + (sessions[inst.session].items[: inst.prefix],)


def sample_negatives(positive: int, batch_items: Sequence[int], extra: int, num_items: int,
                     rng: np.random.Generator) -> list[int]:
    """Other in-batch positives plus ``extra`` uniform catalog draws, never ``positive``."""
    if num_items < 2:
        raise DataError("negative sampling needs a catalog of at least two items")
    negs = [p for p in batch_items if p != positive]
    draws = rng.integers(0, num_items - 1, size=extra)
    negs.extend(int(d) + (d >= positive) for d in draws)
    return negs


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    validation_mrr: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    model: CoVEModel
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_validation_mrr: float = 0.0
    config: TrainConfig | None = None

    def log_text(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.log)


def build_model(config: TrainConfig, num_users: int, num_items: int) -> CoVEModel:
    torch.manual_seed(config.seed)
    return CoVEModel.build(config.experts, num_users, num_items, config.dim, config.variant,
                           config.gate_mode, config.max_len, config.gate_input_mode)


def init_experts_from(model: CoVEModel, paths: Sequence[str]) -> None:
    """Copy pretrained expert blocks into roster slots of the same kind, in order."""
    from .checkpoint import load_checkpoint

    used: set[int] = set()
    for path in paths:
        source, _ = load_checkpoint(path)
        for expert in source.experts:
            slot = next((i for i, e in enumerate(model.experts) if e.kind == expert.kind and i not in used), None)
            if slot is None:
                raise DataError(f"{path}: no free {expert.kind.value} slot in roster {[k.value for k in model.roster]}")
            target = model.experts[slot]
            src_state, dst_state = expert.state_dict(), target.state_dict()
            for name, value in src_state.items():
                if name not in dst_state or dst_state[name].shape != value.shape:
                    have = None if name not in dst_state else tuple(dst_state[name].shape)
                    raise DataError(f"{path}: block {name} has shape {tuple(value.shape)}, model expects {have}")
            target.load_state_dict(src_state)
            used.add(slot)


def _optimizer(model: CoVEModel, config: TrainConfig) -> torch.optim.Optimizer:
    gate = [model.gate.weight]
    rest = [p for n, p in model.named_parameters() if not n.startswith("gate.")]
    gate_lr = config.gate_learning_rate or config.learning_rate
    groups = [{"params": rest, "lr": config.learning_rate}]
    if config.gate_mode == "learned":
        groups.append({"params": gate, "lr": gate_lr})
    return torch.optim.SGD(groups, lr=config.learning_rate)


def train(config: TrainConfig, split: SplitDataset, model: CoVEModel | None = None) -> TrainResult:
    """Train every expert and the gate together under the continuous gate.

    After each epoch the validation MRR is measured; the returned model is the
    best epoch's. Training stops after ``patience`` epochs without improvement.
    """
    config.validate()
    data = split.train
    if model is None:
        model = build_model(config, data.num_users, data.num_items)
        if config.init_from:
            init_experts_from(model, config.init_from)
    result = TrainResult(model, config=config)
    if config.epochs == 0:
        return result

    rng = np.random.default_rng(config.seed)
    instances = make_training_instances(data)
    if not instances:
        raise DataError("training sessions contain no next-item instances")
    optimizer = _optimizer(model, config)
    best_state, best_mrr, stale = None, -1.0, 0

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        model.train()
        order = rng.permutation(len(instances))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [instances[i] for i in order[lo: lo + config.batch_size]]
            batch = make_batch([(x.user, instance_context(data, x)) for x in chunk], config.max_len)
            positives = torch.as_tensor([x.target for x in chunk], dtype=torch.long)
            extras = torch.as_tensor(rng.integers(0, data.num_items, size=config.negatives_per_positive),
                                     dtype=torch.long)
            # summed over instances: one SGD step moves each instance as far as per-sample SGD would
            loss = candidate_loss(model, batch, positives, extras, config.loss, reduction="sum")
            if not torch.isfinite(loss):
                raise DivergenceError(f"epoch {epoch}: loss became {loss.item()} after {count} instances")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            count += len(chunk)
        mrr = evaluate(model, split, "validation", k_gate=config.eval_k_gate,
                       batch_size=config.eval_batch_size).aggregates["MRR"]
        record = EpochRecord(epoch, total / count, mrr, time.perf_counter() - start)
        result.log.append(record)
        logger.info("epoch %d loss %.5f val MRR %.4f (%.1fs)", epoch, record.loss, mrr, record.seconds)
        if mrr > best_mrr:
            best_mrr, stale = mrr, 0
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop after %d epochs without improvement", stale)
                break

    model.load_state_dict(best_state)
    result.best_validation_mrr = best_mrr
    return result


def train_single_expert(kind: ExpertKind | str, config: TrainConfig, split: SplitDataset) -> TrainResult:
    """Standalone training of one expert (gate fixed to [1.0])."""
    kind = ExpertKind.parse(kind) if isinstance(kind, str) else kind
    return train(replace(config, experts=(kind,), init_from=()), split)
