"""Adam optimization, the epoch loop, early stopping, and run logging.

Training consumes only the train range of the split: each user is reduced
to their train-range baskets and records, laid out once, and re-encoded
every step so gradients reach the embedding tables.  Validation HR@5 after
each epoch drives early stopping and best-checkpoint selection.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import ChronoSplit, Dataset, UserSequence, baskets_in, records_in
from .errors import ConfigError, ContractError, DivergenceError
from .evaluation import build_eval_cases, hr_at_k, rank_cases
from .model import NextBasketModel, bce_loss, build_targets, save_checkpoint
from .tensor import Tensor

HYPERPARAMETER_GRID = {
    "lr": (0.0001, 0.001, 0.01),
    "dropout": (0.0, 0.1, 0.2, 0.5),
    "dim": (10, 15, 30, 50),
    "layers": (1, 2, 4),
    "heads": (1, 2, 4, 6),
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "clip_norm": self.clip_norm,
        }

    @classmethod
    def from_json(cls, blob: dict) -> "TrainConfig":
        known = {"lr", "batch_size", "max_epochs", "patience", "seed", "clip_norm"}
        unknown = set(blob) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**blob)


# -- optimizer ------------------------------------------------------------------


class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    def __init__(
        self,
        params: dict,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  Non-finite gradients abort before the norm
    can poison every other parameter through the shared scale factor.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update with bias correction."""
    if set(params) != set(grads):
        raise ContractError("parameter and gradient name sets differ")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- run log --------------------------------------------------------------------


class RunLog:
    """Append-only JSONL log: one header line, then one line per epoch."""

    def __init__(self, path=None):
        self.path = path
        self.lines: list[dict] = []
        if path is not None:
            open(path, "w").close()

    def append(self, record: dict):
        self.lines.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    @property
    def epoch_losses(self) -> list:
        return [line["train_loss"] for line in self.lines if line.get("type") == "epoch"]


# -- training loop --------------------------------------------------------------


@dataclass
class TrainResult:
    model: NextBasketModel
    best_epoch: int
    best_metric: Optional[float]
    epochs_run: int
    stopped_reason: str
    log: RunLog = field(repr=False)


def _train_view(user: UserSequence, window) -> UserSequence:
    return UserSequence(user.user_id, baskets_in(user, window), records_in(user, window))


def _snapshot(params: dict) -> dict:
    return {name: p.data.copy() for name, p in params.items()}


def _restore(params: dict, snapshot: dict):
    for name, p in params.items():
        p.data[...] = snapshot[name]


def train(
    model: NextBasketModel,
    dataset: Dataset,
    split: ChronoSplit,
    config: TrainConfig,
    checkpoint_path=None,
    log_path=None,
    start_epoch: int = 0,
    checkpoint_extra: Optional[dict] = None,
) -> TrainResult:
    """Fit the model on the train range with early stopping on validation HR@5.

    The best-validation parameters are restored into the returned model and,
    when ``checkpoint_path`` is given, also saved to disk.  A divergent run
    stops early and keeps the last good parameters instead of raising.
    ``start_epoch`` resumes the epoch counter after a prior run; the budget
    stays ``max_epochs`` in total.
    """
    if not 0 <= start_epoch < config.max_epochs:
        raise ContractError(
            f"start_epoch {start_epoch} leaves no room in a budget of {config.max_epochs} epochs"
        )
    views = [_train_view(u, split.train) for u in dataset.users]
    usable = []
    for view in views:
        if not view.baskets and not view.attribute_records:
            continue
        layout = model.layout(view)
        targets, valid = build_targets([layout], dataset.catalog_size)
        if valid.any():
            usable.append((view, targets[0], valid[0]))
    if not usable:
        raise ContractError("no user has a trainable step in the train range")

    val_cases, _ = build_eval_cases(dataset, split, part="validation", mode="final")
    if not val_cases:
        warnings.warn("empty validation split: training for the full epoch budget")

    params = model.params.named_parameters()
    state = AdamState(params, config.lr)
    rng = np.random.default_rng(config.seed)
    log = RunLog(log_path)
    log.append(
        {
            "type": "header",
            "seed": config.seed,
            "train_config": config.to_json(),
            "model_config": model.config.to_json(),
            "n_train_users": len(usable),
            "n_val_cases": len(val_cases),
            "start_epoch": start_epoch,
        }
    )

    best = _snapshot(params)
    best_epoch = start_epoch
    best_metric = None
    bad_epochs = 0
    epochs_run = start_epoch
    reason = "max_epochs"

    for epoch in range(start_epoch + 1, config.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(usable))
        epoch_loss = 0.0
        diverged = None
        for lo in range(0, len(order), config.batch_size):
            batch = [usable[i] for i in order[lo : lo + config.batch_size]]
            # re-lay the batch out with randomized item-to-slot assignment;
            # targets are multi-hot and unaffected by slot order
            layouts = [model.layout(b[0], slot_rng=rng) for b in batch]
            targets = np.stack([b[1] for b in batch])
            valid = np.stack([b[2] for b in batch])
            encoded = model.encode_layouts(layouts)
            logits = model.forward_logits(encoded, training=True, rng=rng)
            loss = bce_loss(logits, targets, valid, normalize="users")
            if not np.isfinite(loss.data):
                diverged = "non-finite loss"
                break
            epoch_loss += float(loss.data) * len(batch)
            for p in params.values():
                p.zero_grad()
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            try:
                clip_gradients(grads, config.clip_norm)
                adam_step(params, grads, state)
            except DivergenceError as err:
                diverged = str(err)
                break

        epochs_run = epoch
        if diverged is not None:
            reason = f"diverged at epoch {epoch}: {diverged}"
            log.append({"type": "abort", "epoch": epoch, "reason": reason})
            break

        record = {
            "type": "epoch",
            "epoch": epoch,
            "train_loss": epoch_loss / len(usable),
            "seconds": time.perf_counter() - started,
        }

        if val_cases:
            results = rank_cases(model, val_cases)
            metric = float(np.mean([hr_at_k(r, 5) for r in results]))
            record["val_hr@5"] = metric
            improved = best_metric is None or metric > best_metric
            if improved:
                best_metric = metric
                best_epoch = epoch
                best = _snapshot(params)
                bad_epochs = 0
            else:
                bad_epochs += 1
            record["improved"] = improved
            log.append(record)
            if bad_epochs > config.patience:
                reason = f"patience exhausted after epoch {epoch}"
                break
        else:
            best = _snapshot(params)
            best_epoch = epoch
            log.append(record)

    _restore(params, best)
    if checkpoint_path is not None:
        extra = {
            "best_epoch": best_epoch,
            "best_metric": best_metric,
            "epochs_run": epochs_run,
            "reason": reason,
        }
        extra.update(checkpoint_extra or {})
        save_checkpoint(checkpoint_path, model, extra=extra)
    log.append(
        {
            "type": "summary",
            "best_epoch": best_epoch,
            "best_metric": best_metric,
            "epochs_run": epochs_run,
            "reason": reason,
        }
    )
    return TrainResult(model, best_epoch, best_metric, epochs_run, reason, log)
