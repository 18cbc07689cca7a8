"""Masked-token training with Adam and early stopping on validation loss."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .model import CanBertModel
from .windowing import WindowSet

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mask_ratio: float = 0.45
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    valid_fraction: float = 0.1
    eval_batch_size: int = 256

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def masked_count(T: int, mask_ratio: float) -> int:
    """R = max(1, round-half-up(m * T))."""
    return max(1, int(math.floor(mask_ratio * T + 0.5)))


@dataclass
class MaskedBatch:
    inputs: np.ndarray          # (B, T) with MASK at masked slots
    targets: np.ndarray         # (B*R,) original tokens, row-major over (sequence, slot)
    positions: np.ndarray       # (B, R) sorted slot indices per sequence

    @property
    def index(self) -> tuple[np.ndarray, np.ndarray]:
        B, R = self.positions.shape
        return np.repeat(np.arange(B), R), self.positions.reshape(-1)


def mask_batch(tokens: np.ndarray, mask_ratio: float, rng: np.random.Generator,
               mask_token: int) -> MaskedBatch:
    tokens = np.atleast_2d(np.asarray(tokens))
    B, T = tokens.shape
    R = masked_count(T, mask_ratio)
    positions = np.sort(np.argsort(rng.random((B, T)), axis=1)[:, :R], axis=1)
    rows = np.arange(B)[:, None]
    targets = tokens[rows, positions].reshape(-1)
    inputs = tokens.copy()
    inputs[rows, positions] = mask_token
    return MaskedBatch(inputs, targets, positions)


def mask_sequence(tokens, mask_ratio: float, rng: np.random.Generator, mask_token: int):
    """Mask one sequence: returns (masked tokens, targets, positions)."""
    mb = mask_batch(np.asarray(tokens)[None, :], mask_ratio, rng, mask_token)
    return mb.inputs[0], mb.targets, mb.positions[0]


def masked_loss(model: CanBertModel, batch: MaskedBatch, chunk: int = 256) -> float:
    """Eval-mode mean cross-entropy over all masked slots of ``batch``."""
    total, count = 0.0, 0
    B, R = batch.positions.shape
    for s in range(0, B, chunk):
        inputs = batch.inputs[s:s + chunk]
        pos = batch.positions[s:s + chunk]
        logits = model.forward(inputs)
        sel = logits[np.arange(len(pos))[:, None], pos].reshape(-1, logits.shape[-1])
        loss, _ = nx.cross_entropy_from_logits(sel, batch.targets[s * R:(s + len(pos)) * R])
        total += loss * sel.shape[0]
        count += sel.shape[0]
    return total / count


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        if len(idx) < 2 and n >= 2:
            continue
        yield idx


def train_epoch(model: CanBertModel, windows: WindowSet, config: TrainConfig,
                rng: np.random.Generator) -> float:
    """One pass over shuffled batches; returns the masked-slot-weighted mean loss."""
    if len(windows) == 0:
        raise ValueError("empty training set")
    params = list(model.params.values())
    mask_token = model.cfg.M
    total, count = 0.0, 0
    for idx in iter_batches(len(windows), config.batch_size, rng):
        batch = mask_batch(windows.tokens[idx], config.mask_ratio, rng, mask_token)
        loss = model.masked_loss_and_grad(batch.inputs, batch.index, batch.targets,
                                          training=True, rng=rng)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} after {count} masked slots")
        nx.adam_step(params, config.lr, config.beta1, config.beta2, config.adam_eps)
        total += loss * batch.targets.size
        count += batch.targets.size
    return total / count


@dataclass
class TrainingReport:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    stop_reason: str = ""
    seed: int = 0
    config: dict = field(default_factory=dict)
    model_config: dict = field(default_factory=dict)
    train_windows: int = 0
    valid_windows: int = 0

    @property
    def best_valid_loss(self) -> float:
        return self.valid_loss[self.best_epoch - 1]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["best_valid_loss"] = self.best_valid_loss if self.valid_loss else None
        out["wall_seconds"] = float(sum(self.epoch_seconds))
        return out


def fit(model: CanBertModel, train: WindowSet, valid: WindowSet, config: TrainConfig,
        on_epoch=None) -> tuple[CanBertModel, TrainingReport]:
    """Train until ``patience`` epochs pass without a better validation loss.

    The model is left holding the best-validation weights. Validation masks are
    drawn once so every epoch is scored on the same masked slots.
    """
    if len(valid) == 0:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(config.seed)
    valid_batch = mask_batch(valid.tokens, config.mask_ratio,
                             np.random.default_rng([config.seed, 1]), model.cfg.M)
    report = TrainingReport(seed=config.seed, config=config.to_dict(),
                            model_config=model.cfg.to_dict(), train_windows=len(train),
                            valid_windows=len(valid))
    best_state, best_loss, since_best = model.state(), math.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        train_loss = train_epoch(model, train, config, rng)
        valid_loss = masked_loss(model, valid_batch, config.eval_batch_size)
        if not math.isfinite(valid_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        report.train_loss.append(train_loss)
        report.valid_loss.append(valid_loss)
        report.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d train %.4f valid %.4f (%.1fs)", epoch, train_loss, valid_loss,
                 report.epoch_seconds[-1])
        if valid_loss < best_loss:
            best_loss, best_state, since_best = valid_loss, model.state(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
        report.stopped_epoch = epoch
        if on_epoch is not None and on_epoch(epoch, model, report):
            report.stop_reason = "callback"
            break
        if since_best >= config.patience:
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"
    model.load_state(best_state)
    return model, report
