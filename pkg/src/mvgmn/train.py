"""SGD training loop with a plateau learning-rate schedule, plus evaluation.

Plain SGD (no momentum or weight decay) at an initial rate of 0.0025; the
rate is cut by 10x whenever evaluation top-1 has not exceeded its best for 5
consecutive epochs (the counter resets on improvement and after each cut).
The improvement baseline is the untrained model's evaluation accuracy.

Per-epoch shuffles are derived from (seed, epoch), so a run is reproducible
bit-for-bit from its config.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, Splits
from .errors import ConfigurationError, InputError, NumericError
from .model import ModelState, forward_batch
from .rng import Xoshiro256pp, derive_seed
from .tensor import GradTape, softmax_cross_entropy

_EPOCH_TAG = 0x45504F43  # "EPOC"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.0025
    plateau_factor: float = 0.1
    patience: int = 5
    batch_size: int = 32  # 64 reproduces the reference recipe
    max_epochs: int = 64
    seed: int = 0
    protocol: str = "cross_subject"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")
        if self.patience < 1:
            raise ConfigurationError("patience must be at least 1")
        if not 0 < self.plateau_factor <= 1:
            raise ConfigurationError("plateau_factor must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be at least 1")


class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` non-improving updates."""

    def __init__(self, lr0: float, factor: float, patience: int):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self._bad = 0

    def update(self, improved: bool) -> float:
        if improved:
            self._bad = 0
        else:
            self._bad += 1
            if self._bad >= self.patience:
                self.lr *= self.factor
                self._bad = 0
        return self.lr


@dataclass
class EpochRow:
    epoch: int
    loss: float
    top1: float
    lr: float
    sec: float


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)

    def append(self, row: EpochRow, path=None) -> None:
        self.rows.append(row)
        if path is not None:
            with open(path, "a") as f:
                f.write(json.dumps(asdict(row)) + "\n")


def _batches(indices: np.ndarray, size: int):
    for start in range(0, len(indices), size):
        yield indices[start : start + size]


def worker_count() -> int:
    """Evaluation fan-out width, capped by the MVGMN_THREADS env var."""
    raw = os.environ.get("MVGMN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"MVGMN_THREADS must be an integer, got {raw!r}") from None


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lower index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise InputError(f"logits {logits.shape} do not pair with labels {labels.shape}")
    if logits.shape[0] == 0:
        raise InputError("top1_accuracy requires at least one sample")
    return float((logits.argmax(axis=1) == labels).mean())


def evaluate(
    state: ModelState,
    dataset: Dataset,
    indices: np.ndarray,
    batch_size: int = 64,
    mask_view: int | None = None,
) -> float:
    """Top-1 accuracy over the given samples; argmax ties go to the lower class."""
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size == 0:
        raise InputError("evaluate requires a non-empty split")

    def run(batch: np.ndarray) -> int:
        logits = forward_batch(
            state, dataset.rgb[batch], dataset.sk[batch], mask_view=mask_view
        ).data
        return int((logits.argmax(axis=1) == dataset.labels[batch]).sum())

    batches = list(_batches(indices, batch_size))
    workers = worker_count()
    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            correct = sum(pool.map(run, batches))
    else:
        correct = sum(run(b) for b in batches)
    return correct / indices.size


def train_loop(
    state: ModelState,
    dataset: Dataset,
    splits: Splits,
    cfg: TrainConfig,
    log_path=None,
    progress=None,
) -> tuple[ModelState, TrainLog]:
    """Optimize in place; returns the state and the per-epoch log."""
    train_idx = dataset.index_of(splits.train_ids)
    test_idx = dataset.index_of(splits.test_ids)
    mask_view = splits.masked_view
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.patience)
    log = TrainLog()
    best = evaluate(state, dataset, test_idx, cfg.batch_size, mask_view)

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.monotonic()
        order = list(train_idx)
        Xoshiro256pp(derive_seed(cfg.seed, _EPOCH_TAG, epoch)).shuffle(order)
        order = np.asarray(order, dtype=np.intp)
        lr = sched.lr
        total_loss = 0.0
        for batch_no, batch in enumerate(_batches(order, cfg.batch_size)):
            try:
                with GradTape() as tape:
                    logits = forward_batch(state, dataset.rgb[batch], dataset.sk[batch])
                    loss = softmax_cross_entropy(logits, dataset.labels[batch])
                    loss_value = float(loss.data)
                    if not np.isfinite(loss_value):
                        raise NumericError("loss is non-finite")
                    tape.backward(loss)
            except NumericError as err:
                raise NumericError(
                    f"aborting at epoch {epoch}, batch {batch_no}: {err}"
                ) from err
            total_loss += loss_value * len(batch)
            for p in state.params.values():
                if p.grad is not None:
                    p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)
            state.zero_grads()
        top1 = evaluate(state, dataset, test_idx, cfg.batch_size, mask_view)
        row = EpochRow(
            epoch=epoch,
            loss=total_loss / len(order),
            top1=top1,
            lr=lr,
            sec=time.monotonic() - started,
        )
        log.append(row, log_path)
        if progress is not None:
            progress(row)
        improved = top1 > best
        best = max(best, top1)
        sched.update(improved)
    return state, log
