"""Training recipe: Adam with decoupled weight decay, a factor-3 plateau
schedule on the validation loss, per-epoch checkpointing, and last-k model
averaging.

Determinism contract: (dataset bytes, TrainConfig, seed) fully determine every
epoch record and checkpoint byte. All randomness comes from RngState splits
keyed by epoch/step; batch order and gradient application are strictly
sequential; metrics contain no timestamps and only out_dir-relative paths.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import backward
from .datapipe import AugmentConfig, PairDataset, augment_batch, compose_batch, pairs_to_batch
from .errors import TrainingAbort
from .model import (
    ParamStore,
    SdanetConfig,
    average_params,
    init_params,
    load_model_checkpoint,
    loss_on_batch,
    save_model_checkpoint,
    wrap_trainable,
)
from .rng import RngState

log = logging.getLogger("sdanet.trainer")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 3e-4
    weight_decay: float = 1e-4
    dropout: float = 0.2
    epochs: int = 100
    batch_size: int = 64
    subjects_per_batch: int = 8
    plateau_patience: int = 5
    lr_factor: float = 3.0
    min_lr: float = 1e-6
    average_last_k: int = 10
    seed: int = 0
    steps_per_epoch: int = 0  # 0 -> train_pairs // batch_size, at least 1

    def __post_init__(self):
        if self.lr0 <= 0 or self.lr_factor <= 1 or self.min_lr <= 0:
            raise ValueError("lr0 and min_lr must be positive and lr_factor > 1")
        if self.epochs < 1 or self.batch_size < 1 or self.subjects_per_batch < 1:
            raise ValueError("epochs, batch_size and subjects_per_batch must be >= 1")
        if self.weight_decay < 0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("weight_decay must be >= 0 and dropout in [0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if not 1 <= self.average_last_k <= self.epochs:
            raise ValueError("average_last_k must be in 1..epochs")
        if self.steps_per_epoch < 0:
            raise ValueError("steps_per_epoch must be >= 0")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter set."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(store: ParamStore) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in store.params.items()},
        v={k: np.zeros_like(v) for k, v in store.params.items()},
    )


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only: biases and BN gamma/beta
    are exempt."""
    return name.endswith(".w")


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float):
    """One in-place update: decoupled decay first, then bias-corrected Adam.

    Aborts before touching anything if any gradient is non-finite.
    """
    for name in store.params:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingAbort(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in store.params.items():
        g = grads[name]
        if weight_decay > 0.0 and decays(name):
            p -= lr * weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_to_entries(state: AdamState) -> dict[str, np.ndarray]:
    out = {f"adam.m.{k}": v for k, v in state.m.items()}
    out.update({f"adam.v.{k}": v for k, v in state.v.items()})
    out["adam.t"] = np.array([float(state.t)])
    out["adam.hyper"] = np.array([state.beta1, state.beta2, state.eps])
    return out


def adam_from_entries(entries: dict[str, np.ndarray]) -> AdamState | None:
    if "adam.t" not in entries:
        return None
    hyper = entries.get("adam.hyper", np.array([0.9, 0.999, 1e-8]))
    return AdamState(
        m={k[len("adam.m.") :]: v.copy() for k, v in entries.items() if k.startswith("adam.m.")},
        v={k[len("adam.v.") :]: v.copy() for k, v in entries.items() if k.startswith("adam.v.")},
        t=int(entries["adam.t"][0]),
        beta1=float(hyper[0]),
        beta2=float(hyper[1]),
        eps=float(hyper[2]),
    )


# ---------------------------------------------------------------------------
# plateau schedule


class PlateauScheduler:
    """Divide the LR by ``factor`` after ``patience`` epochs without the best
    validation loss improving by more than ``threshold``; clamped at min_lr.

    The first epoch establishes the best and counts toward patience (nothing
    has improved yet), so a perfectly flat run at patience 5 drops the LR
    going into epoch 6, then again into epoch 11.
    """

    def __init__(self, lr0: float, patience: int, factor: float = 3.0, min_lr: float = 1e-6,
                 threshold: float = 1e-6):
        self.lr = lr0
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = None
        self.bad = 0

    def step(self, val_loss: float) -> float:
        if self.best is None:
            self.best = val_loss
            self.bad = 1
        elif val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
        if self.bad >= self.patience:
            self.lr = max(self.lr / self.factor, self.min_lr)
            self.bad = 0
        return self.lr


def plateau_lr(history, current_lr: float, patience: int, factor: float = 3.0,
               min_lr: float = 1e-6, threshold: float = 1e-6) -> float:
    """LR in effect after replaying a validation-loss history from ``current_lr``."""
    sched = PlateauScheduler(current_lr, patience, factor, min_lr, threshold)
    for v in history:
        sched.step(v)
    return sched.lr


# ---------------------------------------------------------------------------
# epoch loop


def epoch_batches(pool, train_cfg: TrainConfig, aug_cfg: AugmentConfig | None, rng: RngState,
                  steps: int):
    """Yield the epoch's training batches; composition and augmentation each
    draw from their own split of ``rng`` so the sequence is seed-stable."""
    for step in range(steps):
        batch = compose_batch(pool, train_cfg.batch_size, train_cfg.subjects_per_batch,
                              rng.split(("batch", step)))
        if aug_cfg is not None and aug_cfg.enabled:
            batch = augment_batch(batch, aug_cfg, rng.split(("augment", step)))
        yield batch


def train_epoch(store: ParamStore, adam: AdamState, batches, model_cfg: SdanetConfig,
                train_cfg: TrainConfig, lr: float, rng: RngState):
    """Forward/backward/Adam over the given batches; returns (mean loss, hash
    of the first batch)."""
    losses = []
    first_hash = None
    for step, batch in enumerate(batches):
        if first_hash is None:
            first_hash = batch.content_hash()
        nodes = wrap_trainable(store)
        loss, _ = loss_on_batch(store, batch.eeg, batch.stim_a, batch.stim_b, batch.labels,
                                model_cfg, mode="train", rng=rng.split(("dropout", step)),
                                nodes=nodes)
        backward(loss)
        grads = {
            name: (nodes[name].grad if nodes[name].grad is not None else np.zeros_like(value))
            for name, value in store.params.items()
        }
        adam_step(store, grads, adam, lr, train_cfg.weight_decay)
        losses.append(float(loss.value))
    if not losses:
        raise ValueError("train_epoch received no batches")
    return float(np.mean(losses)), first_hash


def validate(store: ParamStore, pairs, model_cfg: SdanetConfig, batch_size: int = 256):
    """Eval-mode mean BCE and accuracy over frozen pairs; mutates nothing."""
    if not pairs:
        raise ValueError("validation set is empty")
    total_nll = 0.0
    correct = 0
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo : lo + batch_size]
        batch = pairs_to_batch(chunk)
        loss, trace = loss_on_batch(store, batch.eeg, batch.stim_a, batch.stim_b, batch.labels,
                                    model_cfg, mode="eval")
        total_nll += float(loss.value) * len(chunk)
        preds = (trace.p.value > 0.5).astype(np.int64)
        correct += int((preds == batch.labels).sum())
    return total_nll / len(pairs), correct / len(pairs)


# ---------------------------------------------------------------------------
# full fit


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    checkpoint: str  # path relative to the run's out_dir
    first_batch_hash: str

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "lr": self.lr,
            "checkpoint": self.checkpoint,
            "first_batch_hash": self.first_batch_hash,
        }


@dataclass
class FitResult:
    store: ParamStore  # averaged over the last k checkpoints
    records: list[EpochRecord]
    model_config: SdanetConfig
    averaged_val_loss: float
    averaged_val_accuracy: float
    out_dir: str | None = None
    final_checkpoint: str | None = None
    metrics_path: str | None = None


CHECKPOINT_DIR = "checkpoints"
METRICS_NAME = "metrics.jsonl"
FINAL_NAME = "final_averaged.sdck"


def fit(dataset: PairDataset, model_cfg: SdanetConfig, train_cfg: TrainConfig, out_dir,
        aug_cfg: AugmentConfig | None = None) -> FitResult:
    """Run the full recipe and return the averaged model plus epoch records.

    Writes per-epoch checkpoints (``checkpoints/epoch_%04d.sdck``), a JSONL
    metrics log, and the averaged model to ``out_dir``. The dropout rate used
    in training comes from ``train_cfg.dropout``.
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    if not dataset.val:
        raise ValueError("validation split is empty")
    cfg = replace(model_cfg, dropout_rate=train_cfg.dropout)
    master = RngState(train_cfg.seed)
    store = init_params(cfg, master.split("init"))
    adam = init_adam(store)
    sched = PlateauScheduler(train_cfg.lr0, train_cfg.plateau_patience, train_cfg.lr_factor,
                             train_cfg.min_lr)

    n_train = sum(len(v) for v in dataset.train.values())
    steps = train_cfg.steps_per_epoch or max(1, n_train // train_cfg.batch_size)

    out_dir = str(out_dir)
    ckpt_dir = os.path.join(out_dir, CHECKPOINT_DIR)
    os.makedirs(ckpt_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, METRICS_NAME)

    records: list[EpochRecord] = []
    last_good = None
    lr = sched.lr
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        for epoch in range(1, train_cfg.epochs + 1):
            epoch_rng = master.split(("epoch", epoch))
            batches = epoch_batches(dataset.train, train_cfg, aug_cfg, epoch_rng, steps)
            train_loss, first_hash = train_epoch(store, adam, batches, cfg, train_cfg, lr,
                                                 epoch_rng)
            val_loss, val_acc = validate(store, dataset.val, cfg)
            rel_ckpt = os.path.join(CHECKPOINT_DIR, f"epoch_{epoch:04d}.sdck")
            try:
                save_model_checkpoint(os.path.join(out_dir, rel_ckpt), store, cfg, epoch,
                                      val_loss, adam_to_entries(adam))
            except OSError as e:
                raise TrainingAbort(
                    f"checkpoint write failed at epoch {epoch}: {e}; "
                    f"last durable checkpoint: {last_good or 'none'}"
                )
            last_good = rel_ckpt
            rec = EpochRecord(epoch, train_loss, val_loss, val_acc, lr, rel_ckpt, first_hash)
            records.append(rec)
            metrics.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            metrics.flush()
            log.info("epoch %d/%d train %.4f val %.4f acc %.3f lr %.2e",
                     epoch, train_cfg.epochs, train_loss, val_loss, val_acc, lr)
            lr = sched.step(val_loss)

    k = train_cfg.average_last_k
    snapshots = []
    for rec in records[-k:]:
        snap_store, _, _, _ = load_model_checkpoint(os.path.join(out_dir, rec.checkpoint))
        snapshots.append(snap_store)
    averaged = average_params(snapshots, k)
    avg_val_loss, avg_val_acc = validate(averaged, dataset.val, cfg)
    final_path = os.path.join(out_dir, FINAL_NAME)
    save_model_checkpoint(final_path, averaged, cfg, train_cfg.epochs, avg_val_loss)
    log.info("averaged last %d checkpoints: val %.4f acc %.3f", k, avg_val_loss, avg_val_acc)
    return FitResult(
        store=averaged,
        records=records,
        model_config=cfg,
        averaged_val_loss=avg_val_loss,
        averaged_val_accuracy=avg_val_acc,
        out_dir=out_dir,
        final_checkpoint=FINAL_NAME,
        metrics_path=METRICS_NAME,
    )
