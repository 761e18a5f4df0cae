"""Adam, the learning-rate schedule, and the training/evaluation loops."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from mocaps import data as D
from mocaps.bench.ledger import MemoryLedger, use_ledger
from mocaps.model import NetworkConfig, init_params, loss_and_grads, predict
from mocaps.tensor import RngState

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "lr", "train_loss", "test_acc", "epoch_seconds", "peak_activation_bytes")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """Bias-corrected Adam update; returns new parameter arrays, updates ``state``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters {missing}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - step).astype(p.dtype, copy=False)
    return out


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-3
    decay: float = 0.96

    def __post_init__(self):
        if self.base_lr <= 0 or not 0 < self.decay <= 1:
            raise ValueError("need base_lr > 0 and decay in (0, 1]")


def lr_at(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.base_lr * schedule.decay ** epoch


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    factor = max_norm / total
    return {k: g * g.dtype.type(factor) for k, g in grads.items()}


@dataclass(frozen=True)
class TrainConfig:
    network: NetworkConfig = NetworkConfig()
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay: float = 0.96
    seed: int = 0
    mode: str = "reversible"
    clip_norm: float | None = None
    eval_batch_size: int = 256
    augment: bool = True


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    test_acc: float
    epoch_seconds: float
    peak_activation_bytes: int

    def as_csv(self) -> list:
        return [self.epoch, repr(self.lr), repr(self.train_loss), repr(self.test_acc),
                f"{self.epoch_seconds:.3f}", self.peak_activation_bytes]


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    params: dict | None = None


def write_csv_header(fh) -> None:
    csv.writer(fh, lineterminator="\n").writerow(CSV_HEADER)


def evaluate(cfg: NetworkConfig, params: dict, dataset: D.Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose longest class capsule matches the label."""
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for images, labels in D.batches(dataset, batch_size):
        x = D.preprocess(images, D.PreprocessSpec(crop=cfg.image_size), None, train=False, dtype=cfg.np_dtype)
        correct += int((predict(x, cfg, params) == labels).sum())
    return correct / len(dataset)


def train(config: TrainConfig, train_set: D.Dataset, test_set: D.Dataset, sink=None,
          params: dict | None = None) -> TrainReport:
    """Epochs of shuffled minibatch Adam with per-epoch evaluation.

    ``sink`` is a writable text stream; the CSV header and one row per epoch
    are written (and flushed) as epochs complete.
    """
    net = config.network
    rng = RngState(config.seed)
    if params is None:
        params = init_params(net, rng.split("init"))
    shuffle_rng = rng.split("shuffle")
    crop_rng = rng.split("augment")
    schedule = Schedule(config.lr, config.lr_decay)
    spec = D.PreprocessSpec(crop=net.image_size, augment=config.augment)
    state = AdamState()
    report = TrainReport()
    if sink is not None:
        write_csv_header(sink)
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(schedule, epoch)
        ledger = MemoryLedger()
        start = time.perf_counter()
        total, seen = 0.0, 0
        for images, labels in D.batches(train_set, config.batch_size, shuffle=True, rng=shuffle_rng):
            x, target = D.preprocess(images, spec, crop_rng, train=True, dtype=net.np_dtype, return_target=True)
            with use_ledger(ledger):
                loss, grads = loss_and_grads(x, labels, net, params, config.mode, target=target, ledger=ledger)
            if not all(math.isfinite(v) for v in (loss.total, loss.margin, loss.recon)):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {step} (epoch {epoch}, lr {lr:g}): "
                    f"total={loss.total}, margin={loss.margin}, recon={loss.recon}")
            if config.clip_norm is not None:
                grads = clip_by_global_norm(grads, config.clip_norm)
            params = adam_step(params, grads, state, lr)
            total += loss.total * len(labels)
            seen += len(labels)
            step += 1
        elapsed = time.perf_counter() - start
        acc = evaluate(net, params, test_set, config.eval_batch_size)
        row = EpochRow(epoch, lr, total / seen, acc, elapsed, ledger.peak_bytes)
        report.rows.append(row)
        log.info("epoch %d lr %.3g loss %.5f acc %.4f %.1fs peak %d B",
                 epoch, lr, row.train_loss, acc, elapsed, ledger.peak_bytes)
        if sink is not None:
            csv.writer(sink, lineterminator="\n").writerow(row.as_csv())
            sink.flush()
    report.params = params
    return report
