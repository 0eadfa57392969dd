"""Training loop for the full objective L = L_ce + lambda * L_pc."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import tensorcore as tc
from ..model import APLModel, ForwardResult
from ..positivity import LossConfig, LossReport, positivity_loss
from ..scenes import FeatureContainer
from .config import TrainConfig
from .optim import Adam, lr_at

logger = logging.getLogger(__name__)

LOG_KEYS = ("epoch", "lr", "train_loss", "train_ce", "train_pc", "train_acc", "val_acc")


@dataclass
class Batch:
    index: np.ndarray
    audio: np.ndarray
    objects: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray


def make_batch(container: FeatureContainer, index) -> Batch:
    index = np.asarray(index, dtype=np.int64)
    recs = container.records[index]
    lengths = recs["length"]
    if np.any(lengths != lengths[0]):
        raise ValueError("a batch must share one question length")
    return Batch(
        index=index,
        audio=recs["audio"],
        objects=recs["objects"],
        tokens=recs["tokens"][:, : int(lengths[0])].astype(np.int64),
        labels=recs["label"].astype(np.int64),
    )


def length_buckets(container: FeatureContainer, order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split ``order`` into batches of equal question length, keeping order within a length."""
    lengths = container.lengths[order]
    batches = []
    for length in np.unique(lengths):
        members = order[lengths == length]
        batches.extend(members[i : i + batch_size] for i in range(0, len(members), batch_size))
    return batches


def total_loss(log_p: tc.Tensor, labels: np.ndarray, report: LossReport, lam: float) -> LossReport:
    """Fill in L_ce = -log p[label] and L_total = L_ce + lam * L_pc (per sample)."""
    labels = np.asarray(labels, dtype=np.int64)
    C = log_p.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label outside 0..{C - 1}")
    onehot = tc.tensor(np.eye(C, dtype=log_p.dtype)[labels])
    report.L_ce = -(log_p * onehot).sum(axis=-1)
    report.L_total = report.L_ce + report.L_pc * lam if lam else report.L_ce
    return report


def batch_objective(model: APLModel, batch: Batch, loss: LossConfig) -> tuple[tc.Tensor, LossReport, ForwardResult]:
    out = model(batch.audio, batch.objects, batch.tokens)
    probe = out.enhanced.F_A_prime if loss.audio_probe == "enhanced" else out.F_A
    report = positivity_loss(out.question.F_q, out.enhanced.F_O_prime, probe, loss, N=model.dims.N)
    report = total_loss(out.answer.log_p, batch.labels, report, loss.lam)
    return report.L_total.mean(), report, out


@dataclass
class TrainResult:
    model: APLModel
    config: TrainConfig
    metrics: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0


def train(
    config: TrainConfig,
    train_set: FeatureContainer,
    val_set: FeatureContainer | None = None,
    log: Callable[[dict], None] | None = None,
    checkpoint_path=None,
) -> TrainResult:
    """Fit a fresh model; the returned model holds the best-validation weights.

    Ties in validation accuracy keep the earlier epoch.  Everything is
    deterministic given ``config.seed``.
    """
    from .checkpoint import save_checkpoint
    from .evaluate import accuracy

    if train_set.dims != config.scene or (val_set is not None and val_set.dims != config.scene):
        raise ValueError(f"container dims {train_set.dims} do not match config {config.scene}")
    model = APLModel(config.model_dims, config.model, seed=config.seed, dtype=np.float32)
    params = model.parameters()
    opt = Adam(params)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    result = TrainResult(model, config)
    best = None
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = rng.permutation(len(train_set))
        batches = length_buckets(train_set, order, config.batch_size)
        batches = [batches[i] for i in rng.permutation(len(batches))]
        tot = ce = pc = 0.0
        correct = 0
        for idx in batches:
            batch = make_batch(train_set, idx)
            loss, report, out = batch_objective(model, batch, config.loss)
            opt.zero_grad()
            tc.backward(loss, params)
            opt.step(lr)
            tot += float(report.L_total.data.sum())
            ce += float(report.L_ce.data.sum())
            pc += float(report.L_pc.data.sum())
            correct += int((out.answer.c_hat == batch.labels).sum())
        n_train = len(train_set)
        val_acc = accuracy(model, val_set) if val_set is not None else float("nan")
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": tot / n_train,
            "train_ce": ce / n_train,
            "train_pc": pc / n_train,
            "train_acc": correct / n_train,
            "val_acc": val_acc,
        }
        result.metrics.append(record)
        if log is not None:
            log(record)
        logger.debug("epoch %d: %s", epoch, json.dumps(record))
        if val_set is not None and val_acc > result.best_val_acc:
            result.best_val_acc, result.best_epoch = val_acc, epoch
            best = [p.data.copy() for p in params]
    if best is not None:
        for p, data in zip(params, best):
            p.data[...] = data
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, config, {"best_epoch": result.best_epoch})
    return result
