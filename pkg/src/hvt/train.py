"""Desk-scale supervised training and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig
from .data import Dataset, channel_stats, normalize
from .model import HvtModel, hvt_forward, init_model
from .optim import OptimState, adamw_step
from .rng import STREAM_INIT, STREAM_TRAIN, make_rng, restore_rng, rng_state

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "lr", "train_loss", "val_loss", "val_top1", "val_top5")


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    lr: float = 5e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.025
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 0
    label_smoothing: float = 0.0
    flip: bool = True


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_top1: float
    val_top5: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


@dataclass
class TrainResult:
    model: HvtModel
    history: list[EpochMetrics]
    optim: OptimState
    norm: tuple[np.ndarray, np.ndarray]


def cross_entropy(logits: T.Tensor, labels, label_smoothing: float = 0.0) -> T.Tensor:
    """Mean ``-log softmax(logits)[label]`` over a batch (or one sample)."""
    single = logits.ndim == 1
    if single:
        logits = T.reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b, c = logits.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"labels {labels} do not fit logits of shape {logits.shape}")
    target = np.zeros((b, c))
    target[np.arange(b), labels] = 1.0
    if label_smoothing:
        target = target * (1.0 - label_smoothing) + label_smoothing / c
    logp = T.log_softmax(logits, axis=-1)
    return T.mul(T.sum_(T.mul(logp, target)), -1.0 / b)


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """True where the label is among the ``k`` largest logits; ties favour lower indexes."""
    order = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def cosine_lr(epoch_index: int, settings: TrainSettings) -> float:
    """Learning rate for the 0-based epoch, decaying from ``lr`` towards ``min_lr``."""
    s = settings
    return s.min_lr + 0.5 * (s.lr - s.min_lr) * (1.0 + math.cos(math.pi * epoch_index / s.epochs))


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def evaluate(model: HvtModel, ds: Dataset, norm=None, batch_size: int = 256) -> tuple[float, float, float]:
    """Top-1, top-5 and mean loss of ``model`` on ``ds``."""
    if len(ds) == 0:
        return 0.0, 0.0, 0.0
    mean, std = norm if norm is not None else channel_stats(ds)
    hits1 = hits5 = 0
    loss = 0.0
    with T.no_grad():
        for idx in _batches(len(ds), batch_size, np.arange(len(ds))):
            logits = hvt_forward(normalize(ds.images[idx], mean, std), model)
            labels = ds.labels[idx]
            loss += cross_entropy(logits, labels).item() * len(idx)
            hits1 += int(topk_hits(logits.data, labels, 1).sum())
            hits5 += int(topk_hits(logits.data, labels, 5).sum())
    n = len(ds)
    return hits1 / n, hits5 / n, loss / n


def _meta(settings: TrainSettings, norm) -> dict[str, str]:
    meta = {f"train_{k}": str(v) for k, v in asdict(settings).items()}
    meta["norm_mean"] = ",".join(repr(float(x)) for x in norm[0])
    meta["norm_std"] = ",".join(repr(float(x)) for x in norm[1])
    return meta


def settings_from_meta(meta: dict[str, str]) -> TrainSettings:
    kwargs = {}
    for f in fields(TrainSettings):
        raw = meta.get(f"train_{f.name}")
        if raw is None:
            continue
        kwargs[f.name] = (raw == "True") if f.type == "bool" else (
            int(raw) if f.type == "int" else float(raw))
    return TrainSettings(**kwargs)


def norm_from_meta(meta: dict[str, str]):
    if "norm_mean" not in meta:
        return None
    def parse(text):
        return np.array([float(x) for x in text.split(",")])
    return parse(meta["norm_mean"]), parse(meta["norm_std"])


def model_from_checkpoint(ckpt: Checkpoint) -> HvtModel:
    model = init_model(ckpt.config, make_rng(0, STREAM_INIT))
    model.load_arrays(ckpt.params)
    return model


def _snapshot(model, opt, rng, epoch, settings, norm) -> Checkpoint:
    params = {k: p.data.copy() for k, p in model.named_parameters()}
    opt_copy = OptimState(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay, opt.step,
                          {k: v.copy() for k, v in opt.m.items()},
                          {k: v.copy() for k, v in opt.v.items()})
    return Checkpoint(model.config, params, opt_copy, rng_state(rng), epoch, _meta(settings, norm))


def train(config: ModelConfig, train_set: Dataset, val_set: Dataset,
          settings: TrainSettings = TrainSettings(), *,
          metrics_path=None, checkpoint_dir=None, keep_epochs: bool = False,
          resume=None) -> TrainResult:
    """Train with seeded shuffling, AdamW and per-epoch cosine decay.

    Args:
        metrics_path: CSV receiving one row per epoch (appended to on resume).
        checkpoint_dir: writes ``last.hvtc`` after every epoch, plus
            ``epoch_XXX.hvtc`` when ``keep_epochs`` is set.
        resume: checkpoint path or :class:`Checkpoint` to continue from.
    """
    s = settings
    if s.batch_size < 1 or s.batch_size > len(train_set):
        raise ConfigError(f"batch size {s.batch_size} does not fit {len(train_set)} training samples")
    if train_set.geometry != (config.image_h, config.image_w, config.channels):
        raise ConfigError(f"dataset geometry {train_set.geometry} does not match the model config")
    if train_set.num_classes != config.num_classes:
        raise ConfigError(f"dataset has {train_set.num_classes} classes, model {config.num_classes}")

    norm = channel_stats(train_set)
    start_epoch = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ckpt.config != config:
            raise ConfigError("checkpoint config differs from the requested config")
        model = model_from_checkpoint(ckpt)
        opt = ckpt.optim or OptimState(s.lr, s.beta1, s.beta2, s.eps, s.weight_decay)
        rng = restore_rng(ckpt.rng_state) if ckpt.rng_state else make_rng(s.seed, STREAM_TRAIN)
        start_epoch = ckpt.epoch
        norm = norm_from_meta(ckpt.meta) or norm
    else:
        model = init_model(config, make_rng(s.seed, STREAM_INIT))
        opt = OptimState(s.lr, s.beta1, s.beta2, s.eps, s.weight_decay)
        rng = make_rng(s.seed, STREAM_TRAIN)

    writer = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        append = resume is not None and metrics_path.exists()
        fh = open(metrics_path, "a" if append else "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(METRICS_HEADER)
            fh.flush()
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
        if start_epoch == 0:
            save_checkpoint(ckdir / "last.hvtc", _snapshot(model, opt, rng, 0, s, norm))

    params = model.parameters()
    x_all = normalize(train_set.images, *norm)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / s.batch_size)
    history = []
    try:
        for e in range(start_epoch, s.epochs):
            t0 = time.perf_counter()
            lr = cosine_lr(e, s)
            perm = rng.permutation(n)
            flips = rng.random(n) < 0.5 if s.flip else np.zeros(n, dtype=bool)
            total = 0.0
            for step, idx in enumerate(_batches(n, s.batch_size, perm)):
                xb = x_all[idx]
                fb = flips[idx]
                if fb.any():
                    xb = xb.copy()
                    xb[fb] = xb[fb][:, :, ::-1, :]
                model.zero_grad()
                loss = cross_entropy(hvt_forward(xb, model), train_set.labels[idx], s.label_smoothing)
                T.backward(loss)
                step_lr = lr * (step + 1) / steps_per_epoch if e < s.warmup_epochs else lr
                adamw_step(params, opt, step_lr)
                total += loss.item() * len(idx)
            top1, top5, vloss = evaluate(model, val_set, norm)
            m = EpochMetrics(e + 1, lr, total / n, vloss, top1, top5)
            history.append(m)
            if writer is not None:
                writer.writerow(m.row())
                fh.flush()
            if ckdir is not None:
                snap = _snapshot(model, opt, rng, e + 1, s, norm)
                save_checkpoint(ckdir / "last.hvtc", snap)
                if keep_epochs:
                    save_checkpoint(ckdir / f"epoch_{e + 1:03d}.hvtc", snap)
            log.info("epoch %d/%d lr %.2e loss %.4f val top1 %.3f (%.1fs)",
                     e + 1, s.epochs, lr, m.train_loss, top1, time.perf_counter() - t0)
    finally:
        if writer is not None:
            fh.close()
    return TrainResult(model, history, opt, norm)
