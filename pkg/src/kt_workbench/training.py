"""Fold splitting, Adam, and the epoch loop with early stopping on validation AUC.

A run draws every random number from one ``numpy.random.Generator`` seeded
from ``TrainConfig.seed``, in this order: model initialization, then per
epoch a shuffle permutation followed by the dropout masks of each batch in
turn. Identical configs on identical data therefore give identical runs.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bkt, checkpoint
from .batching import make_batch
from .dkt import masked_bce_loss
from .errors import ConfigError, NoSignalError, NumericError
from .evaluation import auc, teacher_forced_scores
from .tensor import backward

MODEL_KINDS = ("bkt", "dkt", "akt")


@dataclass
class TrainConfig:
    model: str = "dkt"
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    clip_norm: float = 5.0
    seed: int = 0
    fold: int = 0
    min_delta: float = 0.0
    model_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ConfigError("max epochs must be at least 1")
        if not self.clip_norm > 0:
            raise ConfigError("clip norm must be positive")
        if not 0 <= int(self.fold) <= 4:
            raise ConfigError(f"fold must be in 0..4, got {self.fold}")

    @classmethod
    def from_json(cls, path):
        doc = json.loads(Path(path).read_text())
        doc.pop("version", None)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class EpochLog:
    epoch: int
    train_loss: float | None  # None for models fitted without a loss (BKT)
    val_auc: float
    seconds: float


@dataclass
class RunRecord:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("-inf")
    best_checkpoint: str | None = None
    stopped_early: bool = False
    model: object = field(default=None, repr=False)

    @property
    def losses(self):
        return [e.train_loss for e in self.epochs]

    def to_dict(self):
        return {
            "config": self.config,
            "seed": self.config.get("seed"),
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_auc": self.best_val_auc,
            "best_checkpoint": self.best_checkpoint,
            "stopped_early": self.stopped_early,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def kfold_split(sequences, fold):
    """Validation = sequences whose fold equals ``fold``; train = the rest."""
    if not 0 <= int(fold) <= 4:
        raise ConfigError(f"fold must be in 0..4, got {fold}")
    train, valid = [], []
    for s in sequences:
        if s.fold is None:
            raise ConfigError(f"sequence of uid {s.uid} carries no fold label")
        (valid if s.fold == fold else train).append(s)
    return train, valid


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def clip_gradients(grads, max_norm):
    """Scale all gradients by one factor so their joint L2 norm is at most ``max_norm``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter group {name!r}")
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params, grads, state, lr, clip_norm=None):
    """Update ``params`` (name -> ndarray) in place from ``grads``; returns the params."""
    grads, _ = clip_gradients(grads, clip_norm)
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        if m.shape != p.shape:
            raise ConfigError(f"optimizer state for {name!r} does not match its parameter shape")
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + EPS)
    return params


# -- the loop -----------------------------------------------------------------

def build_model(config: TrainConfig, num_kcs, num_questions, rng):
    from .akt import AKT, AKTConfig
    from .dkt import DKT, DKTConfig

    opts = dict(config.model_options)
    try:
        if config.model == "dkt":
            model_config = DKTConfig(num_kcs=num_kcs, **opts)
        elif config.model == "akt":
            model_config = AKTConfig(num_kcs=num_kcs, num_questions=num_questions, **opts)
        else:
            raise ConfigError(f"no neural model named {config.model!r}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model options for {config.model}: {exc}") from None
    return (DKT if config.model == "dkt" else AKT)(model_config, rng=rng)


def batch_loss(model, batch, rng=None):
    probs = model.batch_forward(batch, train=rng is not None, rng=rng)
    pred = batch.predicted()
    labels = batch.labels[pred]
    selected = ((labels == 0) | (labels == 1)).astype(np.int64)
    loss = masked_bce_loss(probs, np.where(selected == 1, labels, 0), selected)
    reg = model.regularization()
    return loss if reg is None else loss + reg


def validation_auc(model, sequences):
    scores, labels = teacher_forced_scores(model, sequences)
    return auc(scores, labels)


def _index_sizes(sequences):
    kcs = max((int(s.concepts[: s.real_length].max()) for s in sequences if s.real_length), default=0) + 1
    qs = max((int(s.questions[: s.real_length].max()) for s in sequences if s.real_length), default=0) + 1
    return kcs, qs


def train_model(config: TrainConfig, train, valid, num_kcs=None, num_questions=None, checkpoint_dir=None, log=sys.stdout):
    """Fit one model; returns a RunRecord whose ``model`` is the best-by-validation model."""
    if not train or not valid:
        raise ConfigError("training and validation sets must both be nonempty")
    if num_kcs is None or num_questions is None:
        k, q = _index_sizes(list(train) + list(valid))
        num_kcs = num_kcs or k
        num_questions = num_questions or q
    record = RunRecord(config=asdict(config))
    if config.model == "bkt":
        return _train_bkt(config, train, valid, record, checkpoint_dir, log)

    rng = np.random.default_rng(config.seed)
    model = build_model(config, num_kcs, num_questions, rng)
    params = model.parameters()
    state = AdamState()
    best = None
    stale = 0
    for epoch in range(config.max_epochs):
        start = time.perf_counter()
        order = rng.permutation(len(train))
        losses, weights = [], []
        for i in range(0, len(order), config.batch_size):
            batch = make_batch([train[j] for j in order[i : i + config.batch_size]])
            model.zero_grad()
            try:
                loss = batch_loss(model, batch, rng)
            except NoSignalError:
                continue
            backward(loss)
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
            adam_step({k: p.data for k, p in params.items()}, grads, state, config.lr, config.clip_norm)
            losses.append(float(loss.data))
            weights.append(int(np.count_nonzero(batch.scored())))
        if not losses:
            raise NoSignalError("no training batch contained a scored position")
        train_loss = float(np.average(losses, weights=weights))
        val = validation_auc(model, valid)
        record.epochs.append(EpochLog(epoch + 1, train_loss, val, time.perf_counter() - start))
        if log is not None:
            print(f"epoch {epoch + 1} train_loss {train_loss:.6f} val_auc {val:.6f}", file=log, flush=True)
        improved = best is None or val > record.best_val_auc + config.min_delta
        if best is None or val > record.best_val_auc:
            record.best_val_auc, record.best_epoch = val, epoch + 1
            best = {k: p.data.copy() for k, p in params.items()}
        if improved:
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                record.stopped_early = True
                break
    for k, p in params.items():
        p.data = best[k]
    record.model = model
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"{config.model}-fold{config.fold}-seed{config.seed}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save_model(model, path)
        record.best_checkpoint = str(path)
    return record


def _train_bkt(config, train, valid, record, checkpoint_dir, log):
    start = time.perf_counter()
    grouped = bkt.kc_response_sequences(train)
    method = config.model_options.get("method", "em")
    model = bkt.BKTModel(bkt.fit(grouped, method=method))
    val = validation_auc(model, valid)
    record.epochs.append(EpochLog(1, None, val, time.perf_counter() - start))
    record.best_epoch, record.best_val_auc = 1, val
    if log is not None:
        print(f"epoch 1 train_loss nan val_auc {val:.6f}", file=log, flush=True)
    record.model = model
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"bkt-fold{config.fold}-seed{config.seed}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path)
        record.best_checkpoint = str(path)
    return record
