"""Window construction, chronological split, normalisation and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError, StructuralError, TrainingDivergence
from .features import ChannelBlock, FeatureParams
from .ingest import SLOT_MINUTES, segment_contiguous
from .kalman import DEFAULT_Q_SCALE, DEFAULT_R
from .nn import (
    AdamState,
    ModelConfig,
    ModelParams,
    adam_step,
    init_params,
    loss_and_grads,
    nll_loss,
    stacked_forward,
)

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
EVAL_CHUNK = 1024


@dataclass(frozen=True)
class TrainConfig:
    history_slots: int = 24
    ph_slots: int = 6
    batch_size: int = 128
    lr: float = 1e-3
    max_epochs: int = 6000
    patience: int = 128
    val_fraction: float = 0.2
    hidden: int = 128
    dense: tuple[int, ...] = (512, 128)
    n_layers: int = 2
    dropout: float = 0.2
    glucose_source: str = "raw"
    q_scale: float = DEFAULT_Q_SCALE
    r: float = DEFAULT_R
    seed: int = 0

    def __post_init__(self) -> None:
        if self.history_slots < 1 or self.ph_slots < 1:
            raise ValueError("history_slots and ph_slots must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ValueError("batch_size must be >= 1, max_epochs and patience >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.glucose_source not in ("raw", "smoothed"):
            raise ValueError(f"glucose_source must be 'raw' or 'smoothed', not {self.glucose_source!r}")
        object.__setattr__(self, "dense", tuple(int(d) for d in self.dense))

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=4, hidden=self.hidden, n_layers=self.n_layers,
            dense=self.dense, dropout=self.dropout,
        )


@dataclass
class TrainingWindow:
    inputs: np.ndarray  # (history, 4)
    target: float
    t_anchor: int


@dataclass
class WindowSet:
    """Windows stored as stacked arrays; indexing yields :class:`TrainingWindow`."""

    inputs: np.ndarray  # (N, history, 4)
    targets: np.ndarray  # (N,)
    anchors: np.ndarray  # (N,) slot index of the last input step

    def __len__(self) -> int:
        return len(self.anchors)

    def __getitem__(self, k: int) -> TrainingWindow:
        return TrainingWindow(self.inputs[k], float(self.targets[k]), int(self.anchors[k]))

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.inputs[idx], self.targets[idx], self.anchors[idx])


def make_windows(block: ChannelBlock, cfg: TrainConfig) -> WindowSet:
    """One window per anchor whose history and target lie in one gap-free glucose run."""
    h, ph = cfg.history_slots, cfg.ph_slots
    X = block.matrix()
    inputs, targets, anchors = [], [], []
    for off, length in segment_contiguous(block.glucose, 0):
        n = length - h - ph + 1
        if n <= 0:
            continue
        seg = X[off : off + length]
        view = np.lib.stride_tricks.sliding_window_view(seg, h, axis=0)  # (L-h+1, 4, h)
        inputs.append(view[:n].transpose(0, 2, 1))
        targets.append(seg[h - 1 + ph : h - 1 + ph + n, 0])
        anchors.append(off + h - 1 + np.arange(n))
    if not anchors:
        return WindowSet(np.empty((0, h, 4)), np.empty(0), np.empty(0, dtype=np.int64))
    return WindowSet(
        np.ascontiguousarray(np.concatenate(inputs)),
        np.concatenate(targets),
        np.concatenate(anchors).astype(np.int64),
    )


def split_train_val(windows: WindowSet, val_fraction: float) -> tuple[WindowSet, WindowSet]:
    """Chronological split: the earliest anchors train, the latest validate."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    n = len(windows)
    if n < 2:
        raise StructuralError(f"need at least 2 windows to split, got {n}")
    order = np.argsort(windows.anchors, kind="stable")
    n_train = math.floor(n * (1.0 - val_fraction) + 1e-9)
    n_train = min(max(n_train, 1), n - 1)
    return windows.subset(order[:n_train]), windows.subset(order[n_train:])


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray  # (4,)
    std: np.ndarray  # (4,)

    def inputs(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse_inputs(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def target(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean[0]) / self.std[0]

    def inverse_target(self, z: np.ndarray) -> np.ndarray:
        return z * self.std[0] + self.mean[0]

    def inverse_variance(self, s2: np.ndarray) -> np.ndarray:
        return s2 * self.std[0] ** 2


def fit_normalizer(train: WindowSet) -> Normalizer:
    """Per-channel statistics over every input step of the training windows."""
    if len(train) < 1:
        raise StructuralError("cannot fit a normalizer on zero windows")
    flat = train.inputs.reshape(-1, train.inputs.shape[-1])
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return Normalizer(mean, std)


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_val_loss: float = math.nan
    best_epoch: int = 0
    stop_reason: str = ""


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    config: TrainConfig
    normalizer: Normalizer
    features: FeatureParams
    history: TrainingHistory
    version: str = "1"

    @property
    def best_val_loss(self) -> float:
        return self.history.val_loss[self.history.best_epoch - 1] if self.history.best_epoch else math.nan


def evaluate_nll(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    """Eval-mode mean NLL, accumulated over fixed-size chunks in order."""
    total = 0.0
    for s in range(0, len(y), EVAL_CHUNK):
        mu, s2, _ = stacked_forward(params, X[s : s + EVAL_CHUNK], "eval")
        total += nll_loss(mu, s2, y[s : s + EVAL_CHUNK]) * len(mu)
    return total / len(y)


def train(
    data: WindowSet,
    cfg: TrainConfig,
    features: FeatureParams = FeatureParams(),
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> Checkpoint:
    """Fit the network with Adam and early stopping on validation NLL.

    Each epoch reshuffles the training windows with a generator seeded from
    ``(cfg.seed, epoch)``; the same generator draws that epoch's dropout
    masks.  Training stops after ``cfg.patience`` consecutive epochs without
    a strict improvement (one, when patience is 0) or at ``cfg.max_epochs``.
    The returned checkpoint holds the best-validation parameters.
    """
    train_set, val_set = split_train_val(data, cfg.val_fraction)
    norm = fit_normalizer(train_set)
    Xtr, ytr = norm.inputs(train_set.inputs), norm.target(train_set.targets)
    Xva, yva = norm.inputs(val_set.inputs), norm.target(val_set.targets)

    params = init_params(cfg.model_config(), cfg.seed)
    state = AdamState.zeros_like(params)
    history = TrainingHistory(initial_val_loss=evaluate_nll(params, Xva, yva))
    best_params, best_state = params, state
    best_val = math.inf
    wait = 0
    n = len(ytr)
    history.stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        running = 0.0
        for batch, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            try:
                loss, grads = loss_and_grads(params, Xtr[idx], ytr[idx], "train", rng)
            except NumericalError as exc:
                raise TrainingDivergence(epoch, batch, math.nan) from exc
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch, batch, loss)
            params, state = adam_step(params, grads, state, cfg.lr)
            running += loss * len(idx)
        try:
            val = evaluate_nll(params, Xva, yva)
        except NumericalError as exc:
            raise TrainingDivergence(epoch, -1, math.nan) from exc
        if not math.isfinite(val):
            raise TrainingDivergence(epoch, -1, val)
        history.train_loss.append(running / n)
        history.val_loss.append(val)
        if on_epoch is not None:
            on_epoch(epoch, running / n, val)
        if val < best_val:
            best_val, wait = val, 0
            best_params, best_state = params, state
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= max(cfg.patience, 1):
                history.stop_reason = "early_stopping"
                break
    log.info("training stopped (%s) after %d epochs; best epoch %d val %.4f",
             history.stop_reason, len(history.val_loss), history.best_epoch, best_val)
    return Checkpoint(best_params, best_state, cfg, norm, features, history)


@dataclass
class Predictions:
    anchors: np.ndarray  # slot index of the last observed input
    anchor_ts: np.ndarray  # epoch minutes of the anchor slot
    target_ts: np.ndarray  # epoch minutes the forecast refers to
    mu: np.ndarray  # mg/dl
    sigma2: np.ndarray  # (mg/dl)^2

    def __len__(self) -> int:
        return len(self.anchors)


def predict(ckpt: Checkpoint, block: ChannelBlock) -> Predictions:
    """Eval-mode forecasts for every anchor with a fully observed history."""
    h = ckpt.config.history_slots
    X = block.matrix()
    present = ~np.isnan(block.glucose)
    if len(block) < h:
        anchors = np.empty(0, dtype=np.int64)
    else:
        full = np.lib.stride_tricks.sliding_window_view(present, h).all(axis=1)
        anchors = np.flatnonzero(full) + h - 1
    mus, s2s = [], []
    for s in range(0, len(anchors), EVAL_CHUNK):
        chunk = anchors[s : s + EVAL_CHUNK]
        idx = chunk[:, None] + np.arange(-h + 1, 1)[None, :]
        mu, s2, _ = stacked_forward(ckpt.params, ckpt.normalizer.inputs(X[idx]), "eval")
        mus.append(ckpt.normalizer.inverse_target(mu))
        s2s.append(ckpt.normalizer.inverse_variance(s2))
    mu = np.concatenate(mus) if mus else np.empty(0)
    sigma2 = np.concatenate(s2s) if s2s else np.empty(0)
    anchor_ts = block.start + SLOT_MINUTES * anchors
    return Predictions(anchors, anchor_ts, anchor_ts + SLOT_MINUTES * ckpt.config.ph_slots, mu, sigma2)
