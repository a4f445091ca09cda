"""ADAM with L2 weight decay, reduce-on-plateau scheduling and the general
and pairwise training loops. Everything is deterministic given the seed."""

from __future__ import annotations

import json
import logging
import math
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .datamodel import Dataset, PairKey, pair_view
from .exceptions import ConfigError, DataError, NumericError
from .heads import (
    DETACHED,
    PAIR_MODES,
    STACKED,
    MultiOutputHead,
    PairwiseHeadDict,
    backward_general,
    forward_general,
    init_head,
    init_multi_head,
    pair_inputs,
)
from .losses import (
    REGRESSION_MODES,
    AamParams,
    SignedMseParams,
    TargetBundle,
    combined_loss,
    softmax_ce,
)
from .sampling import PairBalanced, SamplerSpec, draw_epoch, parse_sampler

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One ADAM update with weight decay added to the gradient.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    """
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DataError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericError(f"non-finite gradient for {name} ({bad} entries) at step {t}")
        with np.errstate(over="ignore", invalid="ignore"):
            if weight_decay:
                g = g + weight_decay * p
            m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            updated = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if not np.all(np.isfinite(updated)):
            raise NumericError(f"update for {name} is not finite at step {t} (lr={lr:g})")
        new_params[name] = updated
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, m=new_m, v=new_v, t=t)


# --------------------------------------------------------------------------
# scheduler

@dataclass(frozen=True)
class RopState:
    current_lr: float
    patience: int = 5
    factor: float = 0.25
    threshold: float = 1e-4
    min_lr: float = 1e-8
    best_metric: float = math.inf
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if not self.current_lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"reduce-on-plateau factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")


def rop_update(state: RopState, epoch_metric: float) -> RopState:
    """Feed one epoch's metric (lower is better).

    After ``patience`` consecutive epochs without a relative improvement of
    ``threshold`` the rate is multiplied by ``factor`` (floored at
    ``min_lr``) and the counter restarts.
    """
    metric = float(epoch_metric)
    if not math.isfinite(metric):
        raise NumericError(f"plateau metric is not finite: {metric}")
    if metric < state.best_metric * (1.0 - state.threshold):
        return replace(state, best_metric=metric, epochs_since_improvement=0)
    waited = state.epochs_since_improvement + 1
    if waited >= state.patience:
        return replace(state, current_lr=max(state.current_lr * state.factor, state.min_lr), epochs_since_improvement=0)
    return replace(state, epochs_since_improvement=waited)


# --------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    epochs: int = 40
    batch_size: int = 256
    weight_decay: float = 5e-4
    seed: int = 0
    sampler: str = "natural"
    cap_multiplier: float = 2.0
    expression_loss: str = "softmax"
    aam: AamParams = AamParams()
    regression: str = "signed_mse"
    kappa: float = 1.0
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    rop_patience: int = 5
    rop_factor: float = 0.25
    rop_threshold: float = 1e-4
    min_lr: float = 1e-8
    rop_monitor: str = "train"

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.expression_loss not in ("softmax", "aam"):
            raise ConfigError(f"expression_loss must be 'softmax' or 'aam', got {self.expression_loss!r}")
        if self.regression not in REGRESSION_MODES:
            raise ConfigError(f"regression must be one of {REGRESSION_MODES}")
        if self.rop_monitor not in ("train", "val"):
            raise ConfigError("rop_monitor must be 'train' or 'val'")
        if isinstance(self.aam, dict):
            self.aam = AamParams(**self.aam)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 4:
            raise ConfigError("loss_weights needs four entries")
        SignedMseParams(self.kappa)
        parse_sampler(self.sampler)
        RopState(self.initial_lr, self.rop_patience, self.rop_factor)

    @classmethod
    def pairwise_defaults(cls, **overrides) -> TrainConfig:
        """30 epochs at 1e-4, factor 0.25 after a 5-epoch plateau, decay 5e-4, batch 256."""
        base = dict(initial_lr=1e-4, epochs=30, batch_size=256, weight_decay=5e-4, rop_patience=5, rop_factor=0.25)
        base.update(overrides)
        return cls(**base)

    @property
    def expression_spec(self):
        return self.aam if self.expression_loss == "aam" else "softmax"

    def sampler_spec(self, seed: int | None = None) -> SamplerSpec:
        return parse_sampler(self.sampler, cap_multiplier=self.cap_multiplier, seed=self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aam"] = {"s": self.aam.s, "m": self.aam.m}
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "aam" in d and isinstance(d["aam"], dict):
            d["aam"] = AamParams(**d["aam"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float


class GeneralTraining(NamedTuple):
    head: MultiOutputHead
    history: list


class PairTraining(NamedTuple):
    pairs: PairwiseHeadDict
    history: dict
    skipped: list


def _batches(order: np.ndarray, batch_size: int, min_last: int = 1):
    bounds = list(range(0, len(order), batch_size)) + [len(order)]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < min_last:
        del bounds[-2]
    for a, b in zip(bounds[:-1], bounds[1:]):
        yield order[a:b]


def _nan_to_none(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


def history_to_json(history) -> list:
    return [{k: _nan_to_none(v) for k, v in asdict(r).items()} for r in history]


# --------------------------------------------------------------------------
# general head

def evaluate_general(head: MultiOutputHead, data: Dataset, config: TrainConfig) -> tuple[float, float]:
    """(combined loss, expression accuracy) over the whole dataset."""
    if len(data) == 0:
        return math.nan, math.nan
    out = forward_general(head, data.features)
    loss = combined_loss(
        out,
        TargetBundle.from_dataset(data),
        config.regression,
        config.loss_weights,
        expression=config.expression_spec,
        signed_mse_params=SignedMseParams(config.kappa),
    )
    acc = float(np.mean(np.argmax(out.expression_logits, axis=1) == data.expression))
    return loss.value, acc


def train_general(train: Dataset, val: Dataset | None, config: TrainConfig,
                  head: MultiOutputHead | None = None) -> GeneralTraining:
    """Fit the multi-output head on frozen features.

    Returns the trained head and one :class:`EpochRecord` per epoch.
    """
    if len(train) == 0:
        raise DataError("training set is empty")
    if val is not None and val.feature_dim != train.feature_dim:
        raise DataError("train and validation feature dimensions differ")
    if head is None:
        head = init_multi_head(
            train.feature_dim,
            config.seed,
            n_landmarks=train.n_landmarks,
            normalized=config.expression_loss == "aam",
            s=config.aam.s,
        )
    elif head.feature_dim != train.feature_dim:
        raise DataError(f"head expects {head.feature_dim} features, data has {train.feature_dim}")

    spec = config.sampler_spec()
    smse = SignedMseParams(config.kappa)
    adam = AdamState()
    rop = RopState(config.initial_lr, config.rop_patience, config.rop_factor, config.rop_threshold, config.min_lr)
    min_last = 2 if config.regression == "pearson" else 1
    history = []
    params = head.parameters()

    for epoch in range(config.epochs):
        order = draw_epoch(train, spec, epoch)
        lr = rop.current_lr
        total, count = 0.0, 0
        for bi, idx in enumerate(_batches(order, config.batch_size, min_last)):
            X = train.features[idx]
            out = forward_general(head, X)
            try:
                loss = combined_loss(
                    out,
                    TargetBundle.from_dataset(train, idx),
                    config.regression,
                    config.loss_weights,
                    expression=config.expression_spec,
                    signed_mse_params=smse,
                )
                grads = backward_general(head, X, out, loss.grad)
                params, adam = adam_step(params, grads, adam, lr, config.weight_decay)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {bi}: {exc}") from exc
            head = head.with_parameters(params)
            total += loss.value * len(idx)
            count += len(idx)
        train_loss = total / count
        val_loss, val_acc = evaluate_general(head, val, config) if val is not None else (math.nan, math.nan)
        history.append(EpochRecord(epoch, train_loss, val_loss, val_acc, lr))
        log.debug("epoch %d train %.5f val %.5f acc %.4f lr %g", epoch, train_loss, val_loss, val_acc, lr)
        monitored = val_loss if config.rop_monitor == "val" and val is not None else train_loss
        rop = rop_update(rop, monitored)
    return GeneralTraining(head, history)


# --------------------------------------------------------------------------
# pairwise dictionary

def pair_seed(seed: int, key: PairKey) -> int:
    """Per-pair seed that does not depend on which other pairs are trained."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key.lo, key.hi]).generate_state(1)[0])


def _pair_accuracy(head, inputs, labels01) -> float:
    z = head.forward(inputs)
    return float(np.mean((z[:, 1] > z[:, 0]).astype(np.int64) == labels01))


def _train_one_pair(train: Dataset, key: PairKey, general, config: TrainConfig, mode: str, val: Dataset | None):
    seed = pair_seed(config.seed, key)
    pv = pair_view(train, key)
    inputs = pair_inputs(mode, general, pv.features)
    labels = (pv.expression == key.hi).astype(np.int64)
    head = init_head(2, inputs.shape[1], seed)
    spec = SamplerSpec(PairBalanced(key), seed)

    val_inputs = val_labels = None
    if val is not None:
        vv = pair_view(val, key)
        if vv.class_counts[key.lo] and vv.class_counts[key.hi]:
            vv = vv.subset(np.sort(draw_epoch(vv, SamplerSpec(PairBalanced(key), seed))))
            val_inputs = pair_inputs(mode, general, vv.features)
            val_labels = (vv.expression == key.hi).astype(np.int64)

    adam = AdamState()
    rop = RopState(config.initial_lr, config.rop_patience, config.rop_factor, config.rop_threshold, config.min_lr)
    params = head.parameters()
    history = []
    for epoch in range(config.epochs):
        order = draw_epoch(pv, spec, epoch)
        lr = rop.current_lr
        total = 0.0
        for bi, idx in enumerate(_batches(order, config.batch_size)):
            try:
                ce = softmax_ce(head.forward(inputs[idx]), labels[idx])
                params, adam = adam_step(params, head.backward(inputs[idx], ce.grad), adam, lr, config.weight_decay)
            except NumericError as exc:
                raise NumericError(f"pair {key.name} epoch {epoch} batch {bi}: {exc}") from exc
            head = head.with_parameters(params)
            total += ce.value * len(idx)
        train_loss = total / len(order)
        if val_inputs is not None:
            val_loss = softmax_ce(head.forward(val_inputs), val_labels).value
            val_acc = _pair_accuracy(head, val_inputs, val_labels)
        else:
            val_loss = val_acc = math.nan
        history.append(EpochRecord(epoch, train_loss, val_loss, val_acc, lr))
        monitored = val_loss if config.rop_monitor == "val" and val_inputs is not None else train_loss
        rop = rop_update(rop, monitored)
    return head, history


def train_pairwise(train: Dataset, keys, general: MultiOutputHead | None = None,
                   config: TrainConfig | None = None, mode: str = DETACHED,
                   val: Dataset | None = None, jobs: int = 1) -> PairTraining:
    """Train one independent 2-way head per pair with pair-balanced epochs.

    Pairs with an empty class are skipped and listed in ``skipped``.
    Results do not depend on ``jobs``.
    """
    config = config or TrainConfig.pairwise_defaults()
    if mode not in PAIR_MODES:
        raise ConfigError(f"mode must be one of {PAIR_MODES}")
    if mode == STACKED:
        if general is None:
            raise ConfigError("stacked mode requires a trained general head")
        if general.feature_dim != train.feature_dim:
            raise DataError("general head and training data feature dimensions differ")
    keys = sorted(set(keys))
    pairs = PairwiseHeadDict(mode, train.feature_dim)
    skipped, runnable = [], []
    for key in keys:
        if train.class_counts[key.lo] == 0 or train.class_counts[key.hi] == 0:
            skipped.append(key)
        else:
            runnable.append(key)

    def run(key):
        return _train_one_pair(train, key, general, config, mode, val)

    if jobs > 1 and len(runnable) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, runnable))
    else:
        results = [run(k) for k in runnable]
    history = {}
    for key, (head, hist) in zip(runnable, results):
        pairs[key] = head
        history[key] = hist
    return PairTraining(pairs, history, skipped)


# --------------------------------------------------------------------------
# manifests

def environment_info() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__}


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")
