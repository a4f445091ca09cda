"""Loss values with analytic gradients, in float64.

Every function accepts a single sample (1-D inputs) or a batch (leading
batch axis). Batched values are means over the batch and gradients are
those of the mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .exceptions import ConfigError, DataError, NumericError

COS_CLAMP = 1e-7
PEARSON_MIN_VAR = 1e-12


@dataclass(frozen=True)
class AamParams:
    """Hypersphere scale ``s`` and additive angular margin ``m`` (radians)."""

    s: float = 64.0
    m: float = 0.5

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError(f"AAM scale s must be positive, got {self.s}")
        if not 0.0 <= self.m < math.pi / 2:
            raise ConfigError(f"AAM margin m must lie in [0, pi/2), got {self.m}")


@dataclass(frozen=True)
class SignedMseParams:
    """``kappa`` multiplies the extra penalty paid on sign mismatches."""

    kappa: float = 1.0

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ConfigError(f"kappa must be non-negative, got {self.kappa}")


@dataclass
class LossOutput:
    value: float
    grad: Any
    degenerate: bool = False
    terms: dict = field(default_factory=dict)


@dataclass
class HeadOutputs:
    """Predictions of the four heads; batched arrays or a single sample."""

    expression_logits: np.ndarray
    valence: np.ndarray
    arousal: np.ndarray
    landmarks: np.ndarray | None = None


@dataclass
class TargetBundle:
    expression: np.ndarray
    valence: np.ndarray
    arousal: np.ndarray
    landmarks: np.ndarray | None = None

    @classmethod
    def from_dataset(cls, dataset, indices=None) -> TargetBundle:
        idx = slice(None) if indices is None else indices
        return cls(
            dataset.expression[idx],
            dataset.valence[idx],
            dataset.arousal[idx],
            None if dataset.landmarks is None else dataset.landmarks[idx],
        )


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{name}: non-finite input")


def _as_batch(logits, target):
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    t = np.atleast_1d(np.asarray(target)).astype(np.int64)
    if z2.ndim != 2 or t.shape != (z2.shape[0],):
        raise DataError(f"logits {z.shape} and target {np.shape(target)} are inconsistent")
    return z2, t, single


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, target) -> LossOutput:
    """Cross-entropy of softmax(logits) at ``target``; grad wrt logits."""
    z, t, single = _as_batch(logits, target)
    B, C = z.shape
    if C < 2:
        raise DataError("softmax cross-entropy needs at least 2 classes")
    if np.any(t < 0) or np.any(t >= C):
        raise DataError(f"target outside 0..{C - 1}")
    _check_finite("softmax_ce", z)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    lse = np.log(e.sum(axis=1))
    rows = np.arange(B)
    # log1p keeps tiny losses distinguishable when the target is the max
    others = np.ones_like(e, dtype=bool)
    others[rows, t] = False
    rest = np.where(others, e, 0.0).sum(axis=1)
    top = shifted[rows, t] == 0.0
    per_row = np.where(top, np.log1p(np.where(top, rest, 0.0)), lse - shifted[rows, t])
    value = float(np.mean(per_row))
    grad = np.exp(shifted - lse[:, None])
    grad[rows, t] -= 1.0
    grad /= B
    return LossOutput(value, grad[0] if single else grad)


def _norms(a: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DataError(f"cosine logits undefined for a zero-norm {what}")
    return n


def cosine_logits(x, W) -> np.ndarray:
    """cos of the angle between ``x`` (or each row of a batch) and each row of ``W``."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    _check_finite("cosine_logits", x, W)
    u = x / _norms(x, "feature vector")
    V = W / _norms(W, "weight row")
    return np.clip(u @ V.T, -1.0, 1.0)


def cosine_backward(x, W, g):
    """Gradients wrt ``x`` and ``W`` given ``g = dL/dcos``.

    Shapes follow :func:`cosine_logits`: ``x`` is (D,) or (B, D) and ``g`` is
    (C,) or (B, C).
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    G = np.asarray(g, dtype=np.float64).reshape(X.shape[0], W.shape[0])
    xn = _norms(X, "feature vector")
    wn = _norms(W, "weight row")
    u = X / xn
    V = W / wn
    # rows clamped to +-1 in the forward pass have zero derivative
    G = np.where(np.abs(u @ V.T) > 1.0, 0.0, G)
    du = G @ V
    gx = (du - np.sum(du * u, axis=1, keepdims=True) * u) / xn
    dV = G.T @ u
    gW = (dV - np.sum(dV * V, axis=1, keepdims=True) * V) / wn
    return (gx[0] if single else gx), gW


def margin_logits(cos, target, params: AamParams):
    """Scaled logits with the margin applied to the target angle.

    Returns ``(logits, dphi, single)``: ``dphi`` is d cos(theta_t + m) / d
    cos(theta_t) per row, zero where the cosine was clamped; non-target
    logits are ``s * cos``.
    """
    c, t, single = _as_batch(cos, target)
    rows = np.arange(c.shape[0])
    ct = c[rows, t]
    if params.m == 0.0:
        phi = ct
        dphi = np.ones_like(ct)
    else:
        cc = np.clip(ct, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
        theta = np.arccos(cc)
        phi = np.cos(theta + params.m)
        dphi = np.sin(theta + params.m) / np.sin(theta)
        dphi = np.where(cc == ct, dphi, 0.0)
    out = c.copy()
    out[rows, t] = phi
    return params.s * out, dphi, single


def aam_loss(x, W, target, params: AamParams = AamParams()) -> LossOutput:
    """Additive angular margin loss; ``grad`` is ``{"x": ..., "W": ...}``."""
    cos = cosine_logits(x, W)
    logits, dphi, single = margin_logits(cos, target, params)
    ce = softmax_ce(logits, np.atleast_1d(target))
    if not math.isfinite(ce.value):
        raise NumericError("aam_loss: non-finite value")
    g = ce.grad * params.s
    t = np.atleast_1d(np.asarray(target)).astype(np.int64)
    rows = np.arange(g.shape[0])
    g[rows, t] *= dphi
    gx, gW = cosine_backward(x, W, g[0] if single else g)
    return LossOutput(ce.value, {"x": gx, "W": gW})


def _paired(pred, target, min_len):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise DataError(f"prediction length {p.size} != target length {t.size}")
    if p.size < min_len:
        raise DataError(f"need at least {min_len} values, got {p.size}")
    return p, t


def signed_mse(pred, target, params: SignedMseParams = SignedMseParams()) -> LossOutput:
    """Squared error scaled by ``1 + kappa`` where the signs disagree.

    Zero matches either sign. ``grad`` has the shape of ``pred``.
    """
    shape = np.shape(pred)
    p, t = _paired(pred, target, 1)
    _check_finite("signed_mse", p, t)
    mismatch = (p * t) < 0
    scale = 1.0 + params.kappa * mismatch
    r = p - t
    value = float(np.mean(r * r * scale))
    grad = (2.0 / p.size) * r * scale
    return LossOutput(value, grad.reshape(shape))


def pearson_loss(pred, target) -> LossOutput:
    """``1 - corr(pred, target)``.

    When either side has (sample) variance below 1e-12 the loss is 1 with a
    zero gradient and ``degenerate`` set.
    """
    shape = np.shape(pred)
    p, t = _paired(pred, target, 2)
    _check_finite("pearson_loss", p, t)
    a = p - p.mean()
    b = t - t.mean()
    if np.var(p, ddof=1) < PEARSON_MIN_VAR or np.var(t, ddof=1) < PEARSON_MIN_VAR:
        return LossOutput(1.0, np.zeros(shape), degenerate=True)
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    rho = float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
    drho = b / (na * nb) - rho * a / (na * na)
    return LossOutput(1.0 - rho, (-drho).reshape(shape))


REGRESSION_MODES = ("signed_mse", "pearson")


def _regression(mode, pred, target, smse):
    if mode == "signed_mse":
        return signed_mse(pred, target, smse)
    if mode == "pearson":
        return pearson_loss(pred, target)
    raise ConfigError(f"unknown regression mode {mode!r}; choose from {REGRESSION_MODES}")


def expression_loss(logits, target, expression: str | AamParams = "softmax") -> LossOutput:
    """Expression-head loss on logits.

    With :class:`AamParams` the logits are read as ``s * cos`` and the margin
    is applied to the target angle before the cross-entropy.
    """
    if isinstance(expression, AamParams):
        z = np.asarray(logits, dtype=np.float64)
        modified, dphi, single = margin_logits(z / expression.s, target, expression)
        ce = softmax_ce(modified, np.atleast_1d(target))
        g = ce.grad
        t = np.atleast_1d(np.asarray(target)).astype(np.int64)
        g[np.arange(g.shape[0]), t] *= dphi
        return LossOutput(ce.value, g[0] if single else g)
    if expression == "softmax":
        return softmax_ce(logits, target)
    raise ConfigError(f"unknown expression loss {expression!r}")


def combined_loss(
    outputs: HeadOutputs,
    targets: TargetBundle,
    regression_mode: str = "signed_mse",
    weights=(1.0, 1.0, 1.0, 1.0),
    *,
    expression: str | AamParams = "softmax",
    signed_mse_params: SignedMseParams = SignedMseParams(),
) -> LossOutput:
    """Weighted sum of expression, valence, arousal and landmark losses.

    ``grad`` maps head name to the gradient wrt that head's output. The
    landmark term is skipped when either side lacks landmarks.
    """
    w_e, w_v, w_a, w_l = (float(w) for w in weights)
    terms = {
        "expression": expression_loss(outputs.expression_logits, targets.expression, expression),
        "valence": _regression(regression_mode, outputs.valence, targets.valence, signed_mse_params),
        "arousal": _regression(regression_mode, outputs.arousal, targets.arousal, signed_mse_params),
    }
    wmap = {"expression": w_e, "valence": w_v, "arousal": w_a, "landmarks": w_l}
    if outputs.landmarks is not None and targets.landmarks is not None:
        terms["landmarks"] = _regression(regression_mode, outputs.landmarks, targets.landmarks, signed_mse_params)
    value = sum(wmap[k] * t.value for k, t in terms.items())
    if not math.isfinite(value):
        raise NumericError("combined_loss: non-finite value")
    grad = {k: wmap[k] * np.asarray(t.grad) for k, t in terms.items()}
    degenerate = any(t.degenerate for t in terms.values())
    return LossOutput(float(value), grad, degenerate, {k: t.value for k, t in terms.items()})
