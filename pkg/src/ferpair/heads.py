"""Linear heads over frozen features.

A :class:`MultiOutputHead` holds the expression, valence, arousal and
(optional) landmark layers. A :class:`PairwiseHeadDict` maps each class
pair to its own 2-way layer, either stacked on the general expression
logits or reading the raw features directly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import NUM_CLASSES, PairKey
from .exceptions import ConfigError, DataError
from .losses import HeadOutputs, cosine_backward, cosine_logits

CHECKPOINT_FORMAT = "ferpair-checkpoint"
CHECKPOINT_VERSION = 1

STACKED = "stacked"
DETACHED = "detached"
PAIR_MODES = (STACKED, DETACHED)


@dataclass(frozen=True)
class LinearHead:
    """``W x + b``, or ``s * cos(x, W_j)`` when ``normalized`` (no bias)."""

    W: np.ndarray
    b: np.ndarray | None = None
    normalized: bool = False
    s: float = 64.0

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise DataError(f"W must be 2-D, got shape {W.shape}")
        object.__setattr__(self, "W", W)
        if self.normalized and self.b is not None:
            raise ConfigError("a normalized head has no bias")
        if self.b is not None:
            b = np.asarray(self.b, dtype=np.float64).reshape(-1)
            if b.shape != (W.shape[0],):
                raise DataError(f"bias shape {b.shape} does not match W {W.shape}")
            object.__setattr__(self, "b", b)

    @property
    def c_out(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise DataError(f"input dimension {x.shape[-1]} does not match head dimension {self.d}")
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check(x)
        if self.normalized:
            return self.s * cosine_logits(x, self.W)
        out = x @ self.W.T
        return out if self.b is None else out + self.b

    def backward(self, x, grad_out) -> dict:
        """Parameter gradients for upstream gradient ``grad_out`` (same shape as the output)."""
        x = self._check(x)
        if self.normalized:
            _, gW = cosine_backward(x, self.W, self.s * np.asarray(grad_out))
            return {"W": gW}
        X = np.atleast_2d(x)
        G = np.asarray(grad_out, dtype=np.float64).reshape(X.shape[0], self.c_out)
        grads = {"W": G.T @ X}
        if self.b is not None:
            grads["b"] = G.sum(axis=0)
        return grads

    def parameters(self) -> dict:
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        return p

    def with_parameters(self, params: dict) -> LinearHead:
        return replace(self, W=params["W"], b=params.get("b", self.b))


def init_head(c_out: int, d: int, seed: int = 0, scale: float | None = None, *,
              bias: bool = True, normalized: bool = False, s: float = 64.0) -> LinearHead:
    """Uniform(-a, a) weights with ``a = 1/sqrt(d)`` unless ``scale`` is given."""
    if c_out < 1 or d < 1:
        raise ConfigError("head dimensions must be positive")
    a = 1.0 / np.sqrt(d) if scale is None else float(scale)
    rng = np.random.default_rng(seed)
    W = rng.uniform(-a, a, size=(c_out, d))
    b = None if (normalized or not bias) else np.zeros(c_out)
    return LinearHead(W, b, normalized, s)


@dataclass(frozen=True)
class MultiOutputHead:
    expression: LinearHead
    valence: LinearHead
    arousal: LinearHead
    landmarks: LinearHead | None = None

    def __post_init__(self):
        heads = [self.expression, self.valence, self.arousal] + ([self.landmarks] if self.landmarks else [])
        if len({h.d for h in heads}) != 1:
            raise DataError("all heads must share one input dimension")
        if self.valence.c_out != 1 or self.arousal.c_out != 1:
            raise DataError("valence and arousal heads have exactly one output")
        if self.landmarks is not None and self.landmarks.c_out % 2:
            raise DataError("landmark head output must be 2L")

    @property
    def feature_dim(self) -> int:
        return self.expression.d

    @property
    def n_classes(self) -> int:
        return self.expression.c_out

    @property
    def n_landmarks(self) -> int:
        return 0 if self.landmarks is None else self.landmarks.c_out // 2

    def named_heads(self) -> dict:
        out = {"expression": self.expression, "valence": self.valence, "arousal": self.arousal}
        if self.landmarks is not None:
            out["landmarks"] = self.landmarks
        return out

    def parameters(self) -> dict:
        return {f"{name}.{k}": v for name, h in self.named_heads().items() for k, v in h.parameters().items()}

    def with_parameters(self, params: dict) -> MultiOutputHead:
        new = {}
        for name, h in self.named_heads().items():
            sub = {k.split(".", 1)[1]: v for k, v in params.items() if k.split(".", 1)[0] == name}
            new[name] = h.with_parameters(sub)
        return MultiOutputHead(**new)


def init_multi_head(d: int, seed: int = 0, *, n_classes: int = NUM_CLASSES, n_landmarks: int = 0,
                    normalized: bool = False, s: float = 64.0) -> MultiOutputHead:
    ss = np.random.SeedSequence(seed).spawn(4)
    seeds = [int(x.generate_state(1)[0]) for x in ss]
    return MultiOutputHead(
        expression=init_head(n_classes, d, seeds[0], normalized=normalized, s=s),
        valence=init_head(1, d, seeds[1]),
        arousal=init_head(1, d, seeds[2]),
        landmarks=init_head(2 * n_landmarks, d, seeds[3]) if n_landmarks else None,
    )


def forward_general(head: MultiOutputHead, x) -> HeadOutputs:
    """Run all heads on one sample (D,) or a batch (B, D).

    Valence and arousal pass through tanh; landmarks stay affine.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.feature_dim:
        raise DataError(f"feature dimension {x.shape[-1]} does not match head dimension {head.feature_dim}")
    return HeadOutputs(
        expression_logits=head.expression.forward(x),
        valence=np.tanh(head.valence.forward(x)[..., 0]),
        arousal=np.tanh(head.arousal.forward(x)[..., 0]),
        landmarks=None if head.landmarks is None else head.landmarks.forward(x),
    )


def backward_general(head: MultiOutputHead, x, outputs: HeadOutputs, grads: dict) -> dict:
    """Parameter gradients from per-head output gradients (as produced by
    :func:`ferpair.losses.combined_loss`). Heads absent from ``grads`` get
    zero gradients."""
    out = {}
    for name, h in head.named_heads().items():
        g = grads.get(name)
        if g is None:
            out.update({f"{name}.{k}": np.zeros_like(v) for k, v in h.parameters().items()})
            continue
        g = np.asarray(g, dtype=np.float64)
        if name in ("valence", "arousal"):
            y = getattr(outputs, name)
            g = (g * (1.0 - y * y))[..., None]
        out.update({f"{name}.{k}": v for k, v in h.backward(x, g).items()})
    return out


def predict_expression(head: MultiOutputHead, x) -> np.ndarray:
    """Argmax class; ties resolve to the lower index."""
    return np.argmax(head.expression.forward(x), axis=-1)


def pair_eval_general(general: MultiOutputHead, x, key: PairKey):
    """Pick ``key.lo`` or ``key.hi`` by comparing only those two expression logits."""
    z = general.expression.forward(x)
    return np.where(z[..., key.hi] > z[..., key.lo], key.hi, key.lo)


@dataclass
class PairwiseHeadDict:
    """Independent 2-way heads per class pair.

    Output index 0 stands for ``key.lo`` and 1 for ``key.hi``. In stacked
    mode every head reads the 8 general expression logits; in detached mode
    it reads the raw ``feature_dim`` features.
    """

    mode: str
    feature_dim: int
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in PAIR_MODES:
            raise ConfigError(f"pair mode must be one of {PAIR_MODES}, got {self.mode!r}")
        for key, head in self.entries.items():
            self._check_entry(key, head)

    @property
    def input_dim(self) -> int:
        return NUM_CLASSES if self.mode == STACKED else self.feature_dim

    def _check_entry(self, key, head):
        if not isinstance(key, PairKey):
            raise ConfigError(f"entry keys must be PairKey, got {key!r}")
        if head.c_out != 2 or head.d != self.input_dim:
            raise DataError(f"pair head for {key.name} must be {self.input_dim}->2, got {head.d}->{head.c_out}")

    def __setitem__(self, key: PairKey, head: LinearHead):
        self._check_entry(key, head)
        self.entries[key] = head

    def __getitem__(self, key: PairKey) -> LinearHead:
        try:
            return self.entries[key]
        except KeyError:
            raise KeyError(f"no pair head for {key.name}") from None

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return sorted(self.entries)


def pair_inputs(mode: str, general: MultiOutputHead | None, x) -> np.ndarray:
    """What a pair head consumes: general expression logits (stacked) or ``x``."""
    if mode == STACKED:
        if general is None:
            raise ConfigError("stacked pair heads need the general head")
        return general.expression.forward(x)
    return np.asarray(x, dtype=np.float64)


def forward_pair(pairs: PairwiseHeadDict, general: MultiOutputHead | None, x, key: PairKey) -> np.ndarray:
    head = pairs[key]
    return head.forward(pair_inputs(pairs.mode, general, x))


def predict_pair(pairs: PairwiseHeadDict, general: MultiOutputHead | None, x, key: PairKey):
    z = forward_pair(pairs, general, x, key)
    return np.where(z[..., 1] > z[..., 0], key.hi, key.lo)


# --------------------------------------------------------------------------
# checkpoints

def _head_to_dict(h: LinearHead) -> dict:
    return {
        "c_out": h.c_out,
        "d": h.d,
        "normalized": h.normalized,
        "s": h.s,
        "W": h.W.ravel(order="C").tolist(),
        "b": None if h.b is None else h.b.tolist(),
    }


def _head_from_dict(d: dict) -> LinearHead:
    W = np.asarray(d["W"], dtype=np.float64).reshape(d["c_out"], d["d"])
    b = None if d["b"] is None else np.asarray(d["b"], dtype=np.float64)
    return LinearHead(W, b, bool(d["normalized"]), float(d["s"]))


def checkpoint_dict(obj) -> dict:
    base = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    if isinstance(obj, MultiOutputHead):
        base["kind"] = "multi_output"
        base["heads"] = {name: _head_to_dict(h) for name, h in obj.named_heads().items()}
    elif isinstance(obj, PairwiseHeadDict):
        base["kind"] = "pair_dict"
        base["mode"] = obj.mode
        base["feature_dim"] = obj.feature_dim
        base["entries"] = [{"pair": [k.lo, k.hi], "head": _head_to_dict(obj.entries[k])} for k in obj.keys()]
    else:
        raise ConfigError(f"cannot checkpoint {type(obj).__name__}")
    return base


def from_checkpoint_dict(d: dict):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise DataError("not a ferpair checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {d.get('version')}")
    if d["kind"] == "multi_output":
        heads = {name: _head_from_dict(h) for name, h in d["heads"].items()}
        return MultiOutputHead(**heads)
    if d["kind"] == "pair_dict":
        entries = {PairKey(*e["pair"]): _head_from_dict(e["head"]) for e in d["entries"]}
        return PairwiseHeadDict(d["mode"], int(d["feature_dim"]), entries)
    raise DataError(f"unknown checkpoint kind {d['kind']!r}")


def save_checkpoint(obj, path) -> None:
    text = json.dumps(checkpoint_dict(obj), sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_checkpoint(path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from None
    return from_checkpoint_dict(d)
