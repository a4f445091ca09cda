"""Samples, datasets, class pairs, the tab-separated feature file format and
a seeded Gaussian-mixture generator for desk-scale experiments."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import math
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from itertools import combinations
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, DataError, FeatureFileError

CLASS_NAMES = ("Neutral", "Happy", "Sad", "Surprise", "Fear", "Disgust", "Anger", "Contempt")
NUM_CLASSES = len(CLASS_NAMES)

# Cleaned training distribution and the two held-out test distributions.
AFFECTNET_COUNTS = (74874, 134415, 25459, 14090, 6378, 3803, 24882, 3750)
BALANCED_TEST_COUNTS = (500, 500, 500, 500, 500, 500, 500, 499)
SKEWED_TEST_COUNTS = (278, 500, 94, 52, 23, 14, 92, 13)

# (valence, arousal) centre per class for synthetic data. These are a
# design choice, not annotated values.
DEFAULT_VA_ANCHORS = (
    (0.0, 0.0),
    (0.8, 0.5),
    (-0.6, -0.4),
    (0.3, 0.8),
    (-0.6, 0.7),
    (-0.7, 0.3),
    (-0.5, 0.7),
    (-0.5, 0.2),
)


def class_index(name: str | int) -> int:
    """Resolve a class name (case-insensitive) or index to an index."""
    if isinstance(name, (int, np.integer)):
        idx = int(name)
    else:
        lowered = str(name).strip().lower()
        if lowered.isdigit():
            idx = int(lowered)
        else:
            names = [n.lower() for n in CLASS_NAMES]
            if lowered not in names:
                raise ConfigError(f"unknown class {name!r}")
            idx = names.index(lowered)
    if not 0 <= idx < NUM_CLASSES:
        raise ConfigError(f"class index {idx} outside 0..{NUM_CLASSES - 1}")
    return idx


@dataclass(frozen=True, order=True)
class PairKey:
    """Unordered class pair stored canonically as ``lo < hi``."""

    lo: int
    hi: int

    def __post_init__(self):
        lo, hi = int(self.lo), int(self.hi)
        if not (0 <= lo < NUM_CLASSES and 0 <= hi < NUM_CLASSES):
            raise ConfigError(f"pair ({lo}, {hi}) has a class outside 0..{NUM_CLASSES - 1}")
        if lo >= hi:
            raise ConfigError(f"pair requires lo < hi, got ({lo}, {hi}); use PairKey.of")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def of(cls, a, b) -> PairKey:
        a, b = class_index(a), class_index(b)
        if a == b:
            raise ConfigError(f"a pair needs two distinct classes, got {a} twice")
        return cls(min(a, b), max(a, b))

    @classmethod
    def parse(cls, text: str) -> PairKey:
        """Parse ``"fear-contempt"``, ``"Fear+Contempt"`` or ``"4-7"``."""
        for sep in ("+", "-", ",", ":"):
            if sep in text:
                a, b = text.split(sep, 1)
                return cls.of(a, b)
        raise ConfigError(f"cannot parse pair {text!r}")

    @property
    def name(self) -> str:
        return f"{CLASS_NAMES[self.lo]}+{CLASS_NAMES[self.hi]}"

    @property
    def slug(self) -> str:
        return f"{CLASS_NAMES[self.lo].lower()}-{CLASS_NAMES[self.hi].lower()}"

    def __iter__(self):
        yield self.lo
        yield self.hi


def all_pairs(n_classes: int = NUM_CLASSES) -> list[PairKey]:
    return [PairKey(a, b) for a, b in combinations(range(n_classes), 2)]


@dataclass(frozen=True)
class FeatureRecord:
    id: str
    features: np.ndarray
    expression: int
    valence: float
    arousal: float
    landmarks: np.ndarray | None = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class Dataset:
    """Column-oriented, immutable collection of feature records.

    Parameters
    ----------
    ids : sequence of str
    features : array of shape (n, D)
    expression : int array of shape (n,), values in 0..7
    valence, arousal : float arrays of shape (n,), values in [-1, 1]
    landmarks : float array of shape (n, 2L) or None
    """

    def __init__(self, ids, features, expression, valence, arousal, landmarks=None, feature_dim=None):
        features = np.asarray(features, dtype=np.float64)
        n = len(ids)
        if features.ndim == 1 and n == 0:
            features = features.reshape(0, feature_dim or 0)
        if features.ndim != 2 or features.shape[0] != n:
            raise DataError(f"features must have shape (n={n}, D), got {features.shape}")
        if feature_dim is not None and features.shape[1] != feature_dim:
            raise DataError(f"feature_dim {feature_dim} does not match features {features.shape}")
        expression = np.asarray(expression, dtype=np.int64).reshape(-1)
        valence = np.asarray(valence, dtype=np.float64).reshape(-1)
        arousal = np.asarray(arousal, dtype=np.float64).reshape(-1)
        for nm, col in (("expression", expression), ("valence", valence), ("arousal", arousal)):
            if col.shape[0] != n:
                raise DataError(f"{nm} has {col.shape[0]} entries, expected {n}")
        if n:
            if expression.min() < 0 or expression.max() >= NUM_CLASSES:
                raise DataError(f"expression labels must lie in 0..{NUM_CLASSES - 1}")
            if not np.all(np.isfinite(features)):
                raise DataError("features contain non-finite values")
            for nm, col in (("valence", valence), ("arousal", arousal)):
                if not np.all(np.isfinite(col)) or np.any(np.abs(col) > 1.0):
                    raise DataError(f"{nm} must lie in [-1, 1]")
        if landmarks is not None:
            landmarks = np.asarray(landmarks, dtype=np.float64)
            if landmarks.ndim == 1 and n == 0:
                landmarks = landmarks.reshape(0, 0)
            if landmarks.ndim != 2 or landmarks.shape[0] != n or landmarks.shape[1] % 2:
                raise DataError(f"landmarks must have shape (n, 2L), got {landmarks.shape}")
            if landmarks.shape[1] == 0:
                landmarks = None
            elif not np.all(np.isfinite(landmarks)):
                raise DataError("landmarks contain non-finite values")

        self.ids = tuple(str(i) for i in ids)
        self.features = _readonly(features)
        self.expression = _readonly(expression)
        self.valence = _readonly(valence)
        self.arousal = _readonly(arousal)
        self.landmarks = None if landmarks is None else _readonly(landmarks)
        self.feature_dim = int(features.shape[1])
        counts = np.bincount(expression, minlength=NUM_CLASSES) if n else np.zeros(NUM_CLASSES, np.int64)
        self.class_counts = _readonly(counts.astype(np.int64))

    @classmethod
    def from_records(cls, records: Sequence[FeatureRecord], feature_dim: int | None = None) -> Dataset:
        records = list(records)
        if not records:
            return cls.empty(feature_dim or 0)
        lms = [r.landmarks for r in records]
        has_lm = [lm is not None and len(lm) > 0 for lm in lms]
        if any(has_lm) and not all(has_lm):
            raise DataError("either every record carries landmarks or none does")
        return cls(
            [r.id for r in records],
            np.stack([np.asarray(r.features, dtype=np.float64) for r in records]),
            [r.expression for r in records],
            [r.valence for r in records],
            [r.arousal for r in records],
            np.stack(lms) if all(has_lm) else None,
            feature_dim=feature_dim,
        )

    @classmethod
    def empty(cls, feature_dim: int, n_landmarks: int = 0) -> Dataset:
        lm = np.zeros((0, 2 * n_landmarks)) if n_landmarks else None
        return cls([], np.zeros((0, feature_dim)), [], [], [], lm)

    @property
    def n_landmarks(self) -> int:
        return 0 if self.landmarks is None else self.landmarks.shape[1] // 2

    @property
    def present_classes(self) -> np.ndarray:
        return np.flatnonzero(self.class_counts)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> FeatureRecord:
        return FeatureRecord(
            id=self.ids[i],
            features=self.features[i],
            expression=int(self.expression[i]),
            valence=float(self.valence[i]),
            arousal=float(self.arousal[i]),
            landmarks=None if self.landmarks is None else self.landmarks[i],
        )

    def __iter__(self) -> Iterator[FeatureRecord]:
        for i in range(len(self)):
            yield self[i]

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, feature_dim={self.feature_dim}, class_counts={self.class_counts.tolist()})"

    def subset(self, indices) -> Dataset:
        """Rows at ``indices``, in that order (duplicates allowed)."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return Dataset(
            [self.ids[i] for i in idx],
            self.features[idx],
            self.expression[idx],
            self.valence[idx],
            self.arousal[idx],
            None if self.landmarks is None else self.landmarks[idx],
            feature_dim=self.feature_dim,
        )

    def equals(self, other: Dataset) -> bool:
        if not isinstance(other, Dataset) or self.ids != other.ids:
            return False
        if (self.landmarks is None) != (other.landmarks is None):
            return False
        pairs = [
            (self.features, other.features),
            (self.expression, other.expression),
            (self.valence, other.valence),
            (self.arousal, other.arousal),
        ]
        if self.landmarks is not None:
            pairs.append((self.landmarks, other.landmarks))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.ids).encode())
        for a in (self.features, self.expression, self.valence, self.arousal, self.landmarks):
            if a is not None:
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# feature file I/O

def _fmt(v) -> str:
    return repr(float(v))


def write_feature_file(dataset: Dataset, dest) -> None:
    """Write ``dataset`` in the tab-separated feature format.

    Floats are written with ``repr`` so a reload reproduces them exactly.
    ``dest`` is a path or a text/binary file object.
    """
    lines = [f"# ferpair feature file: id expression valence arousal L lm[2L] D f[D]\n"]
    L = dataset.n_landmarks
    D = dataset.feature_dim
    for i in range(len(dataset)):
        fields = [dataset.ids[i], str(int(dataset.expression[i])), _fmt(dataset.valence[i]), _fmt(dataset.arousal[i]), str(L)]
        if L:
            fields.extend(_fmt(v) for v in dataset.landmarks[i])
        fields.append(str(D))
        fields.extend(_fmt(v) for v in dataset.features[i])
        lines.append("\t".join(fields) + "\n")
    text = "".join(lines)
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    elif isinstance(dest, io.TextIOBase):
        dest.write(text)
    else:
        dest.write(text.encode("utf-8"))


def _parse_float(tok: str, what: str, row: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise FeatureFileError(f"{what} {tok!r} is not a number", row) from None
    if not math.isfinite(v):
        raise FeatureFileError(f"{what} {tok!r} is not finite", row)
    return v


def _parse_int(tok: str, what: str, row: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise FeatureFileError(f"{what} {tok!r} is not an integer", row) from None


def load_feature_file(source, dim_hint: int | None = None) -> Dataset:
    """Parse a feature file into a :class:`Dataset`, preserving row order.

    ``source`` may be a path, a binary stream or a text stream. Errors name
    the offending 1-based line number.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            raw = fh.read()
    else:
        raw = source.read()
    text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw

    ids, feats, expr, val, aro, lms = [], [], [], [], [], []
    dim = dim_hint
    n_lm = None
    for row, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split("\t")
        if len(tok) < 6:
            raise FeatureFileError(f"expected at least 6 fields, found {len(tok)}", row)
        label = _parse_int(tok[1], "expression", row)
        if not 0 <= label < NUM_CLASSES:
            raise FeatureFileError(f"expression {label} outside 0..{NUM_CLASSES - 1}", row)
        v = _parse_float(tok[2], "valence", row)
        a = _parse_float(tok[3], "arousal", row)
        if not -1.0 <= v <= 1.0:
            raise FeatureFileError(f"valence {v} outside [-1, 1]", row)
        if not -1.0 <= a <= 1.0:
            raise FeatureFileError(f"arousal {a} outside [-1, 1]", row)
        L = _parse_int(tok[4], "landmark count", row)
        if L < 0:
            raise FeatureFileError(f"landmark count {L} is negative", row)
        pos = 5 + 2 * L
        if len(tok) <= pos:
            raise FeatureFileError(f"expected {2 * L} landmark values and a feature count", row)
        D = _parse_int(tok[pos], "feature count", row)
        if D < 1:
            raise FeatureFileError(f"feature count {D} must be positive", row)
        if len(tok) != pos + 1 + D:
            raise FeatureFileError(f"expected {pos + 1 + D} fields, found {len(tok)}", row)
        if dim is not None and D != dim:
            raise FeatureFileError(f"feature dimension {D} differs from expected {dim}", row)
        if n_lm is not None and L != n_lm:
            raise FeatureFileError(f"landmark count {L} differs from earlier rows ({n_lm})", row)
        dim, n_lm = D, L
        lms.append([_parse_float(t, "landmark", row) for t in tok[5:pos]])
        feats.append([_parse_float(t, "feature", row) for t in tok[pos + 1:]])
        ids.append(tok[0])
        expr.append(label)
        val.append(v)
        aro.append(a)

    if not ids:
        raise FeatureFileError("no records")
    landmarks = np.asarray(lms, dtype=np.float64) if n_lm else None
    return Dataset(ids, np.asarray(feats, dtype=np.float64), expr, val, aro, landmarks)


# --------------------------------------------------------------------------
# synthesis

@dataclass
class SynthesisConfig:
    """Per-class isotropic Gaussian clusters; class ``c`` is row ``c``.

    Fewer than eight classes may be given; they occupy indices ``0..K-1``.
    """

    counts: Sequence[int]
    means: np.ndarray
    stddevs: Sequence[float]
    seed: int = 0
    va_anchors: Sequence[Sequence[float]] = DEFAULT_VA_ANCHORS
    va_noise: float = 0.1
    n_landmarks: int = 0
    landmark_noise: float = 0.05
    feature_dim: int = field(init=False)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.counts = [int(c) for c in self.counts]
        self.stddevs = [float(s) for s in np.broadcast_to(np.asarray(self.stddevs, dtype=float), (len(self.counts),))]
        self.feature_dim = int(self.means.shape[1])
        k = len(self.counts)
        if not 1 <= k <= NUM_CLASSES:
            raise ConfigError(f"between 1 and {NUM_CLASSES} classes required, got {k}")
        if self.means.shape[0] != k:
            raise ConfigError(f"means has {self.means.shape[0]} rows for {k} classes")
        if any(c <= 0 for c in self.counts):
            raise ConfigError("every class count must be positive")
        if any(not s > 0 for s in self.stddevs):
            raise ConfigError("every stddev must be positive")
        if len(self.va_anchors) < k:
            raise ConfigError("one valence/arousal anchor per class is required")
        if self.va_noise < 0 or self.landmark_noise < 0 or self.n_landmarks < 0:
            raise ConfigError("noise levels and landmark count must be non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["means"] = self.means.tolist()
        d["va_anchors"] = [list(map(float, a)) for a in self.va_anchors[: len(self.counts)]]
        return d


def synthesize_dataset(config: SynthesisConfig) -> Dataset:
    """Draw ``config.counts[c]`` samples around ``config.means[c]``.

    Valence and arousal come from the class anchor plus Gaussian noise,
    clipped to [-1, 1]. Row order is shuffled; ids follow the final order.
    """
    rng = np.random.default_rng(config.seed)
    D = config.feature_dim
    lm_anchor = None
    if config.n_landmarks:
        lm_anchor = rng.uniform(-1.0, 1.0, size=(len(config.counts), 2 * config.n_landmarks))
    X, y, va, lm = [], [], [], []
    for c, n in enumerate(config.counts):
        X.append(config.means[c] + config.stddevs[c] * rng.standard_normal((n, D)))
        y.append(np.full(n, c, dtype=np.int64))
        anchor = np.asarray(config.va_anchors[c], dtype=np.float64)
        va.append(np.clip(anchor + config.va_noise * rng.standard_normal((n, 2)), -1.0, 1.0))
        if lm_anchor is not None:
            lm.append(lm_anchor[c] + config.landmark_noise * rng.standard_normal((n, lm_anchor.shape[1])))
    order = rng.permutation(sum(config.counts))
    X = np.concatenate(X)[order]
    y = np.concatenate(y)[order]
    va = np.concatenate(va)[order]
    landmarks = np.concatenate(lm)[order] if lm else None
    ids = [f"s{i:07d}" for i in range(len(order))]
    return Dataset(ids, X, y, va[:, 0], va[:, 1], landmarks)


def scale_counts(counts: Sequence[int], scale: float) -> list[int]:
    """Scale class counts, rounding half up, with at least one per class."""
    factor = Decimal(str(scale))
    if factor <= 0:
        raise ConfigError("scale must be positive")
    return [max(1, int((Decimal(c) * factor).quantize(Decimal(1), rounding=ROUND_HALF_UP))) for c in counts]


def orthogonal_means(n_classes: int, dim: int, separation: float, seed: int = 0) -> np.ndarray:
    """Class means ``separation * q_c`` for random orthonormal ``q_c``.

    Every pair of means is ``separation * sqrt(2)`` apart.
    """
    if dim < n_classes:
        raise ConfigError(f"feature dimension {dim} must be at least the number of classes {n_classes}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    q = q * np.sign(np.diag(r))
    return separation * q.T


PROFILES = {
    "affectnet-skew": AFFECTNET_COUNTS,
    "balanced-test": BALANCED_TEST_COUNTS,
    "skewed-test": SKEWED_TEST_COUNTS,
}


def profile_config(
    profile: str,
    *,
    scale: float = 1.0,
    dim: int = 32,
    separation: float = 2.0,
    stddev: float = 1.0,
    seed: int = 0,
    geometry_seed: int = 0,
    n_landmarks: int = 0,
) -> SynthesisConfig:
    """Preset configs whose counts follow the training / test distributions.

    ``geometry_seed`` fixes the class means so a training profile and a test
    profile generated with different ``seed`` values share one geometry.
    """
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    counts = PROFILES[profile]
    if scale != 1.0:
        counts = scale_counts(counts, scale)
    return SynthesisConfig(
        counts=list(counts),
        means=orthogonal_means(NUM_CLASSES, dim, separation, geometry_seed),
        stddevs=[stddev] * NUM_CLASSES,
        seed=seed,
        n_landmarks=n_landmarks,
    )


# --------------------------------------------------------------------------
# views

def class_distribution(data) -> np.ndarray:
    """Class proportions of a :class:`Dataset` or a raw count vector."""
    counts = np.asarray(data.class_counts if isinstance(data, Dataset) else data, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise DataError("class distribution of an empty dataset is undefined")
    return counts / total


def pair_view(dataset: Dataset, key: PairKey) -> Dataset:
    """Records labelled ``key.lo`` or ``key.hi``, original labels kept."""
    mask = (dataset.expression == key.lo) | (dataset.expression == key.hi)
    return dataset.subset(np.flatnonzero(mask))


def split(dataset: Dataset, train_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split. Each class sends ``floor(fraction * n_c)`` rows to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(NUM_CLASSES):
        idx = np.flatnonzero(dataset.expression == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        # tolerance guards products such as 0.29 * 100 = 28.999...
        n_train = int(math.floor(train_fraction * idx.size + 1e-9))
        train_idx.append(idx[:n_train])
        val_idx.append(idx[n_train:])
    return (
        dataset.subset(np.sort(np.concatenate(train_idx))),
        dataset.subset(np.sort(np.concatenate(val_idx))),
    )
