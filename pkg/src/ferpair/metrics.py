"""Confusion matrices, precision/recall/F1 and the report tables.

Percentages are formatted with one decimal, precision/recall/F1 with three.
Zero denominators give 0 rather than NaN so every report is total.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .datamodel import CLASS_NAMES, NUM_CLASSES, PairKey
from .exceptions import DataError

FORMATS = ("tsv", "markdown")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, labels, n_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise DataError(f"{preds.size} predictions for {labels.size} labels")
    for nm, a in (("prediction", preds), ("label", labels)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise DataError(f"{nm} outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


def f1_score(precision, recall):
    """Harmonic mean of precision and recall, 0 when both are 0."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    f = _safe_div(2.0 * p * r, p + r)
    return float(f) if f.ndim == 0 else f


@dataclass
class ClassificationReport:
    confusion: ConfusionMatrix
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    class_names: tuple = CLASS_NAMES


def class_metrics(cm: ConfusionMatrix, class_names: Sequence[str] = CLASS_NAMES) -> ClassificationReport:
    """Per-class and overall metrics.

    Weighted averages use class support (so weighted recall equals
    accuracy). Macro averages run over classes that occur as truth or
    prediction.
    """
    c = cm.counts
    total = int(c.sum())
    if total == 0:
        raise DataError("metrics of an empty confusion matrix are undefined")
    diag = [int(v) for v in np.diag(c)]
    support = [int(v) for v in c.sum(axis=1)]
    predicted = [int(v) for v in c.sum(axis=0)]
    # exact rationals so that identities such as weighted recall == accuracy
    # hold bit for bit after the single final rounding
    prec = [Fraction(d, p) if p else Fraction(0) for d, p in zip(diag, predicted)]
    rec = [Fraction(d, s) if s else Fraction(0) for d, s in zip(diag, support)]
    f1 = [2 * p * r / (p + r) if p + r else Fraction(0) for p, r in zip(prec, rec)]
    active = [i for i in range(len(diag)) if support[i] or predicted[i]]

    def weighted(vals):
        return float(sum(s * v for s, v in zip(support, vals)) / total)

    def macro(vals):
        return float(sum(vals[i] for i in active) / len(active))

    return ClassificationReport(
        confusion=cm,
        precision=np.array([float(v) for v in prec]),
        recall=np.array([float(v) for v in rec]),
        f1=np.array([float(v) for v in f1]),
        support=np.asarray(support, dtype=np.int64),
        accuracy=float(Fraction(sum(diag), total)),
        weighted_precision=weighted(prec),
        weighted_recall=weighted(rec),
        weighted_f1=weighted(f1),
        macro_precision=macro(prec),
        macro_recall=macro(rec),
        macro_f1=macro(f1),
        class_names=tuple(class_names[: cm.n_classes]),
    )


@dataclass
class PairClassStats:
    cls: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class PairStats:
    key: PairKey
    accuracy: float
    lo: PairClassStats
    hi: PairClassStats
    counts: np.ndarray = None


def pair_accuracy(preds, labels, key: PairKey) -> PairStats:
    """Accuracy in percent plus per-class stats on the 2x2 restriction.

    Per-class accuracy is that class's recall, in percent.
    """
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise DataError("pair accuracy of an empty evaluation is undefined")
    if preds.shape != labels.shape:
        raise DataError(f"{preds.size} predictions for {labels.size} labels")
    members = np.array([key.lo, key.hi])
    if not np.all(np.isin(labels, members)):
        raise DataError(f"labels outside pair {key.name}")
    if not np.all(np.isin(preds, members)):
        raise DataError(f"predictions outside pair {key.name}")
    cm = confusion(preds == key.hi, labels == key.hi, 2).counts
    return pair_stats_from_counts(cm, key)


def pair_stats_from_counts(counts, key: PairKey) -> PairStats:
    """Stats from a 2x2 matrix whose index 0 is ``key.lo`` and 1 is ``key.hi``."""
    cm = ConfusionMatrix(np.asarray(counts, dtype=np.int64))
    rep = class_metrics(cm, ("lo", "hi"))
    per = [
        PairClassStats(k, 100.0 * rep.recall[i], float(rep.precision[i]), float(rep.recall[i]),
                       float(rep.f1[i]), int(rep.support[i]))
        for i, k in enumerate((key.lo, key.hi))
    ]
    return PairStats(key, 100.0 * rep.accuracy, per[0], per[1], cm.counts)


@dataclass
class PairReportRow:
    key: PairKey
    one_fc_accuracy: float
    dict_accuracy: float

    @property
    def difference(self) -> float:
        return self.dict_accuracy - self.one_fc_accuracy


def _as_percent(v) -> float:
    return float(v.accuracy) if isinstance(v, PairStats) else float(v)


def pair_report(one_fc: Mapping[PairKey, float], dictionary: Mapping[PairKey, float]) -> list[PairReportRow]:
    """Join two key -> accuracy mappings, sorted by one-FC accuracy descending.

    Values may be percentages or :class:`PairStats`. Ties keep pair order.
    """
    if set(one_fc) != set(dictionary):
        missing = sorted(set(one_fc) ^ set(dictionary))
        raise DataError(f"pair sets differ: {[k.name for k in missing]}")
    rows = [PairReportRow(k, _as_percent(one_fc[k]), _as_percent(dictionary[k])) for k in sorted(one_fc)]
    rows.sort(key=lambda r: -r.one_fc_accuracy)
    return rows


# --------------------------------------------------------------------------
# rendering

@dataclass
class MetricsReport:
    """Everything one evaluation produces; any section may be absent."""

    classification: ClassificationReport | None = None
    pair_rows: list = field(default_factory=list)
    pair_stats: list = field(default_factory=list)
    title: str = ""


def _pct(v) -> str:
    return f"{v:.1f}"


def _prf(v) -> str:
    return f"{v:.3f}"


def _diff(v) -> str:
    s = f"{v:+.1f}"
    return "+0.0" if s == "-0.0" else s


def _table(header, rows, fmt) -> str:
    if fmt == "tsv":
        return "".join("\t".join(r) + "\n" for r in [header, *rows])
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise DataError(f"unknown format {fmt!r}; choose from {FORMATS}")


def _section(title, body, fmt) -> str:
    return (f"# {title}\n" if fmt == "tsv" else f"### {title}\n\n") + body


def render_pair_report(rows: Sequence[PairReportRow], fmt: str = "tsv") -> str:
    header = ["pair", "one_fc_accuracy", "dict_accuracy", "difference"]
    body = []
    for r in rows:
        one, dic = _pct(r.one_fc_accuracy), _pct(r.dict_accuracy)
        # difference of the displayed values, so the printed columns agree
        body.append([r.key.name, one, dic, _diff(float(dic) - float(one))])
    return _table(header, body, fmt)


def render_pair_stats(stats: Sequence[PairStats], fmt: str = "tsv") -> str:
    header = ["pair", "class", "accuracy", "precision", "recall", "f1", "support"]
    body = []
    for st in stats:
        for c in (st.lo, st.hi):
            body.append([st.key.name, CLASS_NAMES[c.cls], _pct(c.accuracy), _prf(c.precision),
                         _prf(c.recall), _prf(c.f1), str(c.support)])
    return _table(header, body, fmt)


def render_classification(rep: ClassificationReport, fmt: str = "tsv") -> str:
    sep = "\n"
    overall = _table(
        ["average", "precision", "recall", "f1"],
        [
            ["weighted", _prf(rep.weighted_precision), _prf(rep.weighted_recall), _prf(rep.weighted_f1)],
            ["macro", _prf(rep.macro_precision), _prf(rep.macro_recall), _prf(rep.macro_f1)],
        ],
        fmt,
    )
    acc = _table(["metric", "value"], [["accuracy", _pct(100.0 * rep.accuracy)], ["samples", str(rep.confusion.total)]], fmt)
    per = _table(
        ["class", "precision", "recall", "f1", "support"],
        [[rep.class_names[i], _prf(rep.precision[i]), _prf(rep.recall[i]), _prf(rep.f1[i]), str(int(rep.support[i]))]
         for i in range(len(rep.class_names))],
        fmt,
    )
    cm = _table(
        ["true\\pred", *rep.class_names],
        [[rep.class_names[i], *map(str, rep.confusion.counts[i].tolist())] for i in range(len(rep.class_names))],
        fmt,
    )
    return sep.join([
        _section("accuracy", acc, fmt),
        _section("overall metric", overall, fmt),
        _section("per-class metrics", per, fmt),
        _section("confusion matrix", cm, fmt),
    ])


def render_report(report, fmt: str = "tsv") -> str:
    """Render a report object; output is byte-stable for equal input.

    Accepts a :class:`MetricsReport`, a :class:`ClassificationReport`, a list
    of :class:`PairStats`, or a (possibly empty) list of
    :class:`PairReportRow`.
    """
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; choose from {FORMATS}")
    if isinstance(report, ClassificationReport):
        return render_classification(report, fmt)
    if isinstance(report, MetricsReport):
        parts = []
        if report.classification is not None:
            parts.append(render_classification(report.classification, fmt))
        if report.pair_rows:
            parts.append(_section("pair comparison", render_pair_report(report.pair_rows, fmt), fmt))
        if report.pair_stats:
            parts.append(_section("pair class statistics", render_pair_stats(report.pair_stats, fmt), fmt))
        return "\n".join(parts)
    report = list(report)
    if report and isinstance(report[0], PairStats):
        return render_pair_stats(report, fmt)
    return render_pair_report(report, fmt)


# --------------------------------------------------------------------------
# JSON round trip (used by the ``report`` command)

def report_to_dict(report: MetricsReport) -> dict:
    d = {"title": report.title}
    if report.classification is not None:
        d["confusion"] = report.classification.confusion.counts.tolist()
        d["class_names"] = list(report.classification.class_names)
    d["pair_rows"] = [{"pair": [r.key.lo, r.key.hi], "one_fc_accuracy": r.one_fc_accuracy,
                       "dict_accuracy": r.dict_accuracy} for r in report.pair_rows]
    d["pair_stats"] = [{"pair": [s.key.lo, s.key.hi], "counts": np.asarray(s.counts).tolist()} for s in report.pair_stats]
    return d


def report_from_dict(d: dict) -> MetricsReport:
    cls = None
    if "confusion" in d:
        cls = class_metrics(ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64)), tuple(d["class_names"]))
    rows = [PairReportRow(PairKey(*r["pair"]), r["one_fc_accuracy"], r["dict_accuracy"]) for r in d.get("pair_rows", [])]
    stats = [pair_stats_from_counts(s["counts"], PairKey(*s["pair"])) for s in d.get("pair_stats", [])]
    return MetricsReport(cls, rows, stats, d.get("title", ""))
