"""Confusion matrices, per-class metrics and fold reports.

Metric definitions, for class k with TP/FP/TN/FN taken from the matrix:

    overall accuracy = trace / n
    class accuracy   = (TP + TN) / n
    specificity      = TN / (TN + FP)
    recall           = TP / (TP + FN)
    precision        = TP / (TP + FP)

All ratios are computed exactly with :class:`fractions.Fraction`; a zero
denominator yields ``None`` ("undefined") instead of NaN.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from xrc.common import CLASSES, DISPLAY_NAMES, ClassLabel, DataError

METRICS = ("recall", "specificity", "precision", "accuracy")
UNDEFINED = "—"
PREDICTION_COLUMNS = ("image_id", "true_label", "predicted_label", "p_normal", "p_pneumonia", "p_covid19")
# Report column order (COVID-19 first), matching the usual table layout.
REPORT_ORDER = (ClassLabel.COVID19, ClassLabel.PNEUMONIA, ClassLabel.NORMAL)


@dataclass(frozen=True)
class ConfusionMatrix:
    """3x3 counts; rows are true classes, columns predicted, order NORMAL, PNEUMONIA, COVID19."""

    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.shape != (len(CLASSES), len(CLASSES)):
            raise ValueError(f"confusion matrix must be {len(CLASSES)}x{len(CLASSES)}, got {arr.shape}")
        if (arr < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", tuple(tuple(int(v) for v in row) for row in arr))

    @property
    def n_total(self) -> int:
        return sum(map(sum, self.counts))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)

    def tp(self, k) -> int:
        k = ClassLabel.parse(k)
        return self.counts[k][k]

    def fn(self, k) -> int:
        k = ClassLabel.parse(k)
        return sum(self.counts[k]) - self.counts[k][k]

    def fp(self, k) -> int:
        k = ClassLabel.parse(k)
        return sum(row[k] for row in self.counts) - self.counts[k][k]

    def tn(self, k) -> int:
        return self.n_total - self.tp(k) - self.fn(k) - self.fp(k)

    @classmethod
    def from_class_counts(cls, tp: dict, fn: dict, fp: dict) -> "ConfusionMatrix":
        """Some 3x3 matrix with the given per-class TP/FN/FP.

        Per-class counts fix the diagonal and the off-diagonal row/column
        sums, leaving one free parameter; the smallest feasible value is
        used. Every metric here is independent of that choice.
        """
        tp = {ClassLabel.parse(k): v for k, v in tp.items()}
        fn = {ClassLabel.parse(k): v for k, v in fn.items()}
        fp = {ClassLabel.parse(k): v for k, v in fp.items()}
        if sum(fn.values()) != sum(fp.values()):
            raise ValueError("total false negatives must equal total false positives")
        r = [fn[c] for c in CLASSES]
        c = [fp[k] for k in CLASSES]
        # unknowns x01..x21 parametrised by t = x01
        lo = max(0, c[1] - r[2], c[0] + c[1] - r[1] - r[2])
        hi = min(r[0], c[1], c[0] + c[1] - r[2])
        if lo > hi:
            raise ValueError("no non-negative matrix has these per-class counts")
        t = lo
        x20 = r[2] - c[1] + t
        m = [[tp[CLASSES[0]], t, r[0] - t],
             [c[0] - x20, tp[CLASSES[1]], r[1] - c[0] + x20],
             [x20, c[1] - t, tp[CLASSES[2]]]]
        return cls(tuple(map(tuple, m)))


def confusion(true_labels: Sequence, predicted_labels: Sequence) -> ConfusionMatrix:
    if len(true_labels) != len(predicted_labels):
        raise ValueError(f"length mismatch: {len(true_labels)} true vs {len(predicted_labels)} predicted labels")
    m = np.zeros((len(CLASSES), len(CLASSES)), dtype=np.int64)
    t = np.fromiter((ClassLabel.parse(x) for x in true_labels), dtype=np.int64, count=len(true_labels))
    p = np.fromiter((ClassLabel.parse(x) for x in predicted_labels), dtype=np.int64, count=len(predicted_labels))
    np.add.at(m, (t, p), 1)
    return ConfusionMatrix(m)


def _ratio(num: int, den: int) -> Fraction | None:
    return Fraction(num, den) if den else None


def per_class_metrics(cm: ConfusionMatrix, k) -> dict[str, Fraction | None]:
    """Exact recall, specificity, precision and class accuracy (as fractions of 1) for class ``k``."""
    if cm.n_total <= 0:
        raise ValueError("confusion matrix is empty")
    tp, fn, fp, tn = cm.tp(k), cm.fn(k), cm.fp(k), cm.tn(k)
    return {
        "recall": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "precision": _ratio(tp, tp + fp),
        "accuracy": _ratio(tp + tn, cm.n_total),
    }


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Percentage of correctly classified images."""
    if cm.n_total <= 0:
        raise ValueError("confusion matrix is empty")
    return float(100 * Fraction(sum(cm.counts[i][i] for i in range(len(CLASSES))), cm.n_total))


def _pct(x: Fraction | None) -> float | None:
    return None if x is None else float(100 * x)


def fmt_pct(x: float | None) -> str:
    if x is None:
        return UNDEFINED
    return str(Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class MetricsReport:
    fold_id: int | None
    network_name: str
    per_class: dict[ClassLabel, dict[str, float | None]]
    overall_accuracy: float
    confusion: ConfusionMatrix | None = None
    # For averaged reports: how many fold values were undefined and skipped, per (class, metric).
    undefined_skipped: dict[tuple[ClassLabel, str], int] = field(default_factory=dict)
    n_folds: int = 1

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, fold_id: int | None, network_name: str) -> "MetricsReport":
        per = {k: {m: _pct(v) for m, v in per_class_metrics(cm, k).items()} for k in CLASSES}
        return cls(fold_id, network_name, per, overall_accuracy(cm), cm)

    def value(self, k, metric: str) -> float | None:
        return self.per_class[ClassLabel.parse(k)][metric]

    def to_dict(self) -> dict:
        d = {
            "fold": self.fold_id,
            "network": self.network_name,
            "overall_accuracy": self.overall_accuracy,
            "per_class": {k.name: dict(self.per_class[k]) for k in CLASSES},
        }
        if self.confusion is not None:
            d["confusion"] = [list(r) for r in self.confusion.counts]
            d["n_total"] = self.confusion.n_total
        if self.n_folds != 1 or self.fold_id is None:
            d["n_folds"] = self.n_folds
            d["undefined_skipped"] = {f"{k.name}.{m}": n for (k, m), n in sorted(self.undefined_skipped.items())}
        return d


def aggregate_folds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted mean of every metric across folds; undefined values are skipped and counted."""
    if not reports:
        raise ValueError("need at least one report to aggregate")
    names = {r.network_name for r in reports}
    if len(names) != 1:
        raise ValueError(f"cannot average across different networks: {sorted(names)}")
    if len(reports) == 1:
        return reports[0]
    per, skipped = {}, {}
    for k in CLASSES:
        per[k] = {}
        for m in METRICS:
            vals = [r.per_class[k][m] for r in reports]
            defined = [v for v in vals if v is not None]
            per[k][m] = float(np.mean(defined)) if defined else None
            if len(defined) != len(vals):
                skipped[(k, m)] = len(vals) - len(defined)
    acc = float(np.mean([r.overall_accuracy for r in reports]))
    return MetricsReport(None, names.pop(), per, acc, None, skipped, len(reports))


# --- prediction logs -------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    image_id: str
    true_label: ClassLabel
    predicted_label: ClassLabel
    probabilities: tuple[float, float, float]


def write_prediction_log(predictions: Iterable[Prediction], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for p in predictions:
            w.writerow([p.image_id, p.true_label.name, p.predicted_label.name, *(f"{v:.8f}" for v in p.probabilities)])
    return path


def read_prediction_log(path) -> list[Prediction]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(PREDICTION_COLUMNS[:3]) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: prediction log lacks columns {sorted(missing)}")
        for row in reader:
            probs = tuple(float(row.get(c) or "nan") for c in PREDICTION_COLUMNS[3:])
            out.append(Prediction(row["image_id"], ClassLabel.parse(row["true_label"]),
                                  ClassLabel.parse(row["predicted_label"]), probs))
    return out


def confusion_from_predictions(predictions: Sequence[Prediction]) -> ConfusionMatrix:
    return confusion([p.true_label for p in predictions], [p.predicted_label for p in predictions])


# --- reports ---------------------------------------------------------------


def counts_row(report: MetricsReport) -> dict:
    cm = report.confusion
    row = {"fold": report.fold_id, "network": report.network_name}
    for k in REPORT_ORDER:
        name = k.name
        row[f"{name}_correct"] = cm.tp(k)
        row[f"{name}_not_detected"] = cm.fn(k)
        row[f"{name}_wrong_detected"] = cm.fp(k)
    return row


def metrics_row(report: MetricsReport) -> dict:
    row = {"fold": "Average" if report.fold_id is None else report.fold_id, "network": report.network_name,
           "accuracy": fmt_pct(report.overall_accuracy)}
    for m in ("recall", "specificity", "accuracy", "precision"):
        for k in REPORT_ORDER:
            row[f"{k.name}_{m}"] = fmt_pct(report.per_class[k][m])
    return row


def _write_rows(rows: list[dict], path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def plot_confusion(cm: ConfusionMatrix, path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    arr = cm.array
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(arr, cmap="Blues")
    labels = [DISPLAY_NAMES[c] for c in CLASSES]
    ax.set_xticks(range(3), labels)
    ax.set_yticks(range(3), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = arr.max() / 2 if arr.max() else 1
    for i in range(3):
        for j in range(3):
            ax.text(j, i, str(arr[i, j]), ha="center", va="center", color="white" if arr[i, j] > thresh else "black")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def emit_reports(bundle, out_dir) -> dict[str, Path]:
    """Write counts.csv, metrics.csv, report.json and one cm_fold{F}_{network}.png per fold report.

    ``bundle`` is anything with a ``reports`` list (or the list itself);
    an optional ``plan_summaries`` mapping fold -> per-phase counts is
    copied into the structured report.
    """
    reports: list[MetricsReport] = list(getattr(bundle, "reports", bundle))
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out}: {exc}") from exc
    reports = sorted(reports, key=lambda r: (r.fold_id, r.network_name))
    networks = list(dict.fromkeys(r.network_name for r in reports))
    averages = {n: aggregate_folds([r for r in reports if r.network_name == n]) for n in networks}

    paths = {
        "counts": _write_rows([counts_row(r) for r in reports], out / "counts.csv"),
        "metrics": _write_rows([metrics_row(r) for r in reports]
                               + ([metrics_row(a) for a in averages.values()] if len({r.fold_id for r in reports}) > 1 else []),
                               out / "metrics.csv"),
    }
    doc = {"schema_version": 1, "folds": {}, "averages": {n: a.to_dict() for n, a in averages.items()}}
    for r in reports:
        doc["folds"].setdefault(str(r.fold_id), {})[r.network_name] = r.to_dict()
    summaries = getattr(bundle, "plan_summaries", None) or {}
    if summaries:
        doc["phase_summary"] = {str(k): v for k, v in sorted(summaries.items())}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["report"] = report_path
    for r in reports:
        p = out / f"cm_fold{r.fold_id}_{r.network_name}.png"
        plot_confusion(r.confusion, p, title=f"{r.network_name} - fold {r.fold_id}")
        paths[p.name] = p
    return paths


def format_report(report: MetricsReport) -> str:
    """Small text table for terminals."""
    lines = [f"network {report.network_name}  fold {report.fold_id if report.fold_id is not None else 'Average'}",
             f"overall accuracy {fmt_pct(report.overall_accuracy)}",
             f"{'class':<10}" + "".join(f"{m:>13}" for m in METRICS)]
    for k in REPORT_ORDER:
        lines.append(f"{DISPLAY_NAMES[k]:<10}" + "".join(f"{fmt_pct(report.per_class[k][m]):>13}" for m in METRICS))
    if report.undefined_skipped:
        lines.append(f"* {sum(report.undefined_skipped.values())} undefined fold value(s) excluded from averages")
    return "\n".join(lines)
