import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference_data as ref
from xrc.common import CLASSES, ClassLabel
from xrc.evaluator import (
    UNDEFINED, ConfusionMatrix, MetricsReport, Prediction, aggregate_folds, confusion, confusion_from_predictions,
    emit_reports, fmt_pct, format_report, overall_accuracy, per_class_metrics, read_prediction_log,
    write_prediction_log,
)

C, P, N = ClassLabel.COVID19, ClassLabel.PNEUMONIA, ClassLabel.NORMAL
labels = st.lists(st.tuples(st.sampled_from(CLASSES), st.sampled_from(CLASSES)), min_size=1, max_size=60)


def _oracle(pairs, k):
    """Straight tally, no matrix."""
    tp = sum(t == k and p == k for t, p in pairs)
    fn = sum(t == k and p != k for t, p in pairs)
    fp = sum(t != k and p == k for t, p in pairs)
    tn = sum(t != k and p != k for t, p in pairs)
    f = lambda a, b: Fraction(a, b) if b else None
    return {"recall": f(tp, tp + fn), "specificity": f(tn, tn + fp), "precision": f(tp, tp + fp),
            "accuracy": f(tp + tn, len(pairs))}


@given(labels)
def test_metrics_match_tally(pairs):
    cm = confusion([t for t, _ in pairs], [p for _, p in pairs])
    assert cm.n_total == len(pairs)
    for k in CLASSES:
        assert per_class_metrics(cm, k) == _oracle(pairs, k)
    assert overall_accuracy(cm) == pytest.approx(100 * sum(t == p for t, p in pairs) / len(pairs))


@given(labels)
def test_count_identities(pairs):
    cm = confusion([t for t, _ in pairs], [p for _, p in pairs])
    n, trace = cm.n_total, int(np.trace(cm.array))
    assert sum(cm.fn(k) for k in CLASSES) == sum(cm.fp(k) for k in CLASSES) == n - trace
    for k in CLASSES:
        assert cm.tp(k) + cm.fn(k) + cm.fp(k) + cm.tn(k) == n
    # overall accuracy is recall weighted by class prevalence
    weighted = sum(Fraction(cm.tp(k) + cm.fn(k), n) * (per_class_metrics(cm, k)["recall"] or 0) for k in CLASSES)
    assert float(100 * weighted) == pytest.approx(overall_accuracy(cm))


@given(labels, st.randoms(use_true_random=False))
def test_order_does_not_matter(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = confusion([t for t, _ in pairs], [p for _, p in pairs])
    b = confusion([t for t, _ in shuffled], [p for _, p in shuffled])
    assert a == b


def test_degenerate_metrics_are_undefined():
    cm = confusion([N, N, N], [N, N, N])
    m = per_class_metrics(cm, N)
    assert m["specificity"] is None and m["recall"] == 1
    assert per_class_metrics(cm, C) == {"recall": None, "specificity": 1, "precision": None, "accuracy": 1}
    report = MetricsReport.from_confusion(cm, 1, "X")
    assert UNDEFINED in format_report(report)


def test_empty_and_mismatched_inputs():
    with pytest.raises(ValueError):
        confusion([N], [])
    with pytest.raises(ValueError):
        overall_accuracy(ConfusionMatrix(((0, 0, 0),) * 3))
    with pytest.raises(ValueError):
        ConfusionMatrix(((1, 0), (0, 1)))


def test_published_rows():
    r1 = MetricsReport.from_confusion(ConfusionMatrix.from_class_counts(*ref.class_counts((1, "Concatenated"))), 1, "Concatenated")
    assert [fmt_pct(r1.value(C, m)) for m in ("recall", "specificity", "accuracy")] == ["83.87", "99.40", "99.35"]
    assert fmt_pct(r1.overall_accuracy) == "91.11"  # 10297/11302; the published figure is truncated
    r2 = MetricsReport.from_confusion(ConfusionMatrix.from_class_counts(*ref.class_counts((2, "Concatenated"))), 2, "Concatenated")
    assert r2.value(C, "precision") == 46.0


@pytest.mark.parametrize("key", sorted(ref.COUNTS))
def test_rebuilt_matrix_reproduces_counts(key):
    tp, fn, fp = ref.class_counts(key)
    cm = ConfusionMatrix.from_class_counts(tp, fn, fp)
    assert all((cm.tp(k), cm.fn(k), cm.fp(k)) == (tp[k], fn[k], fp[k]) for k in CLASSES)
    assert cm.n_total in (11301, 11302)


def test_rebuilt_matrix_infeasible():
    with pytest.raises(ValueError):
        ConfusionMatrix.from_class_counts({C: 1, P: 1, N: 1}, {C: 1, P: 0, N: 0}, {C: 0, P: 0, N: 0})


def test_fmt_pct_rounds_half_up():
    assert fmt_pct(0.125) == "0.13"
    assert fmt_pct(2.675) == "2.68"
    assert fmt_pct(100.0) == "100.00"
    assert fmt_pct(None) == UNDEFINED


def _report(acc, fold, name="Net", covid_precision=50.0):
    per = {k: {m: 50.0 for m in ("recall", "specificity", "precision", "accuracy")} for k in CLASSES}
    per[C]["precision"] = covid_precision
    return MetricsReport(fold, name, per, acc)


def test_aggregate_folds():
    avg = aggregate_folds([_report(80.0, 1), _report(90.0, 2, covid_precision=None)])
    assert avg.overall_accuracy == 85.0 and avg.n_folds == 2
    assert avg.value(C, "precision") == 50.0
    assert avg.undefined_skipped == {(C, "precision"): 1}
    assert "excluded" in format_report(avg)
    with pytest.raises(ValueError):
        aggregate_folds([_report(80.0, 1), _report(90.0, 2, name="Other")])
    with pytest.raises(ValueError):
        aggregate_folds([])


def test_prediction_log_round_trip(tmp_path):
    preds = [Prediction(f"img{i}", CLASSES[i % 3], CLASSES[(i * 2) % 3], (0.2, 0.3, 0.5)) for i in range(9)]
    path = write_prediction_log(preds, tmp_path / "p.csv")
    back = read_prediction_log(path)
    assert back == preds
    assert confusion_from_predictions(back) == confusion_from_predictions(preds)


def _published_reports():
    return [MetricsReport.from_confusion(ConfusionMatrix.from_class_counts(*ref.class_counts(k)), k[0], k[1])
            for k in sorted(ref.COUNTS)]


def test_emit_reports(tmp_path):
    paths = emit_reports(_published_reports(), tmp_path / "a")
    assert len(paths["counts"].read_text().splitlines()) == 1 + 15
    assert len(paths["metrics"].read_text().splitlines()) == 1 + 15 + 3
    assert sum(name.startswith("cm_") for name in paths) == 15
    doc = json.loads(paths["report"].read_text())
    assert doc["averages"]["Concatenated"]["n_folds"] == 5
    again = emit_reports(list(reversed(_published_reports())), tmp_path / "b")
    for name in ("counts", "metrics", "report"):
        assert paths[name].read_bytes() == again[name].read_bytes()


def test_emit_single_fold_has_no_average_rows(tmp_path):
    paths = emit_reports([_published_reports()[0]], tmp_path)
    assert len(paths["counts"].read_text().splitlines()) == 2
    assert len(paths["metrics"].read_text().splitlines()) == 2
