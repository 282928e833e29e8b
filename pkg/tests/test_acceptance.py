"""Exit criteria for the pipeline, each checked at its stated tolerance and time bound.

A one-line PASS/FAIL per criterion is printed at the end of the pytest run
(see ``conftest.pytest_terminal_summary``).
"""

import csv
import itertools
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import reference_data as ref
from xrc.common import ClassLabel
from xrc.data_ingest import DEFAULT_SPLIT, Split, build_manifest
from xrc.evaluator import ConfusionMatrix, MetricsReport, aggregate_folds
from xrc.phase_sampler import PhaseLayout, build_phase_plan
from xrc.synthetic import PUBLISHED_COHEN_PNEUMONIA, PUBLISHED_TOTALS, synthetic_records

pytestmark = pytest.mark.acceptance


@contextmanager
def within(seconds):
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    assert elapsed < seconds, f"took {elapsed:.1f}s, bound is {seconds}s"


def _published_report(key):
    cm = ConfusionMatrix.from_class_counts(*ref.class_counts(key))
    return MetricsReport.from_confusion(cm, key[0], key[1])


@pytest.fixture(scope="module")
def full_manifest():
    return build_manifest(synthetic_records(PUBLISHED_TOTALS, PUBLISHED_COHEN_PNEUMONIA), DEFAULT_SPLIT, seed=0)


@pytest.mark.criterion(1, "per-fold metrics recomputed from published counts (+-0.02)")
def test_fold_metrics_match_published():
    with within(1.0):
        bad = []
        for key, expected in ref.METRICS.items():
            got = ref.metric_vector(_published_report(key))
            bad += [(key, i, g, e) for i, (g, e) in enumerate(zip(got, expected)) if abs(g - e) > 0.02]
    assert not bad, bad[:5]
    r = _published_report((1, "Concatenated"))
    # published figures are truncated, not rounded (26/94 = 27.659 is listed as 27.65)
    for got, want in ((r.value(ClassLabel.COVID19, "recall"), 83.87), (r.value(ClassLabel.COVID19, "specificity"), 99.40),
                      (r.value(ClassLabel.COVID19, "precision"), 27.65), (r.overall_accuracy, 91.10)):
        assert abs(got - want) <= 0.02


@pytest.mark.criterion(2, "unweighted five-fold averages (+-0.05)")
def test_fold_averages_match_published():
    with within(1.0):
        worst = 0.0
        for net in ref.NETWORKS:
            avg = aggregate_folds([_published_report((f, net)) for f in range(1, 6)])
            assert avg.n_folds == 5
            worst = max(worst, max(abs(g - e) for g, e in zip(ref.metric_vector(avg), ref.AVERAGES[net])))
    assert worst <= 0.05
    avg = aggregate_folds([_published_report((f, "Concatenated")) for f in range(1, 6)])
    assert abs(avg.overall_accuracy - 91.40) <= 0.05
    assert abs(avg.value(ClassLabel.COVID19, "recall") - 80.53) <= 0.05
    assert abs(avg.value(ClassLabel.COVID19, "specificity") - 99.56) <= 0.05


@pytest.mark.criterion(3, "split arithmetic on a corpus of published size")
def test_split_arithmetic():
    with within(10.0):
        m = build_manifest(synthetic_records(PUBLISHED_TOTALS, PUBLISHED_COHEN_PNEUMONIA), DEFAULT_SPLIT, seed=0)
    counts = m.counts()
    C, P, N = ClassLabel.COVID19, ClassLabel.PNEUMONIA, ClassLabel.NORMAL
    assert (counts[Split.TRAIN][C], counts[Split.TRAIN][P], counts[Split.TRAIN][N]) == (149, 1634, 2000)
    assert (counts[Split.VALIDATION][C], counts[Split.VALIDATION][P], counts[Split.VALIDATION][N]) == (31, 4420, 6851)
    assert len(m.validation) == 11302


@pytest.mark.criterion(4, "phase plan structure, 100 seeded trials")
def test_phase_plan_properties(full_manifest):
    train_ids = {r.image_id for r in full_manifest.train}
    with within(60.0):
        for seed in range(100):
            plan = build_phase_plan(full_manifest, fold_id=1, seed=seed)
            assert len(plan.phases) == 8
            assert all(len(p.image_ids) == 633 for p in plan.phases)
            union = plan.union()
            assert len(union) == 3783 and union <= train_ids
            core = plan.covid_core | plan.shared_pneumonia
            assert len(plan.covid_core) == 149 and len(plan.shared_pneumonia) == 34
            for a, b in itertools.combinations(plan.phases, 2):
                assert a.image_ids & b.image_ids == core
            uniques = [p.image_ids - core for p in plan.phases]
            assert sum(map(len, uniques)) == len(set().union(*uniques)) == 8 * 450
            if seed < 3:
                assert build_phase_plan(full_manifest, fold_id=1, seed=seed) == plan


@pytest.mark.criterion(5, "pre-head channels add up and softmax rows sum to one")
def test_architecture_shapes():
    from xrc.model_zoo import ArchitectureSpec, NetworkKind, build_model, pre_head_channels, predict, standard_specs

    rng = np.random.default_rng(0)
    tiny = standard_specs("tiny_a", "tiny_b", (32, 32), pretrained_init=False)
    chans = [pre_head_channels(build_model(s, seed=0)) for s in tiny]
    assert chans == [32, 24, 56] and chans[2] == chans[0] + chans[1]
    probs = predict(build_model(tiny[2], seed=0), rng.random((16, 32, 32, 3)))
    assert probs.shape == (16, 3)
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-6)

    spec = ArchitectureSpec(NetworkKind.CONCATENATED, ("xception", "resnet50v2"), pretrained_init=False)
    model = build_model(spec, seed=0)
    assert pre_head_channels(model) == 2048 + 2048 == 4096
    probs = predict(model, rng.random((2, 300, 300, 3)), batch_size=2)
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-6)


@pytest.mark.criterion(6, "desk-scale training converges without touching validation images")
def test_training_sanity(desk_corpus, desk_config):
    from xrc.phase_sampler import build_phase_plan
    from xrc.trainer import train_fold

    plan = build_phase_plan(desk_corpus, fold_id=1, seed=0, layout=desk_config.layout)
    spec = desk_config.specs()[0]
    assert spec.name == "Concatenated"
    seen = []
    with within(180.0):
        _, tlog = train_fold(desk_corpus, plan, spec, desk_config,
                             batch_hook=lambda f, p, e, ids: seen.extend(ids))
    assert len(tlog) == desk_config.n_phases * desk_config.epochs_per_phase == 10
    assert tlog.records[-1].train_acc >= 0.95
    windows = np.convolve(tlog.losses(), np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(windows) <= 1e-9), windows
    val_ids = {r.image_id for r in desk_corpus.validation}
    assert seen and not (set(seen) & val_ids)


@pytest.mark.criterion(7, "augmentation parameters stay in range; zero ranges are the identity")
def test_augmentation_bounds():
    from xrc.trainer import TrainingConfig, augment, sample_augment_params

    cfg = TrainingConfig()
    with within(30.0):
        rng = np.random.default_rng(0)
        params = [sample_augment_params(rng, cfg) for _ in range(10_000)]
        assert all(0.0 <= p.rotation < 360.0 for p in params)
        assert all(0.95 <= p.zoom <= 1.05 for p in params)
        assert all(abs(p.shift_x) <= 0.05 and abs(p.shift_y) <= 0.05 for p in params)
        # both flips actually occur
        assert {p.hflip for p in params} == {True, False} == {p.vflip for p in params}

        still = TrainingConfig(horizontal_flip=False, vertical_flip=False, zoom_range=0, rotation_range=0,
                               width_shift=0, height_shift=0)
        img = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
        for seed in range(50):
            assert np.array_equal(augment(img, seed, still), img)


DESK_RUN = """\
n_folds = 2
n_phases = 2
epochs_per_phase = 3
covid_core = 10
shared_pneumonia = 2
unique_pneumonia = 4
unique_normal = 5
backbone_a = tiny_a
backbone_b = tiny_b
input_height = 32
input_width = 32
pretrained_init = false
learning_rate = 0.005
batch_size_single = 4
batch_size_concatenated = 4
"""

METRIC_HEADER = ["fold", "network", "accuracy"] + [
    f"{c}_{m}" for m in ("recall", "specificity", "accuracy", "precision") for c in ("COVID19", "PNEUMONIA", "NORMAL")
]
COUNT_HEADER = ["fold", "network"] + [
    f"{c}_{k}" for c in ("COVID19", "PNEUMONIA", "NORMAL") for k in ("correct", "not_detected", "wrong_detected")
]


def _pipeline(out: Path, cfg: Path):
    from xrc.cli import main

    steps = [
        ["prepare", "--config", str(cfg), "--synthetic", "60", "--synthetic-size", "32"],
        ["plan"], ["train"], ["evaluate"], ["report"],
    ]
    for step in steps:
        assert main([step[0], "--out-dir", str(out), *step[1:]]) == 0, step


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.mark.criterion(8, "end-to-end CLI run is schema-valid and reproducible")
def test_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "desk.txt"
    cfg.write_text(DESK_RUN)
    with within(300.0):
        _pipeline(tmp_path / "run1", cfg)
        _pipeline(tmp_path / "run2", cfg)
    capsys.readouterr()

    report = tmp_path / "run1" / "report"
    counts, metrics = _rows(report / "counts.csv"), _rows(report / "metrics.csv")
    assert counts[0] == COUNT_HEADER and len(counts) == 1 + 6
    assert metrics[0] == METRIC_HEADER and len(metrics) == 1 + 6 + 3
    for row in counts[1:]:
        # each fold validates on all 30 held-out images; correct + not detected = class size
        assert sum(int(row[2 + 3 * i]) + int(row[3 + 3 * i]) for i in range(3)) == 30
    for row in metrics[1:]:
        assert all(v == "—" or 0 <= float(v) <= 100 for v in row[2:])
    plots = sorted(p.name for p in report.glob("cm_*.png"))
    assert plots == [f"cm_fold{f}_{n}.png" for f in (1, 2) for n in ("Concatenated", "TinyA", "TinyB")]

    doc = json.loads((report / "report.json").read_text())
    assert sum(map(len, doc["folds"].values())) == 6 and set(doc["averages"]) == {"Concatenated", "TinyA", "TinyB"}
    for name in ("report.json", "counts.csv", "metrics.csv"):
        assert (report / name).read_bytes() == (tmp_path / "run2" / "report" / name).read_bytes(), name
