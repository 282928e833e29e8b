import os

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

import pytest

from xrc.common import ClassLabel

DESK_CONFIG = {
    "n_folds": 1,
    "n_phases": 2,
    "epochs_per_phase": 5,
    "covid_core": 14,
    "shared_pneumonia": 2,
    "unique_pneumonia": 6,
    "unique_normal": 7,
    "backbone_a": "tiny_a",
    "backbone_b": "tiny_b",
    "input_height": 32,
    "input_width": 32,
    "pretrained_init": False,
    "learning_rate": 0.005,
    "batch_size_single": 4,
    "batch_size_concatenated": 4,
    "networks": "concatenated",
}


@pytest.fixture(scope="session")
def desk_config():
    from xrc.trainer import TrainingConfig

    return TrainingConfig(**DESK_CONFIG)


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory, desk_config):
    """60 separable images (20 per class) on disk, split 42 TRAIN / 18 VALIDATION."""
    from xrc.data_ingest import build_manifest, ingest_cohen, ingest_rsna
    from xrc.synthetic import write_synthetic_sources

    root = tmp_path_factory.mktemp("desk")
    counts = {ClassLabel.COVID19: 20, ClassLabel.PNEUMONIA: 20, ClassLabel.NORMAL: 20}
    paths = write_synthetic_sources(root / "data", counts, cohen_pneumonia=3, size=32, seed=0)
    records = ingest_cohen(paths["cohen_metadata"], paths["cohen_images"])
    records += ingest_rsna(paths["rsna_labels"], paths["rsna_dicom"], png_dir=root / "png")
    return build_manifest(records, desk_config.split_spec, seed=0)


# --- acceptance summary ----------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        prev = _criteria.get(number, (title, "PASS"))[1]
        _criteria[number] = (title, status if prev == "PASS" else prev)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
