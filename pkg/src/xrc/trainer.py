"""Training configuration, augmentation and the phased training loop."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from xrc.common import CLASSES, ConfigError, DataError, TrainingError, XrcError, derive_seed
from xrc.data_ingest import Manifest, Split, build_manifest, load_grayscale, read_manifest, to_model_input, write_manifest
from xrc.evaluator import MetricsReport, Prediction, confusion_from_predictions, read_prediction_log, write_prediction_log
from xrc.phase_sampler import PhaseLayout, PhasePlan, build_phase_plan, phase_schedule, read_phase_plan, write_phase_plan

log = logging.getLogger(__name__)

NETWORK_ALIASES = {"a": 0, "backbone_a": 0, "b": 1, "backbone_b": 1, "concatenated": 2, "concat": 2}


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    n_folds: int = 5
    learning_rate: float = 1e-4
    batch_size_single: int = 30
    batch_size_concatenated: int = 20
    optimizer: str = "nadam"
    loss: str = "categorical_crossentropy"
    epochs_per_phase: int = 100
    # phase layout
    n_phases: int = 8
    covid_core: int = 149
    shared_pneumonia: int = 34
    unique_pneumonia: int = 200
    unique_normal: int = 250
    # augmentation
    horizontal_flip: bool = True
    vertical_flip: bool = True
    zoom_range: float = 0.05
    rotation_range: float = 360.0
    width_shift: float = 0.05
    height_shift: float = 0.05
    rescale: float = 1.0 / 255.0
    fill_mode: str = "nearest"
    # networks
    backbone_a: str = "xception"
    backbone_b: str = "resnet50v2"
    networks: str = "a,b,concatenated"
    input_height: int = 300
    input_width: int = 300
    head_channels: int = 128
    dropout: float = 0.0
    pretrained_init: bool = True
    # splitting / runtime
    resplit_folds: bool = True
    patient_level: bool = False
    deterministic: bool = True
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs_per_phase < 1:
            raise ConfigError("epochs_per_phase must be >= 1")
        if self.n_folds < 1:
            raise ConfigError("n_folds must be >= 1")
        if min(self.batch_size_single, self.batch_size_concatenated, self.eval_batch_size) < 1:
            raise ConfigError("batch sizes must be >= 1")
        for name in ("zoom_range", "rotation_range", "width_shift", "height_shift", "learning_rate", "dropout"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.zoom_range >= 1:
            raise ConfigError("zoom_range must be < 1")
        if self.rotation_range > 360:
            raise ConfigError("rotation_range must be <= 360")
        if self.rescale <= 0:
            raise ConfigError("rescale must be positive")
        if self.optimizer.lower() != "nadam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r} (only nadam)")
        if self.loss.lower() != "categorical_crossentropy":
            raise ConfigError(f"unsupported loss {self.loss!r} (only categorical_crossentropy)")
        try:
            self.layout
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.specs()

    @property
    def layout(self) -> PhaseLayout:
        return PhaseLayout(self.n_phases, self.covid_core, self.shared_pneumonia, self.unique_pneumonia, self.unique_normal)

    @property
    def split_spec(self):
        return self.layout.split_spec(self.patient_level)

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.input_height, self.input_width)

    def specs(self):
        from xrc.model_zoo import standard_specs

        all_specs = standard_specs(self.backbone_a, self.backbone_b, self.resolution, head_channels=self.head_channels,
                                   dropout=self.dropout, pretrained_init=self.pretrained_init)
        picked = []
        for tok in (t.strip().lower() for t in self.networks.split(",") if t.strip()):
            if tok not in NETWORK_ALIASES:
                raise ConfigError(f"unknown network {tok!r}; use a, b or concatenated")
            picked.append(all_specs[NETWORK_ALIASES[tok]])
        if not picked:
            raise ConfigError("no networks selected")
        return picked

    def batch_size_for(self, spec) -> int:
        return self.batch_size_concatenated if len(spec.backbones) > 1 else self.batch_size_single

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # --- flat key = value files ---

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse_value(cls, key: str, raw: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        t = types[key]
        raw = raw.strip()
        try:
            if t in ("bool", bool):
                low = raw.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            if t in ("int", int):
                return int(raw)
            if t in ("float", float):
                if "/" in raw:
                    num, den = raw.split("/")
                    return float(num) / float(den)
                return float(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return raw

    def with_overrides(self, overrides: dict[str, str] | Sequence[str]) -> "TrainingConfig":
        if not isinstance(overrides, dict):
            pairs = {}
            for item in overrides:
                if "=" not in item:
                    raise ConfigError(f"override {item!r} is not KEY=VALUE")
                k, v = item.split("=", 1)
                pairs[k.strip()] = v
            overrides = pairs
        values = {k: self.parse_value(k, v) if isinstance(v, str) else v for k, v in overrides.items()}
        for k in values:
            if k not in self.keys():
                raise ConfigError(f"unknown config key {k!r}")
        return dataclasses.replace(self, **values)

    @classmethod
    def from_file(cls, path, base: "TrainingConfig | None" = None) -> "TrainingConfig":
        pairs = {}
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            pairs[k.strip()] = v
        return (base or cls()).with_overrides(pairs)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in self.to_dict().items()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


# --- augmentation ----------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    rotation: float = 0.0  # degrees, [0, 360)
    zoom: float = 1.0
    shift_y: float = 0.0  # fraction of height
    shift_x: float = 0.0  # fraction of width

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip) and self.rotation == 0 and self.zoom == 1 and self.shift_y == 0 and self.shift_x == 0


def sample_augment_params(rng: np.random.Generator, config: TrainingConfig) -> AugmentParams:
    def sym(r):
        return float(rng.uniform(-r, r)) if r > 0 else 0.0

    return AugmentParams(
        hflip=bool(config.horizontal_flip and rng.random() < 0.5),
        vflip=bool(config.vertical_flip and rng.random() < 0.5),
        rotation=float(rng.uniform(0.0, config.rotation_range)) if config.rotation_range > 0 else 0.0,
        zoom=1.0 + sym(config.zoom_range),
        shift_y=sym(config.height_shift),
        shift_x=sym(config.width_shift),
    )


def apply_augment(image: np.ndarray, params: AugmentParams, fill_mode: str = "nearest") -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if params.is_identity:
        return np.clip(img, 0.0, 1.0)
    if params.hflip:
        img = img[:, ::-1]
    if params.vflip:
        img = img[::-1]
    h, w = img.shape[:2]
    theta = math.radians(params.rotation)
    cos, sin = math.cos(theta), math.sin(theta)
    # output pixel o samples input at zoom * R(theta) @ (o - c) + c - shift
    m2 = params.zoom * np.array([[cos, -sin], [sin, cos]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    off2 = centre - m2 @ centre - np.array([params.shift_y * h, params.shift_x * w])
    matrix = np.eye(3)
    matrix[:2, :2] = m2
    offset = np.array([off2[0], off2[1], 0.0])
    out = ndimage.affine_transform(np.ascontiguousarray(img), matrix, offset=offset, order=1, mode=fill_mode)
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, seed: int, config: TrainingConfig) -> np.ndarray:
    """Random flip / rotation / zoom / shift, fully determined by ``seed``. Output is clipped to [0, 1]."""
    params = sample_augment_params(np.random.default_rng(seed), config)
    return apply_augment(image, params, config.fill_mode)


# --- training log ----------------------------------------------------------

LOG_COLUMNS = ("fold", "phase", "epoch", "loss", "train_acc", "seconds")


@dataclass(frozen=True)
class EpochRecord:
    fold: int
    phase: int
    epoch: int
    loss: float
    train_acc: float
    seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.fold == self.records[-1].fold and rec.epoch <= self.records[-1].epoch:
            raise TrainingError(f"epoch {rec.epoch} does not follow epoch {self.records[-1].epoch}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def matches_schedule(self, schedule) -> bool:
        expected = [(p, e) for p, rng in schedule for e in rng]
        return [(r.phase, r.epoch) for r in self.records] == expected

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.fold, r.phase, r.epoch, f"{r.loss:.8f}", f"{r.train_acc:.6f}", f"{r.seconds:.3f}"])
        return path

    @classmethod
    def read(cls, path) -> "TrainingLog":
        with open(path, newline="", encoding="utf-8") as fh:
            recs = [EpochRecord(int(r["fold"]), int(r["phase"]), int(r["epoch"]), float(r["loss"]),
                                float(r["train_acc"]), float(r["seconds"])) for r in csv.DictReader(fh)]
        return cls(recs)


# --- images ----------------------------------------------------------------


class ImageCache:
    """Decoded grayscale pixels at one resolution, keyed by image_id (uint8 to keep memory down)."""

    def __init__(self, manifest: Manifest, resolution: tuple[int, int]):
        self._records = manifest.by_id()
        self.resolution = tuple(resolution)
        self._cache: dict[str, np.ndarray] = {}

    def gray(self, image_id: str) -> np.ndarray:
        if image_id not in self._cache:
            rec = self._records.get(image_id)
            if rec is None:
                raise DataError(f"image {image_id} is not in the manifest")
            try:
                self._cache[image_id] = load_grayscale(rec, self.resolution)
            except DataError as exc:
                raise DataError(f"image {image_id}: {exc}") from exc
            except OSError as exc:
                raise DataError(f"image {image_id}: unreadable ({exc})") from exc
        return self._cache[image_id]

    def batch(self, ids: Sequence[str], rescale: float) -> np.ndarray:
        return np.stack([to_model_input(self.gray(i), rescale) for i in ids])


def _one_hot(labels) -> np.ndarray:
    y = np.zeros((len(labels), len(CLASSES)), dtype=np.float32)
    y[np.arange(len(labels)), [int(c) for c in labels]] = 1.0
    return y


def _set_determinism(seed: int) -> None:
    import keras
    import tensorflow as tf

    keras.utils.set_random_seed(seed % (2**32))
    try:
        tf.config.experimental.enable_op_determinism()
    except Exception:  # older TF builds lack it
        log.debug("op determinism not available")


BatchHook = Callable[[int, int, int, Sequence[str]], None]


def train_fold(manifest: Manifest, plan: PhasePlan, spec, config: TrainingConfig, *, out_dir=None,
               batch_hook: BatchHook | None = None, cache: ImageCache | None = None):
    """Train one network through every phase of ``plan``.

    Phases run in order; each epoch sees only its phase's images, shuffled
    by a generator keyed on (seed, fold, phase, epoch). Optimizer state
    carries over between phases. With ``out_dir`` a checkpoint is written
    at the end of every phase. ``batch_hook(fold, phase, epoch, ids)`` is
    called before each optimizer step.

    Returns the final checkpoint and the per-epoch log.
    """
    import keras
    import tensorflow as tf

    from xrc.model_zoo import ModelCheckpoint, build_model, save_checkpoint

    split = manifest.split
    leaked = sorted(i for i in plan.union() if split.get(i) is not Split.TRAIN)
    if leaked:
        raise DataError(f"fold {plan.fold_id}: phase plan uses non-TRAIN image {leaked[0]}")

    fold = plan.fold_id
    if config.deterministic:
        _set_determinism(derive_seed(config.seed, fold, spec.name, "init"))
    model = build_model(spec, seed=derive_seed(config.seed, fold, spec.name, "init"))
    optimizer = keras.optimizers.Nadam(learning_rate=config.learning_rate)
    loss_fn = keras.losses.CategoricalCrossentropy()

    @tf.function(reduce_retracing=True)
    def step(x, y):
        with tf.GradientTape() as tape:
            probs = model(x, training=True)
            loss = loss_fn(y, probs)
        grads = tape.gradient(loss, model.trainable_variables)
        optimizer.apply_gradients(zip(grads, model.trainable_variables))
        return loss, probs

    cache = cache or ImageCache(manifest, spec.input_resolution)
    labels = {r.image_id: r.class_label for r in manifest.records}
    bs = config.batch_size_for(spec)
    digest = config.digest()
    tlog = TrainingLog()
    ckpt = None
    for phase, epochs in phase_schedule(plan, config.epochs_per_phase):
        ids = sorted(plan.phases[phase].image_ids)
        for epoch in epochs:
            t0 = time.perf_counter()
            order = np.random.default_rng(derive_seed(config.seed, fold, phase, epoch)).permutation(len(ids))
            total_loss, correct = 0.0, 0
            for start in range(0, len(ids), bs):
                batch_ids = [ids[i] for i in order[start:start + bs]]
                if batch_hook is not None:
                    batch_hook(fold, phase, epoch, batch_ids)
                x = np.stack([
                    augment(to_model_input(cache.gray(i), config.rescale), derive_seed(config.seed, fold, phase, epoch, i), config)
                    for i in batch_ids
                ])
                y = _one_hot([labels[i] for i in batch_ids])
                loss, probs = step(tf.constant(x), tf.constant(y))
                total_loss += float(loss) * len(batch_ids)
                correct += int((np.argmax(probs.numpy(), axis=1) == np.argmax(y, axis=1)).sum())
            mean_loss = total_loss / len(ids) if ids else float("nan")
            if not math.isfinite(mean_loss):
                raise TrainingError(f"non-finite loss {mean_loss} at fold {fold}, phase {phase}, epoch {epoch}")
            tlog.append(EpochRecord(fold, phase, epoch, mean_loss, correct / len(ids), time.perf_counter() - t0))
            log.info("fold %d %s phase %d epoch %d loss %.4f acc %.3f", fold, spec.name, phase, epoch, mean_loss,
                     correct / len(ids))
        ckpt = ModelCheckpoint.capture(model, spec, epochs[-1], fold, digest)
        if out_dir is not None:
            save_checkpoint(ckpt, Path(out_dir) / f"phase{phase}")
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "final")
        tlog.write(Path(out_dir) / "training_log.csv")
    return ckpt, tlog


def evaluate_fold(model_or_ckpt, manifest: Manifest, config: TrainingConfig, cache: ImageCache | None = None) -> list[Prediction]:
    """Predict every VALIDATION record (rescaled, not augmented), ordered by image_id."""
    from xrc.model_zoo import ModelCheckpoint, predict

    model = model_or_ckpt.restore() if isinstance(model_or_ckpt, ModelCheckpoint) else model_or_ckpt
    resolution = tuple(model.input_shape[1:3])
    cache = cache or ImageCache(manifest, resolution)
    recs = sorted(manifest.validation, key=lambda r: r.image_id)
    preds = []
    for start in range(0, len(recs), config.eval_batch_size):
        chunk = recs[start:start + config.eval_batch_size]
        probs = predict(model, cache.batch([r.image_id for r in chunk], config.rescale), config.eval_batch_size)
        for r, p in zip(chunk, probs):
            preds.append(Prediction(r.image_id, r.class_label, CLASSES[int(np.argmax(p))], tuple(float(v) for v in p)))
    return preds


# --- experiment ------------------------------------------------------------


class ExperimentError(XrcError):
    def __init__(self, fold_id: int, network: str, cause: Exception):
        self.fold_id, self.network, self.cause = fold_id, network, cause
        super().__init__(f"fold {fold_id}, network {network}: {cause}")


def fold_split_seed(seed: int, fold_id: int) -> int:
    return derive_seed(seed, "fold-split", fold_id)


def fold_manifest(manifest: Manifest, config: TrainingConfig, fold_id: int) -> Manifest:
    """The fold's TRAIN/VALIDATION split: redrawn per fold unless ``resplit_folds`` is off.

    Fold 1 uses the same seed as ``prepare``, so it reproduces the prepared manifest.
    """
    if not config.resplit_folds:
        return manifest
    return build_manifest(manifest.records, config.split_spec, fold_split_seed(config.seed, fold_id))


@dataclass
class FoldResult:
    fold_id: int
    network: str
    checkpoint: object
    log: TrainingLog
    predictions: list[Prediction]
    report: MetricsReport


@dataclass
class ExperimentBundle:
    results: list[FoldResult] = field(default_factory=list)
    plan_summaries: dict[int, list[dict]] = field(default_factory=dict)
    config_digest: str = ""

    @property
    def reports(self) -> list[MetricsReport]:
        return [r.report for r in self.results]

    def save(self, out_dir) -> Path:
        from xrc.model_zoo import save_checkpoint

        out = Path(out_dir)
        for r in self.results:
            d = out / f"fold{r.fold_id}" / r.network
            save_checkpoint(r.checkpoint, d / "final")
            r.log.write(d / "training_log.csv")
            write_prediction_log(r.predictions, d / "predictions.csv")
        index = {
            "config_digest": self.config_digest,
            "runs": [{"fold": r.fold_id, "network": r.network} for r in self.results],
            "plan_summaries": {str(k): v for k, v in sorted(self.plan_summaries.items())},
        }
        p = out / "bundle.json"
        p.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p

    @classmethod
    def load(cls, out_dir) -> "ExperimentBundle":
        from xrc.model_zoo import load_checkpoint

        out = Path(out_dir)
        index = json.loads((out / "bundle.json").read_text(encoding="utf-8"))
        results = []
        for run in index["runs"]:
            d = out / f"fold{run['fold']}" / run["network"]
            preds = read_prediction_log(d / "predictions.csv")
            report = MetricsReport.from_confusion(confusion_from_predictions(preds), run["fold"], run["network"])
            results.append(FoldResult(run["fold"], run["network"], load_checkpoint(d / "final"),
                                      TrainingLog.read(d / "training_log.csv"), preds, report))
        summaries = {int(k): v for k, v in index.get("plan_summaries", {}).items()}
        return cls(results, summaries, index.get("config_digest", ""))


def prepare_fold(manifest: Manifest, config: TrainingConfig, fold_id: int, out_dir=None) -> tuple[Manifest, PhasePlan]:
    fm = fold_manifest(manifest, config, fold_id)
    plan = build_phase_plan(fm, fold_id, config.seed, config.layout)
    if out_dir is not None:
        d = Path(out_dir) / f"fold{fold_id}"
        write_manifest(fm, d / "manifest.csv")
        write_phase_plan(plan, d / "phases.csv")
    return fm, plan


def load_fold(out_dir, fold_id: int) -> tuple[Manifest, PhasePlan]:
    d = Path(out_dir) / f"fold{fold_id}"
    if not (d / "phases.csv").is_file():
        raise DataError(f"no phase plan for fold {fold_id} under {out_dir}; run `plan` first")
    fm = read_manifest(d / "manifest.csv")
    return fm, read_phase_plan(d / "phases.csv", fm, fold_id)


def run_experiment(manifest: Manifest, config: TrainingConfig, specs=None, *, out_dir=None, folds=None,
                   batch_hook: BatchHook | None = None) -> ExperimentBundle:
    """Every fold x network: plan, train, evaluate on that fold's VALIDATION split."""
    specs = list(specs) if specs is not None else config.specs()
    bundle = ExperimentBundle(config_digest=config.digest())
    for fold in folds or range(1, config.n_folds + 1):
        fm, plan = prepare_fold(manifest, config, fold, out_dir)
        bundle.plan_summaries[fold] = plan.summary()
        caches: dict[tuple, ImageCache] = {}
        for spec in specs:
            cache = caches.setdefault(spec.input_resolution, ImageCache(fm, spec.input_resolution))
            run_dir = Path(out_dir) / f"fold{fold}" / spec.name if out_dir is not None else None
            try:
                ckpt, tlog = train_fold(fm, plan, spec, config, out_dir=run_dir, batch_hook=batch_hook, cache=cache)
                preds = evaluate_fold(ckpt, fm, config, cache)
            except XrcError as exc:
                raise ExperimentError(fold, spec.name, exc) from exc
            report = MetricsReport.from_confusion(confusion_from_predictions(preds), fold, spec.name)
            bundle.results.append(FoldResult(fold, spec.name, ckpt, tlog, preds, report))
    if out_dir is not None:
        bundle.save(out_dir)
    return bundle
