"""Dataset ingestion, label mapping and the train/validation manifest.

Two sources feed the manifest: the Cohen COVID chest X-ray collection
(metadata CSV + image folder) and the RSNA pneumonia challenge (class-info
CSV + DICOM folder). Both are normalised into :class:`ImageRecord` rows and
split into TRAIN / VALIDATION by :func:`build_manifest`.
"""

from __future__ import annotations

import csv
import enum
import logging
import os
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from PIL import Image

from xrc.common import CLASSES, ClassLabel, DataError, Source, rng_for

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_COLUMNS = ("image_id", "case_id", "class_label", "source", "original_sublabel", "file_path", "split")


class PixelFormat(str, enum.Enum):
    PNG8 = "PNG8"
    DICOM_RAW = "DICOM_RAW"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VALIDATION = "VALIDATION"


class IngestError(DataError):
    """Raised after a full pass over a source, listing every bad record."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        preview = "; ".join(self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{len(self.errors)} record error(s): {preview}{more}")


# Cohen finding tokens that the pipeline keeps. Anything else is dropped.
COHEN_FINDINGS = {
    "COVID-19": ClassLabel.COVID19,
    "SARS": ClassLabel.PNEUMONIA,
    "Streptococcus": ClassLabel.PNEUMONIA,
    "Pneumocystis": ClassLabel.PNEUMONIA,
}
_COHEN_TOKENS = {k.lower().replace("-", ""): k for k in COHEN_FINDINGS}

RSNA_CLASSES = {
    "lung opacity": "pneumonia",
    "pneumonia": "pneumonia",
    "normal": "normal",
}


def map_label(source: Source, sublabel: str) -> ClassLabel | None:
    """Class for a (source, sublabel) pair, or None when the pair is excluded."""
    source = Source(source)
    if source is Source.COHEN_XRAY:
        return COHEN_FINDINGS.get(sublabel)
    return {"pneumonia": ClassLabel.PNEUMONIA, "normal": ClassLabel.NORMAL}.get(sublabel)


def _pixel_format_for(path) -> PixelFormat:
    return PixelFormat.DICOM_RAW if str(path).lower().endswith(".dcm") else PixelFormat.PNG8


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    case_id: str
    class_label: ClassLabel
    source: Source
    original_sublabel: str
    file_path: Path
    pixel_format: PixelFormat = PixelFormat.PNG8

    def __post_init__(self):
        object.__setattr__(self, "class_label", ClassLabel.parse(self.class_label))
        object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "file_path", Path(os.path.abspath(self.file_path)))
        object.__setattr__(self, "pixel_format", PixelFormat(self.pixel_format))
        if self.class_label is ClassLabel.COVID19 and self.source is not Source.COHEN_XRAY:
            raise ValueError(f"{self.image_id}: COVID19 records must come from {Source.COHEN_XRAY.value}")
        if self.original_sublabel in ("SARS", "Streptococcus", "Pneumocystis") and self.class_label is not ClassLabel.PNEUMONIA:
            raise ValueError(f"{self.image_id}: {self.original_sublabel} must map to PNEUMONIA")


@dataclass(frozen=True)
class SplitSpec:
    """Requested TRAIN counts per class.

    ``source_quotas`` pins an exact number of a class's TRAIN records to one
    source; the rest of that class's TRAIN count is drawn from the other
    sources. Everything not drawn goes to VALIDATION.
    """

    train_counts: Mapping[ClassLabel, int]
    source_quotas: Mapping[tuple[ClassLabel, Source], int] = field(default_factory=dict)
    patient_level: bool = False


DEFAULT_SPLIT = SplitSpec(
    train_counts={ClassLabel.COVID19: 149, ClassLabel.PNEUMONIA: 1634, ClassLabel.NORMAL: 2000},
    source_quotas={(ClassLabel.PNEUMONIA, Source.COHEN_XRAY): 34},
)


@dataclass(frozen=True)
class Manifest:
    records: tuple[ImageRecord, ...]
    split: Mapping[str, Split]
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = next(i for i, n in Counter(ids).items() if n > 1)
            raise ValueError(f"duplicate image_id {dup!r} in manifest")
        if set(ids) != set(self.split):
            raise ValueError("every record needs exactly one split assignment")

    def records_in(self, split: Split) -> list[ImageRecord]:
        return [r for r in self.records if self.split[r.image_id] is split]

    @property
    def train(self) -> list[ImageRecord]:
        return self.records_in(Split.TRAIN)

    @property
    def validation(self) -> list[ImageRecord]:
        return self.records_in(Split.VALIDATION)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.image_id: r for r in self.records}

    def counts(self) -> dict[Split, dict[ClassLabel, int]]:
        out = {s: {c: 0 for c in CLASSES} for s in Split}
        for r in self.records:
            out[self.split[r.image_id]][r.class_label] += 1
        return out


# --- Cohen collection ------------------------------------------------------


def _cohen_finding(raw: str) -> str | None:
    # Newer metadata uses hierarchical strings like "Pneumonia/Viral/COVID-19".
    for part in str(raw).replace(",", "/").split("/"):
        key = part.strip().lower().replace("-", "")
        if key in _COHEN_TOKENS:
            return _COHEN_TOKENS[key]
    return None


def ingest_cohen(metadata_table, image_dir, *, exclude_lateral: bool = False) -> list[ImageRecord]:
    """Read the Cohen metadata table and keep X-ray COVID-19 / SARS / Streptococcus / Pneumocystis rows.

    CT rows and every other finding are dropped; unknown findings are
    logged. Missing image files are collected and raised together.
    """
    image_dir = Path(image_dir)
    df = metadata_table if isinstance(metadata_table, pd.DataFrame) else pd.read_csv(metadata_table, dtype=str)
    if df.empty:
        return []
    df = df.fillna("")
    records, errors = [], []
    for row in df.to_dict("records"):
        if str(row.get("modality", "")).strip().lower() not in ("x-ray", "xray"):
            continue
        if exclude_lateral and str(row.get("view", "")).strip().upper() in ("L", "LATERAL"):
            continue
        finding = _cohen_finding(row.get("finding", ""))
        if finding is None:
            log.warning("cohen: excluding %s with finding %r", row.get("filename"), row.get("finding"))
            continue
        path = image_dir / row["filename"]
        if not path.is_file():
            errors.append(f"missing image file {path}")
            continue
        records.append(ImageRecord(
            image_id=f"cohen-{row['filename']}",
            case_id=f"cohen-{row['patientid']}",
            class_label=COHEN_FINDINGS[finding],
            source=Source.COHEN_XRAY,
            original_sublabel=finding,
            file_path=path,
            pixel_format=_pixel_format_for(path),
        ))
    if errors:
        raise IngestError(errors)
    return sorted(records, key=lambda r: r.image_id)


# --- RSNA challenge --------------------------------------------------------


def dicom_to_uint8(path) -> np.ndarray:
    """Decode a DICOM file to 8-bit grayscale with a min-max window over its full pixel range."""
    import pydicom

    ds = pydicom.dcmread(str(path))
    arr = ds.pixel_array.astype(np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        arr = (arr - lo) / (hi - lo) * 255.0
    else:
        arr = np.zeros_like(arr)
    if str(getattr(ds, "PhotometricInterpretation", "")).upper() == "MONOCHROME1":
        arr = 255.0 - arr
    return np.rint(arr).astype(np.uint8)


def convert_dicom(src, dst) -> Path:
    dst = Path(dst)
    dst.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(dicom_to_uint8(src), mode="L").save(dst)
    return dst


def _read_rsna_labels(label_table) -> dict[str, str]:
    df = label_table if isinstance(label_table, pd.DataFrame) else pd.read_csv(label_table, dtype=str)
    if df.empty:
        return {}
    col = "class" if "class" in df.columns else "label"
    if "patientId" not in df.columns or col not in df.columns:
        raise DataError(f"RSNA label table needs columns patientId and class/label, got {list(df.columns)}")
    labels: dict[str, str] = {}
    for pid, raw in zip(df["patientId"], df[col]):
        mapped = RSNA_CLASSES.get(str(raw).strip().lower())
        if mapped is None:
            log.debug("rsna: excluding %s with class %r", pid, raw)
            continue
        # The detailed class table repeats ids once per bounding box.
        if labels.get(pid, mapped) != mapped:
            raise DataError(f"RSNA id {pid} has conflicting labels {labels[pid]!r} and {mapped!r}")
        labels[pid] = mapped
    return labels


def ingest_rsna(label_table, dicom_dir, *, png_dir=None, workers: int = 1) -> list[ImageRecord]:
    """One record per labelled RSNA image.

    With ``png_dir`` each DICOM is converted to an 8-bit PNG there and the
    records point at the PNGs; otherwise records reference the raw DICOMs.
    """
    dicom_dir = Path(dicom_dir)
    labels = _read_rsna_labels(label_table)

    def one(item):
        pid, sub = item
        src = dicom_dir / f"{pid}.dcm"
        if not src.is_file():
            return None, f"label without file: {pid} ({src})"
        path = src
        if png_dir is not None:
            try:
                path = convert_dicom(src, Path(png_dir) / f"{pid}.png")
            except Exception as exc:  # pydicom raises a zoo of types on bad files
                return None, f"corrupt DICOM {pid}: {exc}"
        else:
            try:
                import pydicom
                pydicom.dcmread(str(src), stop_before_pixels=True)
            except Exception as exc:
                return None, f"corrupt DICOM {pid}: {exc}"
        return ImageRecord(
            image_id=f"rsna-{pid}",
            case_id=f"rsna-{pid}",
            class_label=map_label(Source.RSNA, sub),
            source=Source.RSNA,
            original_sublabel=sub,
            file_path=path,
            pixel_format=_pixel_format_for(path),
        ), None

    items = sorted(labels.items())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(i) for i in items]
    errors = [e for _, e in results if e]
    if errors:
        raise IngestError(errors)
    return sorted((r for r, _ in results), key=lambda r: r.image_id)


# --- split -----------------------------------------------------------------


def _draw(candidates: list[ImageRecord], k: int, rng: np.random.Generator, patient_level: bool) -> list[ImageRecord]:
    if not patient_level:
        order = rng.permutation(len(candidates))
        return [candidates[i] for i in order[:k]]
    cases = defaultdict(list)
    for r in candidates:
        cases[r.case_id].append(r)
    names = sorted(cases)
    chosen: list[ImageRecord] = []
    for i in rng.permutation(len(names)):
        group = cases[names[i]]
        if len(chosen) + len(group) <= k:
            chosen.extend(group)
        if len(chosen) == k:
            break
    if len(chosen) != k:
        raise DataError(f"patient-level split cannot hit exactly {k} images (closest {len(chosen)})")
    return chosen


def build_manifest(records: Iterable[ImageRecord], split_spec: SplitSpec = DEFAULT_SPLIT, seed: int = 0) -> Manifest:
    records = sorted(records, key=lambda r: r.image_id)
    if not records:
        raise DataError("cannot build a manifest from zero records")
    train: set[str] = set()
    for cls in CLASSES:
        pool = [r for r in records if r.class_label is cls]
        want = int(split_spec.train_counts.get(cls, 0))
        if want > len(pool):
            raise DataError(f"class {cls.name}: requested {want} TRAIN records, only {len(pool)} available "
                            f"(shortfall {want - len(pool)})")
        quotas = {src: n for (c, src), n in split_spec.source_quotas.items() if c is cls}
        for src, n in sorted(quotas.items(), key=lambda kv: kv[0].value):
            cand = [r for r in pool if r.source is src]
            if n > len(cand):
                raise DataError(f"class {cls.name}: requested {n} TRAIN records from {src.value}, only "
                                f"{len(cand)} available (shortfall {n - len(cand)})")
            picked = _draw(cand, n, rng_for(seed, "split", cls, src), split_spec.patient_level)
            train.update(r.image_id for r in picked)
        rest = want - sum(quotas.values())
        if rest < 0:
            raise DataError(f"class {cls.name}: source quotas exceed the requested TRAIN count {want}")
        cand = [r for r in pool if r.source not in quotas]
        if rest > len(cand):
            raise DataError(f"class {cls.name}: requested {rest} TRAIN records outside the quota sources, only "
                            f"{len(cand)} available (shortfall {rest - len(cand)})")
        picked = _draw(cand, rest, rng_for(seed, "split", cls, "rest"), split_spec.patient_level)
        train.update(r.image_id for r in picked)
    split = {r.image_id: (Split.TRAIN if r.image_id in train else Split.VALIDATION) for r in records}
    return Manifest(records=tuple(records), split=split)


# --- manifest file ---------------------------------------------------------


def _rel(path: Path, base: Path) -> str:
    try:
        return Path(os.path.relpath(path, base)).as_posix()
    except ValueError:  # different drive on Windows
        return path.as_posix()


def write_manifest(manifest: Manifest, path) -> Path:
    """Write the manifest CSV. Absolute file paths are stored relative to the file's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(os.path.abspath(path.parent))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            w.writerow([r.image_id, r.case_id, r.class_label.name, r.source.value, r.original_sublabel,
                        _rel(r.file_path, base), manifest.split[r.image_id].value])
    return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    base = Path(os.path.abspath(path.parent))
    records, split = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}")
        for row in reader:
            fp = Path(os.path.normpath(base / row["file_path"]))
            records.append(ImageRecord(
                image_id=row["image_id"], case_id=row["case_id"], class_label=ClassLabel[row["class_label"]],
                source=Source(row["source"]), original_sublabel=row["original_sublabel"], file_path=fp,
                pixel_format=_pixel_format_for(fp),
            ))
            split[row["image_id"]] = Split(row["split"])
    return Manifest(records=tuple(records), split=split)


def split_table(manifest: Manifest) -> list[tuple[str, dict[ClassLabel, int]]]:
    """Rows of (name, per-class count): one per source, Total, training and validation."""
    rows = []
    for src in Source:
        c = Counter(r.class_label for r in manifest.records if r.source is src)
        rows.append((src.value, {k: c.get(k, 0) for k in CLASSES}))
    total = Counter(r.class_label for r in manifest.records)
    rows.append(("Total", {k: total.get(k, 0) for k in CLASSES}))
    counts = manifest.counts()
    rows.append(("All Training Sets", counts[Split.TRAIN]))
    rows.append(("Validation Set", counts[Split.VALIDATION]))
    return rows


# --- pixels ----------------------------------------------------------------


def load_grayscale(record_or_path, resolution: tuple[int, int] | None = None) -> np.ndarray:
    """8-bit grayscale pixels for a record, optionally resized to (height, width)."""
    path = Path(getattr(record_or_path, "file_path", record_or_path))
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    if path.suffix.lower() == ".dcm":
        img = Image.fromarray(dicom_to_uint8(path), mode="L")
    else:
        with Image.open(path) as im:
            img = im.convert("L")
    if resolution is not None and img.size != (resolution[1], resolution[0]):
        img = img.resize((resolution[1], resolution[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def to_model_input(gray: np.ndarray, rescale: float = 1.0 / 255.0) -> np.ndarray:
    """Rescale uint8 grayscale once and replicate to 3 channels (H, W, 3) float32."""
    x = gray.astype(np.float32) * np.float32(rescale)
    return np.repeat(x[..., None], 3, axis=-1)
