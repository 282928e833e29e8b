"""Synthetic stand-ins for the two source datasets.

Images are separable by construction: each class is a bright disk of a
class-specific radius on a dark noisy field, which survives min-max
windowing, flips, rotation and small zoom/shift.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from xrc.common import ClassLabel, Source, rng_for
from xrc.data_ingest import ImageRecord

COHEN_DIR = "covid-chestxray-dataset"
RSNA_DIR = "rsna-pneumonia-detection-challenge"

PUBLISHED_TOTALS = {ClassLabel.COVID19: 180, ClassLabel.PNEUMONIA: 6054, ClassLabel.NORMAL: 8851}
PUBLISHED_COHEN_PNEUMONIA = 42

_RADIUS = {ClassLabel.NORMAL: 0.12, ClassLabel.PNEUMONIA: 0.28, ClassLabel.COVID19: 0.44}
_PNEUMONIA_SUBLABELS = ("SARS", "Streptococcus", "Pneumocystis")


def synthetic_records(counts=None, cohen_pneumonia: int = PUBLISHED_COHEN_PNEUMONIA) -> list[ImageRecord]:
    """Records only, no pixels. Defaults to the published per-class totals."""
    counts = dict(PUBLISHED_TOTALS if counts is None else counts)
    recs = []
    for i in range(counts.get(ClassLabel.COVID19, 0)):
        recs.append(ImageRecord(f"cohen-covid-{i:05d}.png", f"cohen-p{i // 2:04d}", ClassLabel.COVID19,
                                Source.COHEN_XRAY, "COVID-19", f"cohen/covid-{i:05d}.png"))
    n_pneu = counts.get(ClassLabel.PNEUMONIA, 0)
    n_cohen = min(cohen_pneumonia, n_pneu)
    for i in range(n_cohen):
        recs.append(ImageRecord(f"cohen-pneu-{i:05d}.png", f"cohen-q{i // 2:04d}", ClassLabel.PNEUMONIA,
                                Source.COHEN_XRAY, _PNEUMONIA_SUBLABELS[i % 3], f"cohen/pneu-{i:05d}.png"))
    for i in range(n_pneu - n_cohen):
        recs.append(ImageRecord(f"rsna-p{i:05d}", f"rsna-p{i:05d}", ClassLabel.PNEUMONIA, Source.RSNA,
                                "pneumonia", f"rsna/p{i:05d}.png"))
    for i in range(counts.get(ClassLabel.NORMAL, 0)):
        recs.append(ImageRecord(f"rsna-n{i:05d}", f"rsna-n{i:05d}", ClassLabel.NORMAL, Source.RSNA,
                                "normal", f"rsna/n{i:05d}.png"))
    return recs


def synthetic_pixels(cls: ClassLabel, size: int, rng: np.random.Generator) -> np.ndarray:
    """uint8 (size, size) image for one class."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0 + rng.uniform(-0.05, 0.05, size=2) * size
    r = _RADIUS[ClassLabel(cls)] * size * rng.uniform(0.92, 1.08)
    img = np.where((yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= r * r, 200.0, 30.0)
    img += rng.normal(0.0, 8.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_dicom(path, pixels: np.ndarray) -> Path:
    """Minimal single-frame MONOCHROME2 DICOM with 16-bit unsigned pixels."""
    import pydicom
    from pydicom.dataset import FileDataset, FileMetaDataset
    from pydicom.uid import ExplicitVRLittleEndian, generate_uid, SecondaryCaptureImageStorage

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(pixels, dtype=np.uint16)
    meta = FileMetaDataset()
    meta.MediaStorageSOPClassUID = SecondaryCaptureImageStorage
    meta.MediaStorageSOPInstanceUID = generate_uid(entropy_srcs=[path.name])
    meta.TransferSyntaxUID = ExplicitVRLittleEndian
    ds = FileDataset(str(path), {}, file_meta=meta, preamble=b"\0" * 128)
    ds.SOPClassUID = meta.MediaStorageSOPClassUID
    ds.SOPInstanceUID = meta.MediaStorageSOPInstanceUID
    ds.PatientID = path.stem
    ds.Modality = "CR"
    ds.Rows, ds.Columns = arr.shape
    ds.SamplesPerPixel = 1
    ds.PhotometricInterpretation = "MONOCHROME2"
    ds.BitsAllocated = 16
    ds.BitsStored = 16
    ds.HighBit = 15
    ds.PixelRepresentation = 0
    ds.PixelData = arr.tobytes()
    pydicom.dcmwrite(str(path), ds, enforce_file_format=True)
    return path


def synthetic_counts(n: int) -> dict[ClassLabel, int]:
    """Split ``n`` images into three near-equal classes (remainder to NORMAL)."""
    third = n // 3
    return {ClassLabel.COVID19: third, ClassLabel.PNEUMONIA: third, ClassLabel.NORMAL: n - 2 * third}


def write_synthetic_sources(root, counts, cohen_pneumonia: int, *, size: int = 64, seed: int = 0) -> dict[str, Path]:
    """Lay out fake Cohen and RSNA sources under ``root`` the way the real downloads look.

    Adds one CT row and one ARDS row to the Cohen metadata; both must be
    filtered out by ingestion. RSNA images are written as 16-bit DICOM.
    """
    root = Path(root)
    cohen = root / COHEN_DIR
    rsna = root / RSNA_DIR
    (cohen / "images").mkdir(parents=True, exist_ok=True)
    (rsna / "stage_2_train_images").mkdir(parents=True, exist_ok=True)

    meta_rows, rsna_rows = [], []
    for rec in synthetic_records(counts, cohen_pneumonia):
        rng = rng_for(seed, "pixels", rec.image_id)
        px = synthetic_pixels(rec.class_label, size, rng)
        if rec.source is Source.COHEN_XRAY:
            fname = rec.image_id.removeprefix("cohen-")
            Image.fromarray(px, mode="L").save(cohen / "images" / fname)
            finding = "Pneumonia/Viral/COVID-19" if rec.original_sublabel == "COVID-19" else rec.original_sublabel
            meta_rows.append({"patientid": rec.case_id.removeprefix("cohen-"), "finding": finding,
                              "view": "PA", "modality": "X-ray", "filename": fname})
        else:
            pid = rec.image_id.removeprefix("rsna-")
            # Affine scaling into a 12-bit-ish range; min-max windowing undoes it.
            write_dicom(rsna / "stage_2_train_images" / f"{pid}.dcm", px.astype(np.uint16) * 16 + 100)
            rsna_rows.append({"patientId": pid, "class": "Lung Opacity" if rec.class_label is ClassLabel.PNEUMONIA else "Normal"})

    Image.fromarray(synthetic_pixels(ClassLabel.COVID19, size, rng_for(seed, "ct")), mode="L").save(cohen / "images" / "ct-0.png")
    Image.fromarray(synthetic_pixels(ClassLabel.PNEUMONIA, size, rng_for(seed, "ards")), mode="L").save(cohen / "images" / "ards-0.png")
    meta_rows.append({"patientid": "ct", "finding": "COVID-19", "view": "Axial", "modality": "CT", "filename": "ct-0.png"})
    meta_rows.append({"patientid": "ards", "finding": "ARDS", "view": "PA", "modality": "X-ray", "filename": "ards-0.png"})
    rsna_rows.append({"patientId": "excluded-0", "class": "No Lung Opacity / Not Normal"})

    pd.DataFrame(meta_rows).to_csv(cohen / "metadata.csv", index=False)
    pd.DataFrame(rsna_rows).to_csv(rsna / "stage_2_detailed_class_info.csv", index=False)
    return {
        "cohen_metadata": cohen / "metadata.csv",
        "cohen_images": cohen / "images",
        "rsna_labels": rsna / "stage_2_detailed_class_info.csv",
        "rsna_dicom": rsna / "stage_2_train_images",
    }


def dataset_paths(root) -> dict[str, Path]:
    """Conventional locations of both sources under one data root."""
    root = Path(root)
    return {
        "cohen_metadata": root / COHEN_DIR / "metadata.csv",
        "cohen_images": root / COHEN_DIR / "images",
        "rsna_labels": root / RSNA_DIR / "stage_2_detailed_class_info.csv",
        "rsna_dicom": root / RSNA_DIR / "stage_2_train_images",
    }


__all__ = [
    "PUBLISHED_TOTALS", "PUBLISHED_COHEN_PNEUMONIA", "synthetic_records", "synthetic_pixels", "write_dicom",
    "synthetic_counts", "write_synthetic_sources", "dataset_paths",
]
