"""Shared enums, seed derivation and error types."""

from __future__ import annotations

import enum
import hashlib

import numpy as np


class ClassLabel(enum.IntEnum):
    # Integer value is the model output index; argmax ties resolve to the lowest.
    NORMAL = 0
    PNEUMONIA = 1
    COVID19 = 2

    @classmethod
    def parse(cls, value) -> "ClassLabel":
        if isinstance(value, ClassLabel):
            return value
        key = str(value).strip().upper().replace("-", "").replace("_", "").replace(" ", "")
        aliases = {"NORMAL": cls.NORMAL, "PNEUMONIA": cls.PNEUMONIA, "COVID19": cls.COVID19, "COVID": cls.COVID19}
        if key not in aliases:
            raise ValueError(f"unknown class label {value!r}")
        return aliases[key]


CLASSES = (ClassLabel.NORMAL, ClassLabel.PNEUMONIA, ClassLabel.COVID19)

DISPLAY_NAMES = {
    ClassLabel.NORMAL: "NORMAL",
    ClassLabel.PNEUMONIA: "PNEUMONIA",
    ClassLabel.COVID19: "COVID-19",
}


class Source(str, enum.Enum):
    COHEN_XRAY = "COHEN_XRAY"
    RSNA = "RSNA"


class XrcError(Exception):
    """Base class for pipeline errors."""


class ConfigError(XrcError):
    pass


class DataError(XrcError):
    pass


class TrainingError(XrcError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts.

    Uses sha256 over the string forms, so the result does not depend on
    PYTHONHASHSEED or the platform.
    """
    text = "\x1f".join(str(getattr(p, "name", p)) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big") >> 1


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
