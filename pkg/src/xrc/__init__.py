"""Three-class chest X-ray experiments: ingest, phased sampling, training, evaluation."""

from xrc.common import CLASSES, ClassLabel, Source

__version__ = "0.1.0"

__all__ = ["CLASSES", "ClassLabel", "Source", "__version__"]
