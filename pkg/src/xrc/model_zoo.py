"""Backbone registry, the single-backbone baselines and the concatenated network.

Every network has the same head: a pointwise convolution over the final
feature map (for the concatenated network, both backbones' maps joined on
the channel axis), global average pooling, then a 3-way softmax.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

import keras  # noqa: E402
from keras import layers  # noqa: E402

from xrc.common import CLASSES, ConfigError  # noqa: E402

N_CLASSES = len(CLASSES)


class NetworkKind(str, enum.Enum):
    BACKBONE_A = "BACKBONE_A"
    BACKBONE_B = "BACKBONE_B"
    CONCATENATED = "CONCATENATED"


@dataclass(frozen=True)
class Backbone:
    name: str
    display_name: str
    build: Callable[..., keras.Model]
    # Default pretrained weight source understood by ``build(weights=...)``; None means none exists.
    default_weights: str | None = None


def _keras_app(fn):
    def build(input_shape, weights=None, name=None):
        m = fn(include_top=False, weights=weights, input_shape=input_shape)
        return keras.Model(m.input, m.output, name=name or m.name)
    return build


def _tiny(channels: tuple[int, ...], name: str):
    # Total stride 4 for both tiny variants so their maps line up.
    def build(input_shape, weights=None, name=name):
        inp = keras.Input(shape=input_shape)
        x = inp
        strides = [2, 2] + [1] * (len(channels) - 2)
        for i, (c, s) in enumerate(zip(channels, strides)):
            x = layers.Conv2D(c, 3, strides=s, padding="same", activation="relu", name=f"{name}_conv{i}")(x)
        m = keras.Model(inp, x, name=name)
        if weights is not None:
            m.load_weights(weights)
        return m
    return build


BACKBONES: dict[str, Backbone] = {
    "xception": Backbone("xception", "Xception", _keras_app(keras.applications.Xception), "imagenet"),
    "resnet50v2": Backbone("resnet50v2", "ResNet50V2", _keras_app(keras.applications.ResNet50V2), "imagenet"),
    "tiny_a": Backbone("tiny_a", "TinyA", _tiny((16, 32), "tiny_a")),
    "tiny_b": Backbone("tiny_b", "TinyB", _tiny((12, 24, 24), "tiny_b")),
}


def register_backbone(backbone: Backbone) -> None:
    BACKBONES[backbone.name] = backbone


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: NetworkKind
    backbones: tuple[str, ...]
    input_resolution: tuple[int, int] = (300, 300)
    input_channels: int = 3
    head_channels: int = 128
    head_activation: str = "relu"
    dropout: float = 0.0
    pretrained_init: bool = True
    # backbone name -> weight source (file path or a keras.applications tag)
    weight_sources: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", NetworkKind(self.kind))
        object.__setattr__(self, "backbones", tuple(self.backbones))
        object.__setattr__(self, "input_resolution", tuple(int(v) for v in self.input_resolution))
        want = 2 if self.kind is NetworkKind.CONCATENATED else 1
        if len(self.backbones) != want:
            raise ConfigError(f"{self.kind.value} takes {want} backbone(s), got {list(self.backbones)}")
        for b in self.backbones:
            if b not in BACKBONES:
                raise ConfigError(f"unknown backbone {b!r}; known: {sorted(BACKBONES)}")
        if self.input_channels != 3:
            raise ConfigError("input_channels must be 3")

    @property
    def name(self) -> str:
        if self.kind is NetworkKind.CONCATENATED:
            return "Concatenated"
        return BACKBONES[self.backbones[0]].display_name

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (*self.input_resolution, self.input_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


def standard_specs(backbone_a="xception", backbone_b="resnet50v2", resolution=(300, 300), **kw) -> list[ArchitectureSpec]:
    """The two baselines and the concatenated network, in that order."""
    return [
        ArchitectureSpec(NetworkKind.BACKBONE_A, (backbone_a,), resolution, **kw),
        ArchitectureSpec(NetworkKind.BACKBONE_B, (backbone_b,), resolution, **kw),
        ArchitectureSpec(NetworkKind.CONCATENATED, (backbone_a, backbone_b), resolution, **kw),
    ]


def _weights_for(spec: ArchitectureSpec, name: str):
    if not spec.pretrained_init:
        return None
    src = spec.weight_sources.get(name, BACKBONES[name].default_weights)
    if src is None:
        raise ConfigError(f"pretrained_init is set but backbone {name!r} has no pretrained weight source")
    if src != "imagenet" and not Path(src).is_file():
        raise ConfigError(f"pretrained weights for {name!r} not found at {src}")
    return src


def build_backbones(spec: ArchitectureSpec) -> list[keras.Model]:
    models = []
    for name in spec.backbones:
        weights = _weights_for(spec, name)
        try:
            models.append(BACKBONES[name].build(spec.input_shape, weights=weights, name=name))
        except ConfigError:
            raise
        except Exception as exc:
            if weights is None:
                raise
            raise ConfigError(f"could not load pretrained weights for {name!r} from {weights}: {exc}") from exc
    return models


def feature_shapes(spec: ArchitectureSpec) -> list[tuple[int, int, int]]:
    """(h, w, c) of each backbone's final map, by forward shape trace (no weights loaded)."""
    shapes = []
    for name in spec.backbones:
        m = BACKBONES[name].build(spec.input_shape, weights=None, name=name)
        shapes.append(tuple(m.output_shape[1:]))
        del m
    return shapes


def build_model(spec: ArchitectureSpec, seed: int | None = None) -> keras.Model:
    """Keras model mapping (N, H, W, 3) images in [0, 1] to (N, 3) class probabilities.

    Head weights are freshly initialised (seeded when ``seed`` is given);
    backbone weights come from the pretrained source when
    ``spec.pretrained_init`` is set. Nothing is frozen.
    """
    if seed is not None:
        keras.utils.set_random_seed(int(seed) % (2**32))
    backbones = build_backbones(spec)
    inp = keras.Input(shape=spec.input_shape, name="image")
    feats = [b(inp) for b in backbones]
    if len(feats) > 1:
        spatial = {tuple(f.shape[1:3]) for f in feats}
        if len(spatial) != 1:
            raise ConfigError(f"backbone feature maps differ spatially: {sorted(spatial)}; "
                              f"pick a resolution where they agree")
        x = layers.Concatenate(axis=-1, name="concat")(feats)
    else:
        x = feats[0]
    x = layers.Conv2D(spec.head_channels, 1, activation=spec.head_activation, name="head_pointwise")(x)
    x = layers.GlobalAveragePooling2D(name="head_pool")(x)
    if spec.dropout:
        x = layers.Dropout(spec.dropout, name="head_dropout")(x)
    out = layers.Dense(N_CLASSES, activation="softmax", name="probabilities")(x)
    return keras.Model(inp, out, name=spec.name)


def pre_head_channels(model: keras.Model) -> int:
    """Channel count entering the head (the concatenated map for the two-backbone network)."""
    return int(model.get_layer("head_pointwise").input.shape[-1])


def predict(model: keras.Model, batch, batch_size: int = 32) -> np.ndarray:
    """Inference-mode probabilities, shape (N, 3)."""
    batch = np.asarray(batch, dtype=np.float32)
    want = tuple(model.input_shape[1:])
    if batch.ndim != 4 or tuple(batch.shape[1:]) != want:
        raise ValueError(f"expected batch of shape (N, {', '.join(map(str, want))}), got {batch.shape}")
    outs = [np.asarray(model(batch[i:i + batch_size], training=False)) for i in range(0, len(batch), batch_size)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, N_CLASSES), np.float32)


def predicted_classes(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties.
    return np.argmax(probs, axis=1)


# --- checkpoints -----------------------------------------------------------


@dataclass(frozen=True)
class ModelCheckpoint:
    spec: ArchitectureSpec
    weights_blob: bytes
    epoch: int
    fold_id: int
    training_config_digest: str

    @classmethod
    def capture(cls, model: keras.Model, spec: ArchitectureSpec, epoch: int, fold_id: int, digest: str):
        with tempfile.TemporaryDirectory() as tmp:
            p = Path(tmp) / "w.weights.h5"
            model.save_weights(p)
            return cls(spec, p.read_bytes(), epoch, fold_id, digest)

    def restore(self) -> keras.Model:
        """Rebuild the network (no pretrained download) and load the stored weights."""
        model = build_model(replace(self.spec, pretrained_init=False))
        with tempfile.TemporaryDirectory() as tmp:
            p = Path(tmp) / "w.weights.h5"
            p.write_bytes(self.weights_blob)
            model.load_weights(p)
        return model

    def sidecar(self) -> dict:
        return {
            "spec_name": self.spec.name,
            "resolution": list(self.spec.input_resolution),
            "epoch": self.epoch,
            "fold": self.fold_id,
            "config_digest": self.training_config_digest,
            "weights_sha256": hashlib.sha256(self.weights_blob).hexdigest(),
            "spec": self.spec.to_dict(),
        }


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    """Write ``<path>.weights.h5`` plus a ``<path>.json`` sidecar; returns the weights path."""
    base = Path(str(path).removesuffix(".weights.h5"))
    base.parent.mkdir(parents=True, exist_ok=True)
    wpath = base.with_name(base.name + ".weights.h5")
    wpath.write_bytes(ckpt.weights_blob)
    base.with_name(base.name + ".json").write_text(json.dumps(ckpt.sidecar(), indent=2, sort_keys=True) + "\n")
    return wpath


def load_checkpoint(path) -> ModelCheckpoint:
    base = Path(str(path).removesuffix(".weights.h5").removesuffix(".json"))
    meta = json.loads(base.with_name(base.name + ".json").read_text())
    blob = base.with_name(base.name + ".weights.h5").read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta["weights_sha256"]:
        raise ValueError(f"{base}: weights do not match the sidecar digest")
    spec = ArchitectureSpec.from_dict(meta["spec"])
    return ModelCheckpoint(spec, blob, int(meta["epoch"]), int(meta["fold"]), meta["config_digest"])
