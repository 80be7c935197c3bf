"""Self-describing model checkpoint files.

Layout: an 8-byte magic, a little-endian uint32 format version, a
little-endian uint32 JSON header length, the UTF-8 JSON header, then every
weight array as little-endian 32-bit floats in C order, concatenated in
header order. The header carries the model configuration, the feature
configuration and column layout, and the class-name list, so a checkpoint
can be loaded without any side channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureConfig
from .model import ModelConfig, ModelWeights, param_shapes

MAGIC = b"AISWCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or inconsistent checkpoint file."""


@dataclass(frozen=True, slots=True)
class Checkpoint:
    model_config: ModelConfig
    feature_config: FeatureConfig
    class_names: tuple[str, ...]
    weights: ModelWeights

    def __post_init__(self):
        if len(self.class_names) != self.model_config.n_classes:
            raise CheckpointError(
                f"{len(self.class_names)} class names for "
                f"{self.model_config.n_classes}-class model")
        if self.feature_config.feature_width != self.model_config.feature_width:
            raise CheckpointError("feature width disagrees with model config")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    expected = param_shapes(ckpt.model_config)
    arrays = ckpt.weights.arrays
    if set(arrays) != set(expected):
        raise CheckpointError("weight names do not match the configuration")
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "feature_config": ckpt.feature_config.to_dict(),
        "feature_layout": list(ckpt.feature_config.layout()),
        "class_names": list(ckpt.class_names),
        "arrays": [
            {"name": name, "shape": list(expected[name])} for name in expected
        ],
    }
    meta = json.dumps(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
        fh.write(meta)
        for name in expected:
            arr = arrays[name]
            if tuple(arr.shape) != expected[name]:
                raise CheckpointError(f"array {name} has shape {arr.shape}, "
                                      f"expected {expected[name]}")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointError("truncated header")
        version, meta_len = struct.unpack("<II", head)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        try:
            header = json.loads(fh.read(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable header: {exc}") from None

        model_config = ModelConfig.from_dict(header["model_config"])
        feature_config = FeatureConfig.from_dict(header["feature_config"])
        expected = param_shapes(model_config)
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in expected or expected[name] != shape:
                raise CheckpointError(f"unexpected array {name} {shape}")
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"truncated data for {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        missing = set(expected) - set(arrays)
        if missing:
            raise CheckpointError(f"missing arrays: {sorted(missing)}")

    return Checkpoint(
        model_config=model_config,
        feature_config=feature_config,
        class_names=tuple(header["class_names"]),
        weights=ModelWeights(arrays),
    )
