"""Training loop, optimizer, checkpoint selection, and evaluation.

Training minimizes class-weighted cross-entropy of the last-position
prediction with an adaptive-moment optimizer, and keeps the checkpoint with
the minimum validation loss across epochs (ties resolve to the earliest
epoch). Everything is seeded and single-threaded, so runs reproduce
bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureConfig, build_features
from .ingest import AisMessage
from .model import (
    CE_EPS,
    ModelConfig,
    ModelWeights,
    ShapeMismatch,
    backward,
    forward,
    init_weights,
    softmax,
)
from .trackstore import TrackWindow

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class EmptyDataset(ValueError):
    """Raised when training or evaluation receives no usable examples."""


@dataclass(frozen=True, slots=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    n_epochs: int = 4
    class_weights: tuple[float, ...] | None = None  # None: inverse frequency
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.n_epochs < 1:
            raise ValueError("batch_size and n_epochs must be positive")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class_weights must all be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True, slots=True)
class LabeledWindow:
    window: TrackWindow
    label: str


@dataclass(slots=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass(slots=True)
class TrainResult:
    weights: ModelWeights
    best_epoch: int
    log: list[EpochLog]
    class_weights: np.ndarray


@dataclass(slots=True)
class EvalResult:
    confusion: np.ndarray  # rows = truth, cols = prediction
    accuracy: float
    per_class_recall: dict[str, float | None]
    class_names: tuple[str, ...]


def weighted_cross_entropy(probs: np.ndarray, label: int, weights: np.ndarray) -> float:
    """-weights[label] * ln(probs[label] + eps)."""
    return float(-weights[label] * math.log(float(probs[label]) + CE_EPS))


@dataclass(slots=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, w: ModelWeights) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in w.arrays.items()},
            v={k: np.zeros_like(a) for k, a in w.arrays.items()},
        )


def optimizer_step(
    w: ModelWeights,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[ModelWeights, AdamState]:
    """One bias-corrected adaptive-moment update, in place."""
    if set(grads) != set(w.arrays):
        raise ShapeMismatch("gradient names do not match weights")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for name, arr in w.arrays.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ShapeMismatch(f"gradient {name} has shape {g.shape}, "
                                f"expected {arr.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return w, state


def inverse_frequency_weights(labels: list[int], n_classes: int) -> np.ndarray:
    """Per-class weights proportional to 1/frequency, mean-normalized to 1.

    Classes absent from the split get weight 1 so the scale stays sane.
    """
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    weights = np.where(counts > 0, np.divide(
        1.0, counts, out=np.ones_like(counts), where=counts > 0), 1.0)
    present = weights[counts > 0]
    if present.size:
        weights = weights / present.mean()
    return weights


def _precompute(dataset: list[LabeledWindow], fcfg: FeatureConfig,
                class_names: tuple[str, ...]) -> tuple[list[np.ndarray], list[int]]:
    index = {name: i for i, name in enumerate(class_names)}
    feats, labels = [], []
    for ex in dataset:
        if ex.label not in index:
            raise EmptyDataset(f"label {ex.label!r} not in class set {class_names}")
        feats.append(build_features(ex.window, fcfg).rows)
        labels.append(index[ex.label])
    return feats, labels


def stratified_split(
    labels: list[int], val_fraction: float, rng: np.random.Generator,
) -> tuple[list[int], list[int]]:
    """Split indices into (train, val), stratified by class.

    Each class with at least two examples contributes at least one
    validation example when val_fraction > 0.
    """
    by_class: dict[int, list[int]] = {}
    for i, y in enumerate(labels):
        by_class.setdefault(y, []).append(i)
    train_idx, val_idx = [], []
    for y in sorted(by_class):
        idx = by_class[y]
        perm = rng.permutation(len(idx))
        n_val = int(len(idx) * val_fraction)
        if val_fraction > 0 and n_val == 0 and len(idx) >= 2:
            n_val = 1
        val_idx.extend(idx[p] for p in perm[:n_val])
        train_idx.extend(idx[p] for p in perm[n_val:])
    return sorted(train_idx), sorted(val_idx)


def _mean_loss(cfg, weights, feats, labels, class_weights):
    total = 0.0
    for x, y in zip(feats, labels):
        probs = softmax(forward(cfg, weights, x))
        total += weighted_cross_entropy(probs, y, class_weights)
    return total / len(feats)


def train_and_select(
    dataset: list[LabeledWindow],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    fcfg: FeatureConfig | None = None,
    class_names: tuple[str, ...] | None = None,
    val_dataset: list[LabeledWindow] | None = None,
    log_fn=None,
) -> TrainResult:
    """Train for tcfg.n_epochs and return the minimum-validation-loss
    checkpoint plus the per-epoch loss log.

    When no explicit validation set is given, a stratified tcfg.val_fraction
    split is carved from the dataset. If that leaves no validation examples,
    the training loss stands in as the selection metric.
    """
    if not dataset:
        raise EmptyDataset("no training examples")
    fcfg = fcfg or FeatureConfig()
    if class_names is None:
        class_names = tuple(sorted({ex.label for ex in dataset}))
    if len(class_names) != cfg.n_classes:
        raise EmptyDataset(
            f"{len(class_names)} classes in data, model expects {cfg.n_classes}")

    feats, labels = _precompute(dataset, fcfg, class_names)
    rng = np.random.default_rng(tcfg.seed)

    if val_dataset is not None:
        train_feats, train_labels = feats, labels
        val_feats, val_labels = _precompute(val_dataset, fcfg, class_names)
    else:
        train_idx, val_idx = stratified_split(labels, tcfg.val_fraction, rng)
        train_feats = [feats[i] for i in train_idx]
        train_labels = [labels[i] for i in train_idx]
        val_feats = [feats[i] for i in val_idx]
        val_labels = [labels[i] for i in val_idx]
    if not train_feats:
        raise EmptyDataset("validation split consumed every example")

    if tcfg.class_weights is not None:
        class_weights = np.asarray(tcfg.class_weights, dtype=np.float64)
    else:
        class_weights = inverse_frequency_weights(train_labels, cfg.n_classes)

    weights = init_weights(cfg, tcfg.seed)
    state = AdamState.zeros_like(weights)
    n_train = len(train_feats)

    best_weights = weights.copy()
    best_val = math.inf
    best_epoch = 0
    log: list[EpochLog] = []

    for epoch in range(1, tcfg.n_epochs + 1):
        perm = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, tcfg.batch_size):
            batch = perm[start:start + tcfg.batch_size]
            grads_sum: dict[str, np.ndarray] | None = None
            for i in batch:
                loss, grads = backward(cfg, weights, train_feats[i],
                                       train_labels[i], class_weights)
                epoch_loss += loss
                if grads_sum is None:
                    grads_sum = grads
                else:
                    for k, g in grads.items():
                        grads_sum[k] += g
            for k in grads_sum:
                grads_sum[k] /= len(batch)
            optimizer_step(weights, grads_sum, state, tcfg.learning_rate)
        train_loss = epoch_loss / n_train

        if val_feats:
            val_loss = _mean_loss(cfg, weights, val_feats, val_labels, class_weights)
        else:
            val_loss = train_loss
        log.append(EpochLog(epoch, train_loss, val_loss))
        if log_fn is not None:
            log_fn(log[-1])
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_weights = weights.copy()

    return TrainResult(weights=best_weights, best_epoch=best_epoch, log=log,
                       class_weights=class_weights)


def evaluate(
    cfg: ModelConfig,
    weights: ModelWeights,
    dataset: list[LabeledWindow],
    fcfg: FeatureConfig | None = None,
    class_names: tuple[str, ...] | None = None,
) -> EvalResult:
    """Confusion matrix (rows = truth, cols = prediction), accuracy, and
    per-class recall; recall is absent (None) for classes with no examples."""
    if not dataset:
        raise EmptyDataset("no evaluation examples")
    fcfg = fcfg or FeatureConfig()
    if class_names is None:
        class_names = tuple(sorted({ex.label for ex in dataset}))
    feats, labels = _precompute(dataset, fcfg, class_names)

    n = cfg.n_classes
    confusion = np.zeros((n, n), dtype=np.int64)
    for x, y in zip(feats, labels):
        pred = int(np.argmax(forward(cfg, weights, x)))
        confusion[y, pred] += 1

    total = int(confusion.sum())
    accuracy = float(np.trace(confusion)) / total
    recall: dict[str, float | None] = {}
    for i, name in enumerate(class_names):
        row = confusion[i].sum()
        recall[name] = float(confusion[i, i] / row) if row else None
    return EvalResult(confusion=confusion, accuracy=accuracy,
                      per_class_recall=recall, class_names=class_names)


# -- dataset file format -------------------------------------------------------

def save_dataset_jsonl(path: str | Path, dataset: list[LabeledWindow]) -> None:
    """Write labeled windows as JSONL: {"window": [messages...], "label": name}."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in dataset:
            obj = {
                "window": [_message_to_obj(m) for m in ex.window.messages],
                "label": ex.label,
            }
            fh.write(json.dumps(obj) + "\n")


def load_dataset_jsonl(path: str | Path) -> list[LabeledWindow]:
    dataset: list[LabeledWindow] = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            msgs = tuple(_message_from_obj(m) for m in obj["window"])
            if not msgs:
                raise EmptyDataset("dataset contains an empty window")
            dataset.append(LabeledWindow(
                window=TrackWindow(
                    entity_id=msgs[0].entity_id,
                    messages=msgs,
                    assembled_at=msgs[-1].timestamp,
                ),
                label=str(obj["label"]),
            ))
    if not dataset:
        raise EmptyDataset(f"no examples in {path}")
    return dataset


def _message_to_obj(m: AisMessage) -> dict:
    obj = {"entity_id": m.entity_id, "timestamp": m.timestamp, "lat": m.lat,
           "lon": m.lon, "sog": m.sog, "cog": m.cog}
    if m.vessel_type is not None:
        obj["vessel_type"] = m.vessel_type
    return obj


def _message_from_obj(obj: dict) -> AisMessage:
    return AisMessage(
        entity_id=str(obj["entity_id"]),
        timestamp=int(obj["timestamp"]),
        lat=float(obj["lat"]),
        lon=float(obj["lon"]),
        sog=float(obj["sog"]),
        cog=float(obj["cog"]),
        vessel_type=obj.get("vessel_type"),
    )
