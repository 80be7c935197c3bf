"""Rule-based cleanup applied to raw model probabilities.

Rules run in a fixed order: entity gate, speed filter, geofence overrides,
confidence threshold. A rule is recorded in the event's applied_rules when it
changes the outgoing label, so an empty rule list means the final label is
the plain argmax of the model output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .ingest import AisMessage
from .taxonomy import EntityClass, UNKNOWN_LABEL

RULE_ENTITY_GATE = "entity_gate"
RULE_SPEED_FILTER = "speed_filter"
RULE_GEOFENCE = "geofence"
RULE_CONFIDENCE = "confidence"

FISHING = "fishing"


class DegenerateRing(ValueError):
    """Raised for polygons with fewer than three distinct vertices."""


class FenceFormatError(ValueError):
    """Raised when a fence file is structurally invalid."""


def point_on_segment(px: float, py: float,
                     ax: float, ay: float,
                     bx: float, by: float,
                     eps: float = 1e-12) -> bool:
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if abs(cross) > eps:
        return False
    dot = (px - ax) * (bx - ax) + (py - ay) * (by - ay)
    if dot < -eps:
        return False
    return dot <= (bx - ax) ** 2 + (by - ay) ** 2 + eps


def point_in_polygon(lat: float, lon: float, vertices: np.ndarray) -> bool:
    """Even-odd ray casting with points on an edge counting as inside.

    vertices is an (n, 2) array of (lon, lat) pairs; an explicitly closed
    ring (first vertex repeated at the end) is tolerated and normalized.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2:
        raise DegenerateRing("vertices must be an (n, 2) array of lon/lat")
    if len(verts) >= 2 and np.array_equal(verts[0], verts[-1]):
        verts = verts[:-1]
    if len(verts) < 3:
        raise DegenerateRing("polygon needs at least three distinct vertices")

    px, py = lon, lat
    inside = False
    n = len(verts)
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        if point_on_segment(px, py, ax, ay, bx, by):
            return True
        if (ay > py) != (by > py):
            x_cross = ax + (bx - ax) * (py - ay) / (by - ay)
            if px < x_cross:
                inside = not inside
    return inside


@dataclass(frozen=True, slots=True)
class GeoFence:
    name: str
    vertices: np.ndarray  # (n, 2) lon/lat exterior ring, implicit closure
    suppresses: str
    replacement: str

    def contains(self, lat: float, lon: float) -> bool:
        return point_in_polygon(lat, lon, self.vertices)


@dataclass(frozen=True, slots=True)
class GeoFenceSet:
    fences: tuple[GeoFence, ...] = ()

    def __len__(self) -> int:
        return len(self.fences)

    def __iter__(self):
        return iter(self.fences)

    @classmethod
    def from_file(cls, path: str | Path) -> "GeoFenceSet":
        """Load fences from a feature-collection JSON file.

        Each feature needs a Polygon geometry and properties with name,
        suppresses, and replacement; only the exterior ring is used.
        """
        with Path(path).open(encoding="utf-8") as fh:
            doc = json.load(fh)
        feats = doc.get("features")
        if not isinstance(feats, list):
            raise FenceFormatError("fence file has no features list")
        fences = []
        for i, feat in enumerate(feats):
            try:
                props = feat["properties"]
                geom = feat["geometry"]
                if geom["type"] != "Polygon":
                    raise FenceFormatError(
                        f"feature {i}: geometry must be Polygon, got {geom['type']}")
                ring = np.asarray(geom["coordinates"][0], dtype=np.float64)
                fences.append(GeoFence(
                    name=str(props.get("name", f"fence_{i}")),
                    vertices=ring,
                    suppresses=str(props["suppresses"]),
                    replacement=str(props["replacement"]),
                ))
            except (KeyError, IndexError, TypeError) as exc:
                raise FenceFormatError(f"feature {i}: {exc}") from exc
        return cls(fences=tuple(fences))


@dataclass(frozen=True, slots=True)
class PostProcessConfig:
    confidence_threshold: float = 0.5
    fishing_max_sog_kn: float = 10.0
    fences: GeoFenceSet = GeoFenceSet()

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must be in (0, 1]")
        if not self.fishing_max_sog_kn > 0.0:
            raise ValueError("fishing_max_sog_kn must be positive")

    @classmethod
    def identity(cls) -> "PostProcessConfig":
        """Threshold effectively zero, speed limit infinite, no fences: the
        final label equals the raw argmax for any vessel."""
        return cls(confidence_threshold=1e-12, fishing_max_sog_kn=math.inf)

    def with_fences(self, fences: GeoFenceSet) -> "PostProcessConfig":
        return replace(self, fences=fences)


@dataclass(frozen=True, slots=True)
class ClassificationEvent:
    entity_id: str
    timestamp: int
    probs: dict[str, float]  # raw model output, before any rule
    raw_label: str
    label: str
    applied_rules: tuple[str, ...]
    entity_class: str
    trigger_reason: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "entity_id": self.entity_id,
            "timestamp": self.timestamp,
            "label": self.label,
            "raw_label": self.raw_label,
            "probs": self.probs,
            "applied_rules": list(self.applied_rules),
            "entity_class": self.entity_class,
            "trigger_reason": self.trigger_reason,
        })


def _redistribute_fishing(probs: np.ndarray, fi: int) -> np.ndarray:
    """Zero the fishing probability and scale the rest back to sum 1."""
    out = probs.copy()
    p_f = out[fi]
    out[fi] = 0.0
    rest = out.sum()
    if rest > 0.0:
        out /= rest
    else:
        out[:] = 1.0 / (len(out) - 1)
        out[fi] = 0.0
    return out


def apply_postprocess(
    probs: np.ndarray,
    class_names: tuple[str, ...],
    msg: AisMessage,
    entity: EntityClass,
    cfg: PostProcessConfig,
    trigger_reason: str = "",
) -> ClassificationEvent:
    """Run the rule chain over one probability vector and build the event.

    Order: entity gate (no fishing unless the entity is a confirmed vessel;
    the fishing mass is redistributed proportionally), speed filter (a
    fishing argmax above fishing_max_sog_kn demotes to the runner-up class),
    geofence overrides (a suppressed label inside a fence becomes that
    fence's replacement), then the confidence threshold (a final-label
    probability below the threshold becomes "unknown").
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (len(class_names),):
        raise ValueError(f"probs shape {probs.shape} does not match "
                         f"{len(class_names)} classes")
    applied: list[str] = []
    raw_label = class_names[int(np.argmax(probs))]
    label = raw_label
    adjusted = probs

    fi = class_names.index(FISHING) if FISHING in class_names else -1

    if fi >= 0 and entity is not EntityClass.VESSEL and probs[fi] > 0.0:
        adjusted = _redistribute_fishing(probs, fi)
        new_label = class_names[int(np.argmax(adjusted))]
        if new_label != label:
            applied.append(RULE_ENTITY_GATE)
            label = new_label

    if fi >= 0 and label == FISHING and msg.sog > cfg.fishing_max_sog_kn:
        order = np.argsort(adjusted)[::-1]
        runner_up = next(int(i) for i in order if i != fi)
        label = class_names[runner_up]
        applied.append(RULE_SPEED_FILTER)

    for fence in cfg.fences:
        if label == fence.suppresses and fence.contains(msg.lat, msg.lon):
            label = fence.replacement
            applied.append(f"{RULE_GEOFENCE}:{fence.name}")

    final_prob = adjusted[class_names.index(label)] if label in class_names else 0.0
    if final_prob < cfg.confidence_threshold:
        label = UNKNOWN_LABEL
        applied.append(RULE_CONFIDENCE)

    if label == raw_label:
        # a rule chain that lands back on the raw argmax is a no-op
        applied = []

    return ClassificationEvent(
        entity_id=msg.entity_id,
        timestamp=msg.timestamp,
        probs={name: float(p) for name, p in zip(class_names, probs)},
        raw_label=raw_label,
        label=label,
        applied_rules=tuple(applied),
        entity_class=entity.value,
        trigger_reason=trigger_reason,
    )
