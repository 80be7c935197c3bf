"""Turn a track window into the numeric sequence the model consumes.

No interpolation is performed on irregular gaps: each position carries its
own kinematics (speed, course encoding, time of day) plus spatiotemporal
differences against the preceding ``n_anchor`` messages. Offsets that would
reach before the window start clamp to the first message, so short prefixes
and single-message windows stay in trained value ranges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .trackstore import EmptyWindow, TrackWindow

EARTH_RADIUS_M = 6_371_000.0
SECONDS_PER_DAY = 86_400
SECONDS_PER_DEGREE_LON = 240.0  # 4 minutes of solar time per degree


@dataclass(frozen=True, slots=True)
class FeatureConfig:
    """Scales are fixed constants, not corpus statistics, so streaming
    inference needs no fitted normalizer."""

    n_anchor: int = 9
    distance_scale_m: float = 1_000.0
    time_scale_s: float = 3_600.0
    sog_scale_kn: float = 25.0

    def __post_init__(self):
        if self.n_anchor < 1:
            raise ValueError("n_anchor must be >= 1")
        for name in ("distance_scale_m", "time_scale_s", "sog_scale_kn"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def feature_width(self) -> int:
        return 4 + 3 * self.n_anchor

    def layout(self) -> tuple[str, ...]:
        names = ["sog", "cog_sin", "cog_cos", "time_of_day"]
        for j in range(1, self.n_anchor + 1):
            names += [f"dt_{j}", f"dist_{j}", f"dcog_{j}"]
        return tuple(names)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_anchor": self.n_anchor,
            "distance_scale_m": self.distance_scale_m,
            "time_scale_s": self.time_scale_s,
            "sog_scale_kn": self.sog_scale_kn,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FeatureConfig":
        return cls(**data)


@dataclass(frozen=True, slots=True)
class FeatureSequence:
    """L x F dense feature rows plus the ordered column names."""

    rows: np.ndarray
    layout: tuple[str, ...]

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters on a sphere of radius 6371 km."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return float(2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0))))


def _haversine_vec(lat1, lon1, lat2, lon2):
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(lon2 - lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def encode_course(cog_deg: float) -> tuple[float, float]:
    """Embed a course angle as a unit-norm (sin, cos) pair.

    Removes the 0/360 wraparound: 359.9 and 0.1 degrees land next to each
    other in embedding space.
    """
    theta = np.radians(cog_deg)
    return float(np.sin(theta)), float(np.cos(theta))


def _wrap_deg(delta):
    """Wrap angle differences into [-180, 180)."""
    return np.mod(delta + 180.0, 360.0) - 180.0


def build_features(window: TrackWindow, cfg: FeatureConfig) -> FeatureSequence:
    """Build the L x (4 + 3 * n_anchor) feature matrix for a window.

    Columns per position i: normalized speed, course (sin, cos), approximate
    local solar time-of-day fraction, then for each anchor offset j=1..n the
    normalized time delta, great-circle distance, and signed course change
    against message max(i-j, 0).
    """
    msgs = window.messages
    if not msgs:
        raise EmptyWindow(window.entity_id)

    n = len(msgs)
    t = np.array([m.timestamp for m in msgs], dtype=np.float64)
    lat = np.array([m.lat for m in msgs], dtype=np.float64)
    lon = np.array([m.lon for m in msgs], dtype=np.float64)
    sog = np.array([m.sog for m in msgs], dtype=np.float64)
    cog = np.array([m.cog for m in msgs], dtype=np.float64)

    rows = np.empty((n, cfg.feature_width), dtype=np.float64)
    rows[:, 0] = sog / cfg.sog_scale_kn
    theta = np.radians(cog)
    rows[:, 1] = np.sin(theta)
    rows[:, 2] = np.cos(theta)
    local_t = t + lon * SECONDS_PER_DEGREE_LON
    rows[:, 3] = np.mod(local_t, SECONDS_PER_DAY) / SECONDS_PER_DAY

    idx = np.arange(n)
    col = 4
    for j in range(1, cfg.n_anchor + 1):
        a = np.maximum(idx - j, 0)
        rows[:, col] = (t - t[a]) / cfg.time_scale_s
        rows[:, col + 1] = _haversine_vec(lat, lon, lat[a], lon[a]) / cfg.distance_scale_m
        rows[:, col + 2] = _wrap_deg(cog - cog[a]) / 180.0
        col += 3

    return FeatureSequence(rows=rows, layout=cfg.layout())
