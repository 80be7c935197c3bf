"""Synthetic AIS trajectory generation for five behavioral regimes.

Each regime has a measurable kinematic contract (speed band, course dynamics,
position scatter) so generated tracks are separable enough to train toy
models against, and loose enough that course dynamics matter: drifting buoys
and slow fishing vessels overlap in speed on purpose.

Positions advance along the local tangent plane, which is accurate for the
short (tens of meters to a few hundred meters) steps generated here.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .features import EARTH_RADIUS_M
from .ingest import AisMessage
from .taxonomy import ACTIVITY_CLASSES, ENTITY_CLASSES
from .trackstore import TrackWindow

KN_TO_MPS = 0.514444
_M_PER_DEG = EARTH_RADIUS_M * math.pi / 180.0


class InvalidSpec(ValueError):
    """Raised when a regime spec violates its invariants."""


class Regime(enum.Enum):
    TRANSITING = "transiting"
    FISHING = "fishing"
    ANCHORED = "anchored"
    MOORED = "moored"
    BUOY_DRIFT = "buoy_drift"


REGIME_ACTIVITY: dict[Regime, str] = {
    Regime.TRANSITING: "transiting",
    Regime.FISHING: "fishing",
    Regime.ANCHORED: "anchored",
    Regime.MOORED: "moored",
    Regime.BUOY_DRIFT: "other",
}

REGIME_ENTITY: dict[Regime, str] = {
    Regime.TRANSITING: "vessel",
    Regime.FISHING: "vessel",
    Regime.ANCHORED: "vessel",
    Regime.MOORED: "vessel",
    Regime.BUOY_DRIFT: "buoy",
}

# (speed band kn, course-change rate deg/step, scatter radius m)
_REGIME_DEFAULTS: dict[Regime, tuple[tuple[float, float], float, float | None]] = {
    Regime.TRANSITING: ((8.0, 16.0), 2.0, None),
    Regime.FISHING: ((1.0, 5.0), 90.0, None),
    Regime.ANCHORED: ((0.0, 0.5), 0.0, 150.0),
    Regime.MOORED: ((0.0, 0.2), 0.0, 25.0),
    Regime.BUOY_DRIFT: ((0.0, 1.5), 10.0, None),
}

FISHING_MIN_TURN_DEG = 30.0


@dataclass(frozen=True, slots=True)
class RegimeSpec:
    regime: Regime
    duration_s: int = 7200
    cadence_mean_s: float = 60.0
    cadence_jitter_s: float = 5.0
    speed_band_kn: tuple[float, float] = (0.0, 0.0)
    course_rate_deg: float = 0.0
    scatter_radius_m: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise InvalidSpec("duration_s must be positive")
        if self.cadence_mean_s <= 0:
            raise InvalidSpec("cadence_mean_s must be positive")
        if not 0 <= self.cadence_jitter_s < self.cadence_mean_s:
            raise InvalidSpec("cadence jitter must be in [0, cadence mean)")
        lo, hi = self.speed_band_kn
        if not (0.0 <= lo <= hi <= 40.0):
            raise InvalidSpec(f"speed band {self.speed_band_kn} outside [0, 40]")
        if self.scatter_radius_m is not None and self.scatter_radius_m <= 0:
            raise InvalidSpec("scatter_radius_m must be positive")

    @classmethod
    def default(cls, regime: Regime, seed: int = 0, **overrides) -> "RegimeSpec":
        band, rate, scatter = _REGIME_DEFAULTS[regime]
        spec = cls(regime=regime, speed_band_kn=band, course_rate_deg=rate,
                   scatter_radius_m=scatter, seed=seed)
        return replace(spec, **overrides) if overrides else spec


@dataclass(frozen=True, slots=True)
class SynthTrack:
    window: TrackWindow
    activity: str
    entity: str
    regime: Regime

    def __post_init__(self):
        assert self.activity in ACTIVITY_CLASSES
        assert self.entity in ENTITY_CLASSES


def _step_position(lat: float, lon: float, cog_deg: float,
                   dist_m: float) -> tuple[float, float]:
    rad = math.radians(cog_deg)
    dlat = dist_m * math.cos(rad) / _M_PER_DEG
    dlon = dist_m * math.sin(rad) / (_M_PER_DEG * math.cos(math.radians(lat)))
    return lat + dlat, _wrap_lon(lon + dlon)


def _wrap_lon(lon: float) -> float:
    if lon > 180.0:
        return lon - 360.0
    if lon < -180.0:
        return lon + 360.0
    return lon


def _timestamps(spec: RegimeSpec, start_t: int,
                rng: np.random.Generator) -> list[int]:
    n = max(2, int(round(spec.duration_s / spec.cadence_mean_s)))
    out = [int(start_t)]
    for _ in range(n - 1):
        dt = spec.cadence_mean_s + rng.uniform(-spec.cadence_jitter_s,
                                               spec.cadence_jitter_s)
        out.append(out[-1] + max(1, int(round(dt))))
    return out


def _course_track(spec: RegimeSpec, origin, start_t: int, entity_id: str,
                  rng: np.random.Generator) -> list[AisMessage]:
    """Way-making regimes: transiting (gentle wander) and fishing (zigzag)."""
    ts = _timestamps(spec, start_t, rng)
    lat, lon = origin
    cog = rng.uniform(0.0, 360.0)
    lo, hi = spec.speed_band_kn
    fishing = spec.regime is Regime.FISHING
    steps_to_turn = int(rng.integers(3, 9)) if fishing else -1
    msgs = []
    for i, t in enumerate(ts):
        sog = rng.uniform(lo, hi)
        msgs.append(AisMessage(entity_id=entity_id, timestamp=t, lat=lat,
                               lon=lon, sog=sog, cog=cog % 360.0))
        if i + 1 < len(ts):
            dt = ts[i + 1] - t
            lat, lon = _step_position(lat, lon, cog, sog * KN_TO_MPS * dt)
            if not -85.0 < lat < 85.0:
                lat = max(min(lat, 85.0), -85.0)
                cog = 180.0 - cog  # turn back from the polar cap
            if fishing:
                steps_to_turn -= 1
                if steps_to_turn <= 0:
                    turn = rng.uniform(FISHING_MIN_TURN_DEG,
                                       max(spec.course_rate_deg,
                                           FISHING_MIN_TURN_DEG))
                    cog += turn if rng.random() < 0.5 else -turn
                    steps_to_turn = int(rng.integers(3, 9))
            else:
                cog += rng.uniform(-spec.course_rate_deg, spec.course_rate_deg)
    return msgs


def _scatter_track(spec: RegimeSpec, origin, start_t: int, entity_id: str,
                   rng: np.random.Generator) -> list[AisMessage]:
    """Stationary regimes: bounded random walk inside the scatter radius."""
    ts = _timestamps(spec, start_t, rng)
    anchor_lat, anchor_lon = origin
    radius = spec.scatter_radius_m
    max_sog = spec.speed_band_kn[1]
    north = east = 0.0  # meters from the anchor
    msgs = []
    for i, t in enumerate(ts):
        lat = anchor_lat + north / _M_PER_DEG
        lon = anchor_lon + east / (_M_PER_DEG * math.cos(math.radians(anchor_lat)))
        dt = (ts[i + 1] - t) if i + 1 < len(ts) else spec.cadence_mean_s
        heading = rng.uniform(0.0, 360.0)
        step = rng.uniform(0.0, 0.9 * max_sog * KN_TO_MPS * dt)
        rad = math.radians(heading)
        cand_n = north + step * math.cos(rad)
        cand_e = east + step * math.sin(rad)
        if math.hypot(cand_n, cand_e) > 0.95 * radius:
            # reject the step so reported SOG always matches displacement
            cand_n, cand_e = north, east
            step = 0.0
        sog = step / (KN_TO_MPS * dt)
        msgs.append(AisMessage(entity_id=entity_id, timestamp=t, lat=lat,
                               lon=lon, sog=sog, cog=heading % 360.0))
        north, east = cand_n, cand_e
    return msgs


def _drift_track(spec: RegimeSpec, origin, start_t: int, entity_id: str,
                 rng: np.random.Generator) -> list[AisMessage]:
    """Buoy drift: a smooth (AR(1)-velocity) random walk, capped in speed."""
    ts = _timestamps(spec, start_t, rng)
    lat, lon = origin
    vmax = spec.speed_band_kn[1] * KN_TO_MPS
    vn = rng.normal(0.0, 0.2 * vmax)
    ve = rng.normal(0.0, 0.2 * vmax)
    msgs = []
    for i, t in enumerate(ts):
        speed = math.hypot(vn, ve)
        if speed > 0.95 * vmax:
            vn *= 0.95 * vmax / speed
            ve *= 0.95 * vmax / speed
            speed = math.hypot(vn, ve)
        cog = math.degrees(math.atan2(ve, vn)) % 360.0
        msgs.append(AisMessage(entity_id=entity_id, timestamp=t, lat=lat,
                               lon=lon, sog=speed / KN_TO_MPS, cog=cog))
        if i + 1 < len(ts):
            dt = ts[i + 1] - t
            lat += vn * dt / _M_PER_DEG
            lon = _wrap_lon(lon + ve * dt / (_M_PER_DEG * math.cos(math.radians(lat))))
            if not -85.0 < lat < 85.0:
                lat = max(min(lat, 85.0), -85.0)
                vn = -vn
            vn = 0.9 * vn + rng.normal(0.0, 0.1 * vmax)
            ve = 0.9 * ve + rng.normal(0.0, 0.1 * vmax)
    return msgs


def generate_track(spec: RegimeSpec,
                   origin: tuple[float, float] = (45.0, -30.0),
                   start_t: int = 1_700_000_000,
                   entity_id: str | None = None) -> SynthTrack:
    """Generate one labeled track; deterministic for a fixed spec."""
    rng = np.random.default_rng(spec.seed)
    if entity_id is None:
        entity_id = f"synth-{spec.regime.value}-{spec.seed}"
    lat0, lon0 = origin
    if not (-85.0 <= lat0 <= 85.0 and -180.0 <= lon0 <= 180.0):
        raise InvalidSpec(f"origin {origin} too close to the poles or invalid")

    if spec.regime in (Regime.TRANSITING, Regime.FISHING):
        msgs = _course_track(spec, origin, start_t, entity_id, rng)
    elif spec.regime in (Regime.ANCHORED, Regime.MOORED):
        msgs = _scatter_track(spec, origin, start_t, entity_id, rng)
    else:
        msgs = _drift_track(spec, origin, start_t, entity_id, rng)

    window = TrackWindow(entity_id=entity_id, messages=tuple(msgs),
                         assembled_at=msgs[-1].timestamp)
    return SynthTrack(window=window, activity=REGIME_ACTIVITY[spec.regime],
                      entity=REGIME_ENTITY[spec.regime], regime=spec.regime)


def generate_dataset(n_per_class: int, seed: int = 0,
                     duration_s: int = 7200,
                     cadence_mean_s: float = 60.0) -> list[SynthTrack]:
    """n_per_class tracks for each of the five activity regimes, plus
    n_per_class extra buoy tracks for entity training."""
    if n_per_class < 1:
        raise InvalidSpec("n_per_class must be at least 1")
    master = np.random.default_rng(seed)
    plan = [r for r in Regime for _ in range(n_per_class)]
    plan += [Regime.BUOY_DRIFT] * n_per_class

    tracks = []
    for i, regime in enumerate(plan):
        track_seed = int(master.integers(0, 2 ** 63 - 1))
        origin = (float(master.uniform(-55.0, 55.0)),
                  float(master.uniform(-160.0, 160.0)))
        start_t = 1_700_000_000 + int(master.integers(0, 86_400))
        spec = RegimeSpec.default(regime, seed=track_seed,
                                  duration_s=duration_s,
                                  cadence_mean_s=cadence_mean_s)
        tracks.append(generate_track(spec, origin=origin, start_t=start_t,
                                     entity_id=f"synth-{i:05d}"))
    return tracks


def activity_examples(tracks: list[SynthTrack]):
    """Labeled windows for activity training (import-light: returns the
    training module's LabeledWindow)."""
    from .training import LabeledWindow
    return [LabeledWindow(window=t.window, label=t.activity) for t in tracks]


def entity_examples(tracks: list[SynthTrack]):
    from .training import LabeledWindow
    return [LabeledWindow(window=t.window, label=t.entity) for t in tracks]


def tracks_to_stream(tracks: list[SynthTrack]) -> list[AisMessage]:
    """Interleave all messages in global timestamp order for stream replay."""
    msgs = [m for t in tracks for m in t.window.messages]
    msgs.sort(key=lambda m: m.timestamp)
    return msgs
