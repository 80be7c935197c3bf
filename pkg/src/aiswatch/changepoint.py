"""Change-point detection on a track window from time and speed statistics.

The last element of the window is the most recent observation. Two signals
are checked, in a fixed precedence order:

  1. TimeGap:  the gap between the two newest messages exceeds a threshold,
               so whatever the model last said is stale regardless of speed.
  2. SogShift: the mean speed over ground of the newest k messages moved
               away from the mean of the k messages before them.

Every decision carries a human-readable explanation of why it fired (or
did not).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .trackstore import EmptyWindow, TrackWindow

__all__ = ["ChangePointReason", "ChangePointDecision", "CpdConfig",
           "EmptyWindow", "detect_changepoint"]


class ChangePointReason(Enum):
    TIME_GAP = "time_gap"
    SOG_SHIFT = "sog_shift"
    NONE = "none"


@dataclass(frozen=True, slots=True)
class CpdConfig:
    """Thresholds for the detector.

    Defaults: a 6 h gap comfortably exceeds typical satellite revisit gaps,
    and a 1 kn shift separates drift from way-making. ``min_messages`` gates
    the speed check only; a long time gap always fires.
    """

    time_gap_threshold_s: int = 21_600
    sog_window_k: int = 5
    sog_shift_threshold_kn: float = 1.0
    min_messages: int | None = None  # defaults to 2 * sog_window_k

    def __post_init__(self):
        if self.time_gap_threshold_s <= 0:
            raise ValueError("time_gap_threshold_s must be positive")
        if self.sog_window_k < 1:
            raise ValueError("sog_window_k must be >= 1")
        if self.sog_shift_threshold_kn <= 0:
            raise ValueError("sog_shift_threshold_kn must be positive")
        if self.min_messages is None:
            object.__setattr__(self, "min_messages", 2 * self.sog_window_k)
        elif self.min_messages <= 0:
            raise ValueError("min_messages must be positive")


@dataclass(frozen=True, slots=True)
class ChangePointDecision:
    is_changepoint: bool
    reason: ChangePointReason
    detail: str = field(default="")

    def __post_init__(self):
        if self.is_changepoint != (self.reason is not ChangePointReason.NONE):
            raise ValueError("is_changepoint must match reason")
        if self.is_changepoint and not self.detail:
            raise ValueError("changepoint decisions need a non-empty detail")


def detect_changepoint(window: TrackWindow, cfg: CpdConfig) -> ChangePointDecision:
    """Decide whether the newest message marks a behavioral change.

    Deterministic: identical (window, cfg) pairs yield identical decisions.
    The time check takes precedence over the speed check. The speed check
    needs both cfg.min_messages and two full k-message blocks of history;
    shorter windows can only fire on a time gap.
    """
    msgs = window.messages
    if not msgs:
        raise EmptyWindow(window.entity_id)

    if len(msgs) >= 2:
        gap = msgs[-1].timestamp - msgs[-2].timestamp
        if gap > cfg.time_gap_threshold_s:
            return ChangePointDecision(
                True, ChangePointReason.TIME_GAP,
                f"gap of {gap} s between the two newest messages exceeds "
                f"threshold {cfg.time_gap_threshold_s} s",
            )

    k = cfg.sog_window_k
    if len(msgs) >= max(cfg.min_messages, 2 * k):
        recent = sum(m.sog for m in msgs[-k:]) / k
        prior = sum(m.sog for m in msgs[-2 * k:-k]) / k
        shift = abs(recent - prior)
        if shift > cfg.sog_shift_threshold_kn:
            return ChangePointDecision(
                True, ChangePointReason.SOG_SHIFT,
                f"mean SOG of newest {k} messages ({recent:.2f} kn) differs "
                f"from the prior {k} ({prior:.2f} kn) by {shift:.2f} kn, over "
                f"threshold {cfg.sog_shift_threshold_kn:.2f} kn",
            )

    return ChangePointDecision(False, ChangePointReason.NONE,
                               "no qualifying time gap or speed shift")
