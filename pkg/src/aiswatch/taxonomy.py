"""Class taxonomies shared across the engine.

Activity classes label what a vessel is doing at its most recent position
report; entity classes say what kind of transmitter produced the track.
"""

from enum import Enum

ACTIVITY_CLASSES: tuple[str, ...] = (
    "transiting",
    "anchored",
    "fishing",
    "moored",
    "other",
)

ENTITY_CLASSES: tuple[str, ...] = ("vessel", "buoy")

# Label emitted when no confident decision can be made. Never a model output
# class; it enters only through post-processing or missing entity context.
UNKNOWN_LABEL = "unknown"


class EntityClass(Enum):
    VESSEL = "vessel"
    BUOY = "buoy"
    UNKNOWN = "unknown"

    @classmethod
    def from_label(cls, label: str) -> "EntityClass":
        return cls(label.lower())


def activity_index(label: str) -> int:
    return ACTIVITY_CLASSES.index(label)


def entity_index(label: str) -> int:
    return ENTITY_CLASSES.index(label)
