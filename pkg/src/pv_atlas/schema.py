"""The three-task label schema: presence, spatial location, quantity bin.

Wire strings are the closed vocabularies embedded in the system prompt;
they must match byte-for-byte everywhere (prompt text, training targets,
parsed predictions, annotation files), so this module is the single owner.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from datetime import datetime
from enum import Enum

from .errors import InconsistentLabel, ParseError
from .timeutil import isoformat_utc, parse_utc


class LocationClass(str, Enum):
    """Nine spatial cells of the 3x3 grid, plus NA for no-panel tiles."""

    LEFT = "left"
    RIGHT = "right"
    BOTTOM = "bottom"
    TOP = "top"
    TOP_LEFT = "top-left"
    TOP_RIGHT = "top-right"
    BOTTOM_RIGHT = "bottom-right"
    BOTTOM_LEFT = "bottom-left"
    CENTER = "center"
    NA = "NA"


class QuantityBin(str, Enum):
    """Panel-count bins over the intervals (0,1], (1,5], (5,10], (10,inf)."""

    ZERO_TO_ONE = "0 to 1"
    ONE_TO_FIVE = "1 to 5"
    FIVE_TO_TEN = "5 to 10"
    TEN_PLUS = "10 to inf"
    NA = "NA"


LOCATION_VALUES: tuple[str, ...] = tuple(loc.value for loc in LocationClass)
QUANTITY_VALUES: tuple[str, ...] = tuple(qb.value for qb in QuantityBin)

# Row-major 3x3 cell names; row 0 is the top of the image.
LOCATION_GRID: tuple[tuple[LocationClass, ...], ...] = (
    (LocationClass.TOP_LEFT, LocationClass.TOP, LocationClass.TOP_RIGHT),
    (LocationClass.LEFT, LocationClass.CENTER, LocationClass.RIGHT),
    (LocationClass.BOTTOM_LEFT, LocationClass.BOTTOM, LocationClass.BOTTOM_RIGHT),
)


def quantity_bin_for_count(count: float) -> QuantityBin:
    """Map an estimated panel count onto its half-open interval bin."""
    if count <= 0:
        return QuantityBin.NA
    if count <= 1:
        return QuantityBin.ZERO_TO_ONE
    if count <= 5:
        return QuantityBin.ONE_TO_FIVE
    if count <= 10:
        return QuantityBin.FIVE_TO_TEN
    return QuantityBin.TEN_PLUS


@dataclass(frozen=True)
class TileLabel:
    """Human ground truth for one tile."""

    tile_id: str
    present: bool
    location: LocationClass
    quantity: QuantityBin
    annotator_id: str
    labeled_at: datetime


def validate_label(label: TileLabel) -> TileLabel:
    """Enforce the presence/NA coupling; returns the label unchanged.

    present=False forces location=NA and quantity=NA; present=True
    forbids NA in either field.
    """
    loc_na = label.location is LocationClass.NA
    qty_na = label.quantity is QuantityBin.NA
    if label.present and (loc_na or qty_na):
        raise InconsistentLabel(
            f"{label.tile_id}: present=true requires non-NA location and quantity "
            f"(got location={label.location.value!r}, quantity={label.quantity.value!r})")
    if not label.present and not (loc_na and qty_na):
        raise InconsistentLabel(
            f"{label.tile_id}: present=false requires location=NA and quantity=NA "
            f"(got location={label.location.value!r}, quantity={label.quantity.value!r})")
    return label


def label_to_record(label: TileLabel) -> dict:
    """Wire form used by annotation files and the label store."""
    return {
        "tile_id": label.tile_id,
        "present": label.present,
        "location": label.location.value,
        "quantity": label.quantity.value,
        "annotator_id": label.annotator_id,
        "labeled_at": isoformat_utc(label.labeled_at),
    }


def label_from_record(record: dict, line: int | None = None) -> TileLabel:
    """Parse one annotation record; vocabulary violations raise ParseError."""
    try:
        tile_id = record["tile_id"]
        present = record["present"]
        location = record["location"]
        quantity = record["quantity"]
        annotator = record.get("annotator_id", "")
        labeled_at = record["labeled_at"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"annotation record missing field: {exc}", line=line) from exc
    if not isinstance(present, bool):
        raise ParseError(f"present must be a boolean, got {present!r}", line=line)
    if location not in LOCATION_VALUES:
        raise ParseError(f"unknown location value: {location!r}", line=line)
    if quantity not in QUANTITY_VALUES:
        raise ParseError(f"unknown quantity value: {quantity!r}", line=line)
    try:
        at = parse_utc(labeled_at)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad labeled_at timestamp: {labeled_at!r}", line=line) from exc
    label = TileLabel(
        tile_id=str(tile_id),
        present=present,
        location=LocationClass(location),
        quantity=QuantityBin(quantity),
        annotator_id=str(annotator),
        labeled_at=at,
    )
    try:
        return validate_label(label)
    except InconsistentLabel as exc:
        raise InconsistentLabel(str(exc), line=line) from None


def relabel(label: TileLabel, **changes) -> TileLabel:
    return replace(label, **changes)
