"""Label persistence, split assignment, and training-data serialization.

Labels live in an append-only JSONL store where the last record for a
tile wins, so relabeling is an append rather than a rewrite. Splits are
seeded shuffles truncated to a per-region tile budget, and training
examples serialize to the chat-format JSONL that fine-tuning endpoints
accept, with tile imagery embedded as base64 data-URLs.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import (InsufficientTiles, IoError, MissingLabel, MissingTile,
                     ParseError)
from .geo_ingest import RegionRole, RegionSpec
from .schema import (LocationClass, QuantityBin, TileLabel, label_from_record,
                     label_to_record, validate_label)
from . import prompting


class LabelStore:
    """Append-only JSONL label log; last record per tile wins."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, label: TileLabel) -> None:
        validate_label(label)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(label_to_record(label), sort_keys=True,
                                separators=(",", ":")) + "\n")

    def load(self) -> dict[str, TileLabel]:
        """Replay the log; later lines override earlier ones per tile."""
        labels: dict[str, TileLabel] = {}
        if not self.path.is_file():
            return labels
        for label in import_annotations(self.path):
            labels[label.tile_id] = label
        return labels

    def count(self) -> int:
        return len(self.load())


def import_annotations(path: Path) -> list[TileLabel]:
    """Read a JSONL annotation file, validating every record.

    Unlike LabelStore.load this keeps every record, in file order;
    errors carry the 1-based line number.
    """
    labels: list[TileLabel] = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"label line {lineno} is not JSON: {exc}",
                                 line=lineno) from exc
            labels.append(label_from_record(record, line=lineno))
    return labels


@dataclass(frozen=True)
class DatasetSplit:
    """A named, ordered tile-id subset drawn from one region."""

    name: str
    role: RegionRole
    tile_ids: tuple[str, ...]
    region_name: str


def assign_split(tiles: Sequence[str], region: RegionSpec, seed: int,
                 cap: int) -> DatasetSplit:
    """Seeded shuffle of a region's tile ids, truncated to cap.

    Pure in its inputs: the same tiles, region, seed, and cap always
    produce the same split, independent of input order.
    """
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    unique = sorted(set(tiles))
    if len(unique) != len(tiles):
        raise ValueError("tile ids must be unique")
    if cap > len(unique):
        raise InsufficientTiles(
            f"region {region.name}: need {cap} tiles, have {len(unique)}")
    rng = random.Random(seed)
    rng.shuffle(unique)
    return DatasetSplit(name=f"{region.name}-{region.role.value}",
                        role=region.role, tile_ids=tuple(unique[:cap]),
                        region_name=region.name)


def split_train_val(items: Sequence, val_fraction: float,
                    seed: int = 0) -> tuple[list, list]:
    """Deterministic shuffled split; val gets floor(n * val_fraction)."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    order = list(items)
    random.Random(seed).shuffle(order)
    n_val = int(len(order) * val_fraction)
    return order[n_val:], order[:n_val]


@dataclass(frozen=True)
class TrainingTarget:
    """Assistant-side target recovered from one training JSONL line."""

    tile_id: str
    present: bool
    location: LocationClass
    quantity: QuantityBin
    likelihood: float
    confidence: float


def export_training_jsonl(split: DatasetSplit,
                          labels: Mapping[str, TileLabel],
                          png_lookup: Callable[[str], bytes],
                          template: prompting.PromptTemplate = prompting.DEFAULT_TEMPLATE,
                          path: Path = None) -> int:
    """Write chat-format training lines, one per split tile, in split order.

    png_lookup maps tile_id to that tile's PNG bytes. Every split tile
    must have a validated label and an image; the record count written
    equals the split size.
    """
    path = Path(path)
    lines = []
    for tile_id in split.tile_ids:
        label = labels.get(tile_id)
        if label is None:
            raise MissingLabel(f"split {split.name}: no label for {tile_id}")
        try:
            png = png_lookup(tile_id)
        except KeyError as exc:
            raise MissingTile(f"no tile image for {tile_id}") from exc
        messages = prompting.build_training_messages(label, png, template)
        lines.append(json.dumps({"messages": messages}, sort_keys=True,
                                separators=(",", ":")))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + ("\n" if lines else ""),
                        encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return len(lines)


def import_training_jsonl(path: Path) -> list[TrainingTarget]:
    """Recover per-tile targets from a training JSONL file.

    Inverse of export_training_jsonl over the label fields: tile id comes
    from the embedded user text, target fields from the assistant turn.
    """
    targets: list[TrainingTarget] = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"training line {lineno} is not JSON: {exc}",
                                 line=lineno) from exc
            messages = record.get("messages")
            if not isinstance(messages, list):
                raise ParseError(f"training line {lineno} has no messages list",
                                 line=lineno)
            tile_id = None
            assistant_content = None
            for message in messages:
                role = message.get("role")
                if role == "user" and tile_id is None:
                    tile_id = prompting.extract_tile_id(message.get("content"))
                elif role == "assistant":
                    assistant_content = message.get("content")
            if tile_id is None:
                raise ParseError(f"training line {lineno} has no tile id",
                                 line=lineno)
            if not isinstance(assistant_content, str):
                raise ParseError(f"training line {lineno} has no assistant turn",
                                 line=lineno)
            present, location, quantity, likelihood, confidence = \
                prompting.parse_target_fields(assistant_content, line=lineno)
            targets.append(TrainingTarget(tile_id, present, location, quantity,
                                          likelihood, confidence))
    return targets


def labels_to_targets(labels: Iterable[TileLabel]) -> list[TrainingTarget]:
    """What import_training_jsonl should yield for these labels."""
    out = []
    for label in sorted(labels, key=lambda l: l.tile_id):
        fields = prompting.target_fields(label)
        out.append(TrainingTarget(
            tile_id=label.tile_id,
            present=fields[prompting.PRESENCE_FIELD],
            location=LocationClass(fields[prompting.LOCATION_FIELD]),
            quantity=QuantityBin(fields[prompting.QUANTITY_FIELD]),
            likelihood=fields[prompting.LIKELIHOOD_FIELD],
            confidence=fields[prompting.CONFIDENCE_FIELD],
        ))
    return out
