"""Prompt assembly and model-output parsing for the three-task schema.

The system prompt has three sections in a fixed order: task
decomposition, output standardization, few-shot exemplars. Outputs come
back as JSON; parsing is strict first, then an ordered repair pipeline
(fence stripping, balanced-brace extraction, boolean case folding) with
every applied repair recorded on the prediction.
"""

from __future__ import annotations

import base64
import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

from .errors import (InconsistentLabel, MalformedOutput, MissingField,
                     OutOfRange, UnknownEnumValue)
from .schema import (LOCATION_VALUES, QUANTITY_VALUES, LocationClass,
                     QuantityBin, TileLabel, validate_label)

PRESENCE_FIELD = "solar_panels_present"
LOCATION_FIELD = "location"
QUANTITY_FIELD = "quantity"
LIKELIHOOD_FIELD = "likelihood_of_solar_panels_present"
CONFIDENCE_FIELD = "confidence_of_solar_panels_present"

OUTPUT_FIELDS = (PRESENCE_FIELD, LOCATION_FIELD, QUANTITY_FIELD,
                 LIKELIHOOD_FIELD, CONFIDENCE_FIELD)

# Canonical assistant outputs used both as few-shot exemplars and as the
# fixed likelihood/confidence values written into training targets.
SOLAR_EXEMPLAR = {
    PRESENCE_FIELD: True,
    LOCATION_FIELD: "top-left",
    QUANTITY_FIELD: "0 to 1",
    LIKELIHOOD_FIELD: 0.98,
    CONFIDENCE_FIELD: 0.90,
}
NO_SOLAR_EXEMPLAR = {
    PRESENCE_FIELD: False,
    LOCATION_FIELD: "NA",
    QUANTITY_FIELD: "NA",
    LIKELIHOOD_FIELD: 0.21,
    CONFIDENCE_FIELD: 0.87,
}

_TILE_ID_PREFIX = "tile_id="
_TILE_ID_RE = re.compile(r"^tile_id=(\S+)", re.MULTILINE)


def response_json(fields: Mapping) -> str:
    """Render an assistant response with fields in canonical order."""
    ordered = {name: fields[name] for name in OUTPUT_FIELDS}
    return json.dumps(ordered, separators=(", ", ": "))


@dataclass(frozen=True)
class PromptTemplate:
    """Versioned prompt recipe: few-shot exemplars over the fixed schema."""

    few_shot: tuple[tuple[str, Mapping], ...]
    version: str = "v1"

    @property
    def system_text(self) -> str:
        return build_system_prompt(self)


DEFAULT_TEMPLATE = PromptTemplate(few_shot=(
    ("Tile with a small panel array in its upper-left corner:",
     SOLAR_EXEMPLAR),
    ("Tile showing only bare roof and vegetation:",
     NO_SOLAR_EXEMPLAR),
))


def build_system_prompt(template: PromptTemplate = DEFAULT_TEMPLATE) -> str:
    """Deterministic three-section system prompt.

    An empty few_shot list drops the third section but never the first
    two.
    """
    location_list = ", ".join(v for v in LOCATION_VALUES if v != "NA")
    quantity_list = ", ".join(f'"{v}"' for v in QUANTITY_VALUES if v != "NA")
    sections = [
        # 1. task decomposition
        "You are an expert at analyzing satellite imagery of rooftops.\n"
        "You will be shown one satellite image tile. Work through these "
        "steps in order:\n"
        "1. Decide whether any solar panels are visible in the tile.\n"
        "2. If panels are present, decide where in the tile they sit, "
        f"using one of: {location_list}.\n"
        "3. If panels are present, estimate how many panels are visible "
        f"and pick the matching count range from: {quantity_list}.",
        # 2. output standardization
        "Respond with a single JSON object and nothing else, using exactly "
        "these keys:\n"
        f'- "{PRESENCE_FIELD}": true or false\n'
        f'- "{LOCATION_FIELD}": one of the location values above, or "NA" '
        "when no panels are present\n"
        f'- "{QUANTITY_FIELD}": one of the count ranges above, or "NA" '
        "when no panels are present\n"
        f'- "{LIKELIHOOD_FIELD}": your probability between 0 and 1 that '
        "panels are present\n"
        f'- "{CONFIDENCE_FIELD}": your confidence between 0 and 1 in this '
        "answer overall",
    ]
    if template.few_shot:
        shots = ["Examples."]
        for description, fields in template.few_shot:
            shots.append(f"{description}\n{response_json(fields)}")
        sections.append("\n".join(shots))
    return "\n\n".join(sections)


def image_data_uri(png_bytes: bytes) -> str:
    return "data:image/png;base64," + base64.b64encode(png_bytes).decode("ascii")


def build_user_content(tile_id: str, png_bytes: bytes) -> list[dict]:
    """User message parts: tile identity line plus the tile image."""
    text = (f"{_TILE_ID_PREFIX}{tile_id}\n"
            "Assess this satellite image tile for rooftop solar panels.")
    return [
        {"type": "text", "text": text},
        {"type": "image_url", "image_url": {"url": image_data_uri(png_bytes)}},
    ]


def build_user_payload(tile, template: PromptTemplate = DEFAULT_TEMPLATE) -> dict:
    """Full user message for one Tile, its pixels PNG-encoded inline."""
    from .imagery import encode_png

    return {"role": "user",
            "content": build_user_content(tile.tile_id, encode_png(tile.pixels))}


def extract_tile_id(user_content) -> str | None:
    """Recover the tile id embedded by build_user_content."""
    if isinstance(user_content, str):
        texts = [user_content]
    else:
        texts = [part.get("text", "") for part in user_content
                 if isinstance(part, dict) and part.get("type") == "text"]
    for text in texts:
        m = _TILE_ID_RE.search(text)
        if m:
            return m.group(1)
    return None


def build_inference_messages(tile_id: str, png_bytes: bytes,
                             template: PromptTemplate = DEFAULT_TEMPLATE
                             ) -> list[dict]:
    return [
        {"role": "system", "content": build_system_prompt(template)},
        {"role": "user", "content": build_user_content(tile_id, png_bytes)},
    ]


# --- output parsing -----------------------------------------------------------

class ParsePath(str, Enum):
    STRICT = "strict"
    REPAIRED = "repaired"


@dataclass(frozen=True)
class ModelPrediction:
    """Typed, canonicalized model output for one tile.

    raw_text is the completion verbatim; parse_path and repairs record
    how it was recovered.
    """

    present: bool
    location: LocationClass
    quantity: QuantityBin
    likelihood: float
    confidence: float
    raw_text: str = ""
    parse_path: ParsePath = ParsePath.STRICT
    repairs: tuple[str, ...] = ()


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)\s*```", re.DOTALL)


def _repair_strip_fences(text: str) -> str | None:
    m = _FENCE_RE.search(text)
    return m.group(1) if m else None


def _repair_extract_braces(text: str) -> str | None:
    """First balanced {...} block, tracking strings and escapes."""
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start:i + 1]
    return None


_BOOL_RE = re.compile(r"\b(True|TRUE|False|FALSE)\b")


def _repair_boolean_case(text: str) -> str | None:
    fixed = _BOOL_RE.sub(lambda m: m.group(1).lower(), text)
    return fixed if fixed != text else None


# Ordered: each repair applies to the current best candidate text.
_REPAIRS = (
    ("strip_code_fences", _repair_strip_fences),
    ("extract_json_block", _repair_extract_braces),
    ("normalize_boolean_case", _repair_boolean_case),
)

_LOCATION_ALIASES: dict[str, str] = {}
for _value in (v.value for v in LocationClass):
    _LOCATION_ALIASES[_value.lower()] = _value
    _LOCATION_ALIASES[_value.lower().replace("-", "")] = _value
    _LOCATION_ALIASES[_value.lower().replace("-", " ")] = _value
    _LOCATION_ALIASES[_value.lower().replace("-", "_")] = _value
for _alias in ("n/a", "none", "not applicable"):
    _LOCATION_ALIASES[_alias] = "NA"

_QUANTITY_ALIASES: dict[str, str] = {}
for _value in (v.value for v in QuantityBin):
    _QUANTITY_ALIASES[_value.lower()] = _value
for _alias in ("n/a", "none", "not applicable"):
    _QUANTITY_ALIASES[_alias] = "NA"


def canonicalize_fields(fields: Mapping) -> dict:
    """Normalize raw parsed fields toward the output vocabulary.

    Case-insensitive enum matching, separator variants of the grid names
    ("topleft", "top left", "top_left"), NA synonyms, string booleans,
    and numeric strings for the two probability fields. Unmappable
    values pass through unchanged for the typed step to reject.
    """
    out = dict(fields)
    loc = out.get(LOCATION_FIELD)
    if isinstance(loc, str):
        key = " ".join(loc.strip().lower().split())
        out[LOCATION_FIELD] = _LOCATION_ALIASES.get(key, loc.strip())
    qty = out.get(QUANTITY_FIELD)
    if isinstance(qty, str):
        key = " ".join(qty.strip().lower().split())
        out[QUANTITY_FIELD] = _QUANTITY_ALIASES.get(key, qty.strip())
    pres = out.get(PRESENCE_FIELD)
    if isinstance(pres, str):
        low = pres.strip().lower()
        if low in ("true", "yes"):
            out[PRESENCE_FIELD] = True
        elif low in ("false", "no"):
            out[PRESENCE_FIELD] = False
    for name in (LIKELIHOOD_FIELD, CONFIDENCE_FIELD):
        value = out.get(name)
        if isinstance(value, str):
            try:
                out[name] = float(value.strip())
            except ValueError:
                pass
    return out


def _typed_prediction(fields: Mapping, raw_text: str, path: ParsePath,
                      repairs: tuple[str, ...]) -> ModelPrediction:
    for name in OUTPUT_FIELDS:
        if name not in fields:
            raise MissingField(f"output is missing {name!r}", field=name)
    present = fields[PRESENCE_FIELD]
    if not isinstance(present, bool):
        raise UnknownEnumValue(
            f"{PRESENCE_FIELD} must be boolean, got {present!r}",
            field=PRESENCE_FIELD, value=present)
    try:
        location = LocationClass(fields[LOCATION_FIELD])
    except ValueError:
        raise UnknownEnumValue(
            f"unknown location {fields[LOCATION_FIELD]!r}",
            field=LOCATION_FIELD, value=fields[LOCATION_FIELD]) from None
    try:
        quantity = QuantityBin(fields[QUANTITY_FIELD])
    except ValueError:
        raise UnknownEnumValue(
            f"unknown quantity {fields[QUANTITY_FIELD]!r}",
            field=QUANTITY_FIELD, value=fields[QUANTITY_FIELD]) from None
    numbers = {}
    for name in (LIKELIHOOD_FIELD, CONFIDENCE_FIELD):
        value = fields[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise OutOfRange(f"{name} must be a number in [0, 1], got {value!r}",
                             field=name, value=value)
        if math.isnan(float(value)) or not 0.0 <= float(value) <= 1.0:
            raise OutOfRange(f"{name} must be in [0, 1], got {value!r}",
                             field=name, value=value)
        numbers[name] = float(value)
    return ModelPrediction(
        present=present,
        location=location,
        quantity=quantity,
        likelihood=numbers[LIKELIHOOD_FIELD],
        confidence=numbers[CONFIDENCE_FIELD],
        raw_text=raw_text,
        parse_path=path,
        repairs=repairs,
    )


def parse_model_output(text: str) -> ModelPrediction:
    """Parse a raw completion into a typed prediction.

    Strict JSON first; on failure each repair is tried in order with a
    re-parse after each. When no candidate parses to a JSON object,
    MalformedOutput carries a prefix of the original text.
    """
    candidate = text
    applied: list[str] = []
    fields = None
    try:
        fields = json.loads(candidate)
    except json.JSONDecodeError:
        for name, repair in _REPAIRS:
            fixed = repair(candidate)
            if fixed is None:
                continue
            candidate = fixed
            applied.append(name)
            try:
                fields = json.loads(candidate)
                break
            except json.JSONDecodeError:
                continue
    if not isinstance(fields, dict):
        raise MalformedOutput(f"unparseable model output: {text[:200]!r}")
    path = ParsePath.STRICT if not applied else ParsePath.REPAIRED
    return _typed_prediction(canonicalize_fields(fields), text, path,
                             tuple(applied))


def prediction_fields(pred: ModelPrediction) -> dict:
    """The prediction's five schema fields with wire-string values."""
    return {
        PRESENCE_FIELD: pred.present,
        LOCATION_FIELD: pred.location.value,
        QUANTITY_FIELD: pred.quantity.value,
        LIKELIHOOD_FIELD: pred.likelihood,
        CONFIDENCE_FIELD: pred.confidence,
    }


# --- training targets ---------------------------------------------------------

def target_fields(label: TileLabel) -> dict:
    """Assistant target for a labeled tile.

    Presence, location, and quantity come from the label; likelihood and
    confidence are the fixed per-class exemplar values.
    """
    validate_label(label)
    exemplar = SOLAR_EXEMPLAR if label.present else NO_SOLAR_EXEMPLAR
    return {
        PRESENCE_FIELD: label.present,
        LOCATION_FIELD: label.location.value,
        QUANTITY_FIELD: label.quantity.value,
        LIKELIHOOD_FIELD: exemplar[LIKELIHOOD_FIELD],
        CONFIDENCE_FIELD: exemplar[CONFIDENCE_FIELD],
    }


def build_training_messages(label: TileLabel, png_bytes: bytes,
                            template: PromptTemplate = DEFAULT_TEMPLATE
                            ) -> list[dict]:
    """Inference messages plus the assistant target, for fine-tune JSONL."""
    messages = build_inference_messages(label.tile_id, png_bytes, template)
    messages.append({"role": "assistant",
                     "content": response_json(target_fields(label))})
    return messages


def parse_target_fields(content: str, line: int = 0
                        ) -> tuple[bool, LocationClass, QuantityBin, float, float]:
    """Strict parse of an assistant target written by build_training_messages."""
    try:
        fields = json.loads(content)
    except json.JSONDecodeError as exc:
        raise InconsistentLabel(f"assistant target is not JSON: {exc}",
                                line=line) from exc
    missing = [name for name in OUTPUT_FIELDS if name not in fields]
    if missing:
        raise InconsistentLabel(f"assistant target missing {missing}", line=line)
    try:
        location = LocationClass(fields[LOCATION_FIELD])
        quantity = QuantityBin(fields[QUANTITY_FIELD])
    except ValueError as exc:
        raise InconsistentLabel(str(exc), line=line) from exc
    present = fields[PRESENCE_FIELD]
    if not isinstance(present, bool):
        raise InconsistentLabel(f"{PRESENCE_FIELD} must be boolean", line=line)
    return (present, location, quantity,
            float(fields[LIKELIHOOD_FIELD]), float(fields[CONFIDENCE_FIELD]))


def audit_entry(tile_id: str, raw_text: str) -> dict:
    """Parse-audit record for one completion: prediction or typed error."""
    try:
        pred = parse_model_output(raw_text)
        return {"tile_id": tile_id, "raw_text": raw_text,
                "parse_path": pred.parse_path.value,
                "repairs": list(pred.repairs),
                "prediction": prediction_fields(pred)}
    except (MalformedOutput, MissingField, UnknownEnumValue, OutOfRange) as exc:
        return {"tile_id": tile_id, "raw_text": raw_text,
                "parse_path": None, "error": type(exc).__name__,
                "detail": str(exc)}
