"""Metrics and cross-region evaluation reports.

Presence is scored as binary detection with explicit Undefined values
for zero-denominator cases instead of silent zeros. Location and
quantity are exact-match over their closed vocabularies with NA as an
ordinary class. Tiles whose model output never parsed default to
predicted-negative and are tallied as parse failures. Region shift is
summarized as F1 deltas against a designated source region, and
calibration as equal-width-binned ECE over the model's stated
likelihoods.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .errors import (EmptyInput, InputOutOfRange, MissingSourceRegion,
                     NoParsedPredictions)
from .prompting import ModelPrediction
from .schema import TileLabel

DEFAULT_ECE_BINS = 10

CSV_COLUMNS = ("region", "n", "precision", "recall", "f1_positive", "f1_macro",
               "accuracy", "loc_acc", "qty_acc", "delta_f1", "parse_fail_rate",
               "ece")


@dataclass(frozen=True)
class EvalPair:
    """One evaluated tile: ground truth plus the model's output.

    prediction is either a parsed ModelPrediction or, when no repair
    path produced one, the error that ended parsing (any non-prediction
    value is treated as a parse failure).
    """

    tile_id: str
    truth: TileLabel
    prediction: object

    @property
    def parsed(self) -> ModelPrediction | None:
        p = self.prediction
        return p if isinstance(p, ModelPrediction) else None


class FailurePolicy(str, Enum):
    """How unparseable predictions enter the presence confusion counts."""

    PREDICTED_NEGATIVE = "predicted_negative"
    EXCLUDE = "exclude"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionCounts":
        """Counts with the negative class treated as positive."""
        return ConfusionCounts(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def parse_failure_count(pairs: Sequence[EvalPair]) -> int:
    return sum(1 for p in pairs if p.parsed is None)


def compute_confusion(pairs: Sequence[EvalPair],
                      failure_policy: FailurePolicy = FailurePolicy.PREDICTED_NEGATIVE,
                      ) -> ConfusionCounts:
    """Presence confusion counts over (prediction, truth) booleans.

    Parse failures are scored per failure_policy: as predicted-negative
    by default, or dropped from the counts entirely under EXCLUDE. Use
    parse_failure_count for the separate failure tally either way.
    """
    if not pairs:
        raise EmptyInput("no pairs to score")
    tp = fp = fn = tn = 0
    for pair in pairs:
        parsed = pair.parsed
        if parsed is None:
            if failure_policy is FailurePolicy.EXCLUDE:
                continue
            predicted = False
        else:
            predicted = bool(parsed.present)
        truth = bool(pair.truth.present)
        if predicted and truth:
            tp += 1
        elif predicted:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


@dataclass(frozen=True)
class TaskMetrics:
    """Detection metrics; None marks a ratio whose denominator was 0."""

    precision: float | None
    recall: float | None
    f1: float | None
    accuracy: float | None
    n: int
    degenerate_flags: frozenset[str] = field(default_factory=frozenset)


def compute_task_metrics(counts: ConfusionCounts) -> TaskMetrics:
    flags: set[str] = set()
    if counts.tp + counts.fp > 0:
        precision = counts.tp / (counts.tp + counts.fp)
    else:
        precision = None
        flags.add("precision_undefined")
    if counts.tp + counts.fn > 0:
        recall = counts.tp / (counts.tp + counts.fn)
    else:
        recall = None
        flags.add("recall_undefined")
    if precision is None or recall is None or precision + recall == 0.0:
        f1 = None
        flags.add("f1_undefined")
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    if counts.n > 0:
        accuracy = (counts.tp + counts.tn) / counts.n
    else:
        accuracy = None
        flags.add("accuracy_undefined")
    return TaskMetrics(precision=precision, recall=recall, f1=f1,
                       accuracy=accuracy, n=counts.n,
                       degenerate_flags=frozenset(flags))


_MATCH_FIELDS = ("location", "quantity")


def exact_match_accuracy(pairs: Sequence[EvalPair], field_name: str) -> float:
    """Fraction of pairs whose predicted categorical equals the truth.

    NA is a class like any other, so NA-vs-NA is a match; a pair whose
    output never parsed can never match. field_name is "location" or
    "quantity".
    """
    if field_name not in _MATCH_FIELDS:
        raise ValueError(f"field must be one of {_MATCH_FIELDS}, got {field_name!r}")
    if not pairs:
        raise EmptyInput("no pairs to score")
    hits = 0
    for pair in pairs:
        parsed = pair.parsed
        if parsed is None:
            continue
        if getattr(parsed, field_name) == getattr(pair.truth, field_name):
            hits += 1
    return hits / len(pairs)


def per_class_f1(pairs: Sequence[EvalPair],
                 failure_policy: FailurePolicy = FailurePolicy.PREDICTED_NEGATIVE,
                 ) -> dict[str, float | None]:
    """F1 with each presence class taken as the positive class in turn."""
    counts = compute_confusion(pairs, failure_policy)
    return {
        "solar_f1": compute_task_metrics(counts).f1,
        "no_solar_f1": compute_task_metrics(counts.swapped()).f1,
    }


def delta_f1(target_f1: float, source_f1: float) -> float:
    """Signed F1 shift when a model crosses regions.

    Positive means the model transferred with improvement; negative
    means degradation relative to where it was trained.
    """
    for name, value in (("target_f1", target_f1), ("source_f1", source_f1)):
        if not isinstance(value, (int, float)) or not 0.0 <= float(value) <= 1.0:
            raise InputOutOfRange(f"{name} must be in [0, 1], got {value!r}")
    return float(target_f1) - float(source_f1)


def expected_calibration_error(pairs: Sequence[EvalPair],
                               bins: int = DEFAULT_ECE_BINS) -> dict:
    """Binned gap between stated likelihood and observed accuracy.

    Equal-width bins over [0, 1] (a likelihood of exactly 1.0 lands in
    the top bin); only parsed predictions participate. Returns the
    scalar ece plus one reliability entry per nonempty bin:
    (bin_range, mean_likelihood, empirical_accuracy, count).
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    totals = [0] * bins
    correct = [0] * bins
    conf_sum = [0.0] * bins
    n = 0
    for pair in pairs:
        parsed = pair.parsed
        if parsed is None:
            continue
        likelihood = float(parsed.likelihood)
        idx = min(bins - 1, int(likelihood * bins))
        totals[idx] += 1
        if bool(parsed.present) == bool(pair.truth.present):
            correct[idx] += 1
        conf_sum[idx] += likelihood
        n += 1
    if n == 0:
        raise NoParsedPredictions("no parsed predictions to calibrate")
    ece = 0.0
    reliability = []
    width = 1.0 / bins
    for b in range(bins):
        if totals[b] == 0:
            continue
        acc_b = correct[b] / totals[b]
        conf_b = conf_sum[b] / totals[b]
        ece += (totals[b] / n) * abs(acc_b - conf_b)
        reliability.append(((b * width, (b + 1) * width), conf_b, acc_b,
                            totals[b]))
    return {"ece": ece, "reliability": reliability}


# --- cross-domain matrix ------------------------------------------------------

@dataclass(frozen=True)
class RegionRow:
    """One region's full scorecard within a cross-domain matrix."""

    region: str
    n: int
    counts: ConfusionCounts
    presence: TaskMetrics
    solar_f1: float | None
    no_solar_f1: float | None
    f1_macro: float | None
    location_accuracy: float
    quantity_accuracy: float
    delta_f1: float | None
    parse_failures: int
    parse_failure_rate: float
    ece: float | None
    reliability: tuple = ()


@dataclass(frozen=True)
class CrossDomainMatrix:
    source_region: str
    rows: Mapping[str, RegionRow]


def _score_region(region: str, pairs: Sequence[EvalPair],
                  failure_policy: FailurePolicy, ece_bins: int) -> dict:
    if not pairs:
        raise EmptyInput(f"region {region!r} has no pairs")
    counts = compute_confusion(pairs, failure_policy)
    presence = compute_task_metrics(counts)
    classes = per_class_f1(pairs, failure_policy)
    solar, no_solar = classes["solar_f1"], classes["no_solar_f1"]
    macro = (solar + no_solar) / 2.0 if solar is not None and no_solar is not None else None
    failures = parse_failure_count(pairs)
    try:
        calib = expected_calibration_error(pairs, bins=ece_bins)
    except NoParsedPredictions:
        calib = {"ece": None, "reliability": []}
    return {
        "region": region,
        "n": len(pairs),
        "counts": counts,
        "presence": presence,
        "solar_f1": solar,
        "no_solar_f1": no_solar,
        "f1_macro": macro,
        "location_accuracy": exact_match_accuracy(pairs, "location"),
        "quantity_accuracy": exact_match_accuracy(pairs, "quantity"),
        "parse_failures": failures,
        "parse_failure_rate": failures / len(pairs),
        "ece": calib["ece"],
        "reliability": tuple(calib["reliability"]),
    }


def build_cross_domain_matrix(per_region_pairs: Mapping[str, Sequence[EvalPair]],
                              source_region: str,
                              failure_policy: FailurePolicy = FailurePolicy.PREDICTED_NEGATIVE,
                              ece_bins: int = DEFAULT_ECE_BINS,
                              ) -> CrossDomainMatrix:
    """Score every region and express each F1 relative to the source.

    The source region's own delta is identically 0.0; rows whose F1 is
    undefined carry a None delta.
    """
    if source_region not in per_region_pairs:
        raise MissingSourceRegion(
            f"source region {source_region!r} not among "
            f"{sorted(per_region_pairs)}")
    scored = {region: _score_region(region, pairs, failure_policy, ece_bins)
              for region, pairs in per_region_pairs.items()}
    source_f1 = scored[source_region]["presence"].f1
    rows: dict[str, RegionRow] = {}
    for region, entry in scored.items():
        row_f1 = entry["presence"].f1
        if region == source_region:
            delta = 0.0
        elif source_f1 is None or row_f1 is None:
            delta = None
        else:
            delta = delta_f1(row_f1, source_f1)
        rows[region] = RegionRow(delta_f1=delta, **entry)
    return CrossDomainMatrix(source_region=source_region, rows=rows)


# --- report serialization -----------------------------------------------------

def row_to_dict(row: RegionRow) -> dict:
    return {
        "region": row.region,
        "n": row.n,
        "counts": {"tp": row.counts.tp, "fp": row.counts.fp,
                   "fn": row.counts.fn, "tn": row.counts.tn},
        "precision": row.presence.precision,
        "recall": row.presence.recall,
        "f1_positive": row.presence.f1,
        "solar_f1": row.solar_f1,
        "no_solar_f1": row.no_solar_f1,
        "f1_macro": row.f1_macro,
        "accuracy": row.presence.accuracy,
        "location_accuracy": row.location_accuracy,
        "quantity_accuracy": row.quantity_accuracy,
        "delta_f1": row.delta_f1,
        "parse_failures": row.parse_failures,
        "parse_fail_rate": row.parse_failure_rate,
        "ece": row.ece,
        "reliability": [
            {"bin": list(bin_range), "mean_likelihood": mean_l,
             "empirical_accuracy": acc, "count": count}
            for bin_range, mean_l, acc, count in row.reliability],
        "degenerate_flags": sorted(row.presence.degenerate_flags),
    }


def matrix_to_dict(matrix: CrossDomainMatrix,
                   provenance: Mapping | None = None) -> dict:
    doc: dict = {
        "source_region": matrix.source_region,
        "rows": {name: row_to_dict(row)
                 for name, row in sorted(matrix.rows.items())},
    }
    if provenance:
        doc["provenance"] = dict(provenance)
    return doc


def render_report_json(doc: Mapping) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def render_report_csv(doc: Mapping) -> str:
    """One row per region with the headline metrics, regions sorted."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for name in sorted(doc["rows"]):
        r = doc["rows"][name]
        writer.writerow([
            name,
            _cell(r["n"]),
            _cell(r["precision"]),
            _cell(r["recall"]),
            _cell(r["f1_positive"]),
            _cell(r["f1_macro"]),
            _cell(r["accuracy"]),
            _cell(r["location_accuracy"]),
            _cell(r["quantity_accuracy"]),
            _cell(r["delta_f1"]),
            _cell(r["parse_fail_rate"]),
            _cell(r["ece"]),
        ])
    return buf.getvalue()


def write_report(doc: Mapping, json_path: Path,
                 csv_path: Path | None = None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(render_report_json(doc), encoding="utf-8")
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(render_report_csv(doc), encoding="utf-8")
