import json
import re
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pytest

from pv_atlas.config import Workspace, load_config, parse_config
from pv_atlas.evaluation import EvalPair
from pv_atlas.geo_ingest import RegionRole, RegionSpec
from pv_atlas.prompting import ModelPrediction, ParsePath
from pv_atlas.schema import LocationClass, QuantityBin, TileLabel
from pv_atlas.timeutil import FixedClock

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

T0 = datetime(2026, 1, 1, 0, 0, 0, tzinfo=timezone.utc)

_BBOX_RE = re.compile(r"\(([-\d.]+),([-\d.]+),([-\d.]+),([-\d.]+)\)")


@pytest.fixture
def fixed_clock():
    return FixedClock(T0)


@pytest.fixture
def tmp_ws(tmp_path):
    return Workspace(tmp_path / "campaign").ensure()


@pytest.fixture
def demo_config():
    return load_config(CONFIG_DIR / "demo.json")


@pytest.fixture
def demo_region():
    return RegionSpec(name="demo", continent="north_america",
                      bbox=(33.70, -117.90, 33.78, -117.83),
                      role=RegionRole.FINE_TUNE, target_tile_count=64)


def overpass_post_stub(n_sites=8):
    """Deterministic Overpass transport: n nodes spread across the bbox."""

    def post(url, query):
        south, west, north, east = map(float, _BBOX_RE.search(query).groups())
        elements = [{
            "type": "node", "id": 1000 + i,
            "lat": south + (north - south) * (i + 1) / (n_sites + 2),
            "lon": west + (east - west) * (i + 1) / (n_sites + 2),
            "tags": {"power": "generator", "generator:source": "solar"},
        } for i in range(n_sites)]
        return 200, json.dumps({"elements": elements}).encode()

    return post


@pytest.fixture
def fake_post():
    return overpass_post_stub()


def make_label(tile_id="t1", present=True, location=LocationClass.TOP_LEFT,
               quantity=QuantityBin.ZERO_TO_ONE, annotator="tester",
               at=T0) -> TileLabel:
    if not present:
        location = LocationClass.NA
        quantity = QuantityBin.NA
    return TileLabel(tile_id=tile_id, present=present, location=location,
                     quantity=quantity, annotator_id=annotator, labeled_at=at)


def make_prediction(present=True, location=LocationClass.TOP_LEFT,
                    quantity=QuantityBin.ZERO_TO_ONE, likelihood=0.98,
                    confidence=0.90, raw_text="", path=ParsePath.STRICT
                    ) -> ModelPrediction:
    return ModelPrediction(present=present, location=location,
                           quantity=quantity, likelihood=likelihood,
                           confidence=confidence, raw_text=raw_text,
                           parse_path=path)


def make_pair(tile_id, truth_present, pred_present=None, *,
              truth_location=None, truth_quantity=None,
              pred_location=None, pred_quantity=None,
              likelihood=None, error=None) -> EvalPair:
    truth = make_label(
        tile_id, truth_present,
        truth_location or (LocationClass.TOP_LEFT if truth_present
                           else LocationClass.NA),
        truth_quantity or (QuantityBin.ZERO_TO_ONE if truth_present
                           else QuantityBin.NA))
    if error is not None:
        return EvalPair(tile_id=tile_id, truth=truth, prediction=error)
    pred = make_prediction(
        pred_present,
        (pred_location or (LocationClass.TOP_LEFT if pred_present
                           else LocationClass.NA)),
        (pred_quantity or (QuantityBin.ZERO_TO_ONE if pred_present
                           else QuantityBin.NA)),
        likelihood if likelihood is not None
        else (0.98 if pred_present else 0.21))
    return EvalPair(tile_id=tile_id, truth=truth, prediction=pred)


def random_raster(rng: np.random.Generator, w=400, h=400) -> np.ndarray:
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def seven_region_config(tiles_per_region=64, seed=7) -> dict:
    """In-memory campaign doc: one fine-tune source plus six test regions."""
    regions = [{
        "name": "src_ana", "continent": "north_america",
        "bbox": [33.70, -117.90, 33.78, -117.83],
        "role": "fine_tune", "target_tile_count": tiles_per_region,
    }]
    cross = [("tgt_rain", "north_america", [47.58, -122.35, 47.66, -122.28],
              "cross_regional_test"),
             ("tgt_lake", "north_america", [28.49, -81.42, 28.57, -81.35],
              "cross_regional_test"),
             ("tgt_harb", "oceania", [-33.90, 151.15, -33.82, 151.22],
              "cross_continental_test"),
             ("tgt_cape", "africa", [-33.98, 18.45, -33.90, 18.52],
              "cross_continental_test"),
             ("tgt_spire", "europe", [51.71, -1.30, 51.79, -1.23],
              "cross_continental_test"),
             ("tgt_delta", "asia", [31.15, 121.40, 31.23, 121.47],
              "cross_continental_test")]
    for name, continent, bbox, role in cross:
        regions.append({"name": name, "continent": continent, "bbox": bbox,
                        "role": role, "target_tile_count": tiles_per_region})
    return {
        "regions": regions,
        "scene_provider": "synthetic",
        "backend": "mock",
        "seed": seed,
        "val_fraction": 0.0,
        "poll_interval_s": 0.0,
        "hyperparams": {"batch_size": 16, "learning_rate": 0.001},
    }


@pytest.fixture
def seven_region_campaign():
    return parse_config(seven_region_config())
