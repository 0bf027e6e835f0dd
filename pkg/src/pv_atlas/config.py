"""Campaign configuration: regions, endpoints, and run parameters.

A campaign file is JSON with a regions list plus optional overrides for
endpoints, sampling, and fine-tune parameters. Exactly one region must
carry the fine_tune role; it is the source region for transfer deltas.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, InvalidRegion
from .geo_ingest import (DEFAULT_DEDUPE_RADIUS_M, DEFAULT_OVERPASS_URL,
                         RegionRole, RegionSpec)
from .llm_gateway import API_KEY_ENV, FineTuneConfig

DEFAULT_MAPS_URL = "https://maps.googleapis.com/maps/api/staticmap"
DEFAULT_MODEL_BASE_URL = "https://api.openai.com/v1"
DEFAULT_BASE_MODEL = "gpt-4o-2024-08-06"

PROVIDER_KINDS = ("static", "synthetic", "fixture")
BACKEND_KINDS = ("http", "mock")


@dataclass(frozen=True)
class CampaignConfig:
    regions: tuple[RegionSpec, ...]
    overpass_url: str = DEFAULT_OVERPASS_URL
    maps_url: str = DEFAULT_MAPS_URL
    model_base_url: str = DEFAULT_MODEL_BASE_URL
    base_model: str = DEFAULT_BASE_MODEL
    scene_provider: str = "static"
    backend: str = "http"
    fixture_dir: str | None = None
    api_key_env: str = API_KEY_ENV
    dedupe_radius_m: float = DEFAULT_DEDUPE_RADIUS_M
    seed: int = 0
    val_fraction: float = 0.1
    n_epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 1e-3
    poll_interval_s: float = 30.0
    job_timeout_s: float = 6 * 3600.0
    parallelism: int = 4
    requests_per_second: float = 0.0

    def region(self, name: str) -> RegionSpec:
        for region in self.regions:
            if region.name == name:
                return region
        raise ConfigError(f"no region named {name!r} in campaign")

    def regions_with_role(self, role: RegionRole) -> list[RegionSpec]:
        return [r for r in self.regions if r.role == role]

    @property
    def source_region(self) -> RegionSpec:
        return self.regions_with_role(RegionRole.FINE_TUNE)[0]

    def finetune_config(self) -> FineTuneConfig:
        return FineTuneConfig(
            base_model=self.base_model,
            n_epochs=self.n_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            poll_interval=self.poll_interval_s,
            job_timeout=self.job_timeout_s,
        )


def _parse_region(entry: dict, index: int) -> RegionSpec:
    required = ("name", "continent", "bbox", "role", "target_tile_count")
    missing = [k for k in required if k not in entry]
    if missing:
        raise ConfigError(f"region #{index} is missing {missing}")
    bbox = entry["bbox"]
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise ConfigError(f"region {entry['name']!r} bbox must be "
                          "[south, west, north, east]")
    try:
        role = RegionRole(entry["role"])
    except ValueError:
        raise ConfigError(
            f"region {entry['name']!r} has unknown role {entry['role']!r}; "
            f"expected one of {[r.value for r in RegionRole]}") from None
    try:
        return RegionSpec(
            name=str(entry["name"]),
            continent=str(entry["continent"]),
            bbox=tuple(float(v) for v in bbox),
            role=role,
            target_tile_count=int(entry["target_tile_count"]),
        )
    except InvalidRegion as exc:
        raise ConfigError(f"region {entry['name']!r} is invalid: {exc}") from exc


def parse_config(doc: dict) -> CampaignConfig:
    if not isinstance(doc, dict) or "regions" not in doc:
        raise ConfigError("campaign config must be an object with a regions list")
    raw_regions = doc["regions"]
    if not isinstance(raw_regions, list) or not raw_regions:
        raise ConfigError("regions must be a nonempty list")
    regions = tuple(_parse_region(entry, i) for i, entry in enumerate(raw_regions))
    names = [r.name for r in regions]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate region names: {dupes}")
    sources = [r for r in regions if r.role == RegionRole.FINE_TUNE]
    if len(sources) != 1:
        raise ConfigError(
            f"campaign needs exactly one fine_tune region, found {len(sources)}")
    provider = doc.get("scene_provider", "static")
    if provider not in PROVIDER_KINDS:
        raise ConfigError(f"scene_provider must be one of {PROVIDER_KINDS}, "
                          f"got {provider!r}")
    backend = doc.get("backend", "http")
    if backend not in BACKEND_KINDS:
        raise ConfigError(f"backend must be one of {BACKEND_KINDS}, got {backend!r}")
    if provider == "fixture" and not doc.get("fixture_dir"):
        raise ConfigError("fixture scene_provider requires fixture_dir")
    val_fraction = float(doc.get("val_fraction", 0.1))
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    dedupe = float(doc.get("dedupe_radius_m", DEFAULT_DEDUPE_RADIUS_M))
    if dedupe < 0:
        raise ConfigError(f"dedupe_radius_m must be >= 0, got {dedupe}")
    hyper = doc.get("hyperparams", {})
    if not isinstance(hyper, dict):
        raise ConfigError("hyperparams must be an object")
    unknown = set(hyper) - {"n_epochs", "batch_size", "learning_rate"}
    if unknown:
        raise ConfigError(f"unknown hyperparams: {sorted(unknown)}")
    parallelism = int(doc.get("parallelism", 4))
    if parallelism < 1:
        raise ConfigError(f"parallelism must be >= 1, got {parallelism}")
    return CampaignConfig(
        regions=regions,
        overpass_url=str(doc.get("overpass_url", DEFAULT_OVERPASS_URL)),
        maps_url=str(doc.get("maps_url", DEFAULT_MAPS_URL)),
        model_base_url=str(doc.get("model_base_url", DEFAULT_MODEL_BASE_URL)),
        base_model=str(doc.get("base_model", DEFAULT_BASE_MODEL)),
        scene_provider=provider,
        backend=backend,
        fixture_dir=doc.get("fixture_dir"),
        api_key_env=str(doc.get("api_key_env", API_KEY_ENV)),
        dedupe_radius_m=dedupe,
        seed=int(doc.get("seed", 0)),
        val_fraction=val_fraction,
        n_epochs=int(hyper.get("n_epochs", 5)),
        batch_size=int(hyper.get("batch_size", 16)),
        learning_rate=float(hyper.get("learning_rate", 1e-3)),
        poll_interval_s=float(doc.get("poll_interval_s", 30.0)),
        job_timeout_s=float(doc.get("job_timeout_s", 6 * 3600.0)),
        parallelism=parallelism,
        requests_per_second=float(doc.get("requests_per_second", 0.0)),
    )


def load_config(path: Path) -> CampaignConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no campaign config at {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"campaign config is not valid JSON: {exc}") from exc
    return parse_config(doc)


class Workspace:
    """On-disk layout for one campaign run rooted at a single directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def snapshots_dir(self) -> Path:
        return self.root / "snapshots"

    @property
    def scenes_dir(self) -> Path:
        return self.root / "scenes"

    @property
    def tiles_dir(self) -> Path:
        return self.root / "tiles"

    @property
    def labels_path(self) -> Path:
        return self.root / "labels" / "labels.jsonl"

    @property
    def datasets_dir(self) -> Path:
        return self.root / "datasets"

    @property
    def predictions_dir(self) -> Path:
        return self.root / "predictions"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def sites_dir(self) -> Path:
        return self.root / "sites"

    def ensure(self) -> "Workspace":
        for path in (self.snapshots_dir, self.scenes_dir, self.tiles_dir,
                     self.labels_path.parent, self.datasets_dir,
                     self.predictions_dir, self.reports_dir, self.sites_dir):
            path.mkdir(parents=True, exist_ok=True)
        return self
