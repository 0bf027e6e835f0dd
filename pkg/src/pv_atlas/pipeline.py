"""End-to-end campaign stages over a single workspace directory.

Each stage reads the previous stage's on-disk artifacts and writes its
own, so any stage can be rerun in isolation: ingest -> scenes/tiles ->
labels -> dataset -> fine-tune -> inference -> evaluation. Inference
persists raw completions verbatim; parsing happens at evaluation time
(with a parse-audit JSONL) so reports can always be recomputed from the
artifacts.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import dataset as dataset_mod
from . import evaluation, geo_ingest, imagery, llm_gateway, prompting
from .config import CampaignConfig, Workspace
from .errors import MissingLabel, MissingTile, PvAtlasError
from .geo_ingest import PvSiteRecord, RegionRole, RegionSpec, SnapshotStore
from .llm_gateway import FineTuneJob, MockBackend, ModelBackend
from .ratelimit import RetryPolicy, TokenBucket
from .schema import LocationClass, QuantityBin, TileLabel
from .timeutil import Clock, SYSTEM_CLOCK, isoformat_utc


# --- ingest -------------------------------------------------------------------

def sites_path(ws: Workspace, region_name: str) -> Path:
    return ws.sites_dir / f"{region_name}.json"


def ingest_region(region: RegionSpec, config: CampaignConfig, ws: Workspace,
                  post: Callable | None = None,
                  clock: Clock = SYSTEM_CLOCK) -> list[PvSiteRecord]:
    """Query the PV site registry for one region, dedupe, persist."""
    ws.ensure()
    store = SnapshotStore(ws.snapshots_dir)
    sites, manifest = geo_ingest.fetch_pv_sites(
        region, endpoint_url=config.overpass_url, post=post, clock=clock,
        store=store)
    sites = geo_ingest.dedupe_sites(sites, radius_m=config.dedupe_radius_m)
    doc = {
        "region": region.name,
        "snapshot_digest": manifest.content_digest,
        "sites": [{"site_id": s.site_id, "lat": s.lat, "lon": s.lon,
                   "tags": dict(s.tags)} for s in sites],
    }
    sites_path(ws, region.name).write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8")
    return sites


def load_sites(ws: Workspace, region_name: str) -> list[PvSiteRecord]:
    path = sites_path(ws, region_name)
    if not path.is_file():
        raise MissingTile(f"no ingested sites for region {region_name!r}; "
                          "run ingest first")
    doc = json.loads(path.read_text(encoding="utf-8"))
    return [PvSiteRecord(site_id=e["site_id"], lat=e["lat"], lon=e["lon"],
                         tags=e.get("tags", {}), region_name=region_name)
            for e in doc["sites"]]


# --- scenes and tiles ---------------------------------------------------------

def make_provider(config: CampaignConfig,
                  rate: TokenBucket | None = None) -> imagery.SceneProvider:
    if config.scene_provider == "synthetic":
        return imagery.SyntheticSceneProvider(seed=config.seed)
    if config.scene_provider == "fixture":
        return imagery.FixtureSceneProvider(Path(config.fixture_dir))
    return imagery.StaticMapsProvider(config.maps_url, rate=rate)


def scenes_needed(region: RegionSpec) -> int:
    return math.ceil(region.target_tile_count / (imagery.GRID_DIM ** 2))


def fetch_and_slice(region: RegionSpec, config: CampaignConfig, ws: Workspace,
                    provider: imagery.SceneProvider | None = None,
                    api_key: str = "", clock: Clock = SYSTEM_CLOCK,
                    parallelism: int | None = None) -> dict:
    """Fetch enough scenes to cover the region's tile budget and slice them.

    Sites are taken in ingest order; the tile count is capped at the
    region's target. Returns a summary with the stored tile ids (sorted)
    and the scene cache hit count for this pass.
    """
    ws.ensure()
    provider = provider or make_provider(config)
    cache = imagery.SceneCache(ws.scenes_dir)
    tile_store = imagery.TileStore(ws.tiles_dir)
    sites = load_sites(ws, region.name)
    chosen = sites[:scenes_needed(region)]
    before = cache.hits
    scenes, failures = imagery.fetch_scenes(
        chosen, api_key, provider, cache, clock,
        parallelism=parallelism or config.parallelism)
    stored: list[str] = []
    budget = region.target_tile_count
    for site in chosen:  # ingest order, not dict order
        scene = scenes.get(site.site_id)
        if scene is None:
            continue
        tiles = imagery.slice_scene(scene)[:budget - len(stored)]
        if not tiles:
            break
        tile_store.put_tiles(region.name, tiles)
        stored.extend(t.tile_id for t in tiles)
    if failures and not stored:
        raise next(iter(failures.values()))
    return {
        "region": region.name,
        "tile_ids": sorted(stored),
        "scenes": len(scenes),
        "cache_hits": cache.hits - before,
        "failures": {site_id: str(exc) for site_id, exc in failures.items()},
    }


# --- labels -------------------------------------------------------------------

def label_store(ws: Workspace) -> dataset_mod.LabelStore:
    return dataset_mod.LabelStore(ws.labels_path)


def labels_for_region(ws: Workspace, region_name: str) -> dict[str, TileLabel]:
    tile_ids = set(imagery.TileStore(ws.tiles_dir).tile_ids(region_name))
    return {tid: label for tid, label in label_store(ws).load().items()
            if tid in tile_ids}


def auto_label_region(ws: Workspace, region_name: str,
                      rule: Callable[[imagery.Tile], TileLabel] | None = None,
                      annotator_id: str = "heuristic",
                      clock: Clock = SYSTEM_CLOCK) -> int:
    """Label every unlabeled tile in a region with a deterministic rule.

    The default rule reuses the pixel heuristic, which is good enough to
    exercise the downstream stages without a human in the loop.
    """

    def default_rule(tile: imagery.Tile) -> TileLabel:
        fields = llm_gateway.heuristic_assessment(tile.pixels)
        return TileLabel(
            tile_id=tile.tile_id,
            present=fields[prompting.PRESENCE_FIELD],
            location=LocationClass(fields[prompting.LOCATION_FIELD]),
            quantity=QuantityBin(fields[prompting.QUANTITY_FIELD]),
            annotator_id=annotator_id,
            labeled_at=clock.now(),
        )

    rule = rule or default_rule
    store = label_store(ws)
    existing = store.load()
    tile_store = imagery.TileStore(ws.tiles_dir)
    added = 0
    for tile in tile_store.iter_tiles(region_name):
        if tile.tile_id in existing:
            continue
        store.append(rule(tile))
        added += 1
    return added


# --- dataset ------------------------------------------------------------------

def build_dataset(region: RegionSpec, config: CampaignConfig, ws: Workspace,
                  cap: int | None = None) -> dict:
    """Assign the region's fine-tune split and write train/val JSONL."""
    ws.ensure()
    labels = labels_for_region(ws, region.name)
    if not labels:
        raise MissingLabel(f"region {region.name!r} has no labels")
    split = dataset_mod.assign_split(sorted(labels), region, config.seed,
                                     cap or min(region.target_tile_count,
                                                len(labels)))
    train_ids, val_ids = dataset_mod.split_train_val(
        split.tile_ids, config.val_fraction, seed=config.seed)
    tile_store = imagery.TileStore(ws.tiles_dir)

    def png_lookup(tile_id: str) -> bytes:
        return tile_store.tile_png(region.name, tile_id)

    train_path = ws.datasets_dir / f"{region.name}_train.jsonl"
    val_path = ws.datasets_dir / f"{region.name}_val.jsonl"
    train_split = dataset_mod.DatasetSplit(
        name=f"{split.name}-train", role=split.role,
        tile_ids=tuple(train_ids), region_name=region.name)
    val_split = dataset_mod.DatasetSplit(
        name=f"{split.name}-val", role=split.role,
        tile_ids=tuple(val_ids), region_name=region.name)
    dataset_mod.export_training_jsonl(train_split, labels, png_lookup,
                                      path=train_path)
    n_val = dataset_mod.export_training_jsonl(val_split, labels, png_lookup,
                                              path=val_path)
    manifest = {
        "region": region.name,
        "seed": config.seed,
        "total": len(split.tile_ids),
        "train": len(train_ids),
        "val": len(val_ids),
        "positives": sum(1 for t in split.tile_ids if labels[t].present),
        "negatives": sum(1 for t in split.tile_ids if not labels[t].present),
        "train_path": train_path.name,
        "val_path": val_path.name if n_val else None,
    }
    manifest_path = ws.datasets_dir / f"{region.name}_manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                             encoding="utf-8")
    return manifest


# --- fine-tuning --------------------------------------------------------------

def make_backend(config: CampaignConfig, api_key: str | None = None,
                 fixtures: Mapping[str, str] | None = None,
                 audit_path: Path | None = None) -> ModelBackend:
    if config.backend == "mock":
        return MockBackend(fixtures=fixtures)
    return llm_gateway.HttpBackend(
        config.model_base_url,
        api_key=llm_gateway.resolve_api_key(api_key, config.api_key_env),
        audit_path=audit_path)


def run_finetune(config: CampaignConfig, ws: Workspace, backend: ModelBackend,
                 train_path: Path | None = None, clock: Clock = SYSTEM_CLOCK,
                 **poll_kwargs) -> FineTuneJob:
    source = config.source_region
    train_path = train_path or ws.datasets_dir / f"{source.name}_train.jsonl"
    job = llm_gateway.upload_and_finetune(
        backend, train_path, config.finetune_config(), clock=clock,
        **poll_kwargs)
    record = {
        "job_id": job.job_id,
        "training_file_id": job.training_file_id,
        "base_model": job.base_model,
        "status": job.status.value,
        "fine_tuned_model": job.fine_tuned_model,
        "history": [[isoformat_utc(ts), status.value]
                    for ts, status in job.history],
    }
    (ws.root / "finetune_job.json").write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return job


# --- inference ----------------------------------------------------------------

def predictions_path(ws: Workspace, region_name: str) -> Path:
    return ws.predictions_dir / f"{region_name}.jsonl"


def infer_region(region_name: str, config: CampaignConfig, ws: Workspace,
                 backend: ModelBackend, model: str,
                 parallelism: int | None = None,
                 rate: TokenBucket | None = None,
                 retry: RetryPolicy | None = None) -> Path:
    """Run the model over every tile in a region, persisting raw outputs.

    One JSONL line per tile, sorted by tile id. Lines carry either the
    verbatim completion or the error kind that exhausted its retries.
    """
    ws.ensure()
    tile_store = imagery.TileStore(ws.tiles_dir)
    tiles = list(tile_store.iter_tiles(region_name))
    results = llm_gateway.batch_infer(
        tiles, model, backend=backend,
        parallelism=parallelism or config.parallelism, rate=rate, retry=retry)
    lines = []
    for tile_id, outcome in results.items():
        if isinstance(outcome, str):
            record = {"tile_id": tile_id, "model": model, "raw": outcome}
        else:
            record = {"tile_id": tile_id, "model": model,
                      "error_kind": type(outcome).__name__,
                      "error": str(outcome)}
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    path = predictions_path(ws, region_name)
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def load_predictions(ws: Workspace, region_name: str) -> list[dict]:
    path = predictions_path(ws, region_name)
    if not path.is_file():
        raise MissingTile(f"no predictions for region {region_name!r}; "
                          "run inference first")
    records = []
    with path.open(encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if raw:
                records.append(json.loads(raw))
    return records


# --- evaluation ---------------------------------------------------------------

def eval_pairs_for_region(ws: Workspace, region_name: str,
                          write_audit: bool = True
                          ) -> list[evaluation.EvalPair]:
    """Join truth labels with parsed predictions for one region.

    Raw completions are parsed here, and each parse outcome also lands
    in the region's parse-audit JSONL next to the predictions file.
    """
    labels = labels_for_region(ws, region_name)
    pairs = []
    audit_lines = []
    for record in sorted(load_predictions(ws, region_name),
                         key=lambda r: r["tile_id"]):
        tile_id = record["tile_id"]
        truth = labels.get(tile_id)
        if truth is None:
            raise MissingLabel(f"tile {tile_id} has predictions but no label")
        if "raw" in record:
            audit_lines.append(prompting.audit_entry(tile_id, record["raw"]))
            try:
                prediction: object = prompting.parse_model_output(record["raw"])
            except PvAtlasError as exc:
                prediction = exc
        else:
            prediction = record.get("error_kind", "TransportError")
            audit_lines.append({"tile_id": tile_id, "raw_text": None,
                                "parse_path": None, "error": prediction,
                                "detail": record.get("error", "")})
        pairs.append(evaluation.EvalPair(tile_id=tile_id, truth=truth,
                                         prediction=prediction))
    if write_audit:
        audit_path = ws.predictions_dir / f"{region_name}_audit.jsonl"
        audit_path.write_text(
            "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n"
                    for e in audit_lines), encoding="utf-8")
    return pairs


def evaluate_campaign(config: CampaignConfig, ws: Workspace,
                      region_names: Sequence[str] | None = None,
                      source_region: str | None = None,
                      ece_bins: int = evaluation.DEFAULT_ECE_BINS,
                      out_json: Path | None = None,
                      out_csv: Path | None = None) -> dict:
    """Score every region with predictions and write the report pair."""
    if region_names is None:
        region_names = sorted(p.stem for p in ws.predictions_dir.glob("*.jsonl")
                              if not p.stem.endswith("_audit"))
    per_region = {name: eval_pairs_for_region(ws, name)
                  for name in region_names}
    source = source_region or config.source_region.name
    matrix = evaluation.build_cross_domain_matrix(per_region, source,
                                                  ece_bins=ece_bins)
    provenance = {
        "labels": ws.labels_path.name,
        "predictions": {name: predictions_path(ws, name).name
                        for name in sorted(per_region)},
    }
    doc = evaluation.matrix_to_dict(matrix, provenance=provenance)
    evaluation.write_report(doc,
                            out_json or ws.reports_dir / "report.json",
                            out_csv or ws.reports_dir / "report.csv")
    return doc


def role_region_names(config: CampaignConfig, roles: Sequence[RegionRole]
                      ) -> list[str]:
    return [r.name for r in config.regions if r.role in roles]
