"""Command-line entry points for the assessment pipeline.

Exit codes: 0 success, 1 operational failure (network, upstream, data),
2 usage error, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataset as dataset_mod
from . import evaluation, pipeline, server
from .config import CampaignConfig, Workspace, load_config
from .errors import ConfigError, PvAtlasError
from .geo_ingest import RegionRole
from .timeutil import Clock, FixedClock, SYSTEM_CLOCK, parse_utc

log = logging.getLogger("pv_atlas")

EXIT_OK = 0
EXIT_OPERATIONAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def _add_common(sub: argparse.ArgumentParser, config_required: bool = True) -> None:
    sub.add_argument("--config", type=Path, required=config_required,
                     help="campaign config JSON")
    sub.add_argument("--workdir", type=Path, default=Path("campaign"),
                     help="workspace directory (default: ./campaign)")
    sub.add_argument("--fixed-clock", metavar="UTC_ISO",
                     help="freeze timestamps for reproducible runs "
                          "(e.g. 2026-01-01T00:00:00Z)")


def _clock(args) -> Clock:
    if getattr(args, "fixed_clock", None):
        try:
            return FixedClock(parse_utc(args.fixed_clock))
        except ValueError as exc:
            raise ConfigError(f"bad --fixed-clock value: {exc}") from exc
    return SYSTEM_CLOCK


def _regions(args, config: CampaignConfig):
    if args.region:
        return [config.region(name) for name in args.region]
    return list(config.regions)


def cmd_ingest(args, config: CampaignConfig, ws: Workspace) -> int:
    clock = _clock(args)
    for region in _regions(args, config):
        sites = pipeline.ingest_region(region, config, ws, clock=clock)
        print(f"{region.name}: {len(sites)} sites after dedupe")
    return EXIT_OK


def cmd_fetch(args, config: CampaignConfig, ws: Workspace) -> int:
    import pv_atlas.imagery as imagery

    provider = pipeline.make_provider(config)
    cache = imagery.SceneCache(ws.ensure().scenes_dir)
    clock = _clock(args)
    for region in _regions(args, config):
        sites = pipeline.load_sites(ws, region.name)
        chosen = sites[:pipeline.scenes_needed(region)]
        before = cache.hits
        scenes, failures = imagery.fetch_scenes(
            chosen, args.api_key or "", provider, cache, clock,
            parallelism=config.parallelism)
        hits = cache.hits - before
        pct = 100.0 * hits / len(chosen) if chosen else 100.0
        print(f"{region.name}: {len(scenes)} scenes, {hits} cache hits "
              f"({pct:.0f}%), {len(failures)} failures")
        if failures and not scenes:
            raise next(iter(failures.values()))
    return EXIT_OK


def cmd_slice(args, config: CampaignConfig, ws: Workspace) -> int:
    clock = _clock(args)
    for region in _regions(args, config):
        result = pipeline.fetch_and_slice(region, config, ws,
                                          api_key=args.api_key or "",
                                          clock=clock)
        print(f"{region.name}: {len(result['tile_ids'])} tiles stored "
              f"({result['cache_hits']} scene cache hits)")
    return EXIT_OK


def cmd_autolabel(args, config: CampaignConfig, ws: Workspace) -> int:
    clock = _clock(args)
    for region in _regions(args, config):
        added = pipeline.auto_label_region(ws, region.name,
                                           annotator_id=args.annotator,
                                           clock=clock)
        print(f"{region.name}: {added} tiles auto-labeled")
    return EXIT_OK


def cmd_dataset_export(args, config: CampaignConfig, ws: Workspace) -> int:
    region = config.region(args.region) if args.region else config.source_region
    manifest = pipeline.build_dataset(region, config, ws, cap=args.cap)
    print(f"{region.name}: {manifest['train']} train / {manifest['val']} val "
          f"({manifest['positives']} solar, {manifest['negatives']} non-solar)")
    return EXIT_OK


def cmd_dataset_import(args, config, ws) -> int:
    targets = dataset_mod.import_training_jsonl(args.path)
    positives = sum(1 for t in targets if t.present)
    print(f"{args.path}: {len(targets)} examples "
          f"({positives} solar, {len(targets) - positives} non-solar)")
    return EXIT_OK


def cmd_annotate_serve(args, config, ws: Workspace) -> int:
    static = args.static
    if static is None:
        candidate = Path("frontend/dist")
        static = candidate if candidate.is_dir() else None
    server.serve(ws.ensure(), host=args.host, port=args.port, static_dir=static)
    return EXIT_OK


def cmd_finetune(args, config: CampaignConfig, ws: Workspace) -> int:
    backend = pipeline.make_backend(config, api_key=args.api_key,
                                    audit_path=ws.ensure().root / "llm_audit.jsonl")
    job = pipeline.run_finetune(config, ws, backend, train_path=args.train,
                                clock=_clock(args))
    print(f"job {job.job_id}: {job.status.value}, model {job.fine_tuned_model}")
    return EXIT_OK


def _resolve_model(args, ws: Workspace) -> str:
    if args.model:
        return args.model
    record_path = ws.root / "finetune_job.json"
    if record_path.is_file():
        record = json.loads(record_path.read_text(encoding="utf-8"))
        model = record.get("fine_tuned_model")
        if model:
            return model
    raise ConfigError("no --model given and no fine-tuned model on record")


def cmd_infer(args, config: CampaignConfig, ws: Workspace) -> int:
    backend = pipeline.make_backend(config, api_key=args.api_key,
                                    audit_path=ws.ensure().root / "llm_audit.jsonl")
    model = _resolve_model(args, ws)
    names = args.region or pipeline.role_region_names(config, list(RegionRole))
    for name in names:
        path = pipeline.infer_region(name, config, ws, backend, model)
        print(f"{name}: predictions at {path}")
    return EXIT_OK


def cmd_evaluate(args, config: CampaignConfig, ws: Workspace) -> int:
    out_json = args.out
    out_csv = args.out.with_suffix(".csv") if args.out else None
    doc = pipeline.evaluate_campaign(config, ws,
                                     region_names=args.region or None,
                                     source_region=args.source,
                                     out_json=out_json, out_csv=out_csv)
    for name in sorted(doc["rows"]):
        r = doc["rows"][name]
        f1 = "undef" if r["f1_positive"] is None else f"{r['f1_positive']:.3f}"
        acc = "undef" if r["accuracy"] is None else f"{r['accuracy']:.3f}"
        delta = r["delta_f1"]
        delta_s = "" if delta is None else f" delta_f1={delta:+.3f}"
        print(f"{name}: n={r['n']} f1={f1} acc={acc} "
              f"loc={r['location_accuracy']:.3f} qty={r['quantity_accuracy']:.3f}"
              f"{delta_s}")
    print(f"report: {out_json or ws.reports_dir / 'report.json'}")
    return EXIT_OK


def cmd_report(args, config, ws: Workspace) -> int:
    path = ws.reports_dir / "report.json"
    if not path.is_file():
        print(f"no report at {path}; run evaluate first", file=sys.stderr)
        return EXIT_OPERATIONAL
    doc = json.loads(path.read_text(encoding="utf-8"))
    sys.stdout.write(evaluation.render_report_csv(doc))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pv-atlas",
        description="rooftop solar assessment pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, func, help_text, config_required=True):
        p = subs.add_parser(name, help=help_text)
        _add_common(p, config_required)
        p.set_defaults(func=func, needs_config=config_required)
        return p

    p = sub("ingest", cmd_ingest, "query PV site registry for campaign regions")
    p.add_argument("--region", action="append", help="limit to named region")

    p = sub("fetch", cmd_fetch, "fetch satellite scenes into the cache")
    p.add_argument("--region", action="append")
    p.add_argument("--api-key", help="scene provider API key")

    p = sub("slice", cmd_slice, "slice cached scenes into stored tiles")
    p.add_argument("--region", action="append")
    p.add_argument("--api-key", help="scene provider API key")

    p = sub("autolabel", cmd_autolabel, "label tiles with the pixel heuristic")
    p.add_argument("--region", action="append")
    p.add_argument("--annotator", default="heuristic")

    ds = subs.add_parser("dataset", help="training dataset export/import")
    ds_subs = ds.add_subparsers(dest="dataset_command", required=True)
    p = ds_subs.add_parser("export", help="write the fine-tune train/val JSONL")
    _add_common(p)
    p.add_argument("--region", help="default: the fine_tune region")
    p.add_argument("--cap", type=int, help="split size (default: tile budget)")
    p.set_defaults(func=cmd_dataset_export, needs_config=True)
    p = ds_subs.add_parser("import", help="read targets back from a JSONL file")
    _add_common(p, config_required=False)
    p.add_argument("path", type=Path)
    p.set_defaults(func=cmd_dataset_import, needs_config=False)

    p = sub("annotate-serve", cmd_annotate_serve,
            "serve the annotation API and UI", config_required=False)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8760)
    p.add_argument("--static", type=Path, help="built frontend directory")

    p = sub("finetune", cmd_finetune, "upload dataset and run a fine-tune job")
    p.add_argument("--train", type=Path, help="training JSONL override")
    p.add_argument("--api-key")

    p = sub("infer", cmd_infer, "run a model over stored tiles")
    p.add_argument("--model", help="default: last fine-tuned model on record")
    p.add_argument("--region", action="append")
    p.add_argument("--api-key")

    p = sub("evaluate", cmd_evaluate, "score predictions and write reports")
    p.add_argument("--region", action="append")
    p.add_argument("--source", help="source region for transfer deltas "
                                    "(default: the fine_tune region)")
    p.add_argument("--out", type=Path, help="report JSON path "
                                            "(CSV written alongside)")

    sub("report", cmd_report, "print the latest report as CSV",
        config_required=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.needs_config else None
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ws = Workspace(args.workdir)
    try:
        return args.func(args, config, ws)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PvAtlasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL


if __name__ == "__main__":
    sys.exit(main())
