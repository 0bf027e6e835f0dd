"""Overpass ingestion of rooftop-solar site coordinates, with snapshot provenance.

Every fetch records the exact query, endpoint, and export timestamp and
persists the raw response keyed by its content digest, so a site list can
always be re-derived without touching the network again.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import requests

from .errors import InvalidRegion, ParseError, TransportError, UpstreamError
from .timeutil import Clock, SYSTEM_CLOCK, isoformat_utc, parse_utc

EARTH_RADIUS_M = 6371000.0

DEFAULT_OVERPASS_URL = "https://overpass-api.de/api/interpreter"

# Standard OSM tagging for photovoltaic generators; overridable per campaign.
DEFAULT_SITE_TAGS: dict[str, str] = {"power": "generator", "generator:source": "solar"}

DEFAULT_DEDUPE_RADIUS_M = 25.0


class RegionRole(str, Enum):
    FINE_TUNE = "fine_tune"
    LARGE_SCALE_TEST = "large_scale_test"
    CROSS_REGIONAL_TEST = "cross_regional_test"
    CROSS_CONTINENTAL_TEST = "cross_continental_test"


@dataclass(frozen=True)
class RegionSpec:
    """One named campaign region with its bbox and evaluation role."""

    name: str
    continent: str
    bbox: tuple[float, float, float, float]  # (south, west, north, east), WGS84
    role: RegionRole
    target_tile_count: int

    def __post_init__(self):
        south, west, north, east = self.bbox
        if not self.name:
            raise InvalidRegion("region name must be nonempty")
        if not (south < north):
            raise InvalidRegion(f"{self.name}: south ({south}) must be < north ({north})")
        if not (west < east):
            raise InvalidRegion(f"{self.name}: west ({west}) must be < east ({east})")
        if not (-90.0 <= south <= 90.0 and -90.0 <= north <= 90.0):
            raise InvalidRegion(f"{self.name}: latitude outside [-90, 90]")
        if not (-180.0 <= west <= 180.0 and -180.0 <= east <= 180.0):
            raise InvalidRegion(f"{self.name}: longitude outside [-180, 180]")
        if self.target_tile_count <= 0:
            raise InvalidRegion(f"{self.name}: target_tile_count must be positive")


@dataclass(frozen=True)
class PvSiteRecord:
    """One deduplicated PV installation coordinate."""

    site_id: str  # "<element type>/<numeric id>"
    lat: float
    lon: float
    tags: Mapping[str, str]
    region_name: str


@dataclass(frozen=True)
class SnapshotManifest:
    """Provenance for one raw Overpass response."""

    query_text: str
    endpoint_url: str
    export_timestamp: datetime
    region_name: str
    site_count: int
    content_digest: str


def _fmt_coord(value: float) -> str:
    """Deterministic coordinate text: up to 6 decimals, at least 2."""
    text = f"{value:.6f}"
    head, frac = text.split(".")
    frac = frac.rstrip("0")
    if len(frac) < 2:
        frac = (frac + "00")[:2]
    return f"{head}.{frac}"


def build_overpass_query(region: RegionSpec,
                         tags: Mapping[str, str] | None = None) -> str:
    """Render the Overpass-QL query selecting solar generators in the bbox.

    Deterministic: the same region always yields byte-identical text.
    """
    tags = tags if tags is not None else DEFAULT_SITE_TAGS
    south, west, north, east = region.bbox
    bbox = ",".join(_fmt_coord(v) for v in (south, west, north, east))
    tag_filter = "".join(f'["{k}"="{v}"]' for k, v in tags.items())
    lines = ["[out:json][timeout:180];", "("]
    for element in ("node", "way", "relation"):
        lines.append(f"  {element}{tag_filter}({bbox});")
    lines.append(");")
    lines.append("out center;")
    return "\n".join(lines) + "\n"


PostFn = Callable[[str, str], tuple[int, bytes]]


def _requests_post(url: str, query: str) -> tuple[int, bytes]:
    try:
        resp = requests.post(url, data={"data": query}, timeout=300)
    except requests.RequestException as exc:
        raise TransportError(f"overpass request failed: {exc}") from exc
    return resp.status_code, resp.content


def _in_bbox(lat: float, lon: float, bbox: tuple[float, float, float, float]) -> bool:
    south, west, north, east = bbox
    return south <= lat <= north and west <= lon <= east


def parse_overpass_response(raw: bytes, region: RegionSpec) -> list[PvSiteRecord]:
    """Extract site records from a raw response body.

    Nodes use their own lat/lon; ways and relations use the center the
    query requested. Elements without usable coordinates, or with centers
    outside the region bbox, are dropped.
    """
    try:
        payload = json.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"overpass response is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ParseError("overpass response is not a JSON object")
    remark = payload.get("remark")
    if isinstance(remark, str) and "error" in remark.lower():
        raise UpstreamError(f"overpass error payload: {remark}")

    sites: list[PvSiteRecord] = []
    seen: set[str] = set()
    for element in payload.get("elements", []):
        etype = element.get("type")
        eid = element.get("id")
        if etype is None or eid is None:
            continue
        if etype == "node":
            lat, lon = element.get("lat"), element.get("lon")
        else:
            center = element.get("center") or {}
            lat, lon = center.get("lat"), center.get("lon")
        if lat is None or lon is None:
            continue
        if not _in_bbox(lat, lon, region.bbox):
            continue
        site_id = f"{etype}/{eid}"
        if site_id in seen:
            continue
        seen.add(site_id)
        sites.append(PvSiteRecord(
            site_id=site_id,
            lat=float(lat),
            lon=float(lon),
            tags=dict(element.get("tags") or {}),
            region_name=region.name,
        ))
    return sites


def fetch_pv_sites(region: RegionSpec, endpoint_url: str,
                   post: PostFn | None = None,
                   tags: Mapping[str, str] | None = None,
                   clock: Clock = SYSTEM_CLOCK,
                   store: "SnapshotStore | None" = None,
                   ) -> tuple[list[PvSiteRecord], SnapshotManifest]:
    """Run the region query and return its sites plus a provenance manifest.

    `post` is the transport; tests and recorded replays substitute it.
    When a SnapshotStore is given, the raw response, manifest, and parsed
    sites are persisted before returning.
    """
    query = build_overpass_query(region, tags=tags)
    status, raw = (post or _requests_post)(endpoint_url, query)
    if not (200 <= status < 300):
        raise UpstreamError(f"overpass returned HTTP {status}", status_code=status)
    sites = parse_overpass_response(raw, region)
    manifest = SnapshotManifest(
        query_text=query,
        endpoint_url=endpoint_url,
        export_timestamp=clock.now(),
        region_name=region.name,
        site_count=len(sites),
        content_digest=hashlib.sha256(raw).hexdigest(),
    )
    if store is not None:
        store.persist(manifest, sites, raw)
    return sites, manifest


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters on the mean-radius sphere."""
    phi1 = math.radians(lat1)
    phi2 = math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    a = (math.sin(dphi / 2.0) ** 2
         + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, a)))


def dedupe_sites(sites: Sequence[PvSiteRecord],
                 radius_m: float = DEFAULT_DEDUPE_RADIUS_M) -> list[PvSiteRecord]:
    """Greedy dedup in input order.

    A site is dropped when it lies strictly closer than radius_m to any
    already-retained site; radius 0 therefore retains everything.
    """
    if radius_m < 0:
        raise ValueError("radius_m must be >= 0")
    retained: list[PvSiteRecord] = []
    for site in sites:
        close = any(
            haversine_m(site.lat, site.lon, kept.lat, kept.lon) < radius_m
            for kept in retained)
        if not close:
            retained.append(site)
    return retained


class SnapshotStore:
    """On-disk snapshot layout: <root>/<region>/{raw,snapshot}_<digest>.json.

    Raw responses are stored verbatim, keyed by content digest; the
    snapshot file carries the manifest plus the parsed site records, so
    every persisted site is reachable from exactly one manifest.
    """

    def __init__(self, root: Path):
        self.root = Path(root)

    def _region_dir(self, region_name: str) -> Path:
        return self.root / region_name

    def persist(self, manifest: SnapshotManifest, sites: Sequence[PvSiteRecord],
                raw: bytes) -> Path:
        region_dir = self._region_dir(manifest.region_name)
        region_dir.mkdir(parents=True, exist_ok=True)
        digest = manifest.content_digest
        (region_dir / f"raw_{digest}.json").write_bytes(raw)
        snapshot = {
            "manifest": {
                "query_text": manifest.query_text,
                "endpoint_url": manifest.endpoint_url,
                "export_timestamp": isoformat_utc(manifest.export_timestamp),
                "region_name": manifest.region_name,
                "site_count": manifest.site_count,
                "content_digest": digest,
            },
            "sites": [
                {"site_id": s.site_id, "lat": s.lat, "lon": s.lon,
                 "tags": dict(s.tags), "region_name": s.region_name}
                for s in sites
            ],
        }
        path = region_dir / f"snapshot_{digest}.json"
        path.write_text(json.dumps(snapshot, sort_keys=True, ensure_ascii=False,
                                   separators=(",", ":")) + "\n", encoding="utf-8")
        return path

    def list_snapshots(self, region_name: str) -> list[Path]:
        region_dir = self._region_dir(region_name)
        if not region_dir.is_dir():
            return []
        return sorted(region_dir.glob("snapshot_*.json"))

    def load(self, path: Path) -> tuple[SnapshotManifest, list[PvSiteRecord]]:
        payload = json.loads(path.read_text(encoding="utf-8"))
        m = payload["manifest"]
        manifest = SnapshotManifest(
            query_text=m["query_text"],
            endpoint_url=m["endpoint_url"],
            export_timestamp=parse_utc(m["export_timestamp"]),
            region_name=m["region_name"],
            site_count=m["site_count"],
            content_digest=m["content_digest"],
        )
        sites = [
            PvSiteRecord(site_id=s["site_id"], lat=s["lat"], lon=s["lon"],
                         tags=s.get("tags", {}), region_name=s["region_name"])
            for s in payload["sites"]
        ]
        return manifest, sites

    def latest(self, region_name: str) -> tuple[SnapshotManifest, list[PvSiteRecord]] | None:
        snapshots = self.list_snapshots(region_name)
        if not snapshots:
            return None
        best = max(snapshots, key=lambda p: self.load(p)[0].export_timestamp)
        return self.load(best)
