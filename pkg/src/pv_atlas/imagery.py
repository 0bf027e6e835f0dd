"""Scene fetching, caching, and deterministic 4x4 tiling.

Scenes are fetched at fixed parameters (satellite maptype, zoom 20,
400x400 px) centered on each PV site, cached on disk as PNG plus a JSON
metadata sidecar, and sliced into 16 disjoint 100x100 tiles whose
geo-centers come from the Web Mercator pixel transform.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import requests
from PIL import Image

from .errors import (DecodeError, EncodeError, IndivisibleScene,
                     LatitudeOutOfRange, PvAtlasError, TransportError,
                     UpstreamError)
from .geo_ingest import PvSiteRecord
from .ratelimit import TokenBucket
from .timeutil import Clock, SYSTEM_CLOCK, isoformat_utc, parse_utc

SCENE_ZOOM = 20
SCENE_SIZE_PX = 400
GRID_DIM = 4
TILE_SIZE_PX = SCENE_SIZE_PX // GRID_DIM
SCENE_MAPTYPE = "satellite"

WORLD_TILE_PX = 256
MAX_MERCATOR_LAT = 85.05113
EQUATOR_M_PER_PX_Z0 = 156543.03392


@dataclass(frozen=True)
class SceneImage:
    """One decoded satellite scene plus its request metadata."""

    scene_id: str
    center_lat: float
    center_lon: float
    zoom: int
    width_px: int
    height_px: int
    pixels: np.ndarray  # (height, width, 3) uint8 RGB
    fetched_at: datetime
    provider_params: Mapping[str, str]


@dataclass(frozen=True)
class Tile:
    """One 100x100 cell of a scene's 4x4 grid, row-major ids."""

    tile_id: str  # "<scene_id>_r<row>c<col>"
    scene_id: str
    row: int
    col: int
    pixels: np.ndarray  # (tile_h, tile_w, 3) uint8 RGB
    geo_center_lat: float
    geo_center_lon: float


def scene_request_params(lat: float, lon: float, zoom: int = SCENE_ZOOM,
                         size: tuple[int, int] = (SCENE_SIZE_PX, SCENE_SIZE_PX),
                         maptype: str = SCENE_MAPTYPE) -> dict[str, str]:
    """Static-maps request parameters, minus the API key."""
    return {
        "center": f"{lat:.6f},{lon:.6f}",
        "zoom": str(zoom),
        "size": f"{size[0]}x{size[1]}",
        "maptype": maptype,
    }


def scene_id_for_params(params: Mapping[str, str]) -> str:
    """Cache key: digest over coordinates rounded to 1e-6 plus fixed params.

    Rounding happens in scene_request_params formatting, so float noise in
    upstream arithmetic cannot split the cache.
    """
    canonical = "|".join(f"{k}={params[k]}" for k in sorted(params) if k != "key")
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:20]


def scene_id_for_site(site: PvSiteRecord, zoom: int = SCENE_ZOOM,
                      size: tuple[int, int] = (SCENE_SIZE_PX, SCENE_SIZE_PX),
                      maptype: str = SCENE_MAPTYPE) -> str:
    return scene_id_for_params(scene_request_params(site.lat, site.lon, zoom, size, maptype))


def decode_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DecodeError(f"could not decode image bytes: {exc}") from exc


def encode_png(pixels: np.ndarray) -> bytes:
    """Deterministic PNG encoding of an RGB uint8 raster."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.size == 0:
        raise EncodeError(f"expected nonempty (h, w, 3) raster, got shape {pixels.shape}")
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


# --- providers ----------------------------------------------------------------

class SceneProvider(Protocol):
    def fetch(self, params: Mapping[str, str], api_key: str) -> bytes:
        """Return encoded image bytes for the given request parameters."""
        ...


class StaticMapsProvider:
    """Live HTTPS provider for any static-maps-compatible endpoint."""

    def __init__(self, base_url: str, session: requests.Session | None = None,
                 rate: TokenBucket | None = None):
        self.base_url = base_url
        self.session = session or requests.Session()
        self.rate = rate

    def fetch(self, params: Mapping[str, str], api_key: str) -> bytes:
        if self.rate is not None:
            self.rate.acquire()
        query = dict(params)
        if api_key:
            query["key"] = api_key
        try:
            resp = self.session.get(self.base_url, params=query, timeout=60)
        except requests.RequestException as exc:
            raise TransportError(f"scene request failed: {exc}") from exc
        if resp.status_code != 200:
            raise UpstreamError(f"scene provider returned HTTP {resp.status_code}",
                                status_code=resp.status_code)
        return resp.content


class FixtureSceneProvider:
    """Serves pre-recorded scenes from a directory of <scene_id>.png files."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def fetch(self, params: Mapping[str, str], api_key: str) -> bytes:
        path = self.root / f"{scene_id_for_params(params)}.png"
        if not path.is_file():
            raise UpstreamError(f"no fixture scene for params {dict(params)!r}")
        return path.read_bytes()


class SyntheticSceneProvider:
    """Deterministic raster generator keyed by the request parameters.

    Paints a light rooftop-toned background and a parameter-seeded number
    of dark rectangular blocks, so downstream heuristics have something to
    find. Same params + seed always produce identical bytes.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def fetch(self, params: Mapping[str, str], api_key: str) -> bytes:
        w, h = (int(v) for v in params["size"].split("x"))
        key = scene_id_for_params(params)
        rng = np.random.default_rng(
            (int(key, 16) + self.seed) % (2 ** 63))
        base = rng.integers(140, 210, size=(h, w, 3), dtype=np.uint8)
        # blotchy texture so tiles are not uniform
        for _ in range(12):
            y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
            bh, bw = int(rng.integers(20, 80)), int(rng.integers(20, 80))
            tone = rng.integers(120, 230, size=3, dtype=np.uint8)
            base[y:min(h, y + bh), x:min(w, x + bw)] = tone
        # dark panel-like blocks, sized so several tiles clear a few
        # percent of coverage while others stay empty
        for _ in range(int(rng.integers(2, 10))):
            y, x = int(rng.integers(0, h - 40)), int(rng.integers(0, w - 48))
            bh, bw = int(rng.integers(16, 40)), int(rng.integers(20, 48))
            shade = int(rng.integers(15, 45))
            base[y:y + bh, x:x + bw] = (shade, shade, min(255, shade + 45))
        return encode_png(base)


# --- cache --------------------------------------------------------------------

class SceneCache:
    """Disk cache: <root>/<scene_id>.png plus <scene_id>.json sidecar.

    Reads are lock-free; writes for the same key are serialized so a
    concurrent fetch cannot interleave a half-written pair.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()
        self.hits = 0

    def _png_path(self, scene_id: str) -> Path:
        return self.root / f"{scene_id}.png"

    def _meta_path(self, scene_id: str) -> Path:
        return self.root / f"{scene_id}.json"

    def has(self, scene_id: str) -> bool:
        return self._png_path(scene_id).is_file() and self._meta_path(scene_id).is_file()

    def get(self, scene_id: str) -> SceneImage | None:
        if not self.has(scene_id):
            return None
        with self._write_lock:
            self.hits += 1
        meta = json.loads(self._meta_path(scene_id).read_text(encoding="utf-8"))
        pixels = decode_png(self._png_path(scene_id).read_bytes())
        return SceneImage(
            scene_id=scene_id,
            center_lat=meta["center_lat"],
            center_lon=meta["center_lon"],
            zoom=meta["zoom"],
            width_px=meta["width_px"],
            height_px=meta["height_px"],
            pixels=pixels,
            fetched_at=parse_utc(meta["fetched_at"]),
            provider_params=meta["provider_params"],
        )

    def put(self, scene: SceneImage, png_bytes: bytes) -> None:
        meta = {
            "scene_id": scene.scene_id,
            "center_lat": scene.center_lat,
            "center_lon": scene.center_lon,
            "zoom": scene.zoom,
            "width_px": scene.width_px,
            "height_px": scene.height_px,
            "fetched_at": isoformat_utc(scene.fetched_at),
            "provider_params": dict(scene.provider_params),
        }
        with self._write_lock:
            self._png_path(scene.scene_id).write_bytes(png_bytes)
            self._meta_path(scene.scene_id).write_text(
                json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n",
                encoding="utf-8")


# --- fetching -----------------------------------------------------------------

def fetch_scene(site: PvSiteRecord, api_key: str, provider: SceneProvider,
                cache: SceneCache | None = None, clock: Clock = SYSTEM_CLOCK,
                zoom: int = SCENE_ZOOM,
                size: tuple[int, int] = (SCENE_SIZE_PX, SCENE_SIZE_PX),
                maptype: str = SCENE_MAPTYPE) -> SceneImage:
    """Fetch (or serve from cache) the scene centered on a PV site.

    Repeated calls for the same site are cache hits with byte-identical
    pixels and no provider I/O.
    """
    params = scene_request_params(site.lat, site.lon, zoom, size, maptype)
    scene_id = scene_id_for_params(params)
    if cache is not None:
        cached = cache.get(scene_id)
        if cached is not None:
            return cached
    raw = provider.fetch(params, api_key)
    pixels = decode_png(raw)
    scene = SceneImage(
        scene_id=scene_id,
        center_lat=site.lat,
        center_lon=site.lon,
        zoom=zoom,
        width_px=pixels.shape[1],
        height_px=pixels.shape[0],
        pixels=pixels,
        fetched_at=clock.now(),
        provider_params=params,
    )
    if cache is not None:
        cache.put(scene, encode_png(pixels))
    return scene


def fetch_scenes(sites: Sequence[PvSiteRecord], api_key: str,
                 provider: SceneProvider, cache: SceneCache | None = None,
                 clock: Clock = SYSTEM_CLOCK, parallelism: int = 4,
                 rate: TokenBucket | None = None,
                 ) -> tuple[dict[str, SceneImage], dict[str, PvAtlasError]]:
    """Fetch many scenes with bounded concurrency.

    Returns (site_id -> scene, site_id -> error); the rate limiter, when
    given, gates provider calls but not cache hits.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    scenes: dict[str, SceneImage] = {}
    failures: dict[str, PvAtlasError] = {}
    lock = threading.Lock()

    def one(site: PvSiteRecord) -> None:
        try:
            params = scene_request_params(site.lat, site.lon)
            hit = cache is not None and cache.has(scene_id_for_params(params))
            if not hit and rate is not None:
                rate.acquire()
            scene = fetch_scene(site, api_key, provider, cache, clock)
        except PvAtlasError as exc:
            with lock:
                failures[site.site_id] = exc
        else:
            with lock:
                scenes[site.site_id] = scene

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        list(pool.map(one, sites))
    return scenes, failures


# --- tiling -------------------------------------------------------------------

def slice_scene(scene: SceneImage) -> list[Tile]:
    """Slice a scene into its 16 tiles, row-major (r0c0, r0c1, ... r3c3).

    Tile pixel windows are copies; concatenating them back in row-major
    order reproduces the scene exactly.
    """
    w, h = scene.width_px, scene.height_px
    if w % GRID_DIM != 0 or h % GRID_DIM != 0:
        raise IndivisibleScene(f"scene {scene.scene_id} is {w}x{h}; "
                               f"dimensions must divide by {GRID_DIM}")
    tile_w, tile_h = w // GRID_DIM, h // GRID_DIM
    tiles: list[Tile] = []
    for row in range(GRID_DIM):
        for col in range(GRID_DIM):
            window = scene.pixels[row * tile_h:(row + 1) * tile_h,
                                  col * tile_w:(col + 1) * tile_w].copy()
            lat, lon = tile_geo_center(scene, row, col)
            tiles.append(Tile(
                tile_id=f"{scene.scene_id}_r{row}c{col}",
                scene_id=scene.scene_id,
                row=row,
                col=col,
                pixels=window,
                geo_center_lat=lat,
                geo_center_lon=lon,
            ))
    return tiles


def reassemble(tiles: Sequence[Tile]) -> np.ndarray:
    """Inverse of slice_scene for round-trip checks."""
    ordered = sorted(tiles, key=lambda t: (t.row, t.col))
    rows = [np.concatenate([t.pixels for t in ordered[r * GRID_DIM:(r + 1) * GRID_DIM]], axis=1)
            for r in range(GRID_DIM)]
    return np.concatenate(rows, axis=0)


def _world_px(lat: float, lon: float, zoom: int) -> tuple[float, float]:
    size = WORLD_TILE_PX * (2 ** zoom)
    x = (lon + 180.0) / 360.0 * size
    s = math.sin(math.radians(lat))
    y = (0.5 - math.log((1.0 + s) / (1.0 - s)) / (4.0 * math.pi)) * size
    return x, y


def _world_px_inverse(x: float, y: float, zoom: int) -> tuple[float, float]:
    size = WORLD_TILE_PX * (2 ** zoom)
    lon = x / size * 360.0 - 180.0
    n = math.pi - 2.0 * math.pi * y / size
    lat = math.degrees(math.atan(math.sinh(n)))
    return lat, lon


def tile_geo_center(scene: SceneImage, row: int, col: int) -> tuple[float, float]:
    """Geo coordinates of a tile center via the Web Mercator pixel plane."""
    if not (0 <= row < GRID_DIM and 0 <= col < GRID_DIM):
        raise ValueError(f"row/col must be in [0, {GRID_DIM}), got ({row}, {col})")
    tile_w = scene.width_px / GRID_DIM
    tile_h = scene.height_px / GRID_DIM
    cx, cy = _world_px(scene.center_lat, scene.center_lon, scene.zoom)
    dx = col * tile_w + tile_w / 2.0 - scene.width_px / 2.0
    dy = row * tile_h + tile_h / 2.0 - scene.height_px / 2.0
    return _world_px_inverse(cx + dx, cy + dy, scene.zoom)


def ground_resolution(lat: float, zoom: int) -> float:
    """Meters per pixel at a latitude and zoom on the Web Mercator plane."""
    if abs(lat) >= MAX_MERCATOR_LAT:
        raise LatitudeOutOfRange(f"|lat| must be < {MAX_MERCATOR_LAT}, got {lat}")
    return EQUATOR_M_PER_PX_Z0 * math.cos(math.radians(lat)) / (2 ** zoom)


# --- tile persistence ---------------------------------------------------------

class TileStore:
    """Sliced-tile persistence: PNG per tile plus one JSON index per region.

    Layout: <root>/<region>/<tile_id>.png and <root>/<region>/index.json.
    The index maps tile_id to its scene, grid position, and geo-center.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _index_path(self, region_name: str) -> Path:
        return self.root / region_name / "index.json"

    def put_tiles(self, region_name: str, tiles: Sequence[Tile]) -> int:
        region_dir = self.root / region_name
        region_dir.mkdir(parents=True, exist_ok=True)
        index = self.load_index(region_name)
        for tile in tiles:
            png_path = region_dir / f"{tile.tile_id}.png"
            if not png_path.exists():
                png_path.write_bytes(encode_png(tile.pixels))
            index[tile.tile_id] = {
                "scene_id": tile.scene_id,
                "row": tile.row,
                "col": tile.col,
                "geo_center_lat": tile.geo_center_lat,
                "geo_center_lon": tile.geo_center_lon,
            }
        self._index_path(region_name).write_text(
            json.dumps(index, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8")
        return len(tiles)

    def load_index(self, region_name: str) -> dict[str, dict]:
        path = self._index_path(region_name)
        if not path.is_file():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def regions(self) -> list[str]:
        return sorted(p.parent.name for p in self.root.glob("*/index.json"))

    def tile_ids(self, region_name: str) -> list[str]:
        return sorted(self.load_index(region_name))

    def get_tile(self, region_name: str, tile_id: str) -> Tile:
        entry = self.load_index(region_name).get(tile_id)
        png_path = self.root / region_name / f"{tile_id}.png"
        if entry is None or not png_path.is_file():
            raise KeyError(tile_id)
        return Tile(
            tile_id=tile_id,
            scene_id=entry["scene_id"],
            row=entry["row"],
            col=entry["col"],
            pixels=decode_png(png_path.read_bytes()),
            geo_center_lat=entry["geo_center_lat"],
            geo_center_lon=entry["geo_center_lon"],
        )

    def tile_png(self, region_name: str, tile_id: str) -> bytes:
        png_path = self.root / region_name / f"{tile_id}.png"
        if not png_path.is_file():
            raise KeyError(tile_id)
        return png_path.read_bytes()

    def iter_tiles(self, region_name: str):
        for tile_id in self.tile_ids(region_name):
            yield self.get_tile(region_name, tile_id)

    def region_of(self, tile_id: str) -> str | None:
        for region in self.regions():
            if tile_id in self.load_index(region):
                return region
        return None
