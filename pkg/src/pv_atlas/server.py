"""HTTP annotation service for tile labeling.

Serves tile listings and images out of a workspace, accepts label
submissions into the append-only label store, and reports labeling
progress. A built frontend directory, when present, is mounted at the
root path.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import dataset as dataset_mod
from . import imagery
from .config import Workspace
from .errors import InconsistentLabel, PortInUse
from .schema import (LOCATION_VALUES, QUANTITY_VALUES, LocationClass,
                     QuantityBin, TileLabel)
from .timeutil import Clock, SYSTEM_CLOCK


class LabelIn(BaseModel):
    present: bool
    location: str
    quantity: str
    annotator_id: str = "anonymous"


def create_app(ws: Workspace, static_dir: Path | None = None,
               clock: Clock = SYSTEM_CLOCK) -> FastAPI:
    app = FastAPI(title="pv-atlas annotation")
    tile_store = imagery.TileStore(ws.tiles_dir)
    store = dataset_mod.LabelStore(ws.labels_path)

    def region_of_or_404(tile_id: str) -> str:
        region = tile_store.region_of(tile_id)
        if region is None:
            raise HTTPException(status_code=404, detail=f"unknown tile {tile_id}")
        return region

    @app.get("/api/vocab")
    def vocab() -> dict:
        return {"locations": list(LOCATION_VALUES),
                "quantities": list(QUANTITY_VALUES)}

    @app.get("/api/tiles")
    def list_tiles(region: str | None = None, offset: int = 0,
                   limit: int = 50, status: str | None = None) -> dict:
        if offset < 0 or limit < 1:
            raise HTTPException(status_code=422,
                                detail="offset must be >= 0 and limit >= 1")
        if status not in (None, "unlabeled", "labeled"):
            raise HTTPException(status_code=422,
                                detail="status must be unlabeled or labeled")
        labels = store.load()
        regions = [region] if region else tile_store.regions()
        rows = []
        for name in regions:
            index = tile_store.load_index(name)
            for tile_id in sorted(index):
                label = labels.get(tile_id)
                if status == "unlabeled" and label is not None:
                    continue
                if status == "labeled" and label is None:
                    continue
                entry = {"tile_id": tile_id, "region": name,
                         "row": index[tile_id]["row"],
                         "col": index[tile_id]["col"],
                         "label": None}
                if label is not None:
                    entry["label"] = {"present": label.present,
                                      "location": label.location.value,
                                      "quantity": label.quantity.value,
                                      "annotator_id": label.annotator_id}
                rows.append(entry)
        return {"total": len(rows), "offset": offset, "limit": limit,
                "tiles": rows[offset:offset + limit]}

    @app.get("/api/tiles/{tile_id}/image")
    def tile_image(tile_id: str) -> Response:
        region = region_of_or_404(tile_id)
        return Response(content=tile_store.tile_png(region, tile_id),
                        media_type="image/png")

    @app.post("/api/tiles/{tile_id}/label")
    def submit_label(tile_id: str, body: LabelIn) -> dict:
        region_of_or_404(tile_id)
        try:
            label = TileLabel(
                tile_id=tile_id,
                present=body.present,
                location=LocationClass(body.location),
                quantity=QuantityBin(body.quantity),
                annotator_id=body.annotator_id,
                labeled_at=clock.now(),
            )
            store.append(label)
        except ValueError as exc:
            raise HTTPException(status_code=422,
                                detail=f"unknown vocabulary value: {exc}")
        except InconsistentLabel as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"tile_id": tile_id, "present": label.present,
                "location": label.location.value,
                "quantity": label.quantity.value,
                "annotator_id": label.annotator_id}

    @app.get("/api/progress")
    def progress() -> dict:
        labels = store.load()
        per_region = {}
        total = labeled = 0
        for name in tile_store.regions():
            ids = tile_store.tile_ids(name)
            done = sum(1 for tid in ids if tid in labels)
            per_region[name] = {"total": len(ids), "labeled": done}
            total += len(ids)
            labeled += done
        return {"total": total, "labeled": labeled,
                "remaining": total - labeled, "regions": per_region}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="ui")
    return app


def serve(ws: Workspace, host: str = "127.0.0.1", port: int = 8760,
          static_dir: Path | None = None) -> None:
    """Run the annotation server until interrupted."""
    import uvicorn

    app = create_app(ws, static_dir=static_dir)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except OSError as exc:
        if getattr(exc, "errno", None) in (48, 98):
            raise PortInUse(f"port {port} on {host} is already bound") from exc
        raise
