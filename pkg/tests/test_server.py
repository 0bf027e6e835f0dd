import numpy as np
import pytest
from fastapi.testclient import TestClient

from pv_atlas.dataset import LabelStore
from pv_atlas.imagery import TileStore, encode_png
from pv_atlas.server import create_app
from pv_atlas.timeutil import FixedClock

from conftest import T0, random_raster
from test_imagery import make_scene
from pv_atlas.imagery import slice_scene


@pytest.fixture
def app_client(tmp_ws):
    rng = np.random.default_rng(41)
    store = TileStore(tmp_ws.tiles_dir)
    tiles = slice_scene(make_scene(random_raster(rng)))
    store.put_tiles("demo", tiles)
    app = create_app(tmp_ws, clock=FixedClock(T0))
    with TestClient(app) as client:
        yield client, tiles, tmp_ws


def good_label(present=True) -> dict:
    if present:
        return {"present": True, "location": "top-left", "quantity": "0 to 1",
                "annotator_id": "a1"}
    return {"present": False, "location": "NA", "quantity": "NA",
            "annotator_id": "a1"}


def test_vocab_lists_full_vocabulary(app_client):
    client, _, _ = app_client
    body = client.get("/api/vocab").json()
    assert body["locations"] == ["left", "right", "bottom", "top", "top-left",
                                 "top-right", "bottom-right", "bottom-left",
                                 "center", "NA"]
    assert body["quantities"] == ["0 to 1", "1 to 5", "5 to 10", "10 to inf",
                                  "NA"]


def test_tile_listing_pages_and_filters(app_client):
    client, tiles, _ = app_client
    body = client.get("/api/tiles", params={"limit": 5}).json()
    assert body["total"] == 16
    assert len(body["tiles"]) == 5
    assert body["tiles"][0]["tile_id"] == sorted(t.tile_id for t in tiles)[0]
    assert body["tiles"][0]["label"] is None

    rest = client.get("/api/tiles", params={"offset": 15, "limit": 5}).json()
    assert len(rest["tiles"]) == 1

    none = client.get("/api/tiles", params={"region": "elsewhere"}).json()
    assert none["total"] == 0


def test_status_filter_tracks_labeling(app_client):
    client, tiles, _ = app_client
    target = sorted(t.tile_id for t in tiles)[0]
    assert client.get("/api/tiles",
                      params={"status": "labeled"}).json()["total"] == 0
    resp = client.post(f"/api/tiles/{target}/label", json=good_label())
    assert resp.status_code == 200
    labeled = client.get("/api/tiles", params={"status": "labeled"}).json()
    assert [t["tile_id"] for t in labeled["tiles"]] == [target]
    assert labeled["tiles"][0]["label"]["location"] == "top-left"
    unlabeled = client.get("/api/tiles", params={"status": "unlabeled"}).json()
    assert unlabeled["total"] == 15
    assert client.get("/api/tiles",
                      params={"status": "weird"}).status_code == 422


def test_tile_image_round_trip(app_client):
    client, tiles, _ = app_client
    resp = client.get(f"/api/tiles/{tiles[3].tile_id}/image")
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "image/png"
    assert resp.content == encode_png(tiles[3].pixels)
    assert client.get("/api/tiles/nope/image").status_code == 404


def test_label_submission_lands_in_store(app_client):
    client, tiles, ws = app_client
    target = tiles[0].tile_id
    resp = client.post(f"/api/tiles/{target}/label", json=good_label(False))
    assert resp.status_code == 200
    assert resp.json() == {"tile_id": target, "present": False,
                           "location": "NA", "quantity": "NA",
                           "annotator_id": "a1"}
    stored = LabelStore(ws.labels_path).load()
    assert stored[target].present is False
    assert stored[target].labeled_at == T0


def test_label_rejections(app_client):
    client, tiles, ws = app_client
    target = tiles[0].tile_id
    # coupling violation: absent but located
    bad = {"present": False, "location": "center", "quantity": "NA",
           "annotator_id": "a1"}
    resp = client.post(f"/api/tiles/{target}/label", json=bad)
    assert resp.status_code == 422
    assert "location=NA" in resp.json()["detail"] or \
        "NA" in resp.json()["detail"]
    # present without a location
    resp = client.post(f"/api/tiles/{target}/label", json={
        "present": True, "location": "NA", "quantity": "0 to 1",
        "annotator_id": "a1"})
    assert resp.status_code == 422
    # vocabulary violation
    resp = client.post(f"/api/tiles/{target}/label", json={
        "present": True, "location": "middle", "quantity": "0 to 1",
        "annotator_id": "a1"})
    assert resp.status_code == 422
    # unknown tile
    resp = client.post("/api/tiles/ghost/label", json=good_label())
    assert resp.status_code == 404
    # nothing invalid was persisted
    assert LabelStore(ws.labels_path).load() == {}


def test_relabel_last_wins(app_client):
    client, tiles, ws = app_client
    target = tiles[0].tile_id
    client.post(f"/api/tiles/{target}/label", json=good_label(True))
    client.post(f"/api/tiles/{target}/label", json=good_label(False))
    stored = LabelStore(ws.labels_path).load()
    assert stored[target].present is False


def test_progress_counts(app_client):
    client, tiles, _ = app_client
    before = client.get("/api/progress").json()
    assert before == {"total": 16, "labeled": 0, "remaining": 16,
                      "regions": {"demo": {"total": 16, "labeled": 0}}}
    for tile in tiles[:3]:
        client.post(f"/api/tiles/{tile.tile_id}/label", json=good_label())
    after = client.get("/api/progress").json()
    assert after["labeled"] == 3
    assert after["remaining"] == 13


def test_bad_paging_rejected(app_client):
    client, _, _ = app_client
    assert client.get("/api/tiles", params={"offset": -1}).status_code == 422
    assert client.get("/api/tiles", params={"limit": 0}).status_code == 422


def test_static_dir_mounted(tmp_ws, tmp_path):
    static = tmp_path / "dist"
    static.mkdir()
    (static / "index.html").write_text("<html><body>annotate</body></html>")
    app = create_app(tmp_ws, static_dir=static, clock=FixedClock(T0))
    with TestClient(app) as client:
        resp = client.get("/")
        assert resp.status_code == 200
        assert "annotate" in resp.text
        assert client.get("/api/progress").status_code == 200
