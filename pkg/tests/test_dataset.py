import json

import pytest

from pv_atlas.dataset import (DatasetSplit, LabelStore, assign_split,
                              export_training_jsonl,
                              import_annotations, import_training_jsonl,
                              labels_to_targets, split_train_val)
from pv_atlas.errors import (InconsistentLabel, InsufficientTiles,
                             MissingLabel, MissingTile, ParseError)
from pv_atlas.geo_ingest import RegionRole
from pv_atlas.schema import LocationClass, QuantityBin

from conftest import T0, make_label
from test_geo_ingest import region


# --- label store --------------------------------------------------------------

def test_store_append_load_round_trip(tmp_path):
    store = LabelStore(tmp_path / "labels.jsonl")
    a = make_label("t1", True, LocationClass.CENTER, QuantityBin.ONE_TO_FIVE)
    b = make_label("t2", False)
    store.append(a)
    store.append(b)
    assert store.load() == {"t1": a, "t2": b}
    assert store.count() == 2


def test_store_last_record_wins(tmp_path):
    store = LabelStore(tmp_path / "labels.jsonl")
    store.append(make_label("t1", True))
    relabeled = make_label("t1", False)
    store.append(relabeled)
    assert store.load() == {"t1": relabeled}
    # the log keeps both physical lines
    assert len((tmp_path / "labels.jsonl").read_text().splitlines()) == 2


def test_store_rejects_inconsistent_label(tmp_path):
    from pv_atlas.schema import TileLabel
    store = LabelStore(tmp_path / "labels.jsonl")
    bad = TileLabel(tile_id="t1", present=False,
                    location=LocationClass.CENTER,
                    quantity=QuantityBin.NA, annotator_id="a", labeled_at=T0)
    with pytest.raises(InconsistentLabel):
        store.append(bad)
    assert not (tmp_path / "labels.jsonl").exists() or \
        (tmp_path / "labels.jsonl").read_text() == ""


def test_store_load_missing_file_is_empty(tmp_path):
    assert LabelStore(tmp_path / "nope.jsonl").load() == {}


# --- annotation import --------------------------------------------------------

def test_import_keeps_file_order_and_duplicates(tmp_path):
    store = LabelStore(tmp_path / "labels.jsonl")
    first = make_label("t1", True)
    second = make_label("t1", False)
    store.append(first)
    store.append(second)
    assert import_annotations(store.path) == [first, second]


def test_import_reports_line_of_bad_json(tmp_path):
    path = tmp_path / "ann.jsonl"
    store = LabelStore(path)
    store.append(make_label("t1", True))
    with path.open("a") as fh:
        fh.write("{oops\n")
    with pytest.raises(ParseError) as err:
        import_annotations(path)
    assert err.value.line == 2


def test_import_reports_line_of_coupling_violation(tmp_path):
    path = tmp_path / "ann.jsonl"
    store = LabelStore(path)
    store.append(make_label("t1", True))
    record = json.loads(path.read_text())
    record["present"] = False  # location stays top-left
    with path.open("a") as fh:
        fh.write(json.dumps(record) + "\n")
    with pytest.raises(InconsistentLabel) as err:
        import_annotations(path)
    assert err.value.line == 2


def test_import_skips_blank_lines(tmp_path):
    path = tmp_path / "ann.jsonl"
    store = LabelStore(path)
    store.append(make_label("t1", True))
    with path.open("a") as fh:
        fh.write("\n\n")
    store.append(make_label("t2", False))
    assert [l.tile_id for l in import_annotations(path)] == ["t1", "t2"]


# --- split assignment ---------------------------------------------------------

def test_assign_split_is_order_independent_and_seeded():
    tiles = [f"t{i:03d}" for i in range(40)]
    r = region(name="alpha", target_tile_count=16)
    a = assign_split(tiles, r, seed=3, cap=16)
    b = assign_split(list(reversed(tiles)), r, seed=3, cap=16)
    assert a == b
    assert a.name == "alpha-fine_tune"
    assert a.role is RegionRole.FINE_TUNE
    assert a.region_name == "alpha"
    assert len(a.tile_ids) == 16
    assert len(set(a.tile_ids)) == 16
    c = assign_split(tiles, r, seed=4, cap=16)
    assert c.tile_ids != a.tile_ids


def test_assign_split_rejects_short_supply_and_dupes():
    r = region(name="alpha")
    with pytest.raises(InsufficientTiles):
        assign_split(["t1", "t2"], r, seed=0, cap=3)
    with pytest.raises(ValueError):
        assign_split(["t1", "t1", "t2"], r, seed=0, cap=2)
    with pytest.raises(ValueError):
        assign_split(["t1"], r, seed=0, cap=0)


def test_split_train_val_fractions():
    items = list(range(10))
    train, val = split_train_val(items, 0.2, seed=1)
    assert len(train) == 8 and len(val) == 2
    assert sorted(train + val) == items
    again_train, again_val = split_train_val(items, 0.2, seed=1)
    assert (train, val) == (again_train, again_val)
    all_train, no_val = split_train_val(items, 0.0, seed=1)
    assert len(all_train) == 10 and no_val == []
    with pytest.raises(ValueError):
        split_train_val(items, 1.0)


# --- training jsonl -----------------------------------------------------------

def sample_labels(n=6) -> dict:
    grid = [v for v in LocationClass if v is not LocationClass.NA]
    bins = [v for v in QuantityBin if v is not QuantityBin.NA]
    labels = {}
    for i in range(n):
        tile_id = f"t{i:02d}"
        if i % 3 == 0:
            labels[tile_id] = make_label(tile_id, False)
        else:
            labels[tile_id] = make_label(tile_id, True, grid[i % len(grid)],
                                         bins[i % len(bins)])
    return labels


def test_export_round_trip_reproduces_labels(tmp_path):
    labels = sample_labels()
    split = DatasetSplit(name="alpha-fine_tune", role=RegionRole.FINE_TUNE,
                         tile_ids=tuple(sorted(labels)), region_name="alpha")
    path = tmp_path / "train.jsonl"
    n = export_training_jsonl(split, labels, lambda tid: b"png-" + tid.encode(),
                              path=path)
    assert n == len(labels)
    targets = import_training_jsonl(path)
    assert sorted(targets, key=lambda t: t.tile_id) == \
        labels_to_targets(labels.values())


def test_export_writes_in_split_order(tmp_path):
    labels = sample_labels(4)
    order = ("t02", "t00", "t03", "t01")
    split = DatasetSplit(name="s", role=RegionRole.FINE_TUNE,
                         tile_ids=order, region_name="alpha")
    path = tmp_path / "train.jsonl"
    export_training_jsonl(split, labels, lambda tid: b"x", path=path)
    seen = [t.tile_id for t in import_training_jsonl(path)]
    assert tuple(seen) == order


def test_every_line_is_independently_parseable(tmp_path):
    labels = sample_labels()
    split = DatasetSplit(name="s", role=RegionRole.FINE_TUNE,
                         tile_ids=tuple(sorted(labels)), region_name="alpha")
    path = tmp_path / "train.jsonl"
    export_training_jsonl(split, labels, lambda tid: b"x", path=path)
    for line in path.read_text().splitlines():
        record = json.loads(line)
        roles = [m["role"] for m in record["messages"]]
        assert roles == ["system", "user", "assistant"]
        json.loads(record["messages"][2]["content"])  # target is strict JSON


def test_export_missing_label_or_tile(tmp_path):
    labels = sample_labels(2)
    split = DatasetSplit(name="s", role=RegionRole.FINE_TUNE,
                         tile_ids=("t00", "t01", "t99"), region_name="alpha")
    with pytest.raises(MissingLabel):
        export_training_jsonl(split, labels, lambda tid: b"x",
                              path=tmp_path / "a.jsonl")

    def lookup(tile_id):
        raise KeyError(tile_id)

    split2 = DatasetSplit(name="s", role=RegionRole.FINE_TUNE,
                          tile_ids=("t00",), region_name="alpha")
    with pytest.raises(MissingTile):
        export_training_jsonl(split2, labels, lookup, path=tmp_path / "b.jsonl")


def test_import_rejects_broken_lines(tmp_path):
    path = tmp_path / "train.jsonl"
    path.write_text('{"messages": "not a list"}\n')
    with pytest.raises(ParseError):
        import_training_jsonl(path)
    path.write_text('{"messages": [{"role": "user", "content": "no id"}]}\n')
    with pytest.raises(ParseError):
        import_training_jsonl(path)
    path.write_text(json.dumps({"messages": [
        {"role": "user", "content": "tile_id=t1\nx"}]}) + "\n")
    with pytest.raises(ParseError):
        import_training_jsonl(path)  # missing assistant turn


def test_import_rejects_corrupt_target(tmp_path):
    labels = sample_labels(1)
    split = DatasetSplit(name="s", role=RegionRole.FINE_TUNE,
                         tile_ids=("t00",), region_name="alpha")
    path = tmp_path / "train.jsonl"
    export_training_jsonl(split, labels, lambda tid: b"x", path=path)
    record = json.loads(path.read_text())
    record["messages"][2]["content"] = '{"solar_panels_present": false}'
    path.write_text(json.dumps(record) + "\n")
    with pytest.raises(InconsistentLabel) as err:
        import_training_jsonl(path)
    assert err.value.line == 1
