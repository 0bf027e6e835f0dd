import hashlib
import json
import math
from datetime import timedelta

import numpy as np
import pytest

from pv_atlas.errors import (ConfigError, EmptyCompletion, EmptyInput,
                             InvalidProbability, InvalidTransition, JobFailed,
                             JobTimeout, TransportError, UploadFailed)
from pv_atlas.imagery import Tile, encode_png
from pv_atlas.llm_gateway import (API_KEY_ENV, TERMINAL_STATUSES, FineTuneConfig,
                                  FineTuneJob, JobStatus, MockBackend,
                                  batch_infer, heuristic_assessment,
                                  infer_tile, lm_cross_entropy, mock_respond,
                                  resolve_api_key, upload_and_finetune)
from pv_atlas.prompting import (NO_SOLAR_EXEMPLAR, parse_model_output,
                                response_json)
from pv_atlas.ratelimit import RetryPolicy
from pv_atlas.schema import LocationClass
from pv_atlas.timeutil import FixedClock

from conftest import T0

FAST_RETRY = RetryPolicy(base_delay=0.0, jitter=False)


def make_tile(tile_id="scene_r0c0", fill=200, block=None) -> Tile:
    """100x100 bright tile, optionally with a dark rectangle painted in.

    block is (y0, y1, x0, x1, value)."""
    pixels = np.full((100, 100, 3), fill, dtype=np.uint8)
    if block is not None:
        y0, y1, x0, x1, value = block
        pixels[y0:y1, x0:x1] = value
    return Tile(tile_id=tile_id, scene_id="scene", row=0, col=0,
                pixels=pixels, geo_center_lat=0.0, geo_center_lon=0.0)


class FakeTime:
    def __init__(self):
        self.t = 0.0
        self.sleeps: list[float] = []

    def monotonic(self) -> float:
        return self.t

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.t += seconds


class FlakyBackend:
    """Raises a transport fault the first time each method is called."""

    def __init__(self, inner):
        self.inner = inner
        self.failed: set = set()

    def _maybe_fail(self, name):
        if name not in self.failed:
            self.failed.add(name)
            raise TransportError(f"flaky {name}")

    def complete(self, messages, model):
        self._maybe_fail(("complete", json.dumps(messages)[-64:]))
        return self.inner.complete(messages, model)

    def upload_file(self, path, purpose="fine-tune"):
        self._maybe_fail("upload_file")
        return self.inner.upload_file(path, purpose)

    def create_finetune_job(self, file_id, base_model, hyperparams):
        self._maybe_fail("create_finetune_job")
        return self.inner.create_finetune_job(file_id, base_model, hyperparams)

    def get_finetune_job(self, job_id):
        self._maybe_fail("get_finetune_job")
        return self.inner.get_finetune_job(job_id)


# --- config -------------------------------------------------------------------

def test_finetune_config_defaults():
    config = FineTuneConfig(base_model="base-x")
    assert config.n_epochs == 5
    assert config.batch_size == 16
    assert config.learning_rate == 1e-3
    assert config.temperature == 0.0
    assert config.poll_interval == 30.0
    assert config.job_timeout == 6 * 3600.0
    assert config.hyperparams() == {"n_epochs": 5, "batch_size": 16,
                                    "learning_rate_multiplier": 1e-3}


def test_finetune_config_validation():
    with pytest.raises(ConfigError):
        FineTuneConfig(base_model="b", n_epochs=0)
    with pytest.raises(ConfigError):
        FineTuneConfig(base_model="b", learning_rate=0.0)
    with pytest.raises(ConfigError):
        FineTuneConfig(base_model="b", batch_size=0)


def test_resolve_api_key(monkeypatch):
    assert resolve_api_key("explicit") == "explicit"
    monkeypatch.setenv(API_KEY_ENV, "from-env")
    assert resolve_api_key() == "from-env"
    monkeypatch.delenv(API_KEY_ENV)
    with pytest.raises(ConfigError):
        resolve_api_key()


# --- job state machine --------------------------------------------------------

def job() -> FineTuneJob:
    return FineTuneJob(job_id="j1", training_file_id="f1", base_model="b")


def at(minutes: int):
    return T0 + timedelta(minutes=minutes)


def test_job_forward_walk_records_history():
    j = job()
    j.advance(JobStatus.QUEUED, at(1))
    j.advance(JobStatus.RUNNING, at(2))
    j.advance(JobStatus.SUCCEEDED, at(3), fine_tuned_model="ft:b:1")
    assert j.status is JobStatus.SUCCEEDED
    assert j.fine_tuned_model == "ft:b:1"
    assert [s for _, s in j.history] == [JobStatus.UPLOADED, JobStatus.QUEUED,
                                         JobStatus.RUNNING, JobStatus.SUCCEEDED]
    assert [t for t, _ in j.history][1:] == [at(1), at(2), at(3)]


def test_job_may_skip_states():
    j = job()
    j.advance(JobStatus.SUCCEEDED, at(1), fine_tuned_model="ft:b:1")
    assert j.status is JobStatus.SUCCEEDED
    assert [s for _, s in j.history] == [JobStatus.UPLOADED, JobStatus.SUCCEEDED]


def test_job_reobservation_is_noop():
    j = job()
    j.advance(JobStatus.RUNNING, at(1))
    j.advance(JobStatus.RUNNING, at(2))
    j.advance(JobStatus.RUNNING, at(3))
    assert [s for _, s in j.history] == [JobStatus.UPLOADED, JobStatus.RUNNING]
    assert len(j.history) == 2


def test_job_rejects_backward_moves():
    j = job()
    j.advance(JobStatus.RUNNING, at(1))
    with pytest.raises(InvalidTransition):
        j.advance(JobStatus.QUEUED, at(2))


@pytest.mark.parametrize("terminal,model", [
    (JobStatus.SUCCEEDED, "ft:b:1"), (JobStatus.FAILED, None),
    (JobStatus.TIMED_OUT, None)])
def test_job_terminal_states_are_final(terminal, model):
    j = job()
    j.advance(terminal, at(1), fine_tuned_model=model)
    assert j.status in TERMINAL_STATUSES
    for target in JobStatus:
        if target is terminal:
            j.advance(target, at(2))  # no-op allowed
            continue
        with pytest.raises(InvalidTransition):
            j.advance(target, at(2),
                      fine_tuned_model="ft:b:1"
                      if target is JobStatus.SUCCEEDED else None)


def test_job_success_requires_model_name():
    j = job()
    with pytest.raises(InvalidTransition):
        j.advance(JobStatus.SUCCEEDED, at(1))
    assert j.status is JobStatus.UPLOADED
    assert j.fine_tuned_model is None


def test_job_model_name_only_on_success():
    j = job()
    with pytest.raises(InvalidTransition):
        j.advance(JobStatus.RUNNING, at(1), fine_tuned_model="ft:b:1")
    assert j.fine_tuned_model is None


# --- pixel heuristic and mock responses ---------------------------------------

def test_heuristic_bright_tile_is_no_solar():
    assert heuristic_assessment(make_tile().pixels) == NO_SOLAR_EXEMPLAR


def test_heuristic_dark_block_location_and_count():
    # 30x30 block at the top-left ninth: 900 px -> count 4.5 -> "1 to 5"
    tile = make_tile(block=(0, 30, 0, 30, 40))
    fields = heuristic_assessment(tile.pixels)
    assert fields["solar_panels_present"] is True
    assert fields["location"] == "top-left"
    assert fields["quantity"] == "1 to 5"

    # 24x24 centered block: 576 px, centroid in the middle cell
    fields = heuristic_assessment(make_tile(block=(38, 62, 38, 62, 40)).pixels)
    assert fields["location"] == "center"
    assert fields["quantity"] == "1 to 5"

    # 50x50 block lower right: 2500 px -> count 12.5 -> "10 to inf"
    fields = heuristic_assessment(make_tile(block=(50, 100, 50, 100, 40)).pixels)
    assert fields["location"] == "bottom-right"
    assert fields["quantity"] == "10 to inf"


def test_heuristic_ignores_colorful_dark_pixels():
    # dark but high-spread pixels (strong blue) are not panel-like
    tile = make_tile()
    tile.pixels[0:40, 0:40] = (10, 10, 108)
    assert heuristic_assessment(tile.pixels) == NO_SOLAR_EXEMPLAR


def test_heuristic_output_is_schema_valid():
    for block in (None, (0, 30, 0, 30, 40), (50, 100, 50, 100, 30)):
        fields = heuristic_assessment(make_tile(block=block).pixels)
        pred = parse_model_output(response_json(fields))
        assert pred.present is fields["solar_panels_present"]


def test_mock_respond_fixture_hit_is_verbatim():
    png = encode_png(make_tile().pixels)
    fixture_text = "```json\n" + response_json(NO_SOLAR_EXEMPLAR) + "\n```"
    fixtures = {hashlib.sha256(png).hexdigest(): fixture_text}
    assert mock_respond(png, fixtures) == fixture_text


def test_mock_respond_miss_behavior():
    png = encode_png(make_tile(block=(0, 30, 0, 30, 40)).pixels)
    with pytest.raises(EmptyCompletion):
        mock_respond(png, {}, heuristic_enabled=False)
    raw = mock_respond(png, {}, heuristic_enabled=True)
    assert parse_model_output(raw).location is LocationClass.TOP_LEFT


# --- inference ----------------------------------------------------------------

def test_infer_tile_requires_model_id():
    with pytest.raises(ConfigError):
        infer_tile(make_tile(), "", backend=MockBackend())


def test_infer_tile_round_trips_image_through_messages():
    tile = make_tile(block=(38, 62, 38, 62, 40))
    raw = infer_tile(tile, "m", backend=MockBackend())
    assert parse_model_output(raw).location is LocationClass.CENTER


def test_batch_infer_map_is_complete_and_sorted():
    tiles = [make_tile(f"t{i}", block=(0, 30, 0, 30, 40) if i % 2 else None)
             for i in range(6)]
    results = batch_infer(tiles, "m", backend=MockBackend(), retry=FAST_RETRY)
    assert list(results) == sorted(t.tile_id for t in tiles)
    assert all(isinstance(v, str) for v in results.values())


def test_batch_infer_captures_typed_errors():
    tiles = [make_tile("t0"), make_tile("t1", block=(0, 30, 0, 30, 40))]
    png0 = encode_png(tiles[0].pixels)
    fixtures = {hashlib.sha256(png0).hexdigest(): "fixture-response"}
    backend = MockBackend(fixtures=fixtures, heuristic_enabled=False)
    results = batch_infer(tiles, "m", backend=backend, retry=FAST_RETRY)
    assert results["t0"] == "fixture-response"
    assert isinstance(results["t1"], EmptyCompletion)


def test_batch_infer_parallelism_invariant():
    tiles = [make_tile(f"t{i:02d}",
                       block=(i, 30 + i, 0, 30, 40) if i % 3 else None)
             for i in range(12)]
    serial = batch_infer(tiles, "m", backend=MockBackend(), parallelism=1,
                         retry=FAST_RETRY)
    wide = batch_infer(tiles, "m", backend=MockBackend(), parallelism=8,
                       retry=FAST_RETRY)
    assert serial == wide
    with pytest.raises(ValueError):
        batch_infer(tiles, "m", backend=MockBackend(), parallelism=0)


def test_batch_infer_retries_transport_faults():
    tiles = [make_tile(f"t{i}") for i in range(3)]
    backend = FlakyBackend(MockBackend())
    results = batch_infer(tiles, "m", backend=backend, parallelism=2,
                          retry=FAST_RETRY)
    assert all(isinstance(v, str) for v in results.values())


# --- fine-tune orchestration --------------------------------------------------

def finetune_config(**overrides) -> FineTuneConfig:
    base = dict(base_model="base-x", poll_interval=30.0)
    base.update(overrides)
    return FineTuneConfig(**base)


def training_file(tmp_path):
    path = tmp_path / "train.jsonl"
    path.write_text('{"messages": []}\n')
    return path


def test_finetune_success_walk(tmp_path):
    backend = MockBackend()
    fake = FakeTime()
    job = upload_and_finetune(backend, training_file(tmp_path),
                              finetune_config(), monotonic=fake.monotonic,
                              sleep=fake.sleep, clock=FixedClock(T0))
    assert job.status is JobStatus.SUCCEEDED
    assert job.fine_tuned_model == "ft:base-x:mock:0001"
    assert job.training_file_id == "file-mock-0001"
    assert [s for _, s in job.history] == [
        JobStatus.UPLOADED, JobStatus.QUEUED, JobStatus.RUNNING,
        JobStatus.SUCCEEDED]
    assert backend.jobs[job.job_id]["hyperparams"] == {
        "n_epochs": 5, "batch_size": 16, "learning_rate_multiplier": 1e-3}
    assert fake.sleeps.count(30.0) == 2  # between the three polls


def test_finetune_maps_granular_backend_states(tmp_path):
    backend = MockBackend(job_statuses=("validating_files", "pending",
                                        "running", "succeeded"))
    fake = FakeTime()
    job = upload_and_finetune(backend, training_file(tmp_path),
                              finetune_config(), monotonic=fake.monotonic,
                              sleep=fake.sleep, clock=FixedClock(T0))
    assert [s for _, s in job.history] == [
        JobStatus.UPLOADED, JobStatus.QUEUED, JobStatus.RUNNING,
        JobStatus.SUCCEEDED]


@pytest.mark.parametrize("statuses", [("queued", "failed"),
                                      ("queued", "running", "cancelled")])
def test_finetune_failure_raises_with_job(tmp_path, statuses):
    backend = MockBackend(job_statuses=statuses)
    fake = FakeTime()
    with pytest.raises(JobFailed) as err:
        upload_and_finetune(backend, training_file(tmp_path),
                            finetune_config(), monotonic=fake.monotonic,
                            sleep=fake.sleep, clock=FixedClock(T0))
    assert err.value.job.status is JobStatus.FAILED
    assert err.value.job.fine_tuned_model is None
    assert err.value.job.history[-1][1] is JobStatus.FAILED


def test_finetune_timeout_marks_job(tmp_path):
    backend = MockBackend(job_statuses=("queued", "running"))  # never finishes
    fake = FakeTime()
    with pytest.raises(JobTimeout) as err:
        upload_and_finetune(backend, training_file(tmp_path),
                            finetune_config(job_timeout=100.0),
                            monotonic=fake.monotonic, sleep=fake.sleep,
                            clock=FixedClock(T0))
    assert err.value.job.status is JobStatus.TIMED_OUT
    assert err.value.job.fine_tuned_model is None
    assert err.value.job.history[-1][1] is JobStatus.TIMED_OUT


def test_finetune_survives_flaky_transport(tmp_path):
    backend = FlakyBackend(MockBackend())
    fake = FakeTime()
    job = upload_and_finetune(backend, training_file(tmp_path),
                              finetune_config(), monotonic=fake.monotonic,
                              sleep=fake.sleep, clock=FixedClock(T0),
                              retry=FAST_RETRY)
    assert job.status is JobStatus.SUCCEEDED
    assert job.fine_tuned_model is not None


def test_finetune_missing_training_file(tmp_path):
    with pytest.raises(UploadFailed):
        upload_and_finetune(MockBackend(), tmp_path / "absent.jsonl",
                            finetune_config(), monotonic=FakeTime().monotonic,
                            sleep=lambda s: None, clock=FixedClock(T0))


# --- cross-entropy ------------------------------------------------------------

def test_cross_entropy_uniform_over_four():
    assert lm_cross_entropy([[0.25, 0.25, 0.25, 0.25]]) == pytest.approx(
        math.log(4.0), abs=1e-12)


def test_cross_entropy_perfect_prediction_is_zero():
    assert lm_cross_entropy([[1.0, 1.0, 1.0], [1.0]]) == 0.0


def test_cross_entropy_two_sequence_hand_case():
    assert lm_cross_entropy([[0.5, 0.25], [1.0]]) == pytest.approx(
        0.519860, abs=1e-6)


def test_cross_entropy_rejects_bad_probabilities():
    for bad in ([[0.0]], [[1.2]], [[-0.5]], [[float("nan")]]):
        with pytest.raises(InvalidProbability):
            lm_cross_entropy(bad)
    with pytest.raises(EmptyInput):
        lm_cross_entropy([])
    with pytest.raises(EmptyInput):
        lm_cross_entropy([[0.5], []])


def test_cross_entropy_monotone_in_probability():
    low = lm_cross_entropy([[0.3, 0.5]])
    high = lm_cross_entropy([[0.4, 0.5]])
    assert high < low
