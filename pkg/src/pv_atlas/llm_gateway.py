"""Model I/O: completions, batch inference, and fine-tune orchestration.

Inference always runs at temperature 0. Fine-tuning follows an
upload/create/poll lifecycle against an OpenAI-compatible HTTP backend
or a deterministic offline mock whose responses come from a fixture map
keyed by tile-PNG digest, with a pixel heuristic as fallback. A small
cross-entropy utility scores token-probability sequences at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
from base64 import b64decode
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .errors import (ConfigError, EmptyCompletion, EmptyInput,
                     InvalidProbability, InvalidTransition, JobCreateFailed,
                     JobFailed, JobTimeout, PvAtlasError, TransportError,
                     UploadFailed, UpstreamError)
from .prompting import (CONFIDENCE_FIELD, LIKELIHOOD_FIELD, LOCATION_FIELD,
                        PRESENCE_FIELD, QUANTITY_FIELD, DEFAULT_TEMPLATE,
                        NO_SOLAR_EXEMPLAR, PromptTemplate, SOLAR_EXEMPLAR,
                        build_inference_messages, response_json)
from .ratelimit import RetryPolicy, TokenBucket, with_retries
from .schema import LOCATION_GRID, quantity_bin_for_count
from .timeutil import Clock, SYSTEM_CLOCK
from . import imagery

INFERENCE_TEMPERATURE = 0.0
API_KEY_ENV = "PV_ATLAS_API_KEY"


@dataclass(frozen=True)
class FineTuneConfig:
    """Hyperparameters and polling behavior for one fine-tune run.

    The defaults for batch_size and learning_rate are configuration
    choices, not measured values; temperature stays 0 for all
    evaluation inference.
    """

    base_model: str
    n_epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 1e-3
    temperature: float = INFERENCE_TEMPERATURE
    poll_interval: float = 30.0
    job_timeout: float = 6 * 3600.0

    def __post_init__(self):
        if self.n_epochs < 1:
            raise ConfigError(f"n_epochs must be >= 1, got {self.n_epochs}")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size must be >= 1 and learning_rate > 0")

    def hyperparams(self) -> dict:
        return {"n_epochs": self.n_epochs, "batch_size": self.batch_size,
                "learning_rate_multiplier": self.learning_rate}


# --- fine-tune job state machine ----------------------------------------------

class JobStatus(str, Enum):
    UPLOADED = "uploaded"
    QUEUED = "queued"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    TIMED_OUT = "timed_out"


_STATUS_RANK = {
    JobStatus.UPLOADED: 0,
    JobStatus.QUEUED: 1,
    JobStatus.RUNNING: 2,
    JobStatus.SUCCEEDED: 3,
    JobStatus.FAILED: 3,
    JobStatus.TIMED_OUT: 3,
}
TERMINAL_STATUSES = frozenset(
    (JobStatus.SUCCEEDED, JobStatus.FAILED, JobStatus.TIMED_OUT))

# Upstream services report more granular states than we track.
_BACKEND_STATUS_MAP = {
    "validating_files": JobStatus.QUEUED,
    "queued": JobStatus.QUEUED,
    "pending": JobStatus.QUEUED,
    "running": JobStatus.RUNNING,
    "succeeded": JobStatus.SUCCEEDED,
    "failed": JobStatus.FAILED,
    "cancelled": JobStatus.FAILED,
}


@dataclass
class FineTuneJob:
    """Local record of one fine-tune job's observed lifecycle."""

    job_id: str
    training_file_id: str
    base_model: str
    status: JobStatus = JobStatus.UPLOADED
    fine_tuned_model: str | None = None
    history: list[tuple[datetime, JobStatus]] = field(default_factory=list)

    def advance(self, status: JobStatus, at: datetime,
                fine_tuned_model: str | None = None) -> None:
        """Move forward in the lifecycle; polling may skip states.

        Re-observing the current status is a no-op. Leaving a terminal
        status, or moving backward, is a protocol violation.
        """
        if not self.history:
            self.history.append((at, self.status))
        if status == self.status:
            return
        if self.status in TERMINAL_STATUSES:
            raise InvalidTransition(
                f"job {self.job_id} is terminal ({self.status.value}), "
                f"cannot move to {status.value}")
        if _STATUS_RANK[status] < _STATUS_RANK[self.status]:
            raise InvalidTransition(
                f"job {self.job_id} cannot move backward from "
                f"{self.status.value} to {status.value}")
        if status == JobStatus.SUCCEEDED:
            if not fine_tuned_model:
                raise InvalidTransition(
                    f"job {self.job_id} succeeded without a model name")
            self.fine_tuned_model = fine_tuned_model
        elif fine_tuned_model:
            raise InvalidTransition(
                f"job {self.job_id} got a model name in state {status.value}")
        self.status = status
        self.history.append((at, status))


# --- backends -----------------------------------------------------------------

class ModelBackend(Protocol):
    def complete(self, messages: Sequence[Mapping], model: str) -> str: ...

    def upload_file(self, path: Path, purpose: str) -> str: ...

    def create_finetune_job(self, file_id: str, base_model: str,
                            hyperparams: Mapping) -> str: ...

    def get_finetune_job(self, job_id: str) -> Mapping: ...


def resolve_api_key(explicit: str | None = None,
                    env_var: str = API_KEY_ENV) -> str:
    if explicit:
        return explicit
    key = os.environ.get(env_var, "")
    if not key:
        raise ConfigError(f"no API key: pass one or set {env_var}")
    return key


def _redact(text: str, secret: str) -> str:
    return text.replace(secret, "***") if secret else text


class HttpBackend:
    """OpenAI-compatible HTTP backend.

    Every request is appended to the audit log (and audit file, when
    configured) with the API key redacted; transport failures raise
    TransportError and non-2xx responses raise UpstreamError carrying
    the status code.
    """

    def __init__(self, base_url: str, api_key: str | None = None,
                 session: requests.Session | None = None, timeout: float = 120.0,
                 audit_path: Path | None = None):
        self.base_url = base_url.rstrip("/")
        self.api_key = resolve_api_key(api_key)
        self.session = session or requests.Session()
        self.timeout = timeout
        self.audit_path = Path(audit_path) if audit_path else None
        self.audit_log: list[dict] = []

    def _headers(self) -> dict[str, str]:
        return {"Authorization": f"Bearer {self.api_key}"}

    def _record(self, method: str, url: str, status: int, detail: str = "") -> None:
        entry = {
            "method": method,
            "url": _redact(url, self.api_key),
            "status": status,
            "detail": _redact(detail, self.api_key),
        }
        self.audit_log.append(entry)
        if self.audit_path is not None:
            with self.audit_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _request(self, method: str, path: str, **kwargs) -> requests.Response:
        url = f"{self.base_url}{path}"
        try:
            resp = self.session.request(method, url, headers=self._headers(),
                                        timeout=self.timeout, **kwargs)
        except requests.RequestException as exc:
            self._record(method, url, -1, str(exc))
            raise TransportError(
                f"{method} {path} failed: {_redact(str(exc), self.api_key)}") from exc
        self._record(method, url, resp.status_code)
        if not 200 <= resp.status_code < 300:
            raise UpstreamError(
                f"{method} {path} returned HTTP {resp.status_code}: "
                f"{_redact(resp.text[:300], self.api_key)}",
                status_code=resp.status_code)
        return resp

    def complete(self, messages: Sequence[Mapping], model: str) -> str:
        resp = self._request("POST", "/chat/completions",
                             json={"model": model, "messages": list(messages),
                                   "temperature": INFERENCE_TEMPERATURE})
        body = resp.json()
        choices = body.get("choices") or []
        content = (choices[0].get("message") or {}).get("content") if choices else None
        if not content:
            raise EmptyCompletion(f"model {model} returned no content")
        return content

    def upload_file(self, path: Path, purpose: str = "fine-tune") -> str:
        path = Path(path)
        try:
            with path.open("rb") as fh:
                resp = self._request("POST", "/files", data={"purpose": purpose},
                                     files={"file": (path.name, fh)})
        except UpstreamError as exc:
            raise UploadFailed(f"file upload rejected: {exc}") from exc
        file_id = resp.json().get("id")
        if not file_id:
            raise UploadFailed("upload response has no file id")
        return file_id

    def create_finetune_job(self, file_id: str, base_model: str,
                            hyperparams: Mapping) -> str:
        payload = {"training_file": file_id, "model": base_model,
                   "hyperparameters": dict(hyperparams)}
        try:
            resp = self._request("POST", "/fine_tuning/jobs", json=payload)
        except UpstreamError as exc:
            raise JobCreateFailed(f"job creation rejected: {exc}") from exc
        job_id = resp.json().get("id")
        if not job_id:
            raise JobCreateFailed("job response has no id")
        return job_id

    def get_finetune_job(self, job_id: str) -> Mapping:
        return self._request("GET", f"/fine_tuning/jobs/{job_id}").json()


def heuristic_assessment(pixels: np.ndarray) -> dict:
    """Pixel-statistics stand-in for a vision model.

    Panel pixels are modeled as dark and low-chroma: channel max at or
    below 110 and channel spread at or below 80. Under 2% coverage
    counts as no panels; otherwise the mask centroid picks the 3x3 grid
    cell and mask area divided by 200 approximates the panel count.
    """
    arr = pixels.astype(np.int16)
    cmax = arr.max(axis=2)
    spread = cmax - arr.min(axis=2)
    mask = (cmax <= 110) & (spread <= 80)
    frac = float(mask.mean())
    if frac < 0.02:
        return dict(NO_SOLAR_EXEMPLAR)
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    row = min(2, int(ys.mean() / (h / 3.0)))
    col = min(2, int(xs.mean() / (w / 3.0)))
    count_est = int(mask.sum()) / 200.0
    return {
        PRESENCE_FIELD: True,
        LOCATION_FIELD: LOCATION_GRID[row][col].value,
        QUANTITY_FIELD: quantity_bin_for_count(count_est).value,
        LIKELIHOOD_FIELD: SOLAR_EXEMPLAR[LIKELIHOOD_FIELD],
        CONFIDENCE_FIELD: SOLAR_EXEMPLAR[CONFIDENCE_FIELD],
    }


def mock_respond(png_bytes: bytes, fixtures: Mapping[str, str],
                 heuristic_enabled: bool = True) -> str:
    """Offline response for one tile image.

    A fixture keyed by the sha256 of the PNG bytes is returned verbatim;
    on a miss the pixel heuristic produces a schema-valid JSON, unless
    disabled, in which case there is no response at all.
    """
    digest = hashlib.sha256(png_bytes).hexdigest()
    if digest in fixtures:
        return fixtures[digest]
    if not heuristic_enabled:
        raise EmptyCompletion(f"no fixture for tile digest {digest[:12]}")
    return response_json(heuristic_assessment(imagery.decode_png(png_bytes)))


_DATA_URI_RE = re.compile(r"^data:image/png;base64,(.*)$", re.DOTALL)


def _png_from_messages(messages: Sequence[Mapping]) -> bytes | None:
    for message in messages:
        content = message.get("content")
        if not isinstance(content, list):
            continue
        for part in content:
            if isinstance(part, dict) and part.get("type") == "image_url":
                uri = (part.get("image_url") or {}).get("url", "")
                m = _DATA_URI_RE.match(uri)
                if m:
                    return b64decode(m.group(1))
    return None


class MockBackend:
    """Deterministic offline backend.

    Completions go through mock_respond on the image embedded in the
    user message. Fine-tune jobs: uploads and job ids are counters, and
    get_finetune_job walks a scripted status list (last status repeats).
    """

    def __init__(self, fixtures: Mapping[str, str] | None = None,
                 heuristic_enabled: bool = True,
                 job_statuses: Sequence[str] = ("queued", "running", "succeeded"),
                 model_suffix: str = "mock"):
        self.fixtures = dict(fixtures or {})
        self.heuristic_enabled = heuristic_enabled
        self.job_statuses = list(job_statuses)
        self.model_suffix = model_suffix
        self.uploads: list[Path] = []
        self.jobs: dict[str, dict] = {}
        self.completions = 0
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[Mapping], model: str) -> str:
        with self._lock:
            self.completions += 1
        png = _png_from_messages(messages)
        if png is None:
            raise EmptyCompletion("mock backend needs an image part")
        return mock_respond(png, self.fixtures, self.heuristic_enabled)

    def upload_file(self, path: Path, purpose: str = "fine-tune") -> str:
        path = Path(path)
        if not path.is_file():
            raise UploadFailed(f"no such file: {path}")
        self.uploads.append(path)
        return f"file-{self.model_suffix}-{len(self.uploads):04d}"

    def create_finetune_job(self, file_id: str, base_model: str,
                            hyperparams: Mapping) -> str:
        job_id = f"ftjob-{self.model_suffix}-{len(self.jobs) + 1:04d}"
        self.jobs[job_id] = {"file_id": file_id, "base_model": base_model,
                             "hyperparams": dict(hyperparams), "polls": 0}
        return job_id

    def get_finetune_job(self, job_id: str) -> Mapping:
        job = self.jobs.get(job_id)
        if job is None:
            raise UpstreamError(f"unknown job {job_id}", status_code=404)
        idx = min(job["polls"], len(self.job_statuses) - 1)
        job["polls"] += 1
        status = self.job_statuses[idx]
        out = {"id": job_id, "status": status, "fine_tuned_model": None}
        if status == "succeeded":
            out["fine_tuned_model"] = (
                f"ft:{job['base_model']}:{self.model_suffix}:{job_id[-4:]}")
        return out


# --- inference ----------------------------------------------------------------

def infer_tile(tile: imagery.Tile, model_id: str,
               template: PromptTemplate = DEFAULT_TEMPLATE,
               backend: ModelBackend = None) -> str:
    """Single-tile completion at temperature 0; raw text, unparsed."""
    if not model_id:
        raise ConfigError("model_id must be nonempty")
    messages = build_inference_messages(tile.tile_id,
                                        imagery.encode_png(tile.pixels),
                                        template)
    return backend.complete(messages, model_id)


def batch_infer(tiles: Sequence[imagery.Tile], model_id: str,
                template: PromptTemplate = DEFAULT_TEMPLATE,
                backend: ModelBackend = None, parallelism: int = 4,
                rate: TokenBucket | None = None,
                retry: RetryPolicy | None = None,
                ) -> dict[str, str | PvAtlasError]:
    """Run inference over many tiles with a bounded worker pool.

    The result map is complete: every input tile id maps to either its
    raw completion text or the typed error that exhausted its retries.
    Keys are emitted in sorted order, and the map's contents do not
    depend on parallelism for a deterministic backend.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    retry = retry or RetryPolicy()
    results: dict[str, str | PvAtlasError] = {}
    lock = threading.Lock()

    def one(tile: imagery.Tile) -> None:
        if rate is not None:
            rate.acquire()
        try:
            raw, _ = with_retries(
                lambda: infer_tile(tile, model_id, template, backend), retry)
            outcome: str | PvAtlasError = raw
        except PvAtlasError as exc:
            outcome = exc
        with lock:
            results[tile.tile_id] = outcome

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        list(pool.map(one, tiles))
    return {tile_id: results[tile_id] for tile_id in sorted(results)}


# --- orchestration ------------------------------------------------------------

def upload_and_finetune(backend: ModelBackend, jsonl_path: Path,
                        config: FineTuneConfig,
                        monotonic: Callable[[], float] = time.monotonic,
                        sleep: Callable[[float], None] = time.sleep,
                        clock: Clock = SYSTEM_CLOCK,
                        retry: RetryPolicy | None = None,
                        on_poll: Callable[[FineTuneJob], None] | None = None,
                        ) -> FineTuneJob:
    """Upload training data, create a job, and poll it to completion.

    Transient transport failures on any backend call are retried under
    the policy. Returns the succeeded job with its full status history.
    A failed job raises JobFailed; an expired timeout budget marks the
    job timed_out and raises JobTimeout; both carry the job record.
    """
    retry = retry or RetryPolicy()

    def call(fn):
        result, _ = with_retries(fn, retry, sleep=sleep)
        return result

    file_id = call(lambda: backend.upload_file(Path(jsonl_path),
                                               purpose="fine-tune"))
    job_id = call(lambda: backend.create_finetune_job(file_id,
                                                      config.base_model,
                                                      config.hyperparams()))
    job = FineTuneJob(job_id=job_id, training_file_id=file_id,
                      base_model=config.base_model)
    job.history.append((clock.now(), JobStatus.UPLOADED))
    deadline = monotonic() + config.job_timeout
    while True:
        remote = call(lambda: backend.get_finetune_job(job_id))
        raw_status = str(remote.get("status", ""))
        status = _BACKEND_STATUS_MAP.get(raw_status)
        if status is not None:
            job.advance(status, at=clock.now(),
                        fine_tuned_model=remote.get("fine_tuned_model")
                        if status == JobStatus.SUCCEEDED else None)
        if on_poll is not None:
            on_poll(job)
        if job.status == JobStatus.SUCCEEDED:
            return job
        if job.status == JobStatus.FAILED:
            raise JobFailed(f"fine-tune job {job_id} failed", job=job)
        if monotonic() >= deadline:
            job.advance(JobStatus.TIMED_OUT, at=clock.now())
            raise JobTimeout(f"fine-tune job {job_id} exceeded "
                             f"{config.job_timeout}s", job=job)
        sleep(config.poll_interval)


# --- training loss ------------------------------------------------------------

def lm_cross_entropy(token_probs: Sequence[Sequence[float]]) -> float:
    """Mean per-sequence, per-token negative log likelihood (natural log).

    Each inner sequence holds the model's probabilities for that
    sequence's tokens; every probability must lie in (0, 1].
    """
    if not token_probs:
        raise EmptyInput("need at least one sequence")
    total = 0.0
    for seq in token_probs:
        if not seq:
            raise EmptyInput("sequences must be nonempty")
        inner = 0.0
        for p in seq:
            p = float(p)
            if math.isnan(p) or not 0.0 < p <= 1.0:
                raise InvalidProbability(f"probability {p!r} outside (0, 1]")
            inner += math.log(p)
        total += inner / len(seq)
    return -total / len(token_probs)
