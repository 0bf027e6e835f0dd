"""Typed error hierarchy for the pipeline.

Every failure mode that callers are expected to branch on gets its own
class; anything else is a plain bug and surfaces as a normal exception.
"""


class PvAtlasError(Exception):
    """Base class for all pipeline errors."""


# --- network / upstream ------------------------------------------------------

class TransportError(PvAtlasError):
    """The request never completed (DNS, connect, read timeouts)."""


class UpstreamError(PvAtlasError):
    """The remote service answered, but with an error."""

    def __init__(self, message: str, status_code: int | None = None):
        super().__init__(message)
        self.status_code = status_code


class ParseError(PvAtlasError):
    """Malformed input data (JSON bodies, annotation files)."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


# --- geo_ingest ---------------------------------------------------------------

class InvalidRegion(PvAtlasError):
    """Region definition violates its invariants (degenerate bbox etc.)."""


# --- imagery ------------------------------------------------------------------

class DecodeError(PvAtlasError):
    """Image bytes could not be decoded."""


class IndivisibleScene(PvAtlasError):
    """Scene dimensions do not divide evenly into the tile grid."""


class LatitudeOutOfRange(PvAtlasError):
    """Latitude outside the Web Mercator domain."""


# --- dataset ------------------------------------------------------------------

class InconsistentLabel(PvAtlasError):
    """Label violates the presence/NA coupling."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class InsufficientTiles(PvAtlasError):
    """Split cap exceeds the number of available tiles."""


class MissingLabel(PvAtlasError):
    """A tile in the split has no validated label."""


class MissingTile(PvAtlasError):
    """A tile id in the split has no stored pixels."""


class IoError(PvAtlasError):
    """Filesystem failure while writing an export."""


# --- prompting ----------------------------------------------------------------

class EncodeError(PvAtlasError):
    """Tile pixels could not be encoded for transport."""


class MalformedOutput(PvAtlasError):
    """No JSON object recoverable from a model response."""


class MissingField(PvAtlasError):
    """A required schema field is absent from the model output."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class UnknownEnumValue(PvAtlasError):
    """A schema field holds a value outside its closed vocabulary."""

    def __init__(self, message: str, field: str | None = None,
                 value: object = None):
        super().__init__(message)
        self.field = field
        self.value = value


class OutOfRange(PvAtlasError):
    """A numeric schema field is outside [0, 1] (or not numeric at all)."""

    def __init__(self, message: str, field: str | None = None,
                 value: object = None):
        super().__init__(message)
        self.field = field
        self.value = value


# --- llm_gateway --------------------------------------------------------------

class UploadFailed(PvAtlasError):
    """Training file upload was rejected."""


class JobCreateFailed(PvAtlasError):
    """Fine-tune job creation was rejected."""


class JobFailed(PvAtlasError):
    """The remote service reported the fine-tune job as failed."""

    def __init__(self, message: str, job=None):
        super().__init__(message)
        self.job = job


class JobTimeout(PvAtlasError):
    """The fine-tune job did not reach a terminal status in time."""

    def __init__(self, message: str, job=None):
        super().__init__(message)
        self.job = job


class InvalidTransition(PvAtlasError):
    """Attempted an illegal fine-tune job status transition."""


class EmptyCompletion(PvAtlasError):
    """The model returned no completion text for a tile."""


class InvalidProbability(PvAtlasError):
    """A token probability is outside (0, 1]."""


# --- evaluation ---------------------------------------------------------------

class EmptyInput(PvAtlasError):
    """A metric was asked to score an empty pair list."""


class InputOutOfRange(PvAtlasError):
    """A metric argument is outside its declared range."""


class MissingSourceRegion(PvAtlasError):
    """The cross-domain source region is absent from the input map."""


class NoParsedPredictions(PvAtlasError):
    """Calibration requires at least one parsed prediction."""


# --- cli ----------------------------------------------------------------------

class ConfigError(PvAtlasError):
    """Configuration file is missing, malformed, or incomplete."""


class PortInUse(PvAtlasError):
    """The annotation server port is already bound."""
