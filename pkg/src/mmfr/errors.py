"""Exception hierarchy shared across the pipeline.

Two families matter operationally: ``ParseError`` subclasses mark
per-record problems that go to a quarantine sink while processing
continues, and ``GatewayError`` subclasses mark backend trouble that is
retried per record before quarantining. Everything else is fatal for
the stage that raised it.
"""


class MmfrError(Exception):
    """Base class for all package errors."""


class MalformedRecordError(MmfrError):
    """A record violates a structural precondition (e.g. empty source/id)."""


class AdapterError(MmfrError):
    """A source row is missing a field required by the adapter config."""


class ConfigError(MmfrError):
    """A config file or CLI combination is invalid."""


class StageError(MmfrError):
    """Fatal error inside a pipeline stage; the run aborts after flushing."""


class GatewayError(MmfrError):
    """Base class for inference-backend failures."""


class BackendUnavailableError(GatewayError):
    """All retry attempts against a backend were exhausted."""


class RequestRejectedError(GatewayError):
    """The backend answered with a non-retryable application error."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ScriptMissError(GatewayError):
    """A scripted backend in strict mode had no entry for the request key."""

    def __init__(self, key: str):
        super().__init__(f"no scripted response for key {key}")
        self.key = key


class ParseError(MmfrError):
    """A model reply could not be parsed; the record is quarantined."""


class TagMissingError(ParseError):
    """No well-formed answer tag pair was found in the text."""


class ExtractionParseError(ParseError):
    """An answer-extraction reply did not contain exactly one answer tag."""


class VerifyParseError(ParseError):
    """A verification reply carried no recognizable judgment line."""


class CaptionFormatError(ParseError):
    """A caption reply did not start with the required category heading."""
