"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class RestMetaError(Exception):
    """Base class for all engine errors."""


class UnparseableDocument(RestMetaError):
    """The document is neither JSON nor YAML."""


class UnsupportedVersion(RestMetaError):
    """The document is neither Swagger 2.0 nor OpenAPI 3.x."""


class SchemaViolation(RestMetaError):
    """The document's paths object is missing or malformed."""


class AmbiguousMatch(RestMetaError):
    """More than one path template matches a concrete path equally well."""

    def __init__(self, method: str, path: str, candidates):
        self.candidates = list(candidates)
        names = ", ".join(f"{c.http_method} {c.path_template}" for c in self.candidates)
        super().__init__(f"{method} {path} matches several operations: {names}")


class NoArrayFound(RestMetaError):
    """No JSON array could be recovered from model output."""


class PlanParseError(RestMetaError):
    """Model output could not be turned into an executable plan."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class ExtractionMiss(RestMetaError):
    """A value path did not resolve against a response."""


class LlmTransportError(RestMetaError):
    """The language model provider could not be reached or answered badly."""


class MissingPlaceholder(RestMetaError):
    """A prompt template references a value that was not supplied."""


class FatalConfigError(RestMetaError):
    """Session configuration is invalid."""


class PortUnavailable(RestMetaError):
    """The testbed could not bind its listening socket."""
