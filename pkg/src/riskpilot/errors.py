"""Shared error hierarchy.

Every failure the engine raises is an :class:`EngineError` subclass carrying a
stable machine-readable ``code``, so the CLI and HTTP surfaces can map errors
uniformly without string matching.
"""

from __future__ import annotations

from typing import Any


class EngineError(Exception):
    """Base class for all domain errors raised by this package."""

    code: str = "engine_error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.details = details

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {"error": self.code, "message": str(self)}
        if self.details:
            doc["details"] = self.details
        return doc
