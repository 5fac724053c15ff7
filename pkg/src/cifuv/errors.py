"""Exception hierarchy shared by every cifuv module."""

from __future__ import annotations


class CifuvError(Exception):
    """Base class for all errors raised by this package."""


class InvalidProfileError(CifuvError, ValueError):
    pass


class InvalidInputError(CifuvError, ValueError):
    pass


class UndefinedDowngradeError(CifuvError, ValueError):
    """Raised when the weaker system of a downgrade check is never attacked."""


class ConfigError(CifuvError, ValueError):
    pass


class CapExceededError(CifuvError, RuntimeError):
    pass


class MiningFailedError(CifuvError, RuntimeError):
    pass


class OrphanBlockError(CifuvError, KeyError):
    pass


class MalformedQuintupleError(CifuvError, ValueError):
    pass


class SyncError(CifuvError, RuntimeError):
    pass


class SyncAbortedError(SyncError):
    def __init__(self, height: int, reason: str):
        super().__init__(f"sync aborted at height {height}: {reason}")
        self.height = height
        self.reason = reason


class SyncTimeoutError(SyncError):
    pass


class InvalidEventError(CifuvError, ValueError):
    pass


class ProtocolError(CifuvError, RuntimeError):
    pass


class InvalidBlockError(CifuvError, ValueError):
    def __init__(self, height: int, reason: str):
        super().__init__(f"invalid block at height {height}: {reason}")
        self.height = height
        self.reason = reason
