"""Exception hierarchy shared by every kobe module."""

from __future__ import annotations


class KobeError(Exception):
    """Base class for all kobe errors."""


# graph

class GraphError(KobeError):
    pass


class InvalidNode(GraphError):
    pass


class InvalidEdge(GraphError):
    pass


class DuplicateId(GraphError):
    pass


class DanglingEndpoint(GraphError):
    pass


class UnknownNode(GraphError):
    pass


class NoPath(GraphError):
    pass


class VersionMismatch(GraphError):
    pass


class CorruptFile(GraphError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyInput(KobeError):
    pass


# simulator

class SpecValidationError(KobeError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class SessionClosed(KobeError):
    pass


class AppMismatch(KobeError):
    pass


# backends

class BackendError(KobeError):
    pass


class BackendUnavailable(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class MissingReference(BackendError):
    pass


class GroundingFailed(BackendError):
    pass


# explorer

class NothingToExplore(KobeError):
    pass


class NoCandidate(KobeError):
    pass


# bench

class SuiteMismatch(KobeError):
    pass
