# src/core/errors.py
"""
Exception hierarchy shared by every DataFeed component.

Each error carries a stable numeric `code`. When a request handler raises one
of these on a server, the code travels back in an Error frame and the caller
re-raises the same class (see `error_from_code`), so a `PolicyMismatch` raised
by the dispatcher is a `PolicyMismatch` on the client too.
"""

from typing import Dict, Optional, Type


class DataServiceError(Exception):
    """Base class for all DataFeed errors."""
    code: int = 1

    def __init__(self, detail: str = ""):
        super().__init__(detail)
        self.detail = detail


# --- pipeline-core ---
class UnknownFunction(DataServiceError):
    code = 100

    def __init__(self, function_id: str):
        super().__init__(f"function id '{function_id}' is not registered")
        self.function_id = function_id


class MalformedSpec(DataServiceError):
    code = 101


class FunctionFailure(DataServiceError):
    code = 102

    def __init__(self, op: str, key: Optional[int], cause: Optional[BaseException] = None):
        super().__init__(f"{op} failed on element {key}: {cause!r}")
        self.op = op
        self.key = key
        self.cause = cause


class InvalidBoundaries(MalformedSpec):
    code = 103


# --- records-io ---
class IoFailure(DataServiceError):
    code = 200


class CorruptRecord(DataServiceError):
    code = 201

    def __init__(self, offset: int, reason: str = "checksum mismatch"):
        super().__init__(f"corrupt record at byte offset {offset}: {reason}")
        self.offset = offset


class EmptyDataset(DataServiceError):
    code = 202


# --- wire ---
class BodyTooLarge(DataServiceError):
    code = 300


class Truncated(DataServiceError):
    code = 301


class UnknownType(DataServiceError):
    code = 302

    def __init__(self, msg_type: int, frame_size: int = 0):
        super().__init__(f"unknown message type 0x{msg_type:04x}")
        self.msg_type = msg_type
        # Bytes to skip to resynchronize at the next frame.
        self.frame_size = frame_size


class ChecksumMismatch(DataServiceError):
    code = 303


class RpcTimeout(DataServiceError):
    code = 304


class ConnectionLost(DataServiceError):
    code = 305


class RemoteError(DataServiceError):
    """An error reported by the remote side whose code has no local class."""
    code = 306

    def __init__(self, code: int, detail: str):
        super().__init__(f"remote error {code}: {detail}")
        self.remote_code = code
        self.detail = detail


# --- dispatcher ---
class PolicyMismatch(DataServiceError):
    code = 400


class UnknownJob(DataServiceError):
    code = 401


class WrongPolicy(DataServiceError):
    code = 402


class UnknownWorker(DataServiceError):
    code = 403


class CorruptJournal(DataServiceError):
    code = 404


# --- worker ---
class WrongWorkerForRound(DataServiceError):
    code = 500


class RoundExpired(DataServiceError):
    code = 501


class GraphInstantiationFailure(DataServiceError):
    code = 502


# --- client ---
class DispatcherUnreachable(DataServiceError):
    code = 600


class AllWorkersLost(DataServiceError):
    code = 601


class ConfigError(DataServiceError):
    code = 602


# --- bench ---
class LaunchFailure(DataServiceError):
    code = 700


class ExperimentTimeout(DataServiceError):
    code = 701


class NegativeParam(DataServiceError):
    code = 702


class InvalidSizes(DataServiceError):
    code = 703


class UnknownTarget(DataServiceError):
    code = 704


def _collect(cls: Type[DataServiceError]) -> Dict[int, Type[DataServiceError]]:
    table = {}
    for sub in cls.__subclasses__():
        table[sub.code] = sub
        table.update(_collect(sub))
    return table


_BY_CODE = _collect(DataServiceError)


def error_from_code(code: int, detail: str) -> DataServiceError:
    """
    Rebuilds a local exception from a (code, detail) pair received over the wire.

    Classes whose constructor takes structured arguments cannot be rebuilt from
    a detail string; those, and unknown codes, surface as `RemoteError`.
    """
    cls = _BY_CODE.get(code)
    if cls is None or cls in (UnknownFunction, FunctionFailure, CorruptRecord, UnknownType, RemoteError):
        return RemoteError(code, detail)
    return cls(detail)
