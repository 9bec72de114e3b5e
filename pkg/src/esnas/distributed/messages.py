"""Wire messages between the aggregator and its workers.

Every message is one line of UTF-8 JSON with sorted keys and no insignificant
whitespace, terminated by ``\\n``. A ``"type"`` field selects the schema.
Decoding rejects missing fields, unknown fields and wrongly typed values.

Perturbations travel as 64-bit seeds. The weight vector is broadcast once per
iteration as a :class:`SnapshotHeader` followed by :class:`ThetaChunk` lines
so that no single message grows with the parameter count.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Union

import numpy as np

from ..errors import ParseError, SchemaViolation
from ..normalizer import RunningNormalizer

PROTOCOL_VERSION = 1
CHUNK_FLOATS = 2000
MAX_MESSAGE_BYTES = 64 * 1024


class Role(str, enum.Enum):
    PERTURBED = "PERTURBED"
    EVAL = "EVAL"


class Status(str, enum.Enum):
    OK = "OK"
    FAILED = "FAILED"


@dataclass(frozen=True)
class EvalRequest:
    iteration: int
    request_id: int
    genome: str
    theta_version: int
    perturbation_seed: int | None
    sign: int
    role: Role

    def __post_init__(self) -> None:
        role = Role(self.role)
        object.__setattr__(self, "role", role)
        if self.sign not in (-1, 0, 1):
            raise SchemaViolation(f"sign must be -1, 0 or 1, got {self.sign}")
        is_eval = role is Role.EVAL
        if is_eval != (self.sign == 0) or is_eval != (self.perturbation_seed is None):
            raise SchemaViolation("EVAL requests need sign 0 and no seed; PERTURBED requests need both")
        if self.perturbation_seed is not None and not 0 <= self.perturbation_seed < 2**64:
            raise SchemaViolation("perturbation_seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class EvalResult:
    request_id: int
    status: Status
    objective: float | None = None
    eval_objective: float | None = None
    steps: int = 0
    normalizer_partial: tuple | None = None  # (count, mean, m2) as tuples
    reason: str | None = None
    worker_id: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        status = Status(self.status)
        object.__setattr__(self, "status", status)
        if self.normalizer_partial is not None:
            count, mean, m2 = self.normalizer_partial
            object.__setattr__(
                self,
                "normalizer_partial",
                (int(count), tuple(float(x) for x in mean), tuple(float(x) for x in m2)),
            )
        if status is Status.OK:
            for value in (self.objective, self.eval_objective):
                if value is None or not math.isfinite(value):
                    raise SchemaViolation("OK results need finite objectives")
            object.__setattr__(self, "objective", float(self.objective))
            object.__setattr__(self, "eval_objective", float(self.eval_objective))
        elif not self.reason:
            raise SchemaViolation("FAILED results need a reason")

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    def partial_normalizer(self) -> RunningNormalizer | None:
        if self.normalizer_partial is None:
            return None
        count, mean, m2 = self.normalizer_partial
        return RunningNormalizer(len(mean), count, np.array(mean), np.array(m2))

    @classmethod
    def failed(cls, request_id: int, reason: str, worker_id: int = 0) -> EvalResult:
        return cls(request_id, Status.FAILED, reason=reason, worker_id=worker_id)


@dataclass(frozen=True)
class Handshake:
    protocol: int
    space_hash: str
    config: dict
    worker_id: int = 0


@dataclass(frozen=True)
class SnapshotHeader:
    version: int
    dim: int
    sigma: float
    num_chunks: int
    normalizer: dict | None


@dataclass(frozen=True)
class ThetaChunk:
    version: int
    index: int
    values: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


@dataclass(frozen=True)
class Shutdown:
    reason: str = ""


Message = Union[EvalRequest, EvalResult, Handshake, SnapshotHeader, ThetaChunk, Shutdown]

_INT = (int,)
_NUM = (int, float)


def _opt(types):
    return types + (type(None),)


# type tag -> (class, {field: accepted json types})
_SCHEMAS: dict[str, tuple[type, dict[str, tuple]]] = {
    "eval_request": (EvalRequest, {
        "iteration": _INT, "request_id": _INT, "genome": (str,), "theta_version": _INT,
        "perturbation_seed": _opt(_INT), "sign": _INT, "role": (str,),
    }),
    "eval_result": (EvalResult, {
        "request_id": _INT, "status": (str,), "objective": _opt(_NUM), "eval_objective": _opt(_NUM),
        "steps": _INT, "normalizer_partial": _opt((dict,)), "reason": _opt((str,)), "worker_id": _INT,
    }),
    "handshake": (Handshake, {"protocol": _INT, "space_hash": (str,), "config": (dict,), "worker_id": _INT}),
    "snapshot": (SnapshotHeader, {
        "version": _INT, "dim": _INT, "sigma": _NUM, "num_chunks": _INT, "normalizer": _opt((dict,)),
    }),
    "theta_chunk": (ThetaChunk, {"version": _INT, "index": _INT, "values": (list,)}),
    "shutdown": (Shutdown, {"reason": (str,)}),
}
_TAGS = {cls: tag for tag, (cls, _) in _SCHEMAS.items()}


def _to_wire(msg: Message) -> dict[str, Any]:
    tag = _TAGS.get(type(msg))
    if tag is None:
        raise SchemaViolation(f"not a protocol message: {type(msg).__name__}")
    out: dict[str, Any] = {"type": tag}
    for name in _SCHEMAS[tag][1]:
        value = getattr(msg, name)
        if isinstance(value, enum.Enum):
            value = value.value
        elif name == "normalizer_partial" and value is not None:
            value = {"count": value[0], "mean": list(value[1]), "m2": list(value[2])}
        elif isinstance(value, tuple):
            value = list(value)
        out[name] = value
    return out


def encode_message(msg: Message) -> bytes:
    """Canonical bytes: sorted keys, compact separators, trailing newline."""
    try:
        text = json.dumps(_to_wire(msg), sort_keys=True, separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise SchemaViolation(f"message is not encodable: {exc}") from None
    return text.encode("utf-8") + b"\n"


def _check_partial(value: dict) -> tuple:
    if set(value) != {"count", "mean", "m2"}:
        raise SchemaViolation("normalizer_partial needs exactly count, mean, m2")
    if not isinstance(value["count"], int) or not isinstance(value["mean"], list) or not isinstance(value["m2"], list):
        raise SchemaViolation("normalizer_partial has wrong field types")
    if len(value["mean"]) != len(value["m2"]):
        raise SchemaViolation("normalizer_partial mean and m2 differ in length")
    return value["count"], value["mean"], value["m2"]


def decode_message(data: bytes | str) -> Message:
    """Inverse of :func:`encode_message`; strict about the schema."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"message is not UTF-8: {exc}") from None
    if data.endswith("\n"):
        data = data[:-1]
    if "\n" in data:
        raise ParseError("exactly one message per line")
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed message: {exc}") from None
    if not isinstance(obj, dict):
        raise SchemaViolation("message must be a JSON object")
    tag = obj.pop("type", None)
    if tag not in _SCHEMAS:
        raise SchemaViolation(f"unknown message type {tag!r}")
    cls, fields = _SCHEMAS[tag]
    missing = set(fields) - set(obj)
    unknown = set(obj) - set(fields)
    if missing or unknown:
        raise SchemaViolation(f"{tag}: missing {sorted(missing)}, unknown {sorted(unknown)}")
    for name, types in fields.items():
        value = obj[name]
        if isinstance(value, bool) or not isinstance(value, types):
            raise SchemaViolation(f"{tag}.{name} has type {type(value).__name__}")
    if tag == "eval_result" and obj["normalizer_partial"] is not None:
        obj["normalizer_partial"] = _check_partial(obj["normalizer_partial"])
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SchemaViolation):
            raise
        raise SchemaViolation(f"{tag}: {exc}") from None


# ---------------------------------------------------------------------------
# weight broadcast


@dataclass
class ThetaSnapshot:
    """What every worker needs besides the request: θ, σ and the normalizer."""

    version: int
    theta: np.ndarray
    sigma: float
    normalizer: RunningNormalizer | None = None


def snapshot_messages(snapshot: ThetaSnapshot, chunk: int = CHUNK_FLOATS) -> Iterator[Message]:
    theta = np.asarray(snapshot.theta, dtype=float)
    num_chunks = max(1, -(-len(theta) // chunk))
    norm = snapshot.normalizer.to_dict() if snapshot.normalizer is not None else None
    yield SnapshotHeader(snapshot.version, len(theta), float(snapshot.sigma), num_chunks, norm)
    for i in range(num_chunks):
        yield ThetaChunk(snapshot.version, i, theta[i * chunk:(i + 1) * chunk].tolist())


class SnapshotAssembler:
    """Rebuilds a :class:`ThetaSnapshot` from its header and chunks."""

    def __init__(self, header: SnapshotHeader):
        self.header = header
        self.chunks: dict[int, tuple] = {}

    def add(self, chunk: ThetaChunk) -> ThetaSnapshot | None:
        if chunk.version != self.header.version or not 0 <= chunk.index < self.header.num_chunks:
            raise SchemaViolation("theta chunk does not belong to the current snapshot")
        self.chunks[chunk.index] = chunk.values
        if len(self.chunks) < self.header.num_chunks:
            return None
        theta = np.array([v for i in range(self.header.num_chunks) for v in self.chunks[i]], dtype=float)
        if len(theta) != self.header.dim:
            raise SchemaViolation(f"snapshot has {len(theta)} values, header says {self.header.dim}")
        norm = self.header.normalizer
        normalizer = RunningNormalizer.from_dict(norm) if norm is not None else None
        return ThetaSnapshot(self.header.version, theta, self.header.sigma, normalizer)
