"""Aggregator/worker evaluation fabric."""

from __future__ import annotations

from .backends import BACKENDS, ProcessBackend, SerialBackend, TCPBackend, ThreadBackend, dispatch, make_backend
from .messages import (
    PROTOCOL_VERSION,
    EvalRequest,
    EvalResult,
    Handshake,
    Role,
    Shutdown,
    SnapshotAssembler,
    SnapshotHeader,
    Status,
    ThetaChunk,
    ThetaSnapshot,
    decode_message,
    encode_message,
    snapshot_messages,
)
from .worker import Channel, Worker, reconstruct_perturbation, serve

__all__ = [
    "BACKENDS",
    "Channel",
    "PROTOCOL_VERSION",
    "EvalRequest",
    "EvalResult",
    "Handshake",
    "ProcessBackend",
    "Role",
    "SerialBackend",
    "Shutdown",
    "SnapshotAssembler",
    "SnapshotHeader",
    "Status",
    "TCPBackend",
    "ThetaChunk",
    "ThetaSnapshot",
    "ThreadBackend",
    "Worker",
    "decode_message",
    "dispatch",
    "encode_message",
    "make_backend",
    "reconstruct_perturbation",
    "serve",
    "snapshot_messages",
]
