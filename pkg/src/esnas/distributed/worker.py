"""Worker side: turn an :class:`EvalRequest` into an :class:`EvalResult`.

Run standalone as::

    python -m esnas worker --stdio
    python -m esnas worker --tcp 127.0.0.1:0

In TCP mode the worker listens, prints ``PORT <n>`` on stdout and serves one
aggregator connection.
"""

from __future__ import annotations

import argparse
import socket
import sys
from typing import Any, BinaryIO

import numpy as np

from ..environments import Environment, make_env, rollout
from ..errors import EsnasError, SchemaViolation
from ..policy import PolicyDims, WeightCoding, materialize, search_space
from ..rng import perturbation
from ..search_space import deserialize
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
)


def reconstruct_perturbation(seed: int, dim: int, sigma: float = 1.0, sign: int = 1) -> np.ndarray:
    """``sign * sigma * g`` where ``g`` is regenerated from its seed."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return (sign * sigma) * perturbation(seed, dim)


class Worker:
    """Evaluates requests against a read-only weight snapshot."""

    def __init__(self, env: Environment, coding: WeightCoding, dims: PolicyDims, worker_id: int = 0):
        self.env = env
        self.coding = coding
        self.dims = dims
        self.spec = search_space(coding, dims)
        self.worker_id = worker_id
        self.snapshot: ThetaSnapshot | None = None

    @classmethod
    def from_config(cls, config: dict[str, Any], worker_id: int = 0) -> Worker:
        dims = PolicyDims(*config["dims"])
        return cls(make_env(config["env"]), WeightCoding.from_dict(config["coding"]), dims, worker_id)

    def config(self) -> dict[str, Any]:
        return {
            "env": self.env.to_config(),
            "coding": self.coding.to_dict(),
            "dims": [self.dims.state_dim, self.dims.action_dim],
        }

    def load(self, snapshot: ThetaSnapshot) -> None:
        self.snapshot = snapshot

    def evaluate(self, request: EvalRequest, snapshot: ThetaSnapshot | None = None) -> EvalResult:
        snap = snapshot if snapshot is not None else self.snapshot
        try:
            if snap is None or snap.version != request.theta_version:
                raise SchemaViolation("request does not match the loaded weight snapshot")
            genome = deserialize(request.genome, self.spec)
            theta = snap.theta
            if request.role is Role.PERTURBED:
                theta = theta + reconstruct_perturbation(request.perturbation_seed, len(theta), snap.sigma,
                                                         request.sign)
            graph = materialize(genome, theta, self.coding, self.dims)
            training = request.role is Role.PERTURBED
            traj = rollout(self.env, graph, snap.normalizer, training=training, episode=request.iteration)
        except (EsnasError, ValueError, FloatingPointError, KeyError) as exc:
            return EvalResult.failed(request.request_id, f"{type(exc).__name__}: {exc}", self.worker_id)
        partial = traj.normalizer_partial
        packed = None if partial is None else (partial.count, partial.mean.tolist(), partial.m2.tolist())
        return EvalResult(
            request.request_id,
            Status.OK,
            traj.total_training_reward,
            traj.total_eval_reward,
            traj.steps_taken,
            packed,
            worker_id=self.worker_id,
        )


class Channel:
    """Newline-framed message stream over a pair of binary files."""

    def __init__(self, reader: BinaryIO, writer: BinaryIO):
        self.reader = reader
        self.writer = writer

    def send(self, msg) -> None:
        self.writer.write(encode_message(msg))
        self.writer.flush()

    def send_many(self, msgs) -> None:
        self.writer.write(b"".join(encode_message(m) for m in msgs))
        self.writer.flush()

    def recv(self):
        line = self.reader.readline()
        if not line:
            raise EOFError("channel closed")
        return decode_message(line)


def serve(channel: Channel) -> int:
    """Handshake, then answer snapshots and requests until shutdown or EOF."""
    try:
        hello = channel.recv()
    except EOFError:
        return 1
    if not isinstance(hello, Handshake) or hello.protocol != PROTOCOL_VERSION:
        channel.send(Shutdown("expected a protocol 1 handshake"))
        return 2
    worker = Worker.from_config(hello.config, hello.worker_id)
    channel.send(Handshake(PROTOCOL_VERSION, worker.spec.hash_hex, worker.config(), hello.worker_id))
    if worker.spec.hash_hex != hello.space_hash:
        return 2
    assembler: SnapshotAssembler | None = None
    while True:
        try:
            msg = channel.recv()
        except EOFError:
            return 0
        if isinstance(msg, Shutdown):
            return 0
        if isinstance(msg, SnapshotHeader):
            assembler = SnapshotAssembler(msg)
        elif isinstance(msg, ThetaChunk):
            if assembler is None:
                raise SchemaViolation("theta chunk before snapshot header")
            done = assembler.add(msg)
            if done is not None:
                worker.load(done)
        elif isinstance(msg, EvalRequest):
            channel.send(worker.evaluate(msg))
        else:
            raise SchemaViolation(f"unexpected message {type(msg).__name__}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="ES-ENAS rollout worker")
    mode = parser.add_mutually_exclusive_group(required=True)
    mode.add_argument("--stdio", action="store_true", help="speak the protocol on stdin/stdout")
    mode.add_argument("--tcp", metavar="HOST:PORT", help="listen for one aggregator connection")
    args = parser.parse_args(argv)
    if args.stdio:
        return serve(Channel(sys.stdin.buffer, sys.stdout.buffer))
    host, _, port = args.tcp.rpartition(":")
    with socket.create_server((host or "127.0.0.1", int(port))) as server:
        print(f"PORT {server.getsockname()[1]}", flush=True)
        conn, _ = server.accept()
        with conn, conn.makefile("rb") as reader, conn.makefile("wb") as writer:
            return serve(Channel(reader, writer))


if __name__ == "__main__":
    sys.exit(main())
