"""Dispatch backends.

All backends share one contract: ``dispatch(requests, snapshot)`` blocks until
every request has a result and returns them sorted by ``request_id``. Request
``i`` always goes to worker ``i mod num_workers``, and evaluation is a pure
function of (request, snapshot), so the returned results do not depend on the
number of workers or on scheduling.
"""

from __future__ import annotations

import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from ..errors import ConfigError, SpaceMismatch
from .messages import PROTOCOL_VERSION, EvalRequest, EvalResult, Handshake, Shutdown, ThetaSnapshot, snapshot_messages
from .worker import Channel, Worker

__all__ = ["SerialBackend", "ThreadBackend", "ProcessBackend", "TCPBackend", "make_backend", "dispatch"]


def _check(requests: Sequence[EvalRequest], snapshot: ThetaSnapshot) -> None:
    stale = [r.request_id for r in requests if r.theta_version != snapshot.version]
    if stale:
        raise ValueError(f"requests {stale[:5]} do not match snapshot version {snapshot.version}")
    if len({r.request_id for r in requests}) != len(requests):
        raise ValueError("request ids must be unique")


def _shards(requests: Sequence[EvalRequest], n: int) -> list[list[EvalRequest]]:
    return [list(requests[k::n]) for k in range(n)]


class Backend:
    num_workers = 1

    def dispatch(self, requests: Sequence[EvalRequest], snapshot: ThetaSnapshot) -> list[EvalResult]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class SerialBackend(Backend):
    """Evaluate in the calling thread. The reference for every other backend."""

    def __init__(self, worker: Worker):
        self.worker = worker

    def dispatch(self, requests, snapshot):
        _check(requests, snapshot)
        return sorted((self.worker.evaluate(r, snapshot) for r in requests), key=lambda r: r.request_id)


class ThreadBackend(Backend):
    def __init__(self, worker: Worker, num_workers: int = 4):
        if num_workers < 1:
            raise ConfigError("num_workers must be >= 1")
        self.num_workers = num_workers
        self.workers = [Worker(worker.env, worker.coding, worker.dims, k) for k in range(num_workers)]
        self.pool = ThreadPoolExecutor(max_workers=num_workers, thread_name_prefix="esnas-worker")

    def dispatch(self, requests, snapshot):
        _check(requests, snapshot)

        def run(k, shard):
            return [self.workers[k].evaluate(r, snapshot) for r in shard]

        futures = [self.pool.submit(run, k, s) for k, s in enumerate(_shards(requests, self.num_workers))]
        results = [r for f in futures for r in f.result()]
        return sorted(results, key=lambda r: r.request_id)

    def close(self) -> None:
        self.pool.shutdown(wait=True)


class _ChannelBackend(Backend):
    """Speaks the newline-JSON protocol to out-of-process workers."""

    def __init__(self, worker: Worker, channels: list[Channel]):
        self.num_workers = len(channels)
        self.channels = channels
        self.space_hash = worker.spec.hash_hex
        config = worker.config()
        for k, ch in enumerate(channels):
            ch.send(Handshake(PROTOCOL_VERSION, self.space_hash, config, k))
        for ch in channels:
            reply = ch.recv()
            if not isinstance(reply, Handshake) or reply.protocol != PROTOCOL_VERSION:
                raise ConfigError(f"worker refused the handshake: {reply}")
            if reply.space_hash != self.space_hash:
                raise SpaceMismatch(f"worker space {reply.space_hash} != aggregator space {self.space_hash}")
        self.pool = ThreadPoolExecutor(max_workers=2 * self.num_workers, thread_name_prefix="esnas-io")

    def dispatch(self, requests, snapshot):
        _check(requests, snapshot)
        header = list(snapshot_messages(snapshot))

        def send(ch, shard):
            ch.send_many(header + shard)

        def receive(ch, shard):
            return [ch.recv() for _ in shard]

        shards = _shards(requests, self.num_workers)
        senders = [self.pool.submit(send, ch, s) for ch, s in zip(self.channels, shards)]
        readers = [self.pool.submit(receive, ch, s) for ch, s in zip(self.channels, shards)]
        for f in senders:
            f.result()
        results = [r for f in readers for r in f.result()]
        if any(not isinstance(r, EvalResult) for r in results):
            raise ConfigError("worker answered with a non-result message")
        return sorted(results, key=lambda r: r.request_id)

    def close(self) -> None:
        for ch in self.channels:
            try:
                ch.send(Shutdown("done"))
            except (BrokenPipeError, OSError, ValueError):
                pass
        self.pool.shutdown(wait=True)


def _worker_command(*mode: str) -> list[str]:
    return [sys.executable, "-m", "esnas", "worker", *mode]


def _worker_env() -> dict[str, str]:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[2])
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


class ProcessBackend(_ChannelBackend):
    """One ``--stdio`` subprocess per worker."""

    def __init__(self, worker: Worker, num_workers: int = 2):
        if num_workers < 1:
            raise ConfigError("num_workers must be >= 1")
        self.procs = [
            subprocess.Popen(_worker_command("--stdio"), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                             env=_worker_env())
            for _ in range(num_workers)
        ]
        super().__init__(worker, [Channel(p.stdout, p.stdin) for p in self.procs])

    def close(self) -> None:
        super().close()
        for p in self.procs:
            p.stdin.close()
            p.wait(timeout=30)
            p.stdout.close()


class TCPBackend(_ChannelBackend):
    """One TCP connection per worker.

    With ``addresses=None`` the backend starts local workers listening on
    ephemeral ports; otherwise it connects to already running workers.
    """

    def __init__(self, worker: Worker, num_workers: int = 2, addresses: Sequence[tuple[str, int]] | None = None):
        import socket

        self.procs: list[subprocess.Popen] = []
        if addresses is None:
            addresses = []
            for _ in range(num_workers):
                p = subprocess.Popen(_worker_command("--tcp", "127.0.0.1:0"), stdout=subprocess.PIPE,
                                     env=_worker_env(), text=True)
                self.procs.append(p)
                line = p.stdout.readline().split()
                if len(line) != 2 or line[0] != "PORT":
                    raise ConfigError(f"worker did not report a port: {line}")
                addresses.append(("127.0.0.1", int(line[1])))
        self.sockets = [socket.create_connection(a, timeout=600) for a in addresses]
        self.files = [(s.makefile("rb"), s.makefile("wb")) for s in self.sockets]
        super().__init__(worker, [Channel(r, w) for r, w in self.files])

    def close(self) -> None:
        super().close()
        for (r, w), s in zip(self.files, self.sockets):
            for f in (w, r):
                try:
                    f.close()
                except OSError:
                    pass
            s.close()
        for p in self.procs:
            p.wait(timeout=30)
            p.stdout.close()


BACKENDS = {"serial": SerialBackend, "threads": ThreadBackend, "process": ProcessBackend, "tcp": TCPBackend}


def make_backend(kind: str, worker: Worker, num_workers: int = 1) -> Backend:
    if kind not in BACKENDS:
        raise ConfigError(f"unknown backend {kind!r}; expected one of {sorted(BACKENDS)}")
    if kind == "serial":
        return SerialBackend(worker)
    return BACKENDS[kind](worker, num_workers)


def dispatch(requests: Sequence[EvalRequest], snapshot: ThetaSnapshot, backend: Backend) -> list[EvalResult]:
    return backend.dispatch(requests, snapshot)
