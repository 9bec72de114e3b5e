"""Analysis exports: edge-frequency maps, accounting tables, seed summaries."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SpaceMismatch
from .policy import CodingKind, PolicyDims, WeightCoding, param_accounting
from .search_space import Genome, Kind, SearchSpaceSpec, deserialize

# (state_dim, action_dim) of the four locomotion benchmarks
BENCHMARK_ENVIRONMENTS: dict[str, tuple[int, int]] = {
    "Striker": (23, 7),
    "HalfCheetah": (17, 6),
    "Hopper": (11, 3),
    "Walker2d": (17, 6),
}
REFERENCE_HIDDEN = (41,)


@dataclass(frozen=True)
class EdgeFrequency:
    label: str
    p: float
    color: float


def _as_genome(item, spec: SearchSpaceSpec) -> Genome:
    if isinstance(item, Genome):
        if item.space_hash != spec.space_hash:
            raise SpaceMismatch(f"genome space {item.hash_hex} != {spec.hash_hex}")
        return item
    return deserialize(item, spec)


def edge_frequency_report(genomes: Iterable, spec: SearchSpaceSpec) -> list[EdgeFrequency]:
    """Per-edge selection frequency ``p`` and color value ``2|p - 1/2|``.

    Works on boolean edge spaces (one two-way choice per edge) and on
    fixed-count edge spaces (one many-of point over all candidate edges).
    """
    genomes = [_as_genome(g, spec) for g in genomes]
    if not genomes:
        raise ValueError("need at least one genome")
    points = spec.decision_points
    boolean = [d for d, dp in enumerate(points) if dp.kind is Kind.ONE_OF and dp.num_alternatives == 2
               and dp.label.startswith("edge[")]
    if boolean:
        counts = np.array([[g.choices[d] for d in boolean] for g in genomes], dtype=float)
        labels = [points[d].label for d in boolean]
    else:
        many = [d for d, dp in enumerate(points) if dp.kind is Kind.MANY_OF and dp.label == "edges"]
        if not many:
            raise ValueError("search space has no edge decision points")
        d = many[0]
        n = points[d].num_alternatives
        counts = np.zeros((len(genomes), n))
        for row, g in enumerate(genomes):
            counts[row, list(g.choices[d])] = 1.0
        labels = [f"edge#{i}" for i in range(n)]
    p = counts.mean(axis=0)
    return [EdgeFrequency(lab, float(pi), float(2.0 * abs(pi - 0.5))) for lab, pi in zip(labels, p)]


def edge_frequency_csv(rows: Sequence[EdgeFrequency]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["edge", "p", "color"])
    for r in rows:
        writer.writerow([r.label, repr(r.p), repr(r.color)])
    return buf.getvalue()


def benchmark_codings(dims: PolicyDims) -> list[tuple[str, WeightCoding]]:
    """The five coding families compared in the published accounting table."""
    return [
        ("Toeplitz", WeightCoding(CodingKind.TOEPLITZ, hidden_sizes=REFERENCE_HIDDEN)),
        ("Circulant", WeightCoding(CodingKind.CIRCULANT, hidden_sizes=REFERENCE_HIDDEN)),
        ("Unstructured", WeightCoding(CodingKind.UNSTRUCTURED, hidden_sizes=REFERENCE_HIDDEN)),
        ("Weight Sharing", WeightCoding(CodingKind.WEIGHT_SHARING, hidden_sizes=REFERENCE_HIDDEN,
                                        num_colors=max(dims.state_dim, dims.action_dim))),
        ("Edge Pruning", WeightCoding(CodingKind.EDGE_PRUNING, hidden_sizes=(32,), num_edges=64)),
    ]


@dataclass(frozen=True)
class AccountingRow:
    env: str
    coding: str
    weights: int
    compression_pct: float
    bits: int


def accounting_rows(environments: dict[str, tuple[int, int]] | None = None, codings=benchmark_codings) -> list[AccountingRow]:
    environments = BENCHMARK_ENVIRONMENTS if environments is None else environments
    rows = []
    for env, (s, a) in environments.items():
        dims = PolicyDims(s, a)
        for name, coding in codings(dims):
            acct = param_accounting(coding, dims, reference_hidden=REFERENCE_HIDDEN)
            rows.append(AccountingRow(env, name, acct.weight_params, acct.compression_pct, acct.bit_count))
    return rows


def accounting_table(environments: dict[str, tuple[int, int]] | None = None, codings=benchmark_codings) -> str:
    """CSV with one row per (environment, coding)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["env", "coding", "weights", "compression_pct", "bits"])
    for r in accounting_rows(environments, codings):
        writer.writerow([r.env, r.coding, r.weights, f"{r.compression_pct:.2f}", r.bits])
    return buf.getvalue()


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def final_eval_reward(log_path: str | Path) -> float | None:
    """Mean eval reward of the last iteration record, or None if there is none."""
    records = [r for r in read_jsonl(log_path) if r.get("type") == "iteration"]
    return records[-1]["eval_reward_mean"] if records else None


def seed_summary(finals: Sequence[float | None]) -> tuple[float | None, float | None]:
    """Mean and population std (ddof=0) over seeds with a final reward."""
    values = [v for v in finals if v is not None]
    if not values:
        return None, None
    arr = np.array(values, dtype=float)
    return float(arr.mean()), float(arr.std())
