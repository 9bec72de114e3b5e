"""Feedforward policy graphs, weight codings and parameter accounting.

Vertices are numbered state first, then each hidden layer, then the action
block, so every edge ``(i, j)`` satisfies ``i < j`` and a forward pass is a
single sweep in vertex order. A :class:`WeightCoding` decides how the shared
weight vector and a genome turn into edge weights:

* structured codings (unstructured, Toeplitz, circulant, masked) ignore the
  genome and expand the weight vector layer by layer;
* weight sharing gives every candidate edge a color whose scalar it uses;
* edge pruning keeps only the edges the genome selects, each with its own
  weight entry.

The shared weight vector is always laid out as ``[weight block, biases]``
where biases cover every non-state vertex in vertex order.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    DimensionMismatch,
    GenomeSpaceMismatch,
    NonFiniteActivation,
    RangeError,
    UnknownId,
    WeightLengthMismatch,
)
from .search_space import Genome, SearchSpaceSpec, many_of, one_of

# ---------------------------------------------------------------------------
# nonlinearities

NONLINEARITY_NAMES = (
    "tanh",
    "relu",
    "exp",
    "identity",
    "sin",
    "sigmoid",
    "abs",
    "cos",
    "square",
    "reciprocal",
    "step",
)
TANH, RELU, EXP, IDENTITY, SIN, SIGMOID, ABS, COS, SQUARE, RECIPROCAL, STEP = range(11)

EXP_CLAMP = 30.0
RECIPROCAL_FLOOR = 1e-6


def _exp(x):
    return np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))


def _reciprocal(x):
    return np.sign(x) / np.maximum(np.abs(x), RECIPROCAL_FLOOR)


def _step(x):
    return (np.asarray(x) > 0).astype(float)


_NONLINEARITIES: tuple[Callable[[Any], Any], ...] = (
    np.tanh,
    lambda x: np.maximum(x, 0.0),
    _exp,
    lambda x: np.asarray(x, dtype=float) * 1.0,
    np.sin,
    expit,
    np.abs,
    np.cos,
    np.square,
    _reciprocal,
    _step,
)


def apply_nonlinearity(nonlinearity_id: int, x):
    """Evaluate nonlinearity ``nonlinearity_id`` (0..10) elementwise.

    Exp clamps its input to [-30, 30]; reciprocal is ``sign(x) / max(|x|, 1e-6)``;
    step is 1 for ``x > 0`` and 0 otherwise.
    """
    if isinstance(nonlinearity_id, bool) or not 0 <= int(nonlinearity_id) < len(_NONLINEARITIES):
        raise UnknownId(f"no nonlinearity with id {nonlinearity_id!r}")
    out = _NONLINEARITIES[int(nonlinearity_id)](x)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# structured matrices


def toeplitz_expand(params, a: int, b: int) -> np.ndarray:
    """Constant-diagonal a x b matrix from a + b - 1 parameters.

    The first row reads ``params[0:b]`` left to right; the first column below
    the diagonal continues with ``params[b:a+b-1]`` top to bottom.
    """
    params = np.asarray(params, dtype=float)
    if a < 1 or b < 1 or params.shape != (a + b - 1,):
        raise DimensionMismatch(f"toeplitz {a}x{b} needs {a + b - 1} parameters, got {params.shape}")
    offset = np.arange(b)[None, :] - np.arange(a)[:, None]
    index = np.where(offset >= 0, offset, b - 1 - offset)
    return params[index]


def circulant_expand(params, a: int, b: int) -> np.ndarray:
    """Top-left a x b block of the n x n circulant, n = max(a, b)."""
    params = np.asarray(params, dtype=float)
    n = max(a, b)
    if a < 1 or b < 1 or params.shape != (n,):
        raise DimensionMismatch(f"circulant {a}x{b} needs {n} parameters, got {params.shape}")
    index = (np.arange(b)[None, :] - np.arange(a)[:, None]) % n
    return params[index]


def soft_mask(gamma, alpha: float = 0.01) -> np.ndarray:
    """Two-way softmax of each logit against zero at temperature ``alpha``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return expit(np.asarray(gamma, dtype=float) / alpha)


def mask_fraction(mask) -> float:
    """Fraction of mask entries above one half (the kept proportion)."""
    mask = np.asarray(mask, dtype=float)
    return float(np.mean(mask > 0.5)) if mask.size else 0.0


def masked_training_objective(f: float, lam: float, beta: float) -> float:
    """Convex mix of the normalized reward and the pruned fraction ``1 - lam``."""
    if not 0.0 <= beta <= 1.0:
        raise RangeError(f"beta must lie in [0, 1], got {beta}")
    if not 0.0 <= lam <= 1.0:
        raise RangeError(f"lambda must lie in [0, 1], got {lam}")
    return beta * f + (1.0 - beta) * (1.0 - lam)


def annealed_beta(iteration: int, total_iterations: int, start: float = 0.5, end: float = 1.0) -> float:
    if total_iterations <= 1:
        return end
    frac = min(max(iteration / (total_iterations - 1), 0.0), 1.0)
    return start + (end - start) * frac


# ---------------------------------------------------------------------------
# graphs


@dataclass(frozen=True)
class PolicyGraph:
    num_vertices: int
    state_dim: int
    action_dim: int
    edges: tuple[tuple[int, int, float], ...]
    nonlinearity_ids: tuple[int, ...]
    biases: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        n_out = self.num_vertices - self.state_dim
        if n_out < self.action_dim or self.action_dim < 1 or self.state_dim < 1:
            raise DimensionMismatch("graph needs at least |S| + |A| vertices")
        if len(self.nonlinearity_ids) != n_out:
            raise DimensionMismatch(f"expected {n_out} nonlinearity ids, got {len(self.nonlinearity_ids)}")
        if not self.biases:
            object.__setattr__(self, "biases", (0.0,) * n_out)
        elif len(self.biases) != n_out:
            raise DimensionMismatch(f"expected {n_out} biases, got {len(self.biases)}")
        seen = set()
        for i, j, w in self.edges:
            if not (0 <= i < j < self.num_vertices and j >= self.state_dim):
                raise DimensionMismatch(f"edge ({i}, {j}) violates i < j, |S| <= j < k")
            if (i, j) in seen:
                raise DimensionMismatch(f"duplicate edge ({i}, {j})")
            if not math.isfinite(w):
                raise NonFiniteActivation(f"edge ({i}, {j}) has non-finite weight {w}")
            seen.add((i, j))
        for nid in self.nonlinearity_ids:
            if not 0 <= nid < len(_NONLINEARITIES):
                raise UnknownId(f"no nonlinearity with id {nid}")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def _plan(self):
        k, s = self.num_vertices, self.state_dim
        weights = np.zeros((k, k))
        level = np.zeros(k, dtype=int)
        incoming: dict[int, list[int]] = {}
        for i, j, w in self.edges:
            weights[i, j] = w
            incoming.setdefault(j, []).append(i)
        for j in range(s, k):
            level[j] = 1 + max((level[i] for i in incoming.get(j, ())), default=0)
        bias = np.zeros(k)
        bias[s:] = self.biases
        act = np.full(k, -1)
        act[s:] = self.nonlinearity_ids
        steps = []
        for lv in range(1, int(level.max(initial=0)) + 1):
            verts = np.flatnonzero(level == lv)
            groups = [(int(nid), np.flatnonzero(act[verts] == nid)) for nid in np.unique(act[verts])]
            steps.append((verts, weights[:, verts], bias[verts], groups))
        return steps

    def forward(self, state) -> np.ndarray:
        """Evaluate the graph on one state (shape ``(|S|,)``) or a batch ``(n, |S|)``."""
        x = np.asarray(state, dtype=float)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.shape[-1] != self.state_dim:
            raise DimensionMismatch(f"state has {batch.shape[-1]} entries, graph expects {self.state_dim}")
        values = np.zeros((batch.shape[0], self.num_vertices))
        values[:, : self.state_dim] = batch
        for verts, w_cols, b, groups in self._plan:
            # overflow is caught below as a non-finite activation
            with np.errstate(over="ignore", invalid="ignore"):
                pre = values @ w_cols + b
                out = np.empty_like(pre)
                for nid, cols in groups:
                    out[:, cols] = _NONLINEARITIES[nid](pre[:, cols])
            if not np.all(np.isfinite(out)):
                bad = int(verts[np.flatnonzero(~np.isfinite(out).all(axis=0))[0]])
                raise NonFiniteActivation(f"vertex {bad} produced a non-finite value")
            values[:, verts] = out
        actions = values[:, self.num_vertices - self.action_dim :]
        return actions[0] if single else actions

    def to_dict(self) -> dict:
        return {
            "num_vertices": self.num_vertices,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "edges": [[i, j, w] for i, j, w in self.edges],
            "nonlinearity_ids": list(self.nonlinearity_ids),
            "biases": list(self.biases),
        }

    @classmethod
    def from_dict(cls, data: dict) -> PolicyGraph:
        return cls(
            num_vertices=int(data["num_vertices"]),
            state_dim=int(data["state_dim"]),
            action_dim=int(data["action_dim"]),
            edges=tuple((int(i), int(j), float(w)) for i, j, w in data["edges"]),
            nonlinearity_ids=tuple(int(n) for n in data["nonlinearity_ids"]),
            biases=tuple(float(b) for b in data["biases"]),
        )


def forward(graph: PolicyGraph, state) -> np.ndarray:
    return graph.forward(state)


# ---------------------------------------------------------------------------
# codings


class CodingKind(str, enum.Enum):
    UNSTRUCTURED = "UNSTRUCTURED"
    TOEPLITZ = "TOEPLITZ"
    CIRCULANT = "CIRCULANT"
    WEIGHT_SHARING = "WEIGHT_SHARING"
    EDGE_PRUNING = "EDGE_PRUNING"
    MASKED = "MASKED"


STRUCTURED = frozenset({CodingKind.UNSTRUCTURED, CodingKind.TOEPLITZ, CodingKind.CIRCULANT, CodingKind.MASKED})


@dataclass(frozen=True)
class PolicyDims:
    state_dim: int
    action_dim: int

    def __post_init__(self) -> None:
        if self.state_dim < 1 or self.action_dim < 1:
            raise DimensionMismatch("state and action dimensions must be positive")


@dataclass(frozen=True)
class WeightCoding:
    """How a genome and the shared weight vector become edge weights.

    ``num_edges`` selects a fixed-size edge subset; ``boolean_mode`` instead
    gives every candidate edge its own on/off decision.
    """

    kind: CodingKind
    hidden_sizes: tuple[int, ...] = ()
    num_colors: int | None = None
    num_edges: int | None = None
    boolean_mode: bool = False
    mask_alpha: float = 0.01
    nonlinearity_search: bool = False
    default_nonlinearity: int = TANH
    output_nonlinearity: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CodingKind(self.kind))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if any(h < 1 for h in self.hidden_sizes):
            raise DimensionMismatch("hidden layer sizes must be positive")
        if self.kind is CodingKind.WEIGHT_SHARING:
            if self.num_colors is None or self.num_colors < 1:
                raise ValueError("weight sharing needs num_colors >= 1")
        elif self.num_colors is not None:
            raise ValueError("num_colors only applies to weight sharing")
        if self.kind is CodingKind.EDGE_PRUNING:
            if self.boolean_mode == (self.num_edges is not None):
                raise ValueError("edge pruning needs exactly one of num_edges or boolean_mode")
            if self.num_edges is not None and self.num_edges < 1:
                raise ValueError("num_edges must be positive")
        elif self.num_edges is not None or self.boolean_mode:
            raise ValueError("num_edges / boolean_mode only apply to edge pruning")
        if self.mask_alpha <= 0:
            raise ValueError("mask_alpha must be positive")
        for nid in (self.default_nonlinearity, self.output_nonlinearity):
            if nid is not None and not 0 <= nid < len(_NONLINEARITIES):
                raise UnknownId(f"no nonlinearity with id {nid}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "hidden_sizes": list(self.hidden_sizes),
            "num_colors": self.num_colors,
            "num_edges": self.num_edges,
            "boolean_mode": self.boolean_mode,
            "mask_alpha": self.mask_alpha,
            "nonlinearity_search": self.nonlinearity_search,
            "default_nonlinearity": self.default_nonlinearity,
            "output_nonlinearity": self.output_nonlinearity,
        }

    @classmethod
    def from_dict(cls, data: dict) -> WeightCoding:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown coding fields: {sorted(unknown)}")
        kwargs = dict(data)
        kwargs["kind"] = CodingKind(str(kwargs["kind"]).upper())
        kwargs["hidden_sizes"] = tuple(kwargs.get("hidden_sizes", ()))
        return cls(**kwargs)


def layer_sizes(coding: WeightCoding, dims: PolicyDims) -> list[int]:
    return [dims.state_dim, *coding.hidden_sizes, dims.action_dim]


def layer_shapes(coding: WeightCoding, dims: PolicyDims) -> list[tuple[int, int]]:
    sizes = layer_sizes(coding, dims)
    return list(zip(sizes[:-1], sizes[1:]))


@functools.lru_cache(maxsize=128)
def candidate_edges(coding: WeightCoding, dims: PolicyDims) -> tuple[tuple[int, int], ...]:
    """All edges of the dense layered network, layer by layer, row-major."""
    sizes = layer_sizes(coding, dims)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for layer, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        for r in range(a):
            for c in range(b):
                out.append((int(offsets[layer] + r), int(offsets[layer + 1] + c)))
    return tuple(out)


def num_vertices(coding: WeightCoding, dims: PolicyDims) -> int:
    return sum(layer_sizes(coding, dims))


def num_biases(coding: WeightCoding, dims: PolicyDims) -> int:
    return num_vertices(coding, dims) - dims.state_dim


def weight_block_size(coding: WeightCoding, dims: PolicyDims) -> int:
    shapes = layer_shapes(coding, dims)
    kind = coding.kind
    if kind is CodingKind.UNSTRUCTURED:
        return sum(a * b for a, b in shapes)
    if kind is CodingKind.TOEPLITZ:
        return sum(a + b - 1 for a, b in shapes)
    if kind is CodingKind.CIRCULANT:
        return sum(max(a, b) for a, b in shapes)
    if kind is CodingKind.MASKED:
        return 2 * sum(a * b for a, b in shapes)
    if kind is CodingKind.WEIGHT_SHARING:
        return int(coding.num_colors)
    return len(candidate_edges(coding, dims))


def trainable_size(coding: WeightCoding, dims: PolicyDims) -> int:
    """Length of the shared weight vector: weight block plus all biases."""
    return weight_block_size(coding, dims) + num_biases(coding, dims)


def _edge_points(coding: WeightCoding, dims: PolicyDims) -> list:
    edges = candidate_edges(coding, dims)
    if coding.kind is CodingKind.EDGE_PRUNING:
        if coding.boolean_mode:
            return [one_of(2, f"edge[{i},{j}]") for i, j in edges]
        if coding.num_edges > len(edges):
            raise DimensionMismatch(f"cannot select {coding.num_edges} of {len(edges)} edges")
        return [many_of(len(edges), coding.num_edges, distinct=True, label="edges")]
    if coding.kind is CodingKind.WEIGHT_SHARING:
        return [one_of(coding.num_colors, f"color[{i},{j}]") for i, j in edges]
    return []


@functools.lru_cache(maxsize=128)
def search_space(coding: WeightCoding, dims: PolicyDims) -> SearchSpaceSpec:
    """The architecture search space a coding induces on the given dims."""
    nested: dict[str, list] = {"edges": _edge_points(coding, dims)}
    if coding.nonlinearity_search:
        nested["activations"] = [
            one_of(len(_NONLINEARITIES), f"act[{v}]")
            for v in range(dims.state_dim, num_vertices(coding, dims))
        ]
    return SearchSpaceSpec.from_nested(nested)


def _layer_matrices(coding: WeightCoding, dims: PolicyDims, block: np.ndarray) -> list[np.ndarray]:
    shapes = layer_shapes(coding, dims)
    mats = []
    pos = 0
    if coding.kind is CodingKind.MASKED:
        dense = sum(a * b for a, b in shapes)
        w_all, gamma_all = block[:dense], block[dense:]
        for a, b in shapes:
            w = w_all[pos : pos + a * b].reshape(a, b)
            m = soft_mask(gamma_all[pos : pos + a * b], coding.mask_alpha).reshape(a, b)
            mats.append(w * m)
            pos += a * b
        return mats
    for a, b in shapes:
        if coding.kind is CodingKind.UNSTRUCTURED:
            size = a * b
            mats.append(block[pos : pos + size].reshape(a, b))
        elif coding.kind is CodingKind.TOEPLITZ:
            size = a + b - 1
            mats.append(toeplitz_expand(block[pos : pos + size], a, b))
        else:
            size = max(a, b)
            mats.append(circulant_expand(block[pos : pos + size], a, b))
        pos += size
    return mats


def masked_keep_fraction(theta, coding: WeightCoding, dims: PolicyDims) -> float:
    """Kept proportion of a MASKED coding's gate for the given weight vector."""
    if coding.kind is not CodingKind.MASKED:
        raise ValueError("keep fraction is only defined for the masked coding")
    dense = sum(a * b for a, b in layer_shapes(coding, dims))
    gamma = np.asarray(theta, dtype=float)[dense : 2 * dense]
    return mask_fraction(soft_mask(gamma, coding.mask_alpha))


def selected_edge_indices(genome: Genome, coding: WeightCoding, dims: PolicyDims) -> list[int]:
    """Indices into :func:`candidate_edges` present in the materialized graph."""
    n_edges = len(candidate_edges(coding, dims))
    if coding.kind is CodingKind.EDGE_PRUNING:
        if coding.boolean_mode:
            return [e for e in range(n_edges) if genome.choices[e] == 1]
        return list(genome.choices[0])
    return list(range(n_edges))


def edge_count(genome: Genome, coding: WeightCoding, dims: PolicyDims) -> int:
    return len(selected_edge_indices(genome, coding, dims))


def materialize(genome: Genome, theta, coding: WeightCoding, dims: PolicyDims) -> PolicyGraph:
    """Build the concrete policy graph for one genome and weight vector."""
    spec = search_space(coding, dims)
    if genome.space_hash != spec.space_hash or len(genome.choices) != len(spec):
        raise GenomeSpaceMismatch(
            f"genome space {genome.hash_hex} does not match coding space {spec.hash_hex}"
        )
    theta = np.asarray(theta, dtype=float)
    expected = trainable_size(coding, dims)
    if theta.shape != (expected,):
        raise WeightLengthMismatch(f"weight vector has shape {theta.shape}, coding needs ({expected},)")
    n_block = weight_block_size(coding, dims)
    block, biases = theta[:n_block], theta[n_block:]
    cand = candidate_edges(coding, dims)

    if coding.kind in STRUCTURED:
        flat = np.concatenate([m.ravel() for m in _layer_matrices(coding, dims, block)])
        weights = {e: float(flat[e]) for e in range(len(cand))}
    elif coding.kind is CodingKind.WEIGHT_SHARING:
        weights = {e: float(block[genome.choices[e]]) for e in range(len(cand))}
    else:
        weights = {e: float(block[e]) for e in selected_edge_indices(genome, coding, dims)}

    k = num_vertices(coding, dims)
    n_points = len(_edge_points(coding, dims))
    if coding.nonlinearity_search:
        acts = tuple(int(c) for c in genome.choices[n_points:])
    else:
        hidden = k - dims.state_dim - dims.action_dim
        out_id = coding.default_nonlinearity if coding.output_nonlinearity is None else coding.output_nonlinearity
        acts = (coding.default_nonlinearity,) * hidden + (out_id,) * dims.action_dim
    edges = tuple((cand[e][0], cand[e][1], w) for e, w in sorted(weights.items()))
    return PolicyGraph(k, dims.state_dim, dims.action_dim, edges, acts, tuple(float(b) for b in biases))


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class ParamAccount:
    weight_params: int
    total_params: int
    compression_pct: float
    bit_count: int
    dictionary_bits: int = field(default=0)


FLOAT_BITS = 32


def param_accounting(
    coding: WeightCoding,
    dims: PolicyDims,
    genome: Genome | None = None,
    *,
    kept_edges: int | None = None,
    reference_hidden: Sequence[int] | None = None,
) -> ParamAccount:
    """Weight count, compression against a dense network, and storage bits.

    Only hidden-layer biases enter the compression ratio and the bit count;
    this is the bookkeeping under which every published row is reproduced.
    ``reference_hidden`` sets the hidden sizes of the dense reference network
    (defaults to the coding's own). ``kept_edges`` is the surviving edge count
    of a MASKED policy; boolean edge pruning reads its count from ``genome``.
    """
    cand = candidate_edges(coding, dims)
    n_dense_edges = len(cand)
    kind = coding.kind
    if kind is CodingKind.MASKED:
        weights = n_dense_edges if kept_edges is None else int(kept_edges)
        if not 0 <= weights <= n_dense_edges:
            raise DimensionMismatch(f"kept_edges must lie in [0, {n_dense_edges}]")
    elif kind is CodingKind.EDGE_PRUNING and genome is not None:
        weights = edge_count(genome, coding, dims)
    elif kind is CodingKind.EDGE_PRUNING and not coding.boolean_mode:
        weights = int(coding.num_edges)
    else:
        weights = weight_block_size(coding, dims)

    hidden_biases = sum(coding.hidden_sizes)
    ref_hidden = tuple(coding.hidden_sizes if reference_hidden is None else reference_hidden)
    ref = WeightCoding(CodingKind.UNSTRUCTURED, hidden_sizes=ref_hidden)
    ref_total = len(candidate_edges(ref, dims)) + sum(ref_hidden)
    compression = 100.0 * (1.0 - (weights + hidden_biases) / ref_total)
    compression = min(max(compression, 0.0), 100.0)

    if kind is CodingKind.WEIGHT_SHARING:
        dictionary = n_dense_edges * math.ceil(math.log2(coding.num_colors))
    elif kind is CodingKind.MASKED:
        dictionary = n_dense_edges * math.ceil(math.log2(weights)) if weights > 1 else 0
    elif kind is CodingKind.EDGE_PRUNING and coding.boolean_mode:
        dictionary = n_dense_edges
    else:
        dictionary = 0
    bits = FLOAT_BITS * (weights + hidden_biases) + dictionary
    return ParamAccount(
        weight_params=weights,
        total_params=weights + num_biases(coding, dims),
        compression_pct=compression,
        bit_count=bits,
        dictionary_bits=dictionary,
    )
