"""Combinatorial architecture search spaces built from one-of / many-of choices.

A search space is defined as an arbitrarily nested structure of lists and
dicts whose leaves are :class:`DecisionPoint` objects. It is flattened
depth-first once, at construction, and every consumer (controllers, policy
materialization, serialization) indexes the flat list.

Genomes are immutable assignments of every decision point::

    >>> spec = SearchSpaceSpec.from_nested({"a": one_of(3), "b": many_of(5, 2)})
    >>> g = random_sample(spec, np.random.default_rng(0))
    >>> deserialize(serialize(g), spec) == g
    True
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from .errors import MutationImpossible, ParseError, RangeError, SpaceMismatch, TooLarge
from .rng import fnv1a_64

GENOME_FORMAT_VERSION = 1

Choice = Union[int, tuple[int, ...]]


class Kind(str, enum.Enum):
    ONE_OF = "ONE_OF"
    MANY_OF = "MANY_OF"


@dataclass(frozen=True)
class DecisionPoint:
    """A single categorical decision.

    ``MANY_OF`` with ``distinct=True`` is an unordered k-subset (stored sorted);
    with ``distinct=False`` it is an ordered k-tuple drawn with replacement.
    """

    kind: Kind
    num_alternatives: int
    k: int = 1
    distinct: bool = True
    label: str = ""

    def __post_init__(self) -> None:
        if self.num_alternatives < 1:
            raise ValueError(f"num_alternatives must be >= 1, got {self.num_alternatives}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.kind is Kind.ONE_OF and self.k != 1:
            raise ValueError("ONE_OF decision points always select exactly one alternative")
        if self.kind is Kind.MANY_OF and self.distinct and self.k > self.num_alternatives:
            raise ValueError(
                f"distinct MANY_OF needs k <= num_alternatives ({self.k} > {self.num_alternatives})"
            )

    def describe(self) -> str:
        return f"{self.kind.value}:{self.num_alternatives}:{self.k}:{int(self.distinct)}:{self.label}"

    def cardinality(self) -> int:
        if self.kind is Kind.ONE_OF:
            return self.num_alternatives
        if self.distinct:
            return math.comb(self.num_alternatives, self.k)
        return self.num_alternatives**self.k

    def is_mutable(self) -> bool:
        """Whether at least two legal values exist for this point."""
        if self.kind is Kind.ONE_OF or not self.distinct:
            return self.num_alternatives > 1
        return self.k < self.num_alternatives


def one_of(num_alternatives: int, label: str = "") -> DecisionPoint:
    return DecisionPoint(Kind.ONE_OF, num_alternatives, label=label)


def many_of(num_alternatives: int, k: int, distinct: bool = True, label: str = "") -> DecisionPoint:
    return DecisionPoint(Kind.MANY_OF, num_alternatives, k=k, distinct=distinct, label=label)


def _flatten(node: Any, path: str, out: list[DecisionPoint]) -> None:
    if isinstance(node, DecisionPoint):
        label = node.label or path
        out.append(
            DecisionPoint(node.kind, node.num_alternatives, node.k, node.distinct, label)
            if label != node.label
            else node
        )
    elif isinstance(node, Mapping):
        for key, child in node.items():
            _flatten(child, f"{path}.{key}" if path else str(key), out)
    elif isinstance(node, Sequence) and not isinstance(node, (str, bytes)):
        for i, child in enumerate(node):
            _flatten(child, f"{path}[{i}]", out)
    else:
        raise TypeError(f"unsupported search-space node at {path or '<root>'}: {type(node).__name__}")


@dataclass(frozen=True)
class SearchSpaceSpec:
    decision_points: tuple[DecisionPoint, ...]
    space_hash: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "decision_points", tuple(self.decision_points))
        text = "\n".join(["space/v1", *(dp.describe() for dp in self.decision_points)])
        object.__setattr__(self, "space_hash", fnv1a_64(text.encode("utf-8")))

    @classmethod
    def from_nested(cls, definition: Any) -> SearchSpaceSpec:
        """Flatten nested lists/dicts of decision points depth-first.

        Unlabelled leaves receive their path (``edges[3]``, ``act.hidden``) as
        label so that the hash distinguishes structurally different nestings.
        """
        points: list[DecisionPoint] = []
        _flatten(definition, "", points)
        return cls(tuple(points))

    @property
    def hash_hex(self) -> str:
        return f"{self.space_hash:016x}"

    def __len__(self) -> int:
        return len(self.decision_points)


@dataclass(frozen=True)
class Genome:
    space_hash: int
    choices: tuple[Choice, ...]

    @property
    def hash_hex(self) -> str:
        return f"{self.space_hash:016x}"


def validate(genome: Genome, spec: SearchSpaceSpec) -> None:
    """Raise if ``genome`` is not a canonical member of ``spec``."""
    if genome.space_hash != spec.space_hash:
        raise SpaceMismatch(f"genome space {genome.hash_hex} != spec space {spec.hash_hex}")
    if len(genome.choices) != len(spec.decision_points):
        raise ParseError(
            f"genome has {len(genome.choices)} choices, spec has {len(spec.decision_points)}"
        )
    for d, (choice, dp) in enumerate(zip(genome.choices, spec.decision_points)):
        _check_choice(choice, dp, d)


def _check_choice(choice: Any, dp: DecisionPoint, d: int) -> None:
    if dp.kind is Kind.ONE_OF:
        if not isinstance(choice, int) or isinstance(choice, bool):
            raise ParseError(f"decision {d} ({dp.label}) expects an integer")
        if not 0 <= choice < dp.num_alternatives:
            raise RangeError(f"decision {d} ({dp.label}): {choice} not in [0, {dp.num_alternatives})")
        return
    if not isinstance(choice, tuple) or len(choice) != dp.k:
        raise ParseError(f"decision {d} ({dp.label}) expects {dp.k} indices")
    for idx in choice:
        if not isinstance(idx, int) or isinstance(idx, bool):
            raise ParseError(f"decision {d} ({dp.label}) expects integer indices")
        if not 0 <= idx < dp.num_alternatives:
            raise RangeError(f"decision {d} ({dp.label}): {idx} not in [0, {dp.num_alternatives})")
    if dp.distinct and any(a >= b for a, b in zip(choice, choice[1:])):
        raise ParseError(f"decision {d} ({dp.label}) must be strictly ascending")


def _sample_point(dp: DecisionPoint, rng: np.random.Generator) -> Choice:
    if dp.kind is Kind.ONE_OF:
        return int(rng.integers(dp.num_alternatives))
    if dp.distinct:
        picked = rng.choice(dp.num_alternatives, size=dp.k, replace=False)
        return tuple(sorted(int(i) for i in picked))
    return tuple(int(i) for i in rng.integers(dp.num_alternatives, size=dp.k))


def random_sample(spec: SearchSpaceSpec, rng: np.random.Generator) -> Genome:
    return Genome(spec.space_hash, tuple(_sample_point(dp, rng) for dp in spec.decision_points))


def _resample_other(current: int, n: int, rng: np.random.Generator) -> int:
    # uniform over the n - 1 values different from `current`
    draw = int(rng.integers(n - 1))
    return draw + 1 if draw >= current else draw


def mutate(genome: Genome, spec: SearchSpaceSpec, rng: np.random.Generator) -> Genome:
    """Change exactly one decision point, chosen uniformly among mutable ones."""
    validate(genome, spec)
    mutable = [d for d, dp in enumerate(spec.decision_points) if dp.is_mutable()]
    if not mutable:
        raise MutationImpossible("every decision point has a single legal value")
    d = mutable[int(rng.integers(len(mutable)))]
    dp = spec.decision_points[d]
    old = genome.choices[d]
    if dp.kind is Kind.ONE_OF:
        new: Choice = _resample_other(old, dp.num_alternatives, rng)
    elif dp.distinct:
        selected = set(old)
        slot = int(rng.integers(dp.k))
        unselected = [i for i in range(dp.num_alternatives) if i not in selected]
        replacement = unselected[int(rng.integers(len(unselected)))]
        new = tuple(sorted(replacement if s == slot else v for s, v in enumerate(old)))
    else:
        slot = int(rng.integers(dp.k))
        values = list(old)
        values[slot] = _resample_other(values[slot], dp.num_alternatives, rng)
        new = tuple(values)
    choices = list(genome.choices)
    choices[d] = new
    return Genome(genome.space_hash, tuple(choices))


def cardinality(spec: SearchSpaceSpec) -> int:
    total = 1
    for dp in spec.decision_points:
        total *= dp.cardinality()
    return total


def _point_values(dp: DecisionPoint):
    n = dp.num_alternatives
    if dp.kind is Kind.ONE_OF:
        return range(n)
    if dp.distinct:
        return itertools.combinations(range(n), dp.k)
    return itertools.product(range(n), repeat=dp.k)


def enumerate_all(spec: SearchSpaceSpec, limit: int) -> list[Genome]:
    """Every genome exactly once, in lexicographic order of the flat choices."""
    size = cardinality(spec)
    if size > limit:
        raise TooLarge(f"search space has {size} genomes, limit is {limit}")
    axes = [list(_point_values(dp)) for dp in spec.decision_points]
    return [Genome(spec.space_hash, tuple(combo)) for combo in itertools.product(*axes)]


def hamming(a: Genome, b: Genome) -> int:
    """Number of decision points on which two genomes differ."""
    if a.space_hash != b.space_hash:
        raise SpaceMismatch("genomes come from different spaces")
    return sum(x != y for x, y in zip(a.choices, b.choices))


def _jsonable(choice: Choice) -> int | list[int]:
    return list(choice) if isinstance(choice, tuple) else choice


def canonical_json(obj: Any) -> str:
    """Sorted keys, no insignificant whitespace, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False, ensure_ascii=False)


def serialize(genome: Genome) -> str:
    return canonical_json(
        {
            "choices": [_jsonable(c) for c in genome.choices],
            "space": genome.hash_hex,
            "v": GENOME_FORMAT_VERSION,
        }
    )


def deserialize(text: str | bytes, spec: SearchSpaceSpec) -> Genome:
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed genome string: {exc}") from None
    if not isinstance(obj, dict) or set(obj) != {"choices", "space", "v"}:
        raise ParseError("genome must be an object with exactly the keys choices, space, v")
    if obj["v"] != GENOME_FORMAT_VERSION or isinstance(obj["v"], bool):
        raise ParseError(f"unsupported genome format version {obj['v']!r}")
    space = obj["space"]
    if not isinstance(space, str) or len(space) != 16 or any(c not in "0123456789abcdef" for c in space):
        raise ParseError("space must be 16 lowercase hex characters")
    if int(space, 16) != spec.space_hash:
        raise SpaceMismatch(f"genome space {space} != spec space {spec.hash_hex}")
    raw = obj["choices"]
    if not isinstance(raw, list):
        raise ParseError("choices must be a list")
    choices = tuple(tuple(c) if isinstance(c, list) else c for c in raw)
    genome = Genome(spec.space_hash, choices)
    validate(genome, spec)
    return genome
