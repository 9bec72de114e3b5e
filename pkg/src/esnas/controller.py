"""Model-proposing controllers.

All controllers share one contract: :meth:`Controller.propose` returns a batch
of genomes and :meth:`Controller.observe` feeds back one scalar objective per
evaluated genome. The aggregator serializes these calls; controllers are not
safe for concurrent mutation.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ConfigError, DegenerateBatch, MutationImpossible, NonFiniteObjective
from .search_space import (
    Genome,
    Kind,
    SearchSpaceSpec,
    deserialize,
    mutate,
    random_sample,
    serialize,
    validate,
)


@dataclass(frozen=True)
class Feedback:
    genome: Genome
    objective: float
    iteration: int = 0


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


class Controller:
    kind = "base"

    def __init__(self, spec: SearchSpaceSpec, seed: int = 0):
        self.spec = spec
        self.rng = np.random.default_rng(seed)

    def propose(self, count: int) -> list[Genome]:
        raise NotImplementedError

    def observe(self, feedback: Feedback) -> None:
        raise NotImplementedError

    def _check(self, feedback: Feedback) -> None:
        if not math.isfinite(feedback.objective):
            raise NonFiniteObjective(f"objective {feedback.objective!r} is not finite")
        validate(feedback.genome, self.spec)

    def stats(self) -> dict[str, float | None]:
        return {}

    def state_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "space": self.spec.hash_hex, "rng": _rng_state(self.rng)}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        if state.get("kind") != self.kind or state.get("space") != self.spec.hash_hex:
            raise ConfigError("checkpoint does not belong to this controller / search space")
        self.rng = _restore_rng(state["rng"])


class RandomController(Controller):
    """Uniform sampling; feedback is ignored."""

    kind = "random"

    def propose(self, count: int) -> list[Genome]:
        if count < 1:
            raise ValueError("count must be >= 1")
        return [random_sample(self.spec, self.rng) for _ in range(count)]

    def observe(self, feedback: Feedback) -> None:
        self._check(feedback)


def default_tournament_size(num_workers: int) -> int:
    return max(1, math.isqrt(num_workers))


class RegularizedEvolution(Controller):
    """Aging evolution over a FIFO population.

    Until the population is full, proposals are uniform samples. Afterwards
    each proposal mutates the winner of a tournament drawn uniformly without
    replacement from the population; ties go to the older member.
    """

    kind = "reg_evo"

    def __init__(
        self,
        spec: SearchSpaceSpec,
        seed: int = 0,
        population_size: int = 100,
        tournament_size: int | None = None,
        num_workers: int = 150,
    ):
        super().__init__(spec, seed)
        if population_size < 1:
            raise ValueError("population_size must be >= 1")
        self.population_size = population_size
        self.tournament_size = (
            default_tournament_size(num_workers) if tournament_size is None else tournament_size
        )
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")
        self.population: deque[tuple[Genome, float]] = deque()

    def select_parent(self) -> Genome:
        size = min(self.tournament_size, len(self.population))
        picks = np.sort(self.rng.choice(len(self.population), size=size, replace=False))
        # picks are in queue order (oldest first), so the first max wins ties
        best = max(picks, key=lambda i: (self.population[i][1], -i))
        return self.population[int(best)][0]

    def propose(self, count: int) -> list[Genome]:
        if count < 1:
            raise ValueError("count must be >= 1")
        if len(self.population) < self.population_size:
            return [random_sample(self.spec, self.rng) for _ in range(count)]
        children = []
        for _ in range(count):
            parent = self.select_parent()
            try:
                children.append(mutate(parent, self.spec, self.rng))
            except MutationImpossible:
                children.append(parent)
        return children

    def observe(self, feedback: Feedback) -> None:
        self._check(feedback)
        self.population.append((feedback.genome, float(feedback.objective)))
        while len(self.population) > self.population_size:
            self.population.popleft()

    def best(self) -> tuple[Genome, float] | None:
        if not self.population:
            return None
        return max(reversed(self.population), key=lambda item: item[1])

    def stats(self) -> dict[str, float | None]:
        best = self.best()
        return {"population_best": None if best is None else best[1], "population_size": len(self.population)}

    def state_dict(self) -> dict[str, Any]:
        state = super().state_dict()
        state.update(
            population_size=self.population_size,
            tournament_size=self.tournament_size,
            population=[{"genome": serialize(g), "objective": v} for g, v in self.population],
        )
        return state

    def load_state_dict(self, state: dict[str, Any]) -> None:
        super().load_state_dict(state)
        self.population_size = int(state["population_size"])
        self.tournament_size = int(state["tournament_size"])
        self.population = deque(
            (deserialize(item["genome"], self.spec), float(item["objective"])) for item in state["population"]
        )


def _softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    z = np.array(logits, dtype=float)
    if mask is not None:
        z[~mask] = -np.inf
    z -= np.max(z)
    e = np.exp(z)
    return e / e.sum()


class PolicyGradientController(Controller):
    """Factorized categorical distribution trained with REINFORCE.

    Each decision point owns its own logit vector. Distinct many-of points are
    sampled slot by slot with already chosen alternatives masked out; the
    gradient replays that process in ascending index order. Advantages are
    batch-normalized and the logits follow Adam ascent.
    """

    kind = "pg"

    def __init__(
        self,
        spec: SearchSpaceSpec,
        seed: int = 0,
        learning_rate: float = 1e-3,
        batch_size: int = 64,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        strict: bool = False,
    ):
        super().__init__(spec, seed)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.strict = strict
        self.logits = [np.zeros(dp.num_alternatives) for dp in spec.decision_points]
        self._m = [np.zeros_like(x) for x in self.logits]
        self._v = [np.zeros_like(x) for x in self.logits]
        self.updates = 0
        self.baseline = 0.0
        self.observed = 0
        self.batch: list[Feedback] = []

    def probabilities(self, d: int) -> np.ndarray:
        return _softmax(self.logits[d])

    def _sample_point(self, d: int):
        dp = self.spec.decision_points[d]
        n = dp.num_alternatives
        if dp.kind is Kind.ONE_OF:
            return int(self.rng.choice(n, p=self.probabilities(d)))
        if not dp.distinct:
            return tuple(int(c) for c in self.rng.choice(n, size=dp.k, p=self.probabilities(d)))
        available = np.ones(n, dtype=bool)
        picked = []
        for _ in range(dp.k):
            c = int(self.rng.choice(n, p=_softmax(self.logits[d], available)))
            available[c] = False
            picked.append(c)
        return tuple(sorted(picked))

    def propose(self, count: int) -> list[Genome]:
        if count < 1:
            raise ValueError("count must be >= 1")
        return [
            Genome(self.spec.space_hash, tuple(self._sample_point(d) for d in range(len(self.spec))))
            for _ in range(count)
        ]

    def log_prob_grad(self, genome: Genome) -> list[np.ndarray]:
        """Gradient of ``log p(genome)`` with respect to every logit vector."""
        grads = []
        for d, dp in enumerate(self.spec.decision_points):
            choice = genome.choices[d]
            logits = self.logits[d]
            g = np.zeros_like(logits)
            if dp.kind is Kind.ONE_OF:
                g[choice] += 1.0
                g -= _softmax(logits)
            elif not dp.distinct:
                p = _softmax(logits)
                for c in choice:
                    g[c] += 1.0
                    g -= p
            else:
                available = np.ones(len(logits), dtype=bool)
                for c in choice:
                    g[c] += 1.0
                    g -= _softmax(logits, available)
                    available[c] = False
            grads.append(g)
        return grads

    def log_prob(self, genome: Genome) -> float:
        total = 0.0
        for d, dp in enumerate(self.spec.decision_points):
            choice = genome.choices[d]
            if dp.kind is Kind.ONE_OF:
                total += math.log(_softmax(self.logits[d])[choice])
            elif not dp.distinct:
                p = _softmax(self.logits[d])
                total += sum(math.log(p[c]) for c in choice)
            else:
                available = np.ones(dp.num_alternatives, dtype=bool)
                for c in choice:
                    total += math.log(_softmax(self.logits[d], available)[c])
                    available[c] = False
        return total

    def observe(self, feedback: Feedback) -> None:
        self._check(feedback)
        self.observed += 1
        self.baseline += (feedback.objective - self.baseline) / self.observed
        self.batch.append(feedback)
        if len(self.batch) >= self.batch_size:
            batch, self.batch = self.batch[: self.batch_size], self.batch[self.batch_size :]
            self.pg_update(batch)

    def pg_update(self, batch: list[Feedback]) -> None:
        if len(batch) != self.batch_size:
            raise ValueError(f"pg_update needs exactly {self.batch_size} feedbacks, got {len(batch)}")
        objectives = np.array([fb.objective for fb in batch], dtype=float)
        std = float(objectives.std())
        if std == 0.0:
            if self.strict:
                raise DegenerateBatch("all objectives in the batch are identical")
            return
        advantages = (objectives - objectives.mean()) / max(std, 1e-8)
        total = [np.zeros_like(x) for x in self.logits]
        for adv, fb in zip(advantages, batch):
            for acc, g in zip(total, self.log_prob_grad(fb.genome)):
                acc += adv * g
        self.updates += 1
        t = self.updates
        for d, grad in enumerate(total):
            grad /= len(batch)
            self._m[d] = self.beta1 * self._m[d] + (1 - self.beta1) * grad
            self._v[d] = self.beta2 * self._v[d] + (1 - self.beta2) * grad * grad
            m_hat = self._m[d] / (1 - self.beta1**t)
            v_hat = self._v[d] / (1 - self.beta2**t)
            self.logits[d] = self.logits[d] + self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def entropy(self) -> float:
        total = 0.0
        for logits in self.logits:
            p = _softmax(logits)
            nz = p[p > 0]
            total -= float(np.sum(nz * np.log(nz)))
        return total

    def mode(self) -> Genome:
        """Most likely genome under the factorized distribution."""
        choices = []
        for d, dp in enumerate(self.spec.decision_points):
            order = np.argsort(-self.logits[d], kind="stable")
            if dp.kind is Kind.ONE_OF:
                choices.append(int(order[0]))
            elif dp.distinct:
                choices.append(tuple(sorted(int(i) for i in order[: dp.k])))
            else:
                choices.append((int(order[0]),) * dp.k)
        return Genome(self.spec.space_hash, tuple(choices))

    def stats(self) -> dict[str, float | None]:
        return {"entropy": self.entropy(), "updates": self.updates}

    def state_dict(self) -> dict[str, Any]:
        state = super().state_dict()
        state.update(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            updates=self.updates,
            baseline=self.baseline,
            observed=self.observed,
            logits=[x.tolist() for x in self.logits],
            adam_m=[x.tolist() for x in self._m],
            adam_v=[x.tolist() for x in self._v],
            batch=[{"genome": serialize(fb.genome), "objective": fb.objective, "iteration": fb.iteration}
                   for fb in self.batch],
        )
        return state

    def load_state_dict(self, state: dict[str, Any]) -> None:
        super().load_state_dict(state)
        self.learning_rate = float(state["learning_rate"])
        self.batch_size = int(state["batch_size"])
        self.updates = int(state["updates"])
        self.baseline = float(state["baseline"])
        self.observed = int(state["observed"])
        self.logits = [np.array(x, dtype=float) for x in state["logits"]]
        self._m = [np.array(x, dtype=float) for x in state["adam_m"]]
        self._v = [np.array(x, dtype=float) for x in state["adam_v"]]
        self.batch = [
            Feedback(deserialize(item["genome"], self.spec), float(item["objective"]), int(item["iteration"]))
            for item in state["batch"]
        ]


CONTROLLERS = {
    "random": RandomController,
    "reg_evo": RegularizedEvolution,
    "pg": PolicyGradientController,
}


def make_controller(kind: str, spec: SearchSpaceSpec, seed: int = 0, **params: Any) -> Controller:
    try:
        cls = CONTROLLERS[kind]
    except KeyError:
        raise ConfigError(f"unknown controller {kind!r}; expected one of {sorted(CONTROLLERS)}") from None
    try:
        return cls(spec, seed, **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for controller {kind!r}: {exc}") from None
