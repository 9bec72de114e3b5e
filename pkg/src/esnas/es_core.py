"""Antithetic ES weight training with an embedded architecture controller.

Each iteration the aggregator

1. draws ``num_distinct_perturbations`` seeded Gaussian directions,
2. asks the controller for an independent genome for every ``+g`` and ``-g``
   evaluation plus one per evaluation worker at the unperturbed weights,
3. dispatches all requests through a backend,
4. feeds every returned (genome, objective) pair to the controller, and
5. applies the finite-difference update using only the perturbed pairs.

No rollouts are issued for the controller beyond those the weight update
already needs.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .controller import Controller, Feedback
from .errors import ConfigError, EmptyBatch, NonFiniteUpdate, RangeError
from .normalizer import STD_FLOOR, RunningNormalizer, normalize_state
from .policy import (
    CodingKind,
    PolicyDims,
    WeightCoding,
    annealed_beta,
    edge_count,
    masked_keep_fraction,
    masked_training_objective,
    materialize,
    search_space,
    trainable_size,
)
from .rng import draw_seed, perturbation
from .search_space import Genome, random_sample, serialize

__all__ = [
    "ESConfig",
    "ESState",
    "RunningNormalizer",
    "normalize_state",
    "sample_perturbations",
    "es_gradient",
    "weight_update",
    "hybrid_objective",
    "subsample_feedback",
    "Aggregator",
    "PlainES",
    "blackbox_es",
]


@dataclass
class ESConfig:
    sigma: float = 0.1
    step_size: float = 0.01
    num_distinct_perturbations: int = 50
    num_eval_workers: int = 50
    iterations: int = 100
    controller_feedback_k: int | None = None
    hybrid_target_edges: int | None = None
    state_normalization: bool = True
    init_scale: float = 0.0
    mask_window: int = 50
    num_workers: int | None = None

    def __post_init__(self) -> None:
        expected = 2 * self.num_distinct_perturbations + self.num_eval_workers
        if self.num_workers is None:
            self.num_workers = expected
        elif self.num_workers != expected:
            raise ConfigError(
                f"num_workers={self.num_workers} but 2 * {self.num_distinct_perturbations} "
                f"+ {self.num_eval_workers} = {expected}"
            )
        if not self.sigma > 0 or not self.step_size > 0:
            raise ConfigError("sigma and step_size must be positive")
        if self.num_distinct_perturbations < 1 or self.num_eval_workers < 0 or self.iterations < 0:
            raise ConfigError("need >= 1 perturbation, >= 0 eval workers, >= 0 iterations")
        if self.controller_feedback_k is not None and not 0 < self.controller_feedback_k <= expected:
            raise ConfigError(f"controller_feedback_k must lie in (0, {expected}]")
        if self.hybrid_target_edges is not None and self.hybrid_target_edges < 1:
            raise ConfigError("hybrid_target_edges must be >= 1")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ESConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ES fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ESState:
    theta: np.ndarray
    normalizer: RunningNormalizer
    rng: np.random.Generator
    iteration: int = 0

    @classmethod
    def initial(cls, dim: int, state_dim: int, seed: int, init_scale: float = 0.0) -> ESState:
        rng = np.random.default_rng(seed)
        theta = init_scale * rng.standard_normal(dim) if init_scale else np.zeros(dim)
        return cls(theta, RunningNormalizer(state_dim), rng)


# ---------------------------------------------------------------------------
# estimator pieces


def sample_perturbations(dim: int, num_distinct: int, rng: np.random.Generator) -> list[tuple[int, np.ndarray]]:
    """Seeded N(0, I) directions; the antithetic partner is ``-g``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    seeds = [draw_seed(rng) for _ in range(num_distinct)]
    return [(s, perturbation(s, dim)) for s in seeds]


def es_gradient(pairs: Sequence[tuple[float, np.ndarray]], sigma: float) -> np.ndarray:
    """``(1 / (sigma n)) * sum_i v_i g_i`` with ``v_i`` already halved differences."""
    if not pairs:
        raise EmptyBatch("no perturbation pairs")
    acc = np.zeros_like(np.asarray(pairs[0][1], dtype=float))
    for v, g in pairs:
        acc += v * g
    return acc / (sigma * len(pairs))


def weight_update(theta: np.ndarray, gradient: np.ndarray, step_size: float, reward_std: float) -> np.ndarray:
    """Ascent step scaled by the spread of the batch's ``v_i``."""
    gradient = np.asarray(gradient, dtype=float)
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteUpdate("gradient contains non-finite entries")
    updated = theta + (step_size / max(reward_std, STD_FLOOR)) * gradient
    if not np.all(np.isfinite(updated)):
        raise NonFiniteUpdate("update produced non-finite weights")
    return updated


def hybrid_objective(f: float, num_edges: int, target_edges: int) -> float:
    """Penalize architectures above the edge budget.

    ``f * (E_m / E_T) ** w`` with ``w = 0`` inside the budget. Above it the
    exponent is ``-sign(f)``, so the penalty lowers the objective whether the
    reward is positive or negative.
    """
    if target_edges < 1 or num_edges < 0:
        raise ValueError("need target_edges >= 1 and num_edges >= 0")
    ratio = num_edges / target_edges
    if ratio <= 1.0 or f == 0:
        return f
    return f * ratio ** (-math.copysign(1.0, f))


def subsample_feedback(results: Sequence, k: int, rng: np.random.Generator) -> list:
    """Uniform size-``k`` subset without replacement, original order kept."""
    n = len(results)
    if not 0 < k <= n:
        raise RangeError(f"k must lie in (0, {n}], got {k}")
    if k == n:
        return list(results)
    keep = np.sort(rng.choice(n, size=k, replace=False))
    return [results[i] for i in keep]


class MaskObjectiveWindow:
    """Running min-max rescaling of raw rewards over recent iterations."""

    def __init__(self, window: int = 50):
        self.history: deque[tuple[float, float]] = deque(maxlen=window)

    def push(self, objectives: Sequence[float]) -> None:
        if len(objectives):
            self.history.append((float(min(objectives)), float(max(objectives))))

    def normalize(self, f: float) -> float:
        lo = min(h[0] for h in self.history)
        hi = max(h[1] for h in self.history)
        if hi <= lo:
            return 0.5
        return min(max((f - lo) / (hi - lo), 0.0), 1.0)


# ---------------------------------------------------------------------------
# aggregator


@dataclass
class IterationLog:
    iteration: int
    eval_reward_mean: float | None
    eval_reward_max: float | None
    eval_reward_min: float | None
    train_reward_mean: float | None
    v_mean: float | None
    mean_edge_count: float
    num_requests: int
    num_failed: int
    pairs_used: int
    controller: dict[str, Any] = field(default_factory=dict)
    wall_ms: float = 0.0

    def to_record(self) -> dict[str, Any]:
        """JSON record; wall-clock time is excluded so logs replay byte-for-byte."""
        record = asdict(self)
        record.pop("wall_ms")
        record["type"] = "iteration"
        return record


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else None


class Aggregator:
    """Holds the shared weights and the controller and runs ES-ENAS iterations."""

    def __init__(
        self,
        controller: Controller,
        coding: WeightCoding,
        dims: PolicyDims,
        backend,
        config: ESConfig,
        seed: int = 0,
    ):
        self.controller = controller
        self.coding = coding
        self.dims = dims
        self.spec = search_space(coding, dims)
        if controller.spec.space_hash != self.spec.space_hash:
            raise ConfigError("controller search space does not match the coding")
        self.backend = backend
        self.config = config
        self.state = ESState.initial(trainable_size(coding, dims), dims.state_dim, seed, config.init_scale)
        self.feedback_rng = np.random.default_rng([seed, 0xFEED])
        self.mask_window = MaskObjectiveWindow(config.mask_window) if coding.kind is CodingKind.MASKED else None
        self.last_proposals: list[Genome] = []
        self.last_results: list = []

    def snapshot(self):
        from .distributed.messages import ThetaSnapshot

        normalizer = self.state.normalizer if self.config.state_normalization else None
        return ThetaSnapshot(self.state.iteration, self.state.theta.copy(), self.config.sigma, normalizer)

    def _controller_objective(self, genome: Genome, objective: float) -> float:
        if self.config.hybrid_target_edges is None:
            return objective
        return hybrid_objective(objective, edge_count(genome, self.coding, self.dims), self.config.hybrid_target_edges)

    def _masked_values(self, seeds, plus, minus, beta):
        raw = [r.objective for pair in zip(plus, minus) for r in pair]
        self.mask_window.push(raw)
        d, sigma = len(self.state.theta), self.config.sigma
        out = []
        for seed, rp, rm in zip(seeds, plus, minus):
            g = perturbation(seed, d)
            lam_p = masked_keep_fraction(self.state.theta + sigma * g, self.coding, self.dims)
            lam_m = masked_keep_fraction(self.state.theta + (-sigma) * g, self.coding, self.dims)
            fp = masked_training_objective(self.mask_window.normalize(rp.objective), lam_p, beta)
            fm = masked_training_objective(self.mask_window.normalize(rm.objective), lam_m, beta)
            out.append((fp, fm))
        return out

    def step(self) -> IterationLog:
        from .distributed.messages import EvalRequest, Role

        start = time.perf_counter()
        cfg, state = self.config, self.state
        it = state.iteration
        n = cfg.num_distinct_perturbations
        dim = len(state.theta)
        perturbations = sample_perturbations(dim, n, state.rng)
        perturbed_genomes = self.controller.propose(2 * n)
        eval_genomes = self.controller.propose(cfg.num_eval_workers) if cfg.num_eval_workers else []
        self.last_proposals = perturbed_genomes + eval_genomes

        requests = []
        for i, (seed, _) in enumerate(perturbations):
            for s, genome in ((1, perturbed_genomes[2 * i]), (-1, perturbed_genomes[2 * i + 1])):
                requests.append(
                    EvalRequest(it, len(requests), serialize(genome), it, seed, s, Role.PERTURBED)
                )
        for genome in eval_genomes:
            requests.append(EvalRequest(it, len(requests), serialize(genome), it, None, 0, Role.EVAL))

        results = self.backend.dispatch(requests, self.snapshot())
        by_id = {r.request_id: r for r in results}
        if set(by_id) != {r.request_id for r in requests}:
            raise RuntimeError("backend returned results that do not match the requests")
        genome_of = {req.request_id: g for req, g in zip(requests, self.last_proposals)}
        self.last_results = [(req, genome_of[req.request_id], by_id[req.request_id]) for req in requests]

        good_pairs = [
            i for i in range(n) if by_id[2 * i].ok and by_id[2 * i + 1].ok
        ]
        eval_ok = [by_id[2 * n + j] for j in range(cfg.num_eval_workers) if by_id[2 * n + j].ok]
        feedback_results = [by_id[2 * i + s] for i in good_pairs for s in (0, 1)] + eval_ok
        if cfg.controller_feedback_k is not None and feedback_results:
            feedback_results = subsample_feedback(
                feedback_results, min(cfg.controller_feedback_k, len(feedback_results)), self.feedback_rng
            )
        for res in feedback_results:
            genome = genome_of[res.request_id]
            self.controller.observe(Feedback(genome, self._controller_objective(genome, res.objective), it))

        plus = [by_id[2 * i] for i in good_pairs]
        minus = [by_id[2 * i + 1] for i in good_pairs]
        v_values: list[float] = []
        if good_pairs:
            if self.mask_window is not None:
                beta = annealed_beta(it, cfg.iterations)
                mixed = self._masked_values([perturbations[i][0] for i in good_pairs], plus, minus, beta)
                v_values = [0.5 * (fp - fm) for fp, fm in mixed]
            else:
                v_values = [0.5 * (rp.objective - rm.objective) for rp, rm in zip(plus, minus)]
            grad = es_gradient([(v, perturbations[i][1]) for v, i in zip(v_values, good_pairs)], cfg.sigma)
            state.theta = weight_update(state.theta, grad, cfg.step_size, float(np.std(v_values)))

        if cfg.state_normalization:
            for res in sorted(plus + minus, key=lambda r: r.request_id):
                partial = res.partial_normalizer()
                if partial is not None:
                    state.normalizer.merge(partial)

        state.iteration += 1
        evals = [r.eval_objective for r in eval_ok]
        return IterationLog(
            iteration=it,
            eval_reward_mean=_mean(evals),
            eval_reward_max=max(evals) if evals else None,
            eval_reward_min=min(evals) if evals else None,
            train_reward_mean=_mean([r.objective for r in plus + minus]),
            v_mean=_mean(v_values),
            mean_edge_count=float(np.mean([edge_count(g, self.coding, self.dims) for g in self.last_proposals])),
            num_requests=len(requests),
            num_failed=sum(not r.ok for r in results),
            pairs_used=len(good_pairs),
            controller=self.controller.stats(),
            wall_ms=1000.0 * (time.perf_counter() - start),
        )


es_enas_iteration = Aggregator.step


class PlainES:
    """Antithetic ES on a fixed genome, evaluated in-process.

    Consumes the same random streams as :class:`Aggregator`, so with a coding
    that ignores the genome both produce identical weight trajectories.
    """

    def __init__(self, env, coding: WeightCoding, dims: PolicyDims, config: ESConfig, seed: int = 0,
                 genome: Genome | None = None):
        from .environments import rollout

        self._rollout = rollout
        self.env = env
        self.coding = coding
        self.dims = dims
        self.config = config
        spec = search_space(coding, dims)
        self.genome = genome if genome is not None else random_sample(spec, np.random.default_rng(seed))
        self.state = ESState.initial(trainable_size(coding, dims), dims.state_dim, seed, config.init_scale)

    def step(self) -> float:
        cfg, state = self.config, self.state
        it = state.iteration
        normalizer = state.normalizer if cfg.state_normalization else None
        perturbations = sample_perturbations(len(state.theta), cfg.num_distinct_perturbations, state.rng)
        pairs = []
        partials = []
        for _, g in perturbations:
            outcomes = []
            for theta in (state.theta + cfg.sigma * g, state.theta + (-cfg.sigma) * g):
                graph = materialize(self.genome, theta, self.coding, self.dims)
                traj = self._rollout(self.env, graph, normalizer, training=True, episode=it)
                outcomes.append(traj.total_training_reward)
                partials.append(traj.normalizer_partial)
            pairs.append((0.5 * (outcomes[0] - outcomes[1]), g))
        v_values = [v for v, _ in pairs]
        state.theta = weight_update(state.theta, es_gradient(pairs, cfg.sigma), cfg.step_size,
                                    float(np.std(v_values)))
        if cfg.state_normalization:
            for partial in partials:
                state.normalizer.merge(partial)
        state.iteration += 1
        graph = materialize(self.genome, state.theta, self.coding, self.dims)
        return self._rollout(self.env, graph, normalizer, episode=it).total_eval_reward


def blackbox_es(
    f: Callable[[np.ndarray], float],
    theta0: np.ndarray,
    config: ESConfig,
    seed: int = 0,
    iterations: int | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Plain antithetic ES on a deterministic function of the weights."""
    rng = np.random.default_rng(seed)
    theta = np.array(theta0, dtype=float)
    for it in range(config.iterations if iterations is None else iterations):
        pairs = []
        for _, g in sample_perturbations(len(theta), config.num_distinct_perturbations, rng):
            pairs.append((0.5 * (f(theta + config.sigma * g) - f(theta - config.sigma * g)), g))
        std = float(np.std([v for v, _ in pairs]))
        theta = weight_update(theta, es_gradient(pairs, config.sigma), config.step_size, std)
        if callback is not None:
            callback(it, theta)
    return theta
