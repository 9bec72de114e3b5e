"""Small reproducible experiments built on the sparse oracle environment.

These drive the architecture-recovery, feedback-subsampling and edge-budget
studies. Each returns plain numbers so callers can test or tabulate them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controller import Controller, PolicyGradientController, RegularizedEvolution, make_controller
from .distributed import SerialBackend, Worker
from .environments import SparseOracleEnv, rollout
from .es_core import Aggregator, ESConfig
from .policy import IDENTITY, CodingKind, PolicyDims, WeightCoding, edge_count, materialize, search_space
from .search_space import Genome, SearchSpaceSpec, deserialize, enumerate_all


def boolean_coding() -> WeightCoding:
    """Linear policy, one on/off decision per edge, identity output."""
    return WeightCoding(CodingKind.EDGE_PRUNING, boolean_mode=True, output_nonlinearity=IDENTITY)


def majority_genome(genomes: list[Genome], spec: SearchSpaceSpec) -> Genome:
    """Per-decision-point most frequent choice; ties go to the smaller value."""
    if not genomes:
        raise ValueError("need at least one genome")
    choices = []
    for d in range(len(spec)):
        column = [g.choices[d] for g in genomes]
        best = max(set(column), key=lambda c: (column.count(c), _neg(c)))
        choices.append(best)
    return Genome(spec.space_hash, tuple(choices))


def _neg(choice):
    if isinstance(choice, tuple):
        return tuple(-c for c in choice)
    return -choice


def modal_genome(controller: Controller, proposals: list[Genome]) -> Genome:
    """The architecture a controller currently recommends.

    PG: argmax of every factor. Reg-Evo: per-point majority over the
    population. Otherwise: majority over the latest proposals.
    """
    if isinstance(controller, PolicyGradientController):
        return controller.mode()
    if isinstance(controller, RegularizedEvolution) and controller.population:
        return majority_genome([g for g, _ in controller.population], controller.spec)
    return majority_genome(proposals, controller.spec)


def edge_mask(genome: Genome, num_edges: int) -> np.ndarray:
    return np.array(genome.choices[:num_edges]) == 1


def support_overlap(genome: Genome, env: SparseOracleEnv) -> float:
    """Fraction of candidate edges on which the genome agrees with the true support."""
    truth = env.support_mask()
    return float(np.mean(edge_mask(genome, len(truth)) == truth))


def brute_force_optimum(env: SparseOracleEnv, limit: int = 1 << 16) -> tuple[Genome, float]:
    """Best boolean genome when every active edge carries its target weight.

    Inactive edges ignore their weight, so plugging ``W*`` into the shared
    weights lets one rollout per genome rank the whole space.
    """
    dims = PolicyDims(env.spec.state_dim, env.spec.action_dim)
    coding = boolean_coding()
    spec = search_space(coding, dims)
    theta = np.concatenate([env.target.reshape(-1), np.zeros(dims.action_dim)])
    best: tuple[Genome, float] | None = None
    for genome in enumerate_all(spec, limit):
        f = rollout(env, materialize(genome, theta, coding, dims)).total_training_reward
        if best is None or f > best[1]:
            best = (genome, f)
    return best


class RecordingBackend(SerialBackend):
    """Serial backend that remembers the latest (request, result) pairs."""

    def dispatch(self, requests, snapshot):
        results = super().dispatch(requests, snapshot)
        self.last = list(zip(requests, results))
        return results


@dataclass
class RecoveryRun:
    overlaps: list[float] = field(default_factory=list)
    best_sampled: Genome | None = None
    best_objective: float = -np.inf
    final_modal: Genome | None = None

    def first_recovery(self, threshold: float = 0.9) -> int | None:
        for i, ov in enumerate(self.overlaps):
            if ov >= threshold:
                return i + 1
        return None


def run_recovery(
    controller_kind: str,
    seed: int,
    iterations: int = 200,
    env: SparseOracleEnv | None = None,
    feedback_k: int | None = None,
    stop_at: float | None = None,
    controller_params: dict | None = None,
) -> RecoveryRun:
    """Run ES-ENAS on a boolean edge space and track the modal genome."""
    env = env if env is not None else SparseOracleEnv(8, 2, support_size=6, seed=seed)
    dims = PolicyDims(env.spec.state_dim, env.spec.action_dim)
    coding = boolean_coding()
    spec = search_space(coding, dims)
    controller = make_controller(controller_kind, spec, seed, **(controller_params or {}))
    backend = RecordingBackend(Worker(env, coding, dims))
    config = ESConfig(iterations=iterations, state_normalization=False, controller_feedback_k=feedback_k)
    agg = Aggregator(controller, coding, dims, backend, config, seed)
    run = RecoveryRun()
    for _ in range(iterations):
        agg.step()
        for req, res in backend.last:
            if res.ok and res.objective > run.best_objective:
                run.best_objective = res.objective
                run.best_sampled = deserialize(req.genome, spec)
        run.final_modal = modal_genome(controller, agg.last_proposals)
        run.overlaps.append(support_overlap(run.final_modal, env))
        if stop_at is not None and run.overlaps[-1] >= stop_at:
            break
    return run


def budget_env(seed: int) -> SparseOracleEnv:
    """8x4 oracle whose 20 target edges have graded magnitudes 1.5 down to 0.1.

    The per-step offset equals ``||W*||_F^2`` so the do-nothing policy scores
    zero in expectation and rewards are positive, the regime the edge-budget
    penalty is designed for.
    """
    rng = np.random.default_rng([seed, 0xB0D6E7])
    support = rng.permutation(32)[:20]
    W = np.zeros(32)
    W[support] = np.linspace(1.5, 0.1, 20) * rng.choice([-1.0, 1.0], 20)
    return SparseOracleEnv(8, 4, target_weights=W.reshape(8, 4), seed=seed, reward_offset=float(W @ W))


@dataclass
class BudgetRun:
    mean_edges: list[float]
    eval_rewards: list[float]

    def first_below(self, target: float) -> int | None:
        for i, e in enumerate(self.mean_edges):
            if e < target:
                return i + 1
        return None

    def final_objective(self, window: int = 10) -> float:
        return float(np.mean(self.eval_rewards[-window:]))


def run_budget(seed: int, target_edges: int | None, iterations: int = 300, controller_kind: str = "reg_evo") -> BudgetRun:
    env = budget_env(seed)
    dims = PolicyDims(8, 4)
    coding = boolean_coding()
    spec = search_space(coding, dims)
    controller = make_controller(controller_kind, spec, seed)
    config = ESConfig(iterations=iterations, state_normalization=False, hybrid_target_edges=target_edges)
    agg = Aggregator(controller, coding, dims, SerialBackend(Worker(env, coding, dims)), config, seed)
    edges, rewards = [], []
    for _ in range(iterations):
        log = agg.step()
        edges.append(log.mean_edge_count)
        rewards.append(log.eval_reward_mean)
    return BudgetRun(edges, rewards)
