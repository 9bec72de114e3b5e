from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from conftest import linear_graph
from scipy.linalg import solve_discrete_are

from esnas.environments import (
    LQREnv,
    SparseOracleEnv,
    lqr_env,
    make_env,
    riccati_value_iteration,
    rollout,
    sparse_oracle_env,
    with_alive_bonus,
)
from esnas.errors import BadSupport, ConfigError, DimensionMismatch, NonFiniteActivation
from esnas.experiments import boolean_coding, brute_force_optimum, edge_mask
from esnas.normalizer import RunningNormalizer
from esnas.policy import PolicyDims, materialize, search_space
from esnas.search_space import Genome

DATA = Path(__file__).parent / "data"


def zero_lqr(n=2, m=2, **kwargs):
    z = np.zeros((n, n))
    return LQREnv(z, np.zeros((n, m)), z, np.zeros((m, m)), **kwargs)


def test_zero_everything_gives_zero():
    env = zero_lqr(horizon=50)
    traj = rollout(env, linear_graph(np.zeros((2, 2))))
    assert traj.total_training_reward == 0.0 and traj.steps_taken == 50


def test_alive_bonus_arithmetic():
    env = with_alive_bonus(zero_lqr(horizon=1000), 1.0)
    traj = rollout(env, linear_graph(np.ones((2, 2))))
    assert traj.total_training_reward == 0.0
    assert traj.total_eval_reward == 1000.0
    assert traj.total_eval_reward - traj.total_training_reward == env.spec.alive_bonus_per_step * traj.steps_taken


def test_alive_bonus_identity_on_oracle():
    env = with_alive_bonus(SparseOracleEnv(3, 2, support_size=3, seed=1), 0.25)
    traj = rollout(env, linear_graph(np.ones((3, 2))))
    assert traj.total_eval_reward - traj.total_training_reward == 0.25 * traj.steps_taken


def test_decoupled_control_ties():
    A = 0.5 * np.eye(3)
    env = LQREnv(A, np.zeros((3, 2)), np.eye(3), np.zeros((2, 2)), horizon=30, seed=2)
    r1 = rollout(env, linear_graph(np.zeros((3, 2)))).total_training_reward
    r2 = rollout(env, linear_graph(np.full((3, 2), 7.0))).total_training_reward
    assert r1 == r2


def test_one_step_deadbeat():
    env = LQREnv(np.zeros((2, 2)), np.eye(2), np.eye(2), np.zeros((2, 2)), horizon=10, initial_state=[1.0, 0.0])
    assert rollout(env, linear_graph(np.zeros((2, 2)))).total_training_reward == -1.0
    assert rollout(env, linear_graph(np.eye(2))).total_training_reward < -1.0


def test_riccati_matches_frozen_reference():
    ref = json.loads((DATA / "lqr_riccati.json").read_text())
    env = LQREnv.default(seed=ref["seed"])
    np.testing.assert_array_equal(env.A, ref["A"])
    P, K = riccati_value_iteration(env.A, env.B, env.Q, env.R)
    np.testing.assert_allclose(P, ref["P"], rtol=1e-9)
    np.testing.assert_allclose(K, ref["K"], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(solve_discrete_are(env.A, env.B, env.Q, env.R), ref["P"], rtol=1e-9)


def test_optimal_gain_cost_matches_riccati():
    ref = json.loads((DATA / "lqr_riccati.json").read_text())
    env = LQREnv.default(seed=0, initial_state=np.eye(6)[0])
    K = np.asarray(ref["K"])
    traj = rollout(env, linear_graph(-K.T))
    assert abs(-traj.total_training_reward - ref["cost_from_e1"]) / ref["cost_from_e1"] < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_optimal_gain_beats_random_linear_policies(seed):
    env = LQREnv.default(seed=seed, horizon=100)
    _, K = riccati_value_iteration(env.A, env.B, env.Q, env.R)
    best = rollout(env, linear_graph(-K.T)).total_eval_reward
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        W = rng.normal(scale=0.5, size=(6, 3))
        assert rollout(env, linear_graph(W)).total_eval_reward <= best


def test_rollout_is_reproducible_and_partial_stats():
    env = LQREnv.default(seed=3, horizon=40, noise_scale=0.1)
    g = linear_graph(np.random.default_rng(0).normal(scale=0.1, size=(6, 3)))
    norm = RunningNormalizer(6)
    norm.update_batch(np.random.default_rng(1).normal(size=(5, 6)))
    snap = norm.to_dict()
    a = rollout(env, g, norm, training=True, episode=7)
    b = rollout(env, g, norm, training=True, episode=7)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.total_training_reward == b.total_training_reward
    assert norm.to_dict() == snap  # snapshot is read-only
    assert a.normalizer_partial.count == 40
    np.testing.assert_allclose(a.normalizer_partial.mean, a.states.mean(axis=0))
    assert rollout(env, g, norm, episode=7).normalizer_partial is None
    assert rollout(env, g, norm, episode=8).total_training_reward != a.total_training_reward


def test_rollout_dimension_check():
    with pytest.raises(DimensionMismatch):
        rollout(LQREnv.default(), linear_graph(np.zeros((2, 3))))


def test_rollout_reports_failing_step():
    # state doubles each step; the huge identity weight overflows at step 1
    env = LQREnv(2 * np.eye(1), np.zeros((1, 1)), np.eye(1), np.zeros((1, 1)), horizon=5, initial_state=[1.0])
    with pytest.raises(NonFiniteActivation) as info:
        rollout(env, linear_graph([[1e308]]))
    assert info.value.step == 1


def test_lqr_constructor_checks():
    with pytest.raises(DimensionMismatch):
        LQREnv(np.zeros((2, 3)), np.zeros((2, 1)), np.eye(2), np.eye(1))
    with pytest.raises(DimensionMismatch):
        LQREnv(np.zeros((2, 2)), np.zeros((3, 1)), np.eye(2), np.eye(1))
    with pytest.raises(DimensionMismatch):
        lqr_env((6, 3), A=np.eye(2))
    assert lqr_env().spec.state_dim == 6


# sparse oracle -----------------------------------------------------------


def _oracle_graph(env, mask):
    dims = PolicyDims(env.spec.state_dim, env.spec.action_dim)
    coding = boolean_coding()
    spec = search_space(coding, dims)
    theta = np.concatenate([env.target.ravel(), np.zeros(dims.action_dim)])
    return materialize(Genome(spec.space_hash, tuple(int(x) for x in mask)), theta, coding, dims)


def test_exact_target_pays_only_edge_cost():
    env = sparse_oracle_env(4, 2, true_support=[(0, 0), (1, 1), (3, 0)], seed=5)
    traj = rollout(env, _oracle_graph(env, env.support_mask()))
    assert traj.total_training_reward == pytest.approx(-3 * 0.01 * 20, abs=1e-12)


def test_empty_genome_is_worse():
    env = SparseOracleEnv(4, 2, support_size=3, seed=5)
    best = rollout(env, _oracle_graph(env, env.support_mask())).total_training_reward
    empty = rollout(env, _oracle_graph(env, np.zeros(8, dtype=bool))).total_training_reward
    assert empty < best


def test_brute_force_recovers_frozen_supports():
    data = json.loads((DATA / "oracle_supports.json").read_text())
    for inst in data["instances"]:
        env = SparseOracleEnv(inst["state_dim"], inst["action_dim"], support_size=inst["support_size"],
                              seed=inst["seed"])
        assert [list(e) for e in env.true_support] == inst["true_support"]
        genome, objective = brute_force_optimum(env, limit=1 << 12)
        assert list(genome.choices) == inst["best_choices"]
        np.testing.assert_array_equal(edge_mask(genome, len(env.support_mask())), env.support_mask())
        assert objective == pytest.approx(inst["best_objective"], rel=1e-12)


def test_brute_force_nine_edge_toy():
    env = SparseOracleEnv(3, 3, support_size=4, seed=11)
    genome, _ = brute_force_optimum(env, limit=512)
    np.testing.assert_array_equal(edge_mask(genome, 9), env.support_mask())


def test_bad_support():
    with pytest.raises(BadSupport):
        SparseOracleEnv(2, 2, true_support=[(2, 0)])
    with pytest.raises(BadSupport):
        SparseOracleEnv(2, 2, true_support=[(0, 0), (0, 0)])
    with pytest.raises(BadSupport):
        SparseOracleEnv(2, 2)
    with pytest.raises(BadSupport):
        SparseOracleEnv(2, 2, support_size=5)


def test_reward_offset_shifts_per_step():
    base = SparseOracleEnv(3, 2, support_size=2, seed=0)
    shifted = SparseOracleEnv(3, 2, support_size=2, seed=0, reward_offset=2.0)
    g = linear_graph(np.zeros((3, 2)))
    diff = rollout(shifted, g).total_training_reward - rollout(base, g).total_training_reward
    assert diff == pytest.approx(2.0 * 20)


def test_make_env_roundtrip():
    for env in (LQREnv.default(seed=4, horizon=10), SparseOracleEnv(3, 2, support_size=2, seed=1, noise_scale=0.3)):
        clone = make_env(json.loads(json.dumps(env.to_config())))
        g = linear_graph(np.full((env.spec.state_dim, env.spec.action_dim), 0.1))
        assert rollout(clone, g, episode=3).total_training_reward == rollout(env, g, episode=3).total_training_reward
    with pytest.raises(ConfigError):
        make_env({"name": "mujoco"})
    with pytest.raises(ConfigError):
        make_env({"name": "lqr", "params": {"bogus": 1}})
