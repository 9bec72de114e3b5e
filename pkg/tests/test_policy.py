from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esnas.errors import (
    DimensionMismatch,
    GenomeSpaceMismatch,
    NonFiniteActivation,
    RangeError,
    UnknownId,
    WeightLengthMismatch,
)
from esnas.policy import (
    IDENTITY,
    TANH,
    CodingKind,
    PolicyDims,
    PolicyGraph,
    WeightCoding,
    annealed_beta,
    apply_nonlinearity,
    candidate_edges,
    circulant_expand,
    forward,
    mask_fraction,
    masked_training_objective,
    materialize,
    param_accounting,
    search_space,
    soft_mask,
    toeplitz_expand,
    trainable_size,
)
from esnas.reports import accounting_rows
from esnas.search_space import Genome, random_sample

DATA = Path(__file__).parent / "data"


def _zero_genome(spec):
    return Genome(spec.space_hash, tuple(0 for _ in spec.decision_points))


# forward -----------------------------------------------------------------


def test_forward_single_edge():
    g = PolicyGraph(2, 1, 1, ((0, 1, 2.0),), (IDENTITY,))
    np.testing.assert_array_equal(forward(g, [3.0]), [6.0])


def test_forward_additive_and_tanh():
    lin = PolicyGraph(3, 2, 1, ((0, 2, 1.0), (1, 2, 1.0)), (IDENTITY,))
    assert forward(lin, [2.0, 5.0])[0] == 7.0
    th = PolicyGraph(3, 2, 1, ((0, 2, 1.0), (1, 2, 1.0)), (TANH,))
    assert forward(th, [2.0, 5.0])[0] == pytest.approx(0.9999983, abs=1e-7)
    assert forward(th, [2.0, 5.0])[0] == math.tanh(7.0)


def test_forward_bias_and_batch():
    g = PolicyGraph(3, 1, 1, ((0, 1, 2.0), (1, 2, 3.0)), (IDENTITY, IDENTITY), (1.0, -1.0))
    assert forward(g, [1.0])[0] == 3.0 * (2.0 + 1.0) - 1.0
    np.testing.assert_allclose(forward(g, [[1.0], [0.0]]), [[8.0], [2.0]])


def test_graph_rejects_bad_edges():
    with pytest.raises(DimensionMismatch):
        PolicyGraph(3, 1, 1, ((2, 1, 1.0),), (IDENTITY, IDENTITY))
    with pytest.raises(DimensionMismatch):
        PolicyGraph(3, 1, 1, ((0, 1, 1.0), (0, 1, 2.0)), (IDENTITY, IDENTITY))
    with pytest.raises(NonFiniteActivation):
        PolicyGraph(2, 1, 1, ((0, 1, float("nan")),), (IDENTITY,))
    with pytest.raises(DimensionMismatch):
        forward(PolicyGraph(2, 1, 1, (), (IDENTITY,)), [1.0, 2.0])


def test_graph_json_roundtrip():
    g = PolicyGraph(3, 1, 1, ((0, 1, 0.5), (0, 2, -1.0), (1, 2, 2.0)), (TANH, IDENTITY), (0.1, 0.2))
    assert PolicyGraph.from_dict(json.loads(json.dumps(g.to_dict()))) == g


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_identity_graph_is_linear(seed, a, b):
    coding = WeightCoding(CodingKind.UNSTRUCTURED, hidden_sizes=(4,), default_nonlinearity=IDENTITY)
    dims = PolicyDims(3, 2)
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=trainable_size(coding, dims))
    theta[-6:] = 0.0  # biases off
    g = materialize(_zero_genome(search_space(coding, dims)), theta, coding, dims)
    s1, s2 = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(forward(g, a * s1 + b * s2), a * forward(g, s1) + b * forward(g, s2), atol=1e-9)


# nonlinearities ----------------------------------------------------------


def test_nonlinearity_examples():
    assert apply_nonlinearity(3, -4.2) == -4.2
    assert apply_nonlinearity(10, -0.1) == 0
    assert apply_nonlinearity(10, 0.0) == 0
    assert apply_nonlinearity(10, 0.1) == 1
    assert apply_nonlinearity(8, 3.0) == 9


def test_nonlinearity_order_and_clamps():
    x = 0.7
    expected = [math.tanh(x), x, math.exp(x), x, math.sin(x), 1 / (1 + math.exp(-x)), x, math.cos(x), x * x, 1 / x, 1]
    for nid, want in enumerate(expected):
        assert apply_nonlinearity(nid, x) == pytest.approx(want, rel=1e-12)
    assert apply_nonlinearity(2, 1000.0) == pytest.approx(math.exp(30.0))
    assert apply_nonlinearity(9, 0.0) == 0.0  # sign(0) = 0
    assert apply_nonlinearity(9, 1e-9) == pytest.approx(1e6)
    assert apply_nonlinearity(9, -1e-9) == pytest.approx(-1e6)
    assert apply_nonlinearity(1, -2.0) == 0.0
    assert apply_nonlinearity(6, -2.0) == 2.0
    with pytest.raises(UnknownId):
        apply_nonlinearity(11, 0.0)


@settings(max_examples=100, deadline=None)
@given(nid=st.integers(0, 10), x=st.floats(-1e6, 1e6))
def test_nonlinearities_stay_finite(nid, x):
    if nid == 8 and abs(x) > 1e150:
        return
    assert math.isfinite(float(apply_nonlinearity(nid, x)))


# structured expansions ---------------------------------------------------


def test_toeplitz_examples():
    assert toeplitz_expand(np.arange(9.0), 4, 6).shape == (4, 6)
    np.testing.assert_array_equal(toeplitz_expand([5.0], 1, 1), [[5.0]])
    np.testing.assert_array_equal(toeplitz_expand([0.0, 1.0, 2.0], 2, 2), [[0.0, 1.0], [2.0, 0.0]])
    with pytest.raises(DimensionMismatch):
        toeplitz_expand(np.arange(8.0), 4, 6)


def test_toeplitz_fig3_layout():
    w = toeplitz_expand(np.arange(9.0), 4, 6)
    np.testing.assert_array_equal(w[0], np.arange(6.0))
    np.testing.assert_array_equal(w[1:, 0], [6.0, 7.0, 8.0])


@settings(max_examples=60, deadline=None)
@given(a=st.integers(1, 8), b=st.integers(1, 8), seed=st.integers(0, 1000))
def test_toeplitz_constant_diagonals(a, b, seed):
    w = toeplitz_expand(np.random.default_rng(seed).normal(size=a + b - 1), a, b)
    assert np.array_equal(w[:-1, :-1], w[1:, 1:])
    assert len(np.unique(w)) <= a + b - 1


def test_circulant_examples():
    np.testing.assert_array_equal(circulant_expand([1.0, 2.0, 3.0], 3, 3), [[1, 2, 3], [3, 1, 2], [2, 3, 1]])
    np.testing.assert_array_equal(circulant_expand([4.0], 1, 1), [[4.0]])
    with pytest.raises(DimensionMismatch):
        circulant_expand([1.0, 2.0], 3, 3)
    coding = WeightCoding(CodingKind.CIRCULANT, hidden_sizes=(41,))
    assert param_accounting(coding, PolicyDims(17, 6)).weight_params == 82


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 9), seed=st.integers(0, 1000))
def test_circulant_rows_are_right_shifts(n, seed):
    w = circulant_expand(np.random.default_rng(seed).normal(size=n), n, n)
    for i in range(n):
        np.testing.assert_array_equal(w[i], np.roll(w[0], i))


@settings(max_examples=40, deadline=None)
@given(a=st.integers(1, 7), b=st.integers(1, 7))
def test_circulant_truncates_square(a, b):
    n = max(a, b)
    p = np.arange(float(n))
    np.testing.assert_array_equal(circulant_expand(p, a, b), circulant_expand(p, n, n)[:a, :b])


# masking -----------------------------------------------------------------


def test_soft_mask_examples():
    assert soft_mask([0.0], 0.01)[0] == 0.5
    assert abs(soft_mask([1.0], 0.01)[0] - 1.0) < 1e-30
    assert mask_fraction([0.9, 0.1, 0.6]) == pytest.approx(2 / 3)


@settings(max_examples=60, deadline=None)
@given(g=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3))
def test_soft_mask_tends_to_step(g):
    assert abs(soft_mask([g], 1e-5)[0] - (1.0 if g > 0 else 0.0)) < 1e-12


def test_masked_objective_examples():
    assert masked_training_objective(0.37, 0.8, 1.0) == 0.37
    assert masked_training_objective(0.9, 0.25, 0.0) == 0.75
    assert masked_training_objective(0.2, 0.6, 0.5) == pytest.approx(0.3)
    with pytest.raises(RangeError):
        masked_training_objective(0.2, 1.5, 0.5)
    with pytest.raises(RangeError):
        masked_training_objective(0.2, 0.5, -0.1)


def test_annealed_beta_linear():
    assert annealed_beta(0, 100) == 0.5
    assert annealed_beta(99, 100) == 1.0
    assert annealed_beta(500, 100) == 1.0
    assert annealed_beta(33, 67) == pytest.approx(0.75)


# materialize -------------------------------------------------------------


def test_boolean_all_zero_genome_has_no_edges():
    coding = WeightCoding(CodingKind.EDGE_PRUNING, hidden_sizes=(), boolean_mode=True, output_nonlinearity=IDENTITY)
    dims = PolicyDims(3, 2)
    theta = np.zeros(trainable_size(coding, dims))
    theta[-2:] = [0.5, -0.25]
    g = materialize(_zero_genome(search_space(coding, dims)), theta, coding, dims)
    assert g.num_edges == 0
    np.testing.assert_array_equal(forward(g, [1.0, 2.0, 3.0]), [0.5, -0.25])


def test_single_color_shares_one_scalar():
    coding = WeightCoding(CodingKind.WEIGHT_SHARING, hidden_sizes=(4,), num_colors=1)
    dims = PolicyDims(3, 2)
    theta = np.arange(trainable_size(coding, dims), dtype=float) + 1.0
    g = materialize(_zero_genome(search_space(coding, dims)), theta, coding, dims)
    assert {w for _, _, w in g.edges} == {1.0}
    assert g.num_edges == len(candidate_edges(coding, dims))


def test_weight_sharing_uses_color_scalars():
    coding = WeightCoding(CodingKind.WEIGHT_SHARING, hidden_sizes=(), num_colors=3)
    dims = PolicyDims(2, 2)
    spec = search_space(coding, dims)
    genome = Genome(spec.space_hash, (0, 1, 2, 1))
    theta = np.array([10.0, 20.0, 30.0, 0.0, 0.0])
    g = materialize(genome, theta, coding, dims)
    assert [w for _, _, w in g.edges] == [10.0, 20.0, 30.0, 20.0]


def test_halfcheetah_edge_pruning_has_64_edges():
    coding = WeightCoding(CodingKind.EDGE_PRUNING, hidden_sizes=(32,), num_edges=64)
    dims = PolicyDims(17, 6)
    spec = search_space(coding, dims)
    rng = np.random.default_rng(0)
    for _ in range(20):
        theta = rng.normal(size=trainable_size(coding, dims))
        assert materialize(random_sample(spec, rng), theta, coding, dims).num_edges == 64


@settings(max_examples=40, deadline=None)
@given(e=st.integers(1, 10), seed=st.integers(0, 10_000))
def test_fixed_edge_pruning_always_exact(e, seed):
    coding = WeightCoding(CodingKind.EDGE_PRUNING, hidden_sizes=(2,), num_edges=e)
    dims = PolicyDims(3, 2)
    spec = search_space(coding, dims)
    rng = np.random.default_rng(seed)
    g = materialize(random_sample(spec, rng), rng.normal(size=trainable_size(coding, dims)), coding, dims)
    assert g.num_edges == e


def test_materialize_errors():
    coding = WeightCoding(CodingKind.UNSTRUCTURED, hidden_sizes=(2,))
    dims = PolicyDims(2, 1)
    other = search_space(WeightCoding(CodingKind.EDGE_PRUNING, boolean_mode=True), dims)
    with pytest.raises(GenomeSpaceMismatch):
        materialize(_zero_genome(other), np.zeros(trainable_size(coding, dims)), coding, dims)
    with pytest.raises(WeightLengthMismatch):
        materialize(_zero_genome(search_space(coding, dims)), np.zeros(3), coding, dims)


def test_structured_codings_match_layer_expansion():
    dims = PolicyDims(3, 2)
    coding = WeightCoding(CodingKind.TOEPLITZ, hidden_sizes=(4,), default_nonlinearity=IDENTITY)
    theta = np.random.default_rng(1).normal(size=trainable_size(coding, dims))
    w1 = toeplitz_expand(theta[:6], 3, 4)
    w2 = toeplitz_expand(theta[6:11], 4, 2)
    b1, b2 = theta[11:15], theta[15:17]
    s = np.array([0.3, -1.0, 2.0])
    g = materialize(_zero_genome(search_space(coding, dims)), theta, coding, dims)
    np.testing.assert_allclose(forward(g, s), (s @ w1 + b1) @ w2 + b2, atol=1e-12)


def test_coding_validation():
    with pytest.raises(ValueError):
        WeightCoding(CodingKind.WEIGHT_SHARING)
    with pytest.raises(ValueError):
        WeightCoding(CodingKind.TOEPLITZ, num_colors=2)
    with pytest.raises(ValueError):
        WeightCoding(CodingKind.EDGE_PRUNING)
    assert WeightCoding.from_dict({"kind": "toeplitz", "hidden_sizes": [4]}).kind is CodingKind.TOEPLITZ


# accounting --------------------------------------------------------------


def test_accounting_examples():
    hopper = PolicyDims(11, 3)
    toe = param_accounting(WeightCoding(CodingKind.TOEPLITZ, hidden_sizes=(41,)), hopper)
    assert toe.weight_params == 94 and abs(toe.compression_pct - 78) <= 1
    ws = param_accounting(WeightCoding(CodingKind.WEIGHT_SHARING, hidden_sizes=(41,), num_colors=11), hopper)
    assert ws.bit_count == 32 * (11 + 41) + 574 * 4 == 3960
    cheetah = param_accounting(WeightCoding(CodingKind.WEIGHT_SHARING, hidden_sizes=(41,), num_colors=17),
                               PolicyDims(17, 6))
    assert cheetah.bit_count == 6571
    assert param_accounting(WeightCoding(CodingKind.UNSTRUCTURED, hidden_sizes=(41,)), hopper).compression_pct == 0


def test_accounting_matches_published_table():
    table = json.loads((DATA / "published_accounting.json").read_text())
    ours = {(r.env, r.coding): r for r in accounting_rows()}
    mismatched = []
    for env, coding, weights, pct, bits in table["rows"]:
        row = ours[(env, coding)]
        assert row.weights == weights, (env, coding)
        if abs(row.compression_pct - pct) > 1:
            mismatched.append((env, coding, round(row.compression_pct, 2), pct))
    # the published HalfCheetah edge-pruning entry repeats 98% where the same
    # dims give 90% (Walker2d, identical shape, is listed at 90%)
    assert mismatched == [("HalfCheetah", "Edge Pruning", 90.24, 98)]


def test_accounting_bounds():
    dims = PolicyDims(5, 2)
    for coding in [
        WeightCoding(CodingKind.UNSTRUCTURED, hidden_sizes=(3,)),
        WeightCoding(CodingKind.TOEPLITZ, hidden_sizes=(3,)),
        WeightCoding(CodingKind.CIRCULANT, hidden_sizes=(3,)),
        WeightCoding(CodingKind.WEIGHT_SHARING, hidden_sizes=(3,), num_colors=3),
        WeightCoding(CodingKind.EDGE_PRUNING, hidden_sizes=(3,), num_edges=4),
        WeightCoding(CodingKind.MASKED, hidden_sizes=(3,)),
    ]:
        acct = param_accounting(coding, dims)
        assert 0 <= acct.compression_pct <= 100
        assert acct.bit_count >= 32 * acct.weight_params
    with pytest.raises(DimensionMismatch):
        param_accounting(WeightCoding(CodingKind.MASKED, hidden_sizes=(3,)), dims, kept_edges=10_000)
