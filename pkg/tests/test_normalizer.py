from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from esnas.es_core import RunningNormalizer, normalize_state


def test_identity_before_statistics():
    norm = RunningNormalizer(3)
    np.testing.assert_array_equal(normalize_state(norm, [1.0, -2.0, 3.0]), [1.0, -2.0, 3.0])


def test_constant_stream_floors_std():
    norm = RunningNormalizer(1)
    for _ in range(50):
        z = normalize_state(norm, [5.0], training=True)
    assert norm.mean[0] == 5.0
    assert z[0] == 0.0
    assert norm.std[0] == 1e-8


def test_running_mean_matches_two_pass():
    norm = RunningNormalizer(1)
    xs = np.arange(1.0, 1001.0)
    for x in xs:
        norm.update([x])
    assert abs(norm.mean[0] - xs.mean()) < 1e-12
    assert abs(norm.variance[0] - xs.var()) / xs.var() < 1e-12


def test_eval_never_updates():
    norm = RunningNormalizer(2)
    normalize_state(norm, [1.0, 2.0], training=True)
    before = norm.to_dict()
    normalize_state(norm, [100.0, -100.0], training=False)
    assert norm.to_dict() == before


def test_training_normalizes_before_absorbing():
    norm = RunningNormalizer(1)
    normalize_state(norm, [1.0], training=True)
    normalize_state(norm, [3.0], training=True)
    # stats now mean 2, std 1; the next state is normalized by those
    assert normalize_state(norm, [4.0], training=True)[0] == pytest.approx(2.0)


rows = arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)), elements=st.floats(-1e3, 1e3))


@settings(max_examples=60, deadline=None)
@given(a=rows, b=rows, c=rows)
def test_merge_is_associative_and_matches_pooled(a, b, c):
    def acc(x):
        n = RunningNormalizer(3)
        n.update_batch(x)
        return n

    left = acc(a)
    left.merge(acc(b))
    left.merge(acc(c))
    bc = acc(b)
    bc.merge(acc(c))
    right = acc(a)
    right.merge(bc)
    pooled = np.vstack([a, b, c])
    for n in (left, right):
        assert n.count == len(pooled)
        np.testing.assert_allclose(n.mean, pooled.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(n.variance, pooled.var(axis=0), rtol=1e-8, atol=1e-6)
        assert np.all(n.variance >= 0)


def test_merge_with_empty_and_roundtrip():
    n = RunningNormalizer(2)
    n.update_batch([[1.0, 2.0], [3.0, 5.0]])
    before = n.to_dict()
    n.merge(RunningNormalizer(2))
    assert n.to_dict() == before
    e = RunningNormalizer(2)
    e.merge(n)
    assert e.to_dict() == before
    assert RunningNormalizer.from_dict(before).to_dict() == before
    with pytest.raises(ValueError):
        RunningNormalizer(2, count=-1)
