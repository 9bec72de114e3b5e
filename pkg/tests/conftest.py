from __future__ import annotations

import numpy as np
import pytest

from esnas.policy import IDENTITY, CodingKind, PolicyDims, WeightCoding, materialize, search_space
from esnas.search_space import Genome


def linear_graph(W, bias=None):
    """Policy graph computing ``s @ W + bias`` with no hidden layer."""
    W = np.asarray(W, dtype=float)
    dims = PolicyDims(*W.shape)
    coding = WeightCoding(CodingKind.UNSTRUCTURED, default_nonlinearity=IDENTITY)
    b = np.zeros(W.shape[1]) if bias is None else np.asarray(bias, dtype=float)
    spec = search_space(coding, dims)
    return materialize(Genome(spec.space_hash, ()), np.concatenate([W.ravel(), b]), coding, dims)


@pytest.fixture
def linear():
    return linear_graph


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
