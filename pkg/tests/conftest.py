import numpy as np
import pytest

from gmlm.graph import add_reverse_relations, generate_synthetic
from gmlm.model import GMLM

TINY_DIMS = dict(d_hidden=4, d_plm=4, cross_heads=2, text_heads=2, max_len=5, d_ff=6)


def tiny_graph(seed: int = 3):
    """8 nodes, 3 features, 2 relations (original plus reversed)."""
    g = generate_synthetic(8, 2, 0.5, vocab=3, seed=seed, feature_dim=3, avg_degree=2.0, text_length=(1, 4))
    return add_reverse_relations(g)


def tiny_model(g, seed: int = 0, **overrides):
    return GMLM.for_graph(g, seed=seed, **{**TINY_DIMS, **overrides})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_graph():
    return tiny_graph()


def pytest_terminal_summary(terminalreporter):
    """List the acceptance verdicts, one line per criterion, after the run."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
