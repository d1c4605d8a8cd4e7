import sys

import numpy as np
import pytest
from hypothesis import strategies as st

from bspnet.bsp_tree import BspTree, Leaf, Split

SCOPES = {1: ("x",), 2: ("x", "y"), 3: ("x", "y", "z")}


def random_node(rng: np.random.Generator, ndim: int, n_leaves: int,
                value_range=(0.0, 5.0), weight_range=(0.1, 3.0)):
    """Random tree with exactly ``n_leaves`` leaves (random axes, random split sizes)."""
    if n_leaves == 1:
        return Leaf(float(rng.uniform(*value_range)), float(rng.uniform(*weight_range)))
    k = int(rng.integers(1, n_leaves))
    return Split(int(rng.integers(ndim)),
                 random_node(rng, ndim, k, value_range, weight_range),
                 random_node(rng, ndim, n_leaves - k, value_range, weight_range))


def random_tree(rng: np.random.Generator, ndim: int, n_leaves: int, log_scale: float = 0.0,
                **kw) -> BspTree:
    return BspTree(SCOPES[ndim], random_node(rng, ndim, n_leaves, **kw), log_scale)


@st.composite
def trees(draw, ndim: int | None = None, max_leaves: int = 24):
    """Hypothesis strategy: random trees over 1..3 axes, seeded through numpy."""
    n = ndim or draw(st.integers(1, 3))
    leaves = draw(st.integers(1, max_leaves))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    return random_tree(np.random.default_rng(seed), n, leaves)


def two_level_tree(low=1.0, left=2.0, right=3.0) -> BspTree:
    """Lower half in y is one leaf; the upper half is split on x."""
    return BspTree(("x", "y"), Split(1, Leaf(low), Split(0, Leaf(left), Leaf(right))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
