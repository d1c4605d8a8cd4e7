import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bspnet.bsp_tree import (
    BspTree,
    Leaf,
    Split,
    VanishedPotentialError,
    evaluate_many,
    iter_leaves,
    map_values,
    serialize,
    total_integral,
    weighted,
)
from bspnet.evaluation import exact_robot_posterior, grid_kl
from bspnet.inference import (
    InferenceConfig,
    _min_fill_cliques,
    _moral_graph,
    build_join_tree,
    calibration_residuals,
    downward_weight_pass,
    iterate,
    reset_weights,
    upward_pass,
    wkl_distance_trees,
)
from bspnet.network import parse_network, robot_network, robot_network_text

from conftest import random_node


def robot_jt(o1=0.2, o2=0.8, **kw):
    return build_join_tree(robot_network(o1, o2), **kw)


# --------------------------------------------------------------------------
# join tree construction


def test_robot_join_tree_keeps_observed_nodes():
    jt = robot_jt()
    got = [(c.id, c.nodes, c.scope, c.parent) for c in jt.cliques]
    assert got == [
        (0, ("x1", "o1"), ("x1",), 1),
        (1, ("x1", "x2"), ("x1", "x2"), 3),
        (2, ("x2", "o2"), ("x2",), 1),
        (3, ("x2", "x3"), ("x2", "x3"), 4),
        (4, ("x3", "o3"), ("x3",), None),
    ]
    assert jt.root == 4
    assert jt.cliques[3].separator == ("x3",)
    assert jt.cliques[1].separator == ("x2",)
    assert sorted(jt.cliques[1].children) == [0, 2]


def test_absorbed_chain():
    jt = robot_jt(absorb_evidence=True)
    assert [c.scope for c in jt.cliques] == [("x1", "x2"), ("x2", "x3")]
    child = next(c for c in jt.cliques if c.parent is not None)
    assert child.separator == ("x2",)
    assert jt.cliques[jt.root].scope == ("x2", "x3")


def test_every_factor_assigned_once_and_covered():
    net = robot_network()
    jt = build_join_tree(net)
    assigned = [f for c in jt.cliques for f in c.factors]
    assert len(assigned) == len(net.factors)
    for c in jt.cliques:
        for f in c.factors:
            assert set(f.scope) <= set(c.scope)


def test_running_intersection():
    jt = robot_jt()
    for var in ("x1", "x2", "x3"):
        holders = {c.id for c in jt.cliques if var in c.nodes}
        # the holders form a connected subtree: exactly one holder has its parent outside
        tops = [i for i in holders if jt.cliques[i].parent not in holders]
        assert len(tops) == 1


def test_single_variable_network():
    net = parse_network("var x continuous 0 1\nfactor uniform x\nquery x\n")
    jt = build_join_tree(net)
    assert len(jt.cliques) == 1 and jt.edges() == []


def test_four_cycle_gets_one_chord():
    adj = _moral_graph(["a", "b", "c", "d"], [("a", "b"), ("b", "c"), ("c", "d"), ("d", "a")])
    cliques = _min_fill_cliques(["a", "b", "c", "d"], adj)
    assert len(cliques) == 2 and all(len(c) == 3 for c in cliques)
    shared = set(cliques[0]) & set(cliques[1])
    assert len(shared) == 2


def test_diamond_network_moralizes_into_two_triangles():
    net = parse_network("""
var a continuous 0 1
var b continuous 0 1
var c continuous 0 1
var d continuous 0 1
factor uniform a
factor lingauss b 1*a var=0.1
factor lingauss d 1*a var=0.1
factor lingauss c 0.5*b + 0.5*d var=0.1
query c
""")
    jt = build_join_tree(net)
    assert sorted(c.nodes for c in jt.cliques) == [("a", "b", "d"), ("b", "c", "d")]
    post = iterate(net, InferenceConfig(max_iterations=1, max_leaves=64, rng_seed=1)).posterior
    assert total_integral(post, honor_log_scale=False) == pytest.approx(1.0, abs=1e-9)


# --------------------------------------------------------------------------
# upward pass


def first_pass(o1, o2, seed=1):
    jt = robot_jt(o1, o2)
    jt.iteration = 1
    return jt, upward_pass(jt, InferenceConfig(rng_seed=seed))


def test_similar_evidence_first_pass_is_close():
    _, post = first_pass(0.2, 0.2)
    assert grid_kl(exact_robot_posterior(0.2, 0.2), post) <= 0.05


def test_conflicting_evidence_first_pass_is_much_worse():
    _, similar = first_pass(0.2, 0.2)
    _, conflicting = first_pass(0.2, 0.65)
    kl_s = grid_kl(exact_robot_posterior(0.2, 0.2), similar)
    kl_c = grid_kl(exact_robot_posterior(0.2, 0.65), conflicting)
    assert kl_c >= 5 * kl_s


def test_single_clique_piecewise_constant_target_is_exact():
    net = parse_network("var x continuous 0 1\nfactor uniform x\nquery x\n")
    post = iterate(net, InferenceConfig(max_iterations=1)).posterior
    assert post.root == Leaf(1.0)


def test_posterior_normalized_each_iteration():
    res = iterate(robot_network(0.2, 0.8), InferenceConfig(max_iterations=3, rng_seed=2))
    for h in res.history:
        assert total_integral(h.posterior, honor_log_scale=False) == pytest.approx(1.0, abs=1e-9)


def test_sibling_order_invariance():
    cfg = InferenceConfig(rng_seed=4)
    a, b = robot_jt(), robot_jt()
    a.iteration = b.iteration = 1
    pa = upward_pass(a, cfg, order=[0, 2, 1, 3, 4])
    pb = upward_pass(b, cfg, order=[2, 0, 1, 3, 4])
    assert serialize(pa) == serialize(pb)
    with pytest.raises(ValueError):
        upward_pass(robot_jt(), cfg, order=[1, 0, 2, 3, 4])


def test_impossible_evidence_raises():
    text = robot_network_text(0.0, 1.0).replace("var=0.01", "var=0.000001")
    with pytest.raises(VanishedPotentialError):
        iterate(parse_network(text), InferenceConfig(max_iterations=1))


# --------------------------------------------------------------------------
# weight pass


def calibrated_tree(iterations=1, seed=3):
    jt = robot_jt()
    cfg = InferenceConfig(rng_seed=seed)
    for it in range(1, iterations + 1):
        jt.iteration = it
        upward_pass(jt, cfg)
        downward_weight_pass(jt)
    return jt


@pytest.mark.parametrize("iterations", [1, 2, 3])
def test_calibration_residual(iterations):
    jt = calibrated_tree(iterations)
    res = calibration_residuals(jt)
    assert len(res) == 4
    assert max(res) <= 1e-6


def test_calibration_against_grid_quadrature():
    jt = calibrated_tree(2)
    grid = (np.arange(2048) + 0.5) / 2048
    for p, ci in jt.edges():
        parent, child = jt.cliques[p], jt.cliques[ci]
        sums = []
        for c in (parent, child):
            t = weighted(c.potential).with_log_scale(0.0)
            if c.ndim == 1:
                sums.append(evaluate_many(t, grid[:, None]))
            else:
                k = c.scope.index(child.separator[0])
                g1, g2 = np.meshgrid(grid, grid, indexing="ij")
                vals = evaluate_many(t, np.column_stack([g1.ravel(), g2.ravel()])).reshape(2048, 2048)
                sums.append(vals.mean(axis=1 - k))
        lhs, rhs = sums
        assert np.abs(lhs - rhs).sum() / np.abs(lhs).sum() < 1e-3


def test_single_clique_weights_are_constant():
    net = parse_network("var x continuous 0 1\nvar o continuous 0 1\nfactor uniform x\n"
                        "factor lingauss o 1*x var=0.01\nevidence o=0.3\nquery x\n")
    jt = build_join_tree(net)
    jt.iteration = 1
    upward_pass(jt, InferenceConfig())
    downward_weight_pass(jt)
    weights = {lf.leaf.weight for c in jt.cliques for lf in iter_leaves(c.potential)}
    assert len(weights) == 1


def test_root_weight_neutrality():
    cfg = InferenceConfig(rng_seed=6)
    jt = robot_jt()
    jt.iteration = 1
    first = upward_pass(jt, cfg)
    downward_weight_pass(jt)
    reset_weights(jt)
    again = upward_pass(jt, cfg)
    assert serialize(again) == serialize(first)


# --------------------------------------------------------------------------
# iterate


def test_infinite_tolerance_stops_after_one_iteration():
    net = robot_network(0.2, 0.8)
    res = iterate(net, InferenceConfig(convergence_tol=math.inf, rng_seed=1))
    assert res.iterations == 1 and res.converged
    jt = robot_jt()
    jt.iteration = 1
    assert serialize(res.posterior) == serialize(upward_pass(jt, InferenceConfig(rng_seed=1)))


def test_likely_evidence_settles_by_iteration_two():
    exact = exact_robot_posterior(0.2, 0.2)
    res = iterate(robot_network(0.2, 0.2), InferenceConfig(max_iterations=3, convergence_tol=1e-12,
                                                           rng_seed=1), exact=exact)
    kl = [h.kl_to_exact for h in res.history]
    assert abs(kl[2] - kl[1]) < 0.01


def test_anytime_improvement_over_seeds():
    exact = exact_robot_posterior(0.2, 0.8)
    first, third = [], []
    for seed in range(1, 11):
        res = iterate(robot_network(0.2, 0.8), InferenceConfig(max_iterations=3, convergence_tol=1e-12,
                                                               rng_seed=seed), exact=exact)
        first.append(res.history[0].kl_to_exact)
        third.append(res.history[2].kl_to_exact)
    assert np.median(third) <= np.median(first)


def test_iterate_is_deterministic():
    cfg = InferenceConfig(max_iterations=3, rng_seed=1)
    a = iterate(robot_network(), cfg)
    b = iterate(robot_network(), cfg)
    assert [serialize(c.potential) for c in a.join_tree.cliques] == \
        [serialize(c.potential) for c in b.join_tree.cliques]
    assert [h.kl_to_previous for h in a.history] == [h.kl_to_previous for h in b.history]


def test_leaf_budget_respected():
    res = iterate(robot_network(), InferenceConfig(max_iterations=3, max_leaves=32, rng_seed=1))
    for h in res.history:
        assert max(h.leaf_counts.values()) <= 32


def test_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(convergence_tol=0.0)
    with pytest.raises(ValueError):
        InferenceConfig(max_iterations=0)
    assert InferenceConfig(leaves_per_axis=4).budget(2) == 16


# --------------------------------------------------------------------------
# weighted KL


def same_partition(rng, n_leaves):
    """Three trees sharing one random partition with independent leaf values."""
    shape = random_node(rng, 2, n_leaves)

    def refill(node):
        if isinstance(node, Leaf):
            return Leaf(float(rng.uniform(0.05, 3.0)))
        return Split(node.axis, refill(node.low), refill(node.high))

    return [BspTree(("x", "y"), refill(shape)) for _ in range(3)]


def test_wkl_identical_is_zero(rng):
    f, _, w = same_partition(rng, 20)
    assert wkl_distance_trees(f, f, w) == 0.0


def test_wkl_constant_weight_scales(rng):
    f, g, _ = same_partition(rng, 20)
    one = BspTree.constant(f.scope, 1.0)
    c = BspTree.constant(f.scope, 2.5)
    assert wkl_distance_trees(f, g, c) == pytest.approx(2.5 * wkl_distance_trees(f, g, one))
    # unit weight reduces to the tree-to-tree KL on normalized trees
    fn = map_values(f, lambda v: v / total_integral(f))
    gn = map_values(g, lambda v: v / total_integral(g))
    assert wkl_distance_trees(fn, gn, one) == pytest.approx(grid_kl(fn, gn, 1024), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_wkl_bounds(seed):
    rng = np.random.default_rng(seed)
    f, g, w = same_partition(rng, int(rng.integers(1, 40)))
    fn = map_values(f, lambda v: v / total_integral(f))
    gn = map_values(g, lambda v: v / total_integral(g))
    ws = [lf.leaf.value for lf in iter_leaves(w)]
    # raw per-leaf terms f log(f/g) can be negative; adding w (g - f) per leaf gives the
    # nonnegative form whose sum is bracketed by the extreme weights
    corr_w = sum(lw.leaf.value * (lg.leaf.value - lf.leaf.value) * lf.box.volume
                 for lf, lg, lw in zip(iter_leaves(fn), iter_leaves(gn), iter_leaves(w)))
    D = wkl_distance_trees(fn, gn, BspTree.constant(f.scope, 1.0))
    W = wkl_distance_trees(fn, gn, w) + corr_w
    assert D >= -1e-12
    assert min(ws) * D <= W + 1e-12
    assert W <= max(ws) * D + 1e-12
