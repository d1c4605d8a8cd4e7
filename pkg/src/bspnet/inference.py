"""Join-tree inference with BSP-discretized clique potentials.

Each clique is discretized as the product of its own factors and the
normalized messages from its children.  Weights live in the same tree as the
potential and are expressed relative to that product, so ``weight * value``
is the clique's share of the weighted error directly.  After each upward
sweep a downward pass recomputes the weights so that the weighted potentials
of neighbouring cliques agree on their separators, and the next sweep
refines every clique under those weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .bsp_tree import (
    WEIGHT_CEIL,
    WEIGHT_FLOOR,
    BspTree,
    ScopeMismatchError,
    VanishedPotentialError,
    align,
    divide,
    evaluate_many,
    extend_scope,
    iter_leaves,
    map_values,
    marginalize_to,
    normalize,
    prune,
    prune_to_budget,
    total_integral,
    transfer_weights,
    weighted,
    with_constant_weight,
)
from .discretizer import DiscretizationConfig, discretize
from .evaluation import grid_kl, uniform_baseline
from .factors import ContinuousFactor, instantiate_evidence, product_evaluate
from .network import HybridNetwork

_SEED_STRIDE = 1_000_003


@dataclass(frozen=True)
class InferenceConfig:
    delta: float = 0.02
    max_leaves: int = 256
    max_iterations: int = 10
    convergence_tol: float = 1e-3
    rng_seed: int = 0
    samples_per_region: int = 16
    probe_offset: float = 0.25
    # when set, each clique gets a budget of leaves_per_axis ** (its dimension)
    leaves_per_axis: int | None = None
    kl_resolution: int = 100_000

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("delta must be >= 0")
        if self.max_leaves < 1 or self.max_iterations < 1:
            raise ValueError("max_leaves and max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if self.leaves_per_axis is not None and self.leaves_per_axis < 1:
            raise ValueError("leaves_per_axis must be >= 1")

    def budget(self, ndim: int) -> int:
        if self.leaves_per_axis is None:
            return self.max_leaves
        return max(1, self.leaves_per_axis ** ndim)

    def discretization(self, clique_id: int, ndim: int, iteration: int = 1) -> DiscretizationConfig:
        # fresh, reproducible sampling streams per clique and per sweep
        return DiscretizationConfig(
            delta=self.delta,
            max_leaves=self.budget(ndim),
            samples_per_region=self.samples_per_region,
            rng_seed=(self.rng_seed * _SEED_STRIDE + clique_id) * _SEED_STRIDE + iteration - 1,
            probe_offset=self.probe_offset,
        )


@dataclass
class Clique:
    id: int
    nodes: tuple[str, ...]             # graph nodes, observed ones included
    scope: tuple[str, ...]             # unobserved continuous axes of the potential
    factors: list[ContinuousFactor] = field(default_factory=list)
    parent: int | None = None
    children: list[int] = field(default_factory=list)
    separator: tuple[str, ...] = ()    # axes shared with the parent
    potential: BspTree | None = None
    error_density: BspTree | None = None
    message: BspTree | None = None     # normalized upward message over ``separator``
    mass: float = 1.0                  # raw integral of ``potential`` before normalization

    @property
    def ndim(self) -> int:
        return len(self.scope)


@dataclass
class JoinTree:
    cliques: list[Clique]
    root: int
    query: str
    iteration: int = 0

    def upward_order(self) -> list[int]:
        """Children before parents; siblings by id."""
        out: list[int] = []

        def visit(i: int) -> None:
            for c in sorted(self.cliques[i].children):
                visit(c)
            out.append(i)

        visit(self.root)
        return out

    def edges(self) -> list[tuple[int, int]]:
        return sorted((c.parent, c.id) for c in self.cliques if c.parent is not None)


# --------------------------------------------------------------------------
# construction


def _moral_graph(nodes: Sequence[str], families: Iterable[Sequence[str]]) -> dict[str, set[str]]:
    adj: dict[str, set[str]] = {n: set() for n in nodes}
    for fam in families:
        fam = [n for n in fam if n in adj]
        for i, a in enumerate(fam):
            for b in fam[i + 1:]:
                if a != b:
                    adj[a].add(b)
                    adj[b].add(a)
    return adj


def _min_fill_cliques(nodes: Sequence[str], adj: dict[str, set[str]]) -> list[tuple[str, ...]]:
    rank = {n: i for i, n in enumerate(nodes)}
    g = {n: set(v) for n, v in adj.items()}
    remaining = list(nodes)
    raw: list[set[str]] = []

    def fill(n: str) -> int:
        nb = sorted(g[n], key=rank.get)
        return sum(1 for i, a in enumerate(nb) for b in nb[i + 1:] if b not in g[a])

    while remaining:
        v = min(remaining, key=lambda n: (fill(n), rank[n]))
        nb = g[v]
        for a in nb:
            g[a] |= nb - {a}
            g[a].discard(v)
        raw.append(nb | {v})
        remaining.remove(v)
        del g[v]
    maximal = [c for i, c in enumerate(raw)
               if not any(c < d or (c == d and j < i) for j, d in enumerate(raw) if j != i)]
    return [tuple(sorted(c, key=rank.get)) for c in maximal]


def build_join_tree(net: HybridNetwork, absorb_evidence: bool = False) -> JoinTree:
    """Moralize, triangulate (min-fill), and connect cliques by a maximum spanning tree.

    Observed nodes stay in the graph unless ``absorb_evidence``; they are never
    axes of a potential.  The root is the lowest-dimensional clique holding
    the query, ties by lowest id.
    """
    if net.query is None:
        raise ValueError("network has no query variable")
    observed = set(net.evidence)
    nodes = [v.name for v in net.variables if not (absorb_evidence and v.name in observed)]
    families = [f.family for f in net.factors]
    adj = _moral_graph(nodes, families)
    node_sets = _min_fill_cliques(nodes, adj)
    axis_order = [v.name for v in net.variables if v.is_continuous and v.name not in observed]
    cliques = [Clique(i, ns, tuple(n for n in axis_order if n in ns)) for i, ns in enumerate(node_sets)]

    # maximum-weight spanning tree on separator sizes (Kruskal, ties by id pair)
    pairs = []
    for i in range(len(cliques)):
        for j in range(i + 1, len(cliques)):
            w = len(set(cliques[i].nodes) & set(cliques[j].nodes))
            if w:
                pairs.append((-w, i, j))
    pairs.sort()
    comp = list(range(len(cliques)))

    def find(a: int) -> int:
        while comp[a] != a:
            comp[a] = comp[comp[a]]
            a = comp[a]
        return a

    nbrs: dict[int, list[int]] = {i: [] for i in range(len(cliques))}
    for _, i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            comp[ri] = rj
            nbrs[i].append(j)
            nbrs[j].append(i)
    if len({find(i) for i in range(len(cliques))}) > 1:
        # disconnected components: hang them off clique 0 with empty separators
        roots = sorted({find(i) for i in range(len(cliques))})
        for r in roots[1:]:
            nbrs[0].append(r)
            nbrs[r].append(0)
            comp[r] = roots[0]

    holders = [c for c in cliques if net.query in c.scope]
    if not holders:
        raise ValueError(f"query {net.query!r} is not an axis of any clique")
    root = min(holders, key=lambda c: (c.ndim, len(c.nodes), c.id)).id

    stack = [root]
    seen = {root}
    while stack:
        i = stack.pop()
        for j in sorted(nbrs[i]):
            if j not in seen:
                seen.add(j)
                cliques[j].parent = i
                cliques[i].children.append(j)
                shared = set(cliques[i].nodes) & set(cliques[j].nodes)
                cliques[j].separator = tuple(n for n in cliques[j].scope if n in shared)
                stack.append(j)

    doms = net.domains
    for fac in net.factors:
        fam = [n for n in fac.family if n in set(nodes)] or list(fac.scope)
        cover = [c for c in cliques if set(fam) <= set(c.nodes)]
        if not cover:
            raise RuntimeError(f"no clique covers factor family {fam}")
        home = min(cover, key=lambda c: (len(c.nodes), c.id))
        inst = instantiate_evidence(fac, net.evidence, doms)
        if not set(inst.scope) <= set(home.scope):
            raise RuntimeError(f"factor scope {inst.scope} not within clique {home.scope}")
        home.factors.append(inst)
    return JoinTree(cliques, root, net.query)


# --------------------------------------------------------------------------
# passes


def clique_function(jt: JoinTree, clique: Clique) -> Callable[[np.ndarray], np.ndarray]:
    """Product of the clique's factors and its children's normalized messages."""
    msgs = []
    for c in sorted(clique.children):
        m = jt.cliques[c].message
        if m is None:
            raise RuntimeError(f"clique {c} has not sent its message yet")
        msgs.append(extend_scope(m, clique.scope))
    factors = list(clique.factors)
    scope = clique.scope

    def f(points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, len(scope))
        out = product_evaluate(factors, pts, scope)
        for m in msgs:
            out = out * evaluate_many(m, pts, honor_log_scale=False)
        return out

    return f


def _incoming_log_scale(jt: JoinTree, clique: Clique) -> float:
    return math.fsum(jt.cliques[c].message.log_scale for c in clique.children)


def _clamp(w: float) -> float:
    return min(max(w, WEIGHT_FLOOR), WEIGHT_CEIL)


def _send(clique: Clique, tree: BspTree) -> None:
    marg = marginalize_to(tree, clique.separator)
    raw = total_integral(marg, honor_log_scale=False)
    if not (raw > 0 and math.isfinite(raw)):
        raise VanishedPotentialError(
            f"clique {clique.id} potential vanished; evidence is impossible under this discretization")
    clique.mass = raw
    clique.message = normalize(marg)


def upward_pass(jt: JoinTree, config: InferenceConfig, order: Sequence[int] | None = None,
                fresh: bool = False) -> BspTree:
    """Discretize every clique leaves-to-root and return the normalized query marginal.

    On the first sweep (or with ``fresh``) weights are one in absolute units,
    which relative to the clique product is the product's own scale factor.
    Later sweeps refine each clique starting from its weighted tree.
    """
    order = list(order) if order is not None else jt.upward_order()
    done: set[int] = set()
    for i in order:
        c = jt.cliques[i]
        if any(ch not in done for ch in c.children):
            raise ValueError("order must visit children before their parent")
        f = clique_function(jt, c)
        log_scale = _incoming_log_scale(jt, c)
        first = fresh or c.potential is None
        dcfg = config.discretization(c.id, c.ndim, 1 if first else max(jt.iteration, 1))
        if first:
            w0 = _clamp(math.exp(min(log_scale, 690.0)))
            start = BspTree.constant(c.scope, 1.0, w0)
            res = discretize(f, c.scope, dcfg, weight=start)
        else:
            res = discretize(f, c.scope, dcfg, weight=c.potential, start_from_weight=True,
                             renormalize_weight=True)
        c.potential = res.tree.with_log_scale(log_scale)
        c.error_density = res.error_density
        if c.parent is not None:
            _send(c, c.potential)
        else:
            c.mass = total_integral(c.potential, honor_log_scale=False)
        done.add(i)
    return root_posterior(jt)


def uniform_upward_pass(jt: JoinTree, bins_per_axis: int, config: InferenceConfig) -> BspTree:
    """Same sweep with every clique on a fixed uniform grid of ``bins_per_axis`` per axis."""
    for i in jt.upward_order():
        c = jt.cliques[i]
        f = clique_function(jt, c)
        tree = uniform_baseline(f, c.scope, bins_per_axis, config.discretization(c.id, c.ndim))
        c.potential = tree.with_log_scale(_incoming_log_scale(jt, c))
        c.error_density = None
        if c.parent is not None:
            _send(c, c.potential)
    return root_posterior(jt)


def root_posterior(jt: JoinTree) -> BspTree:
    root = jt.cliques[jt.root]
    marg = marginalize_to(root.potential, (jt.query,))
    raw = total_integral(marg, honor_log_scale=False)
    if not (raw > 0 and math.isfinite(raw)):
        raise VanishedPotentialError("posterior vanished; evidence is impossible under this discretization")
    return with_constant_weight(normalize(marg), 1.0)


def weight_message(jt: JoinTree, child: Clique) -> BspTree:
    """Separator function that calibrates ``child`` against its (already weighted) parent."""
    parent = jt.cliques[child.parent]
    sep = child.separator
    wp = weighted(parent.potential).with_log_scale(0.0)
    num = marginalize_to(wp, sep)
    den = child.message.with_log_scale(0.0)
    ratio = divide(num, den)
    return map_values(ratio, lambda v: v / child.mass)


def downward_weight_pass(jt: JoinTree) -> None:
    """Set weights root-to-leaves so neighbouring weighted potentials agree on separators."""
    root = jt.cliques[jt.root]
    root.potential = with_constant_weight(root.potential, 1.0 / root.mass)
    for i in reversed(jt.upward_order()):
        c = jt.cliques[i]
        if c.parent is None:
            continue
        m = extend_scope(weight_message(jt, c), c.scope)
        tree, m = align(c.potential, m)
        c.potential = transfer_weights(tree, m)


def reset_weights(jt: JoinTree) -> None:
    """Forget potentials so the next sweep starts from unit absolute weights."""
    for c in jt.cliques:
        c.potential = None
        c.error_density = None
        c.message = None


def leaf_contributions(clique: Clique) -> dict[str, float]:
    """Weighted per-leaf error estimates on the clique's current tree."""
    infos = list(iter_leaves(clique.potential))
    if clique.error_density is None or not infos:
        return {lf.path: 0.0 for lf in infos}
    centers = np.array([lf.box.center for lf in infos]).reshape(len(infos), clique.ndim)
    dens = evaluate_many(clique.error_density, centers, honor_log_scale=False)
    return {lf.path: lf.leaf.weight * d * lf.box.volume for lf, d in zip(infos, dens)}


def prune_cliques(jt: JoinTree, config: InferenceConfig) -> None:
    for c in jt.cliques:
        if c.potential is None or c.ndim == 0:
            continue
        t = prune(c.potential, leaf_contributions(c))
        c.potential = t
        budget = config.budget(c.ndim)
        if t.n_leaves > budget:
            c.potential = prune_to_budget(t, leaf_contributions(c), budget)


def calibration_residuals(jt: JoinTree) -> list[float]:
    """Per edge, the worst relative disagreement of weighted separator marginals."""
    out = []
    for p, ci in jt.edges():
        child = jt.cliques[ci]
        parent = jt.cliques[p]
        lhs = marginalize_to(weighted(parent.potential).with_log_scale(0.0), child.separator)
        rhs = marginalize_to(weighted(child.potential).with_log_scale(0.0), child.separator)
        a, b = align(lhs, rhs)
        worst = 0.0
        for la, lb in zip(iter_leaves(a), iter_leaves(b)):
            x, y = la.leaf.value, lb.leaf.value
            scale = max(abs(x), abs(y))
            if scale > 0:
                worst = max(worst, abs(x - y) / scale)
        out.append(worst)
    return out


# --------------------------------------------------------------------------
# the iterative loop


def wkl_distance_trees(f: BspTree, g: BspTree, w: BspTree) -> float:
    """Sum over aligned leaves of ``w f log(f/g) vol``; ``w`` contributes its leaf values."""
    if not (f.scope == g.scope == w.scope):
        raise ScopeMismatchError(f"scopes differ: {f.scope}, {g.scope}, {w.scope}")
    fa, ga = align(f, g)
    fa, wa = align(fa, w)
    ga, _ = align(ga, wa)
    total = []
    for lf, lg, lw in zip(iter_leaves(fa), iter_leaves(ga), iter_leaves(wa)):
        fv = lf.leaf.value
        if fv > 0:
            total.append(lw.leaf.value * fv * math.log(fv / max(lg.leaf.value, WEIGHT_FLOOR)) * lf.box.volume)
    return math.fsum(total)


@dataclass
class IterationRecord:
    iteration: int
    leaf_counts: dict[int, int]
    posterior: BspTree
    kl_to_previous: float
    kl_to_exact: float | None
    root_leaves: int


@dataclass
class InferenceResult:
    posterior: BspTree
    history: list[IterationRecord]
    converged: bool
    join_tree: JoinTree

    @property
    def iterations(self) -> int:
        return len(self.history)


def iterate(net: HybridNetwork, config: InferenceConfig | None = None,
            exact: Callable[[np.ndarray], np.ndarray] | None = None,
            absorb_evidence: bool = False) -> InferenceResult:
    """Repeat upward sweep, weight pass and pruning until the query posterior settles.

    ``exact``, when given, is a normalized density of the query used for the
    per-iteration ``kl_to_exact`` diagnostic.
    """
    config = config or InferenceConfig()
    jt = build_join_tree(net, absorb_evidence=absorb_evidence)
    history: list[IterationRecord] = []
    prev: BspTree | None = None
    converged = False
    for it in range(1, config.max_iterations + 1):
        jt.iteration = it
        post = upward_pass(jt, config)
        kl_prev = math.inf if prev is None else grid_kl(post, prev, config.kl_resolution)
        kl_exact = grid_kl(exact, post, config.kl_resolution, dims=1) if exact is not None else None
        history.append(IterationRecord(
            it, {c.id: c.potential.n_leaves for c in jt.cliques}, post, kl_prev, kl_exact,
            jt.cliques[jt.root].potential.n_leaves))
        prev = post
        if math.isinf(config.convergence_tol) or kl_prev < config.convergence_tol:
            converged = True
            break
        if it == config.max_iterations:
            break
        downward_weight_pass(jt)
        prune_cliques(jt, config)
    return InferenceResult(prev, history, converged, jt)


def uniform_inference(net: HybridNetwork, bins_per_axis: int,
                      config: InferenceConfig | None = None,
                      absorb_evidence: bool = False) -> BspTree:
    """Single sweep with every clique on a uniform grid; the static baseline."""
    config = config or InferenceConfig()
    jt = build_join_tree(net, absorb_evidence=absorb_evidence)
    return uniform_upward_pass(jt, bins_per_axis, config)


def with_overrides(config: InferenceConfig, **kw) -> InferenceConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
