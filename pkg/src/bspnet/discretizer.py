"""Greedy priority-queue discretization of a density into a BSP tree.

Leaves are refined in order of a sampled upper bound on their contribution to
KL(f || f_D), optionally multiplied by a region weight.  Leaf values are the
sampled means of ``f`` over the leaf box.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bsp_tree import BspTree, Box, Leaf, from_leaf_paths, iter_leaves, leaf_at

# f(points) -> values, points of shape (k, n) in unit coordinates
Density = Callable[[np.ndarray], np.ndarray]

MIN_WIDTH = 2.0 ** -48
# extra probes just inside the box boundary; they only feed the max/min estimates
EXTREME_OFFSET = 0.999
MAX_VERTEX_DIM = 8
_RATIO_FLOOR = 1e-300


class NegativeDensityError(ValueError):
    pass


@dataclass(frozen=True)
class DiscretizationConfig:
    delta: float = 0.02
    max_leaves: int = 256
    samples_per_region: int = 16
    rng_seed: int = 0
    probe_offset: float = 0.25
    extreme_probes: bool = True

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("delta must be >= 0")
        if self.max_leaves < 1:
            raise ValueError("max_leaves must be >= 1")
        if self.samples_per_region < 2:
            raise ValueError("samples_per_region must be >= 2")
        if not 0 < self.probe_offset <= 1:
            raise ValueError("probe_offset must lie in (0, 1]")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be nonnegative")


@dataclass(frozen=True)
class RegionEstimate:
    f_mean: float
    f_max: float
    f_min: float
    n_samples: int
    box: Box
    # sampled mean of f*log(f/f_mean); times the volume it estimates the leaf's KL share
    kl_density: float = 0.0

    @property
    def volume(self) -> float:
        return self.box.volume


@dataclass
class Discretized:
    tree: BspTree
    error_density: BspTree        # same structure; unweighted KL contribution per unit volume
    leaf_errors: dict[str, float]  # path -> weighted KL contribution (Monte Carlo)
    bound_total: float             # weighted error-bound sum over the final leaves
    n_splits: int
    split_order: list[str] = field(default_factory=list)
    split_axes: dict[str, int] = field(default_factory=dict)
    split_values: dict[str, Leaf] = field(default_factory=dict)  # leaves later split, by path

    def prefix(self, n_leaves: int) -> BspTree:
        """The tree the greedy loop held when it had ``n_leaves`` leaves.

        Splitting order never depends on the budget, so this equals a fresh
        run with ``max_leaves = n_leaves`` (and ``delta = 0``).
        """
        n_start = self.tree.n_leaves - len(self.split_order)
        k = n_leaves - n_start
        if not 0 <= k <= len(self.split_order):
            raise ValueError(f"n_leaves must lie in [{n_start}, {self.tree.n_leaves}]")
        undone = set(self.split_order[k:])
        axes = {p: a for p, a in self.split_axes.items() if p not in undone}
        final = {lf.path: lf.leaf for lf in iter_leaves(self.tree)}

        leaves = {}
        stack = [""]
        while stack:
            p = stack.pop()
            if p in axes:
                stack += [p + "0", p + "1"]
            else:
                leaves[p] = self.split_values[p] if p in undone else final[p]
        return from_leaf_paths(self.tree.scope, axes, leaves)


def _rng_for(box: Box, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, box.ndim, *box.key()]))


def _latin_hypercube(rng: np.random.Generator, k: int, n: int) -> np.ndarray:
    # each point is uniform on the unit box; every axis sees one point per stratum
    strata = rng.permuted(np.tile(np.arange(k), (n, 1)), axis=1).T
    return (strata + rng.random((k, n))) / k


def sample_points(box: Box, config: DiscretizationConfig) -> np.ndarray:
    """Box center followed by ``samples_per_region - 1`` Latin-hypercube draws."""
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    k = config.samples_per_region
    u = _latin_hypercube(_rng_for(box, config.rng_seed), k - 1, box.ndim)
    pts = np.empty((k, box.ndim))
    pts[0] = (lo + hi) * 0.5
    pts[1:] = lo + u * (hi - lo)
    return pts


def probe_points(box: Box, config: DiscretizationConfig) -> np.ndarray:
    """Two probes per axis at center +/- probe_offset * half-width."""
    n = box.ndim
    c = np.asarray(box.center)
    half = (np.asarray(box.hi) - np.asarray(box.lo)) * 0.5
    pts = np.repeat(c[None, :], 2 * n, axis=0)
    for a in range(n):
        pts[2 * a, a] -= config.probe_offset * half[a]
        pts[2 * a + 1, a] += config.probe_offset * half[a]
    return pts


def extreme_points(box: Box) -> np.ndarray:
    """Points just inside every vertex (or every face centre when ``ndim`` is large)."""
    n = box.ndim
    c = np.asarray(box.center)
    half = (np.asarray(box.hi) - np.asarray(box.lo)) * 0.5 * EXTREME_OFFSET
    if n <= MAX_VERTEX_DIM:
        signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * n), indexing="ij")).reshape(n, -1).T
    else:
        signs = np.concatenate([np.eye(n), -np.eye(n)])
    return c + signs * half


def _checked(f: Density, pts: np.ndarray) -> np.ndarray:
    vals = np.asarray(f(pts), dtype=float).reshape(-1)
    if vals.shape[0] != pts.shape[0]:
        raise ValueError(f"density returned {vals.shape[0]} values for {pts.shape[0]} points")
    bad = ~(np.isfinite(vals) & (vals >= 0))
    if bad.any():
        i = int(np.argmax(bad))
        raise NegativeDensityError(f"density value {vals[i]!r} at point {pts[i].tolist()}")
    return vals


def _summarize(vals: np.ndarray, box: Box, extra: np.ndarray | None = None) -> RegionEstimate:
    mean = float(vals.mean())
    vmax = float(vals.max())
    vmin = float(vals.min())
    if extra is not None and extra.size:
        # probe values are further samples of the extremes, not of the mean
        vmax = max(vmax, float(extra.max()))
        vmin = min(vmin, float(extra.min()))
    # keep the invariant min <= mean <= max under rounding
    mean = min(max(mean, vmin), vmax)
    if mean > 0:
        pos = vals[vals > 0]
        kl = float(np.sum(pos * np.log(pos / mean))) / vals.size
    else:
        kl = 0.0
    return RegionEstimate(mean, vmax, vmin, int(vals.size), box, max(kl, 0.0))


def _axis_from_probes(vals: np.ndarray, n: int) -> int:
    best, best_score = 0, -1.0
    for a in range(n):
        pair = vals[2 * a: 2 * a + 2]
        score = float(pair.max()) / max(float(pair.min()), _RATIO_FLOOR)
        if score > best_score:
            best, best_score = a, score
    return best


def estimate_region(f: Density, box: Box, config: DiscretizationConfig) -> RegionEstimate:
    """Sampled mean of ``f`` on the box; probe values widen the max/min estimates."""
    return _estimate_batch(f, [("", box, 1.0)], config)[0].est


def error_bound(est: RegionEstimate) -> float:
    """Upper bound on the integral of f log(f / f_mean) over the box."""
    fbar, fmax, fmin = est.f_mean, est.f_max, est.f_min
    span = fmax - fmin
    if span <= 0 or fbar <= 0:
        return 0.0
    w_low = (fmax - fbar) / span
    w_high = (fbar - fmin) / span
    # logs of the ratios are taken as differences so subnormal means cannot overflow
    low_term = 0.0 if fmin <= 0 or w_low == 0 else w_low * fmin * (math.log(fmin) - math.log(fbar))
    high_term = 0.0 if w_high == 0 else w_high * fmax * (math.log(fmax) - math.log(fbar))
    bound = (low_term + high_term) * est.volume
    return max(bound, 0.0) if math.isfinite(bound) else math.inf


def choose_split_axis(f: Density, box: Box, config: DiscretizationConfig) -> int:
    if box.ndim < 1:
        raise ValueError("cannot split a zero-dimensional box")
    return _axis_from_probes(_checked(f, probe_points(box, config)), box.ndim)


@dataclass
class _Region:
    path: str
    box: Box
    est: RegionEstimate
    axis: int
    weight: float
    priority: float


def _estimate_batch(f: Density, items: Sequence[tuple[str, Box, float]],
                    config: DiscretizationConfig) -> list[_Region]:
    """Estimate several boxes with a single call to ``f``."""
    chunks = []
    sizes = []
    for _, box, _ in items:
        s = sample_points(box, config)
        p = probe_points(box, config) if box.ndim else np.empty((0, 0))
        if box.ndim and config.extreme_probes:
            p = np.concatenate([p, extreme_points(box)])
        chunks.append(s)
        sizes.append(s.shape[0])
        if box.ndim:
            chunks.append(p)
        sizes.append(p.shape[0])
    vals = _checked(f, np.concatenate(chunks, axis=0))
    out = []
    pos = 0
    for (path, box, w), i in zip(items, range(0, len(sizes), 2)):
        ns, npb = sizes[i], sizes[i + 1]
        probes = vals[pos + ns:pos + ns + npb]
        est = _summarize(vals[pos:pos + ns], box, probes)
        pos += ns
        axis = _axis_from_probes(probes[:2 * box.ndim], box.ndim) if box.ndim else -1
        pos += npb
        out.append(_Region(path, box, est, axis, w, error_bound(est) * w))
    return out


def discretize(f: Density, scope: Sequence[str], config: DiscretizationConfig,
               weight: BspTree | None = None, start_from_weight: bool = False,
               renormalize_weight: bool = False) -> Discretized:
    """Build a BSP approximation of ``f`` over the unit box of ``scope``.

    ``weight`` supplies per-region importance through its leaf *weights*,
    looked up at each leaf's box center.  With ``start_from_weight`` the
    refinement starts from the weight tree's own partition instead of the
    whole box, so an existing discretization is refined rather than rebuilt.
    ``renormalize_weight`` rescales all weights by one constant so that the
    weighted function integrates to one over the initial partition.
    """
    scope = tuple(scope)
    n = len(scope)
    if weight is not None and weight.scope != scope:
        raise ValueError(f"weight scope {weight.scope} differs from {scope}")

    scale = 1.0

    def w_at(box: Box) -> float:
        return scale * (1.0 if weight is None else leaf_at(weight, box.center).weight)

    if weight is not None and start_from_weight:
        initial = [(lf.path, lf.box, lf.leaf.weight) for lf in iter_leaves(weight)]
    else:
        unit = Box.unit(n)
        initial = [("", unit, w_at(unit))]

    regions: dict[str, _Region] = {}
    axes: dict[str, int] = {}
    if weight is not None and start_from_weight:
        stack = [(weight.root, "")]
        while stack:
            node, path = stack.pop()
            if not isinstance(node, Leaf):
                axes[path] = node.axis
                stack.append((node.low, path + "0"))
                stack.append((node.high, path + "1"))

    heap: list[tuple[float, int, str]] = []
    counter = 0
    first = _estimate_batch(f, initial, config)
    if renormalize_weight:
        mass = math.fsum(r.weight * r.est.f_mean * r.box.volume for r in first)
        if mass > 0 and math.isfinite(mass):
            scale = 1.0 / mass
            for r in first:
                r.weight *= scale
                r.priority *= scale
    for reg in first:
        regions[reg.path] = reg
        heapq.heappush(heap, (-reg.priority, counter, reg.path))
        counter += 1
    total = math.fsum(r.priority for r in regions.values())

    n_splits = 0
    order: list[str] = []
    retired: dict[str, Leaf] = {}
    # stop on budget, on delta, or when no leaf has anything left to gain
    while heap and len(regions) < config.max_leaves and not total < config.delta \
            and heap[0][0] < 0:
        _, _, path = heapq.heappop(heap)
        reg = regions[path]
        if n == 0 or reg.box.width(reg.axis) <= MIN_WIDTH:
            continue  # unsplittable; stays a leaf
        lo_box, hi_box = reg.box.halves(reg.axis)
        children = _estimate_batch(
            f, [(path + "0", lo_box, w_at(lo_box)), (path + "1", hi_box, w_at(hi_box))], config)
        del regions[path]
        axes[path] = reg.axis
        order.append(path)
        retired[path] = Leaf(reg.est.f_mean, reg.weight)
        total -= reg.priority
        for child in children:
            regions[child.path] = child
            heapq.heappush(heap, (-child.priority, counter, child.path))
            counter += 1
            total += child.priority
        n_splits += 1

    leaves = {p: Leaf(r.est.f_mean, r.weight) for p, r in regions.items()}
    kl_leaves = {p: Leaf(r.est.kl_density, 1.0) for p, r in regions.items()}
    tree = from_leaf_paths(scope, axes, leaves)
    density = from_leaf_paths(scope, axes, kl_leaves)
    errors = {p: r.weight * r.est.kl_density * r.box.volume for p, r in regions.items()}
    bound = math.fsum(r.priority for r in regions.values())
    return Discretized(tree, density, errors, bound, n_splits, order, dict(axes), retired)
