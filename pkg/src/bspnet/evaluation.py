"""Independent verification oracles.

Everything here works on dense regular grids (midpoint rule) and shares no
code path with the tree algebra beyond point evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bsp_tree import BspTree, Box, Leaf, Split, evaluate_many
from .discretizer import DiscretizationConfig, estimate_region

Q_FLOOR = 1e-300
DEFAULT_RESOLUTION = {1: 100_000, 2: 2000, 3: 200}


def normal_pdf(x, mean: float, variance: float):
    x = np.asarray(x, dtype=float)
    return np.exp(-(x - mean) ** 2 / (2 * variance)) / math.sqrt(2 * math.pi * variance)


def cell_centers(resolution: int) -> np.ndarray:
    return (np.arange(resolution) + 0.5) / resolution


@dataclass
class GridFunction:
    """Function values at the cell centers of a regular grid on ``[0,1]^n``."""

    scope: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.scope = tuple(self.scope)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != len(self.scope):
            raise ValueError("values must have one array axis per scope variable")
        if any(r < 2 for r in self.values.shape):
            raise ValueError("grid resolution must be >= 2 per axis")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("grid values must be finite and nonnegative")

    @property
    def resolution(self) -> tuple[int, ...]:
        return self.values.shape

    def integral(self) -> float:
        return float(self.values.sum() / self.values.size)

    def normalized(self) -> "GridFunction":
        return GridFunction(self.scope, self.values / (self.values.sum() / self.values.size))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Nearest-cell lookup, so a grid can stand in for an evaluable density."""
        pts = np.asarray(points, dtype=float)
        idx = tuple(np.clip((pts[:, a] * r).astype(np.int64), 0, r - 1)
                    for a, r in enumerate(self.values.shape))
        return self.values[idx]


def _grid_points(ndim: int, resolution: int, first_axis: slice | None = None) -> np.ndarray:
    c = cell_centers(resolution)
    axes = [c[first_axis] if first_axis is not None else c] + [c] * (ndim - 1)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _eval_chunk(obj, pts: np.ndarray) -> np.ndarray:
    if isinstance(obj, BspTree):
        return evaluate_many(obj, pts, honor_log_scale=False)
    return np.asarray(obj(pts), dtype=float).reshape(-1)


def _ndim_of(obj, default: int | None) -> int:
    if isinstance(obj, BspTree):
        return obj.ndim
    if isinstance(obj, GridFunction):
        return len(obj.scope)
    if default is None:
        raise ValueError("dims must be given for plain callables")
    return default


def grid_kl(p, q, resolution: int | None = None, dims: int | None = None,
            chunk_points: int = 2_000_000) -> float:
    """Midpoint-rule KL(p || q) on ``[0,1]^n`` with both sides renormalized on the grid.

    ``p`` and ``q`` may be BSP trees, grid functions or callables mapping
    ``(k, n)`` unit points to values.  Cells where ``p = 0`` contribute
    nothing; ``q`` is floored at 1e-300 inside the logarithm.
    """
    known = [o.ndim if isinstance(o, BspTree) else len(o.scope)
             for o in (p, q) if isinstance(o, (BspTree, GridFunction))]
    if dims is None and known:
        dims = known[0]
    np_, nq = _ndim_of(p, dims), _ndim_of(q, dims)
    if np_ != nq:
        raise ValueError(f"dimension mismatch: {np_} vs {nq}")
    scoped = (BspTree, GridFunction)
    if isinstance(p, scoped) and isinstance(q, scoped) and p.scope != q.scope:
        raise ValueError(f"scope mismatch: {p.scope} vs {q.scope}")
    ndim = np_
    grids = [o for o in (p, q) if isinstance(o, GridFunction)]
    if grids:
        shape = grids[0].values.shape
        if any(g.values.shape != shape for g in grids) or len(set(shape)) != 1:
            raise ValueError("grid functions must share one cubic resolution")
        if resolution is not None and resolution != shape[0]:
            raise ValueError("resolution disagrees with the grid function")
        resolution = shape[0]
    if resolution is None:
        resolution = DEFAULT_RESOLUTION.get(ndim, 64)

    A = B = E = 0.0
    rows_per_chunk = max(1, chunk_points // max(1, resolution ** (ndim - 1)))
    for start in range(0, resolution, rows_per_chunk):
        sl = slice(start, min(resolution, start + rows_per_chunk))
        pts = None
        if not (isinstance(p, GridFunction) and isinstance(q, GridFunction)):
            pts = _grid_points(ndim, resolution, sl) if ndim else np.zeros((1, 0))
        pv = p.values[sl].reshape(-1) if isinstance(p, GridFunction) else _eval_chunk(p, pts)
        qv = q.values[sl].reshape(-1) if isinstance(q, GridFunction) else _eval_chunk(q, pts)
        A += float(pv.sum())
        B += float(qv.sum())
        pos = pv > 0
        E += float(np.sum(pv[pos] * np.log(pv[pos] / np.maximum(qv[pos], Q_FLOOR))))
        if ndim == 0:
            break
    if not A > 0:
        raise ValueError("p has zero mass on the grid")
    if not B > 0:
        return math.inf
    return E / A - math.log(A / B)


# --------------------------------------------------------------------------
# the robot network's closed-form posterior


def _robot_unnormalized(x, o1: float, o2: float):
    return normal_pdf(x, (o1 + 2 * o2) / 3, 1 / 60) / (1 + np.exp(40 * (np.asarray(x) - 0.5)))


@dataclass
class Density1D:
    """Normalized 1-D density given by a closed-form callable."""

    fn: Callable[[np.ndarray], np.ndarray]
    norm: float

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        x = pts[:, 0] if pts.ndim == 2 else pts
        return self.fn(x) / self.norm


def exact_robot_posterior(o1: float, o2: float, resolution: int = 100_000) -> Density1D:
    """Gaussian N(x3; (o1 + 2 o2)/3, 1/60) gated by the left-half sensor, normalized on [0,1]."""
    fn = lambda x: _robot_unnormalized(x, o1, o2)  # noqa: E731
    z = float(fn(cell_centers(resolution)).mean())
    return Density1D(fn, z)


def robot_posterior_quadrature(o1: float, o2: float, resolution: int = 2000,
                               noise_var: float = 0.01) -> GridFunction:
    """Posterior of x3 by direct midpoint quadrature over (x1, x2) of the full integrand."""
    g = cell_centers(resolution)
    h = 1.0 / resolution
    kernel = normal_pdf(g[:, None] - g[None, :], 0.0, noise_var)   # [to, from]
    prior_x1 = np.ones(resolution) * normal_pdf(o1 - g, 0.0, noise_var)
    over_x2 = (kernel @ prior_x1) * h * normal_pdf(o2 - g, 0.0, noise_var)
    over_x3 = (kernel @ over_x2) * h
    post = over_x3 / (1 + np.exp(40 * (g - 0.5)))
    return GridFunction(("x3",), post).normalized()


# --------------------------------------------------------------------------
# baselines


def uniform_baseline(f, scope: Sequence[str], bins_per_axis: int,
                     config: DiscretizationConfig | None = None) -> BspTree:
    """Balanced tree with ``bins_per_axis`` equal bins per axis; leaf values are sampled means."""
    if bins_per_axis < 1 or bins_per_axis & (bins_per_axis - 1):
        raise ValueError("bins_per_axis must be a power of two")
    config = config or DiscretizationConfig()
    scope = tuple(scope)
    n = len(scope)
    levels = bins_per_axis.bit_length() - 1
    order = [a for _ in range(levels) for a in range(n)]

    def build(box: Box, depth: int):
        if depth == len(order):
            return Leaf(estimate_region(f, box, config).f_mean)
        a = order[depth]
        lo, hi = box.halves(a)
        return Split(a, build(lo, depth + 1), build(hi, depth + 1))

    return BspTree(scope, build(Box.unit(n), 0))


def grid_function(f, scope: Sequence[str], resolution: int) -> GridFunction:
    """Sample a callable at the cell centers of a regular grid."""
    ndim = len(scope)
    vals = np.asarray(f(_grid_points(ndim, resolution)), dtype=float)
    return GridFunction(tuple(scope), vals.reshape((resolution,) * ndim))


def uniform_grid_kl(f, ndim: int, bins_per_axis: int, resolution: int) -> float:
    """KL of ``f`` to its exact-mean uniform discretization, both on the same grid.

    Bin means are block averages of the grid cells, which lets very large
    uniform tables be scored without building them.  ``f`` may be a
    :class:`GridFunction` already sampled at ``resolution``.
    """
    if resolution % bins_per_axis:
        raise ValueError("resolution must be a multiple of bins_per_axis")
    if isinstance(f, GridFunction):
        if f.values.shape != (resolution,) * ndim:
            raise ValueError("grid function does not match resolution/ndim")
        p = f
    else:
        p = grid_function(f, tuple(f"v{i}" for i in range(ndim)), resolution)
    vals = p.values
    k = resolution // bins_per_axis
    blocks = vals.reshape(sum(((bins_per_axis, k) for _ in range(ndim)), ()))
    means = blocks.mean(axis=tuple(range(1, 2 * ndim, 2)), keepdims=True)
    q = np.broadcast_to(means, blocks.shape).reshape(vals.shape)
    return grid_kl(p, GridFunction(p.scope, q))


def ridge_density(n: int, variance: float = 0.0025) -> Callable[[np.ndarray], np.ndarray]:
    """Unnormalized N(mean(x_1..x_{n-1}) - x_n; 0, variance) on ``[0,1]^n``."""
    if n < 2:
        raise ValueError("ridge density needs n >= 2")

    def f(points):
        pts = np.asarray(points, dtype=float)
        r = pts[:, : n - 1].mean(axis=1) - pts[:, n - 1]
        return normal_pdf(r, 0.0, variance)

    return f


# --------------------------------------------------------------------------
# optimal 1-D breakpoints by numeric gradient descent


@dataclass
class Breakpoints1D:
    cuts: np.ndarray

    def __post_init__(self):
        self.cuts = np.asarray(self.cuts, dtype=float)
        if self.cuts.ndim != 1 or np.any(np.diff(self.cuts) <= 0) \
                or (self.cuts.size and (self.cuts[0] <= 0 or self.cuts[-1] >= 1)):
            raise ValueError("breakpoints must be strictly increasing inside (0, 1)")

    @property
    def n_intervals(self) -> int:
        return self.cuts.size + 1

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([[0.0], self.cuts, [1.0]])


@dataclass
class DescentConfig:
    fd_step: float = 1e-5
    learning_rate: float = 1e-3
    grad_tol: float = 1e-7
    max_steps: int = 10_000
    min_gap: float = 1e-4
    resolution: int = 100_000


@dataclass
class DescentResult:
    breakpoints: Breakpoints1D
    objective: float
    converged: bool
    steps: int
    history: list[float] = field(default_factory=list)


class _Cumulative:
    """Exact interval masses of a grid-sampled 1-D density (piecewise-linear CDF)."""

    def __init__(self, f, resolution: int):
        g = cell_centers(resolution)
        v = np.asarray(f(g[:, None]), dtype=float).reshape(-1)
        v = v / v.mean()
        self.x = np.linspace(0.0, 1.0, resolution + 1)
        self.F = np.concatenate([[0.0], np.cumsum(v) / resolution])
        pos = v > 0
        self.plogp = float(np.sum(v[pos] * np.log(v[pos])) / resolution)

    def mass(self, a, b):
        return np.interp(b, self.x, self.F) - np.interp(a, self.x, self.F)

    def term(self, a, b):
        m = np.maximum(self.mass(a, b), 0.0)
        w = np.asarray(b) - np.asarray(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(m > 0, m * np.log(m / w), 0.0)
        return -t

    def kl(self, edges: np.ndarray) -> float:
        return self.plogp + float(np.sum(self.term(edges[:-1], edges[1:])))

    def quantiles(self, m: int) -> np.ndarray:
        return np.interp(np.arange(1, m) / m, self.F, self.x)


def mean_discretization_kl(f, breakpoints: Breakpoints1D, resolution: int = 100_000) -> float:
    """KL(f || exact-mean piecewise constant on the given intervals), on the grid."""
    return _Cumulative(f, resolution).kl(breakpoints.edges)


def _project(cuts: np.ndarray, gap: float) -> np.ndarray:
    c = np.clip(cuts, gap, 1 - gap)
    for i in range(1, c.size):
        c[i] = max(c[i], c[i - 1] + gap)
    for i in range(c.size - 2, -1, -1):
        c[i] = min(c[i], c[i + 1] - gap)
    return c


def optimal_1d_discretization(f, m: int, config: DescentConfig | None = None) -> DescentResult:
    """Breakpoints minimizing KL(f || mean discretization) by central-difference descent."""
    if m < 2:
        raise ValueError("need at least two intervals")
    cfg = config or DescentConfig()
    cum = _Cumulative(f, cfg.resolution)
    cuts = _project(cum.quantiles(m), cfg.min_gap)
    obj = cum.kl(np.concatenate([[0.0], cuts, [1.0]]))
    history = [obj]
    lr = cfg.learning_rate
    h = cfg.fd_step
    converged = False
    steps = 0
    for steps in range(1, cfg.max_steps + 1):
        left = np.concatenate([[0.0], cuts[:-1]])
        right = np.concatenate([cuts[1:], [1.0]])
        # only the two intervals touching a cut depend on it
        plus = cum.term(left, cuts + h) + cum.term(cuts + h, right)
        minus = cum.term(left, cuts - h) + cum.term(cuts - h, right)
        grad = (plus - minus) / (2 * h)
        if np.max(np.abs(grad)) < cfg.grad_tol:
            converged = True
            break
        while True:
            trial = _project(cuts - lr * grad, cfg.min_gap)
            t_obj = cum.kl(np.concatenate([[0.0], trial, [1.0]]))
            if t_obj < obj:
                cuts, obj = trial, t_obj
                history.append(obj)
                lr *= 1.5
                break
            lr *= 0.5
            if lr < 1e-16:
                break
        if lr < 1e-16:
            converged = True  # no descent direction left at this resolution
            break
    return DescentResult(Breakpoints1D(cuts), obj, converged, steps, history)


def breakpoints_density(f, breakpoints: Breakpoints1D, resolution: int = 100_000):
    """Exact-mean piecewise-constant approximation as an evaluable 1-D density."""
    cum = _Cumulative(f, resolution)
    edges = breakpoints.edges
    means = cum.mass(edges[:-1], edges[1:]) / np.diff(edges)

    def q(points):
        x = np.asarray(points, dtype=float)
        x = x[:, 0] if x.ndim == 2 else x
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, means.size - 1)
        return means[idx]

    return q


def equidistant_breakpoints(m: int) -> Breakpoints1D:
    return Breakpoints1D(np.arange(1, m) / m)
