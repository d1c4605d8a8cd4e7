"""Experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .discretizer import DiscretizationConfig, discretize
from .evaluation import (
    DescentConfig,
    exact_robot_posterior,
    grid_function,
    grid_kl,
    normal_pdf,
    optimal_1d_discretization,
    ridge_density,
    uniform_baseline,
    uniform_grid_kl,
)
from .inference import InferenceConfig, iterate, uniform_inference
from .network import HybridNetwork, robot_network

GAUSS_MEAN = 0.5
GAUSS_VAR = 0.0025
SUITE_EVIDENCE = ((0.6, 0.9), (0.2, 0.8), (0.2, 0.5))
SUITE_DELTAS = (0.08, 0.04, 0.02, 0.01)
RIDGE_RESOLUTION = {2: 2048, 3: 256, 4: 64}


def gaussian_1d(points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    x = x[:, 0] if x.ndim == 2 else x
    return normal_pdf(x, GAUSS_MEAN, GAUSS_VAR)


def as_rows(items: Iterable) -> list[dict]:
    return [asdict(i) for i in items]


# --------------------------------------------------------------------------
# one-dimensional discretization


@dataclass
class Discretize1DRow:
    m: int
    kl_bsp: float
    kl_equidistant: float
    kl_descent: float


def discretize_1d_sweep(ms: Sequence[int] = tuple(2 ** k for k in range(1, 9)), seed: int = 0,
                        samples_per_region: int = 16, resolution: int = 100_000,
                        descent: DescentConfig | None = None) -> list[Discretize1DRow]:
    """BSP vs equidistant vs descent-optimal breakpoints on N(x; 0.5, 0.0025)."""
    cfg = DiscretizationConfig(delta=0.0, max_leaves=max(ms), rng_seed=seed,
                               samples_per_region=samples_per_region)
    full = discretize(gaussian_1d, ("x",), cfg)
    rows = []
    for m in ms:
        bsp = full.prefix(m)
        eq = uniform_baseline(gaussian_1d, ("x",), m, cfg)
        opt = optimal_1d_discretization(gaussian_1d, m, descent)
        rows.append(Discretize1DRow(
            m,
            grid_kl(gaussian_1d, bsp, resolution, dims=1),
            grid_kl(gaussian_1d, eq, resolution, dims=1),
            opt.objective,
        ))
    return rows


# --------------------------------------------------------------------------
# ridge scaling


@dataclass
class RidgeRow:
    n: int
    target: float
    bsp_leaves: int
    bsp_kl: float
    uniform_bins: int
    uniform_leaves: int
    uniform_kl: float
    resolution: int


def _smallest_budget(kl_of, hi: int, target: float) -> int:
    """Smallest leaf count with KL <= target, by bisection (KL is near-monotone in budget)."""
    lo = 1
    while lo < hi:
        mid = (lo + hi) // 2
        if kl_of(mid) <= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


def ridge_scaling(ns: Sequence[int] = (2, 3, 4), targets: Sequence[float] = (0.05, 0.1),
                  seed: int = 0, max_budget: int = 2 ** 18, start_budget: int = 1024,
                  resolution: dict[int, int] | None = None) -> list[RidgeRow]:
    """Leaves needed by BSP and by uniform grids to reach each KL target."""
    resolution = {**RIDGE_RESOLUTION, **(resolution or {})}
    rows = []
    for n in ns:
        f = ridge_density(n)
        scope = tuple(f"x{i + 1}" for i in range(n))
        res_n = resolution.get(n, 32)
        grid = grid_function(f, scope, res_n)
        tightest = min(targets)

        budget = start_budget
        while True:
            run = discretize(f, scope, DiscretizationConfig(delta=0.0, max_leaves=budget, rng_seed=seed))
            cache: dict[int, float] = {}

            def kl_of(k: int, run=run, cache=cache) -> float:
                if k not in cache:
                    cache[k] = grid_kl(grid, run.prefix(k))
                return cache[k]

            if kl_of(run.tree.n_leaves) <= tightest or budget >= max_budget:
                break
            budget *= 4

        uniform: dict[int, float] = {}
        b = 1
        while b <= res_n and res_n % b == 0:
            uniform[b] = uniform_grid_kl(grid, n, b, res_n)
            b *= 2
        for target in targets:
            top = run.tree.n_leaves
            if kl_of(top) <= target:
                k = _smallest_budget(kl_of, top, target)
                bsp_leaves, bsp_kl = k, kl_of(k)
            else:
                bsp_leaves, bsp_kl = -1, kl_of(top)
            ok = [bb for bb, v in uniform.items() if v <= target]
            ub = min(ok) if ok else -1
            rows.append(RidgeRow(n, target, bsp_leaves, bsp_kl, ub,
                                 ub ** n if ub > 0 else -1,
                                 uniform[ub] if ub > 0 else uniform[max(uniform)], res_n))
    return rows


# --------------------------------------------------------------------------
# robot network


def robot_oracle(net: HybridNetwork):
    """Closed-form query posterior when ``net`` is the robot network with o3 = true."""
    ev = net.evidence
    if net.query != "x3" or set(ev) != {"o1", "o2", "o3"} or ev["o3"] != "true":
        return None
    try:
        ref = robot_network(float(ev["o1"]), float(ev["o2"]), "true")
    except ValueError:
        return None
    if ref.variables != net.variables or ref.factors != net.factors:
        return None
    return exact_robot_posterior(float(ev["o1"]), float(ev["o2"]))


@dataclass
class IterationRow:
    o1: float
    o2: float
    delta: float
    seed: int
    iteration: int
    root_leaves: int
    total_leaves: int
    kl_to_exact: float


@dataclass
class BudgetRow:
    o1: float
    o2: float
    leaves_per_axis: int
    seed: int
    dynamic_kl: float
    uniform_kl: float
    dynamic_leaves: int
    uniform_leaves: int
    iterations: int


def robot_trajectories(evidence: Sequence[tuple[float, float]] = SUITE_EVIDENCE,
                       deltas: Sequence[float] = SUITE_DELTAS, seeds: Sequence[int] = (1,),
                       max_iterations: int = 4, max_leaves: int = 256) -> list[IterationRow]:
    rows = []
    for o1, o2 in evidence:
        net = robot_network(o1, o2)
        exact = exact_robot_posterior(o1, o2)
        for delta in deltas:
            for seed in seeds:
                cfg = InferenceConfig(delta=delta, max_leaves=max_leaves, max_iterations=max_iterations,
                                      convergence_tol=math.inf if max_iterations == 1 else 1e-12,
                                      rng_seed=seed)
                res = iterate(net, cfg, exact=exact)
                for h in res.history:
                    rows.append(IterationRow(o1, o2, delta, seed, h.iteration, h.root_leaves,
                                             sum(h.leaf_counts.values()), h.kl_to_exact))
    return rows


def robot_budgets(evidence: Sequence[tuple[float, float]] = SUITE_EVIDENCE,
                  leaves_per_axis: Sequence[int] = (4, 8), seeds: Sequence[int] = (1,),
                  delta: float = 0.02, max_iterations: int = 5,
                  convergence_tol: float = 1e-3) -> list[BudgetRow]:
    """Dynamic vs static uniform discretization with N**dim leaves per clique."""
    rows = []
    for o1, o2 in evidence:
        net = robot_network(o1, o2)
        exact = exact_robot_posterior(o1, o2)
        for n in leaves_per_axis:
            for seed in seeds:
                cfg = InferenceConfig(delta=delta, leaves_per_axis=n, max_iterations=max_iterations,
                                      convergence_tol=convergence_tol, rng_seed=seed)
                dyn = iterate(net, cfg, exact=exact)
                uni = uniform_inference(net, n, cfg)
                last = dyn.history[-1]
                n_uniform = sum(max(1, n ** c.ndim) for c in dyn.join_tree.cliques)
                rows.append(BudgetRow(o1, o2, n, seed, last.kl_to_exact,
                                      grid_kl(exact, uni, dims=1),
                                      sum(last.leaf_counts.values()), n_uniform, dyn.iterations))
    return rows

