"""Command-line front end.

Exit codes: 0 converged (or experiment finished), 1 network parse error,
2 iteration limit reached before convergence, 3 evidence impossible under
the discretization.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .bsp_tree import VanishedPotentialError, evaluate_many, serialize
from .experiments import (
    SUITE_EVIDENCE,
    SUITE_DELTAS,
    as_rows,
    discretize_1d_sweep,
    ridge_scaling,
    robot_budgets,
    robot_oracle,
    robot_trajectories,
)
from .inference import InferenceConfig, iterate
from .network import NetworkParseError, load_network, parse_network

EXIT_OK, EXIT_PARSE, EXIT_MAX_ITER, EXIT_IMPOSSIBLE = 0, 1, 2, 3
POSTERIOR_ROWS = 1000


def bundled_robot_net() -> str:
    return resources.files("bspnet").joinpath("data/robot.net").read_text()


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta", type=_positive_float, default=0.02)
    p.add_argument("--max-leaves", type=_positive_int, default=256)
    p.add_argument("--max-iterations", type=_positive_int, default=10)
    p.add_argument("--tol", type=_positive_float, default=1e-3, help="posterior KL convergence threshold")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bspnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="run iterative inference on a network file")
    p.add_argument("network", nargs="?", help="network file (default: bundled robot.net)")
    _common(p)

    p = sub.add_parser("discretize-1d", help="BSP vs equidistant vs optimal 1-D breakpoints")
    _common(p)
    p.add_argument("--max-m", type=_positive_int, default=256)

    p = sub.add_parser("ridge-scaling", help="leaves needed vs dimension on the ridge density")
    _common(p)
    p.add_argument("--dims", type=_positive_int, nargs="+", default=[2, 3, 4])
    p.add_argument("--targets", type=_positive_float, nargs="+", default=[0.05, 0.1])

    p = sub.add_parser("robot-suite", help="robot network error vs iteration and vs budget")
    _common(p)
    p.add_argument("--seeds", type=_nonneg_int, nargs="+", default=[1])
    p.add_argument("--budgets", type=_positive_int, nargs="+", default=[4, 8])
    return parser


def write_csv(path: Path, rows: Sequence[dict], header: Sequence[str] | None = None) -> None:
    header = list(header or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return "" if v is None else str(v)


def write_manifest(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    items = {k: v for k, v in sorted(vars(args).items())}
    items.update(extra or {})
    with (out / "manifest.txt").open("w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


def _config(args: argparse.Namespace) -> InferenceConfig:
    return InferenceConfig(delta=args.delta, max_leaves=args.max_leaves,
                           max_iterations=args.max_iterations, convergence_tol=args.tol,
                           rng_seed=args.seed)


def cmd_infer(args: argparse.Namespace) -> int:
    try:
        net = load_network(args.network) if args.network else parse_network(bundled_robot_net())
    except NetworkParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"cannot read network: {exc}", file=sys.stderr)
        return EXIT_PARSE
    cfg = _config(args)
    exact = robot_oracle(net)
    try:
        result = iterate(net, cfg, exact=exact)
    except VanishedPotentialError as exc:
        print(f"impossible evidence: {exc}", file=sys.stderr)
        return EXIT_IMPOSSIBLE

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    dom = net.domains[net.query]
    u = np.linspace(0.0, 1.0, POSTERIOR_ROWS)
    dens = evaluate_many(result.posterior, u[:, None], honor_log_scale=False) / dom.width
    write_csv(out / "posterior.csv",
              [{"x": float(x), "density": float(d)} for x, d in zip(dom.from_unit(u), dens)],
              ["x", "density"])

    diag = []
    for h in result.history:
        for cid, n in sorted(h.leaf_counts.items()):
            diag.append({"iteration": h.iteration, "clique": cid, "leaves": n,
                         "kl_to_previous": h.kl_to_previous if h.iteration > 1 else None, "kl_to_exact": h.kl_to_exact})
    write_csv(out / "diagnostics.csv", diag,
              ["iteration", "clique", "leaves", "kl_to_previous", "kl_to_exact"])
    for c in result.join_tree.cliques:
        (out / f"clique_{c.id}.bsp").write_text(serialize(c.potential))
    write_manifest(out, args, {
        "network": args.network or "bundled:robot.net",
        "query": net.query,
        "cliques": ";".join(f"{c.id}:{','.join(c.nodes)}" for c in result.join_tree.cliques),
        "root": result.join_tree.root,
        "iterations": result.iterations,
        "converged": result.converged,
    })
    return EXIT_OK if result.converged else EXIT_MAX_ITER


def cmd_discretize_1d(args: argparse.Namespace) -> int:
    ms = [2 ** k for k in range(1, int(math.log2(args.max_m)) + 1)]
    rows = discretize_1d_sweep(ms, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "discretize_1d.csv", as_rows(rows), ["m", "kl_bsp", "kl_equidistant", "kl_descent"])
    write_manifest(args.out, args)
    return EXIT_OK


def cmd_ridge_scaling(args: argparse.Namespace) -> int:
    rows = ridge_scaling(args.dims, args.targets, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "ridge_scaling.csv", as_rows(rows))
    write_manifest(args.out, args)
    return EXIT_OK


def cmd_robot_suite(args: argparse.Namespace) -> int:
    it_rows = robot_trajectories(SUITE_EVIDENCE, SUITE_DELTAS, args.seeds,
                                 max_iterations=min(args.max_iterations, 4), max_leaves=args.max_leaves)
    b_rows = robot_budgets(SUITE_EVIDENCE, args.budgets, args.seeds, delta=args.delta,
                           max_iterations=args.max_iterations, convergence_tol=args.tol)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "error_vs_iteration.csv", as_rows(it_rows))
    write_csv(args.out / "error_vs_subregions.csv", as_rows(b_rows))
    write_manifest(args.out, args)
    return EXIT_OK


COMMANDS = {
    "infer": cmd_infer,
    "discretize-1d": cmd_discretize_1d,
    "ridge-scaling": cmd_ridge_scaling,
    "robot-suite": cmd_robot_suite,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
