"""Binary split partition trees over the unit hypercube.

A tree stores a piecewise-constant function on ``[0, 1)^n``.  Every internal
node halves its box along one axis at the midpoint; every leaf carries a
nonnegative ``value`` and a strictly positive ``weight``.  Nodes are
represented in *node-local* coordinates, so a subtree does not know where its
box sits.  That makes restriction and alignment cheap: a subtree can be
re-rooted anywhere without touching its contents.

Trees are immutable.  Every operation returns a new tree.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterator, Mapping, Sequence, Union

import numpy as np

WEIGHT_FLOOR = 1e-300
WEIGHT_CEIL = 1e300


class BspError(ValueError):
    pass


class ScopeMismatchError(BspError):
    pass


class VanishedPotentialError(ArithmeticError):
    """Raised when a potential integrates to zero (or overflows)."""


class BspParseError(BspError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, slots=True)
class Leaf:
    value: float
    weight: float = 1.0

    def __post_init__(self):
        if not (self.value >= 0.0 and math.isfinite(self.value)):
            raise BspError(f"leaf value must be finite and >= 0, got {self.value!r}")
        if not (self.weight > 0.0 and math.isfinite(self.weight)):
            raise BspError(f"leaf weight must be finite and > 0, got {self.weight!r}")


@dataclass(frozen=True, slots=True)
class Split:
    axis: int
    low: "Node"
    high: "Node"


Node = Union[Leaf, Split]


@dataclass(frozen=True)
class Box:
    """Axis-aligned dyadic box ``[lo, hi)``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @classmethod
    def unit(cls, n: int) -> "Box":
        return cls((0.0,) * n, (1.0,) * n)

    @property
    def ndim(self) -> int:
        return len(self.lo)

    @property
    def volume(self) -> float:
        return math.prod(h - l for l, h in zip(self.lo, self.hi))

    @property
    def center(self) -> tuple[float, ...]:
        return tuple((l + h) * 0.5 for l, h in zip(self.lo, self.hi))

    def width(self, axis: int) -> float:
        return self.hi[axis] - self.lo[axis]

    def halves(self, axis: int) -> tuple["Box", "Box"]:
        mid = (self.lo[axis] + self.hi[axis]) * 0.5
        low_hi = self.hi[:axis] + (mid,) + self.hi[axis + 1:]
        high_lo = self.lo[:axis] + (mid,) + self.lo[axis + 1:]
        return Box(self.lo, low_hi), Box(high_lo, self.hi)

    def contains(self, point: Sequence[float]) -> bool:
        return all(l <= p < h for l, p, h in zip(self.lo, point, self.hi))

    def key(self) -> tuple[int, ...]:
        """Per-axis heap index ``2**depth + k`` of the dyadic interval."""
        out = []
        for l, h in zip(self.lo, self.hi):
            depth = round(-math.log2(h - l))
            out.append((1 << depth) + int(round(l * (1 << depth))))
        return tuple(out)


@dataclass(frozen=True)
class LeafInfo:
    path: str
    box: Box
    leaf: Leaf


@dataclass(frozen=True)
class _Flat:
    axis: np.ndarray
    low: np.ndarray
    high: np.ndarray
    mid: np.ndarray
    value: np.ndarray
    weight: np.ndarray


@dataclass(frozen=True, eq=True)
class BspTree:
    scope: tuple[str, ...]
    root: Node
    log_scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scope", tuple(self.scope))
        if len(set(self.scope)) != len(self.scope):
            raise BspError(f"duplicate variables in scope {self.scope}")
        if not math.isfinite(self.log_scale):
            raise BspError("log_scale must be finite")

    @classmethod
    def constant(cls, scope: Sequence[str], value: float = 1.0, weight: float = 1.0,
                 log_scale: float = 0.0) -> "BspTree":
        return cls(tuple(scope), Leaf(value, weight), log_scale)

    @property
    def ndim(self) -> int:
        return len(self.scope)

    def leaves(self) -> Iterator[LeafInfo]:
        yield from iter_leaves(self)

    @cached_property
    def n_leaves(self) -> int:
        return _count_leaves(self.root)

    @cached_property
    def depth(self) -> int:
        return _depth(self.root)

    @cached_property
    def _flat(self) -> _Flat:
        return _flatten(self.root, self.ndim)

    def with_log_scale(self, log_scale: float) -> "BspTree":
        return BspTree(self.scope, self.root, log_scale)

    def __repr__(self) -> str:
        return (f"BspTree(scope={self.scope}, leaves={self.n_leaves}, "
                f"log_scale={self.log_scale:.6g})")


# --------------------------------------------------------------------------
# traversal helpers


def _count_leaves(node: Node) -> int:
    n = 0
    stack = [node]
    while stack:
        nd = stack.pop()
        if isinstance(nd, Leaf):
            n += 1
        else:
            stack.append(nd.low)
            stack.append(nd.high)
    return n


def _depth(node: Node) -> int:
    best = 0
    stack = [(node, 0)]
    while stack:
        nd, d = stack.pop()
        if isinstance(nd, Leaf):
            best = max(best, d)
        else:
            stack.append((nd.low, d + 1))
            stack.append((nd.high, d + 1))
    return best


def iter_leaves(tree: BspTree) -> Iterator[LeafInfo]:
    """Yield leaves in preorder (low child before high child)."""
    stack = [(tree.root, "", Box.unit(tree.ndim))]
    while stack:
        node, path, box = stack.pop()
        if isinstance(node, Leaf):
            yield LeafInfo(path, box, node)
        else:
            lo_box, hi_box = box.halves(node.axis)
            stack.append((node.high, path + "1", hi_box))
            stack.append((node.low, path + "0", lo_box))


def _flatten(root: Node, ndim: int) -> _Flat:
    axis, low, high, mid, value, weight = [], [], [], [], [], []
    stack = [(root, Box.unit(ndim), -1, 0)]
    while stack:
        node, box, parent, side = stack.pop()
        idx = len(axis)
        if parent >= 0:
            (low if side == 0 else high)[parent] = idx
        if isinstance(node, Leaf):
            axis.append(-1)
            mid.append(0.0)
            value.append(node.value)
            weight.append(node.weight)
            low.append(-1)
            high.append(-1)
        else:
            a = node.axis
            axis.append(a)
            mid.append((box.lo[a] + box.hi[a]) * 0.5)
            value.append(0.0)
            weight.append(1.0)
            low.append(-1)
            high.append(-1)
            lo_box, hi_box = box.halves(a)
            stack.append((node.high, hi_box, idx, 1))
            stack.append((node.low, lo_box, idx, 0))
    return _Flat(np.asarray(axis, dtype=np.int64), np.asarray(low, dtype=np.int64),
                 np.asarray(high, dtype=np.int64), np.asarray(mid, dtype=float),
                 np.asarray(value, dtype=float), np.asarray(weight, dtype=float))


def locate(tree: BspTree, points: np.ndarray) -> np.ndarray:
    """Flat node index of the leaf containing each point (rows of ``points``)."""
    flat = tree._flat
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    node = np.zeros(n, dtype=np.int64)
    if flat.axis[0] < 0 or n == 0:
        return node
    active = np.arange(n)
    while active.size:
        nd = node[active]
        ax = flat.axis[nd]
        go_high = pts[active, ax] >= flat.mid[nd]
        nxt = np.where(go_high, flat.high[nd], flat.low[nd])
        node[active] = nxt
        active = active[flat.axis[nxt] >= 0]
    return node


def evaluate_many(tree: BspTree, points: np.ndarray, honor_log_scale: bool = True) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != tree.ndim:
        raise BspError(f"expected points of shape (k, {tree.ndim}), got {pts.shape}")
    vals = tree._flat.value[locate(tree, pts)]
    if honor_log_scale and tree.log_scale != 0.0:
        vals = vals * math.exp(tree.log_scale)
    return vals


def weights_at(tree: BspTree, points: np.ndarray) -> np.ndarray:
    return tree._flat.weight[locate(tree, np.asarray(points, dtype=float))]


def leaf_at(tree: BspTree, point: Sequence[float]) -> Leaf:
    """Leaf containing a single point, by direct descent."""
    node = tree.root
    local = list(point)
    while isinstance(node, Split):
        a = node.axis
        if local[a] >= 0.5:
            local[a] = (local[a] - 0.5) * 2.0
            node = node.high
        else:
            local[a] = local[a] * 2.0
            node = node.low
    return node


def _check_point(tree: BspTree, point: Sequence[float]) -> tuple[float, ...]:
    pt = tuple(float(p) for p in point)
    if len(pt) != tree.ndim:
        raise BspError(f"point has dimension {len(pt)}, tree scope has {tree.ndim}")
    for p in pt:
        if not (0.0 <= p < 1.0):
            raise BspError(f"coordinate {p} outside [0, 1)")
    return pt


def evaluate_at(tree: BspTree, point: Sequence[float]) -> float:
    pt = _check_point(tree, point)
    return leaf_at(tree, pt).value * math.exp(tree.log_scale)


def weight_at(tree: BspTree, point: Sequence[float]) -> float:
    return leaf_at(tree, _check_point(tree, point)).weight


# --------------------------------------------------------------------------
# structural operations


def _restrict(node: Node, axis: int, high: bool) -> Node:
    if isinstance(node, Leaf):
        return node
    if node.axis == axis:
        return node.high if high else node.low
    return Split(node.axis, _restrict(node.low, axis, high), _restrict(node.high, axis, high))


def restrict_to_half(tree: BspTree, axis: int, half: str) -> BspTree:
    """The tree's function composed with the affine map of [0,1] onto one half of ``axis``."""
    if not 0 <= axis < tree.ndim:
        raise BspError(f"axis {axis} out of range for scope {tree.scope}")
    if half not in ("low", "high"):
        raise BspError(f"half must be 'low' or 'high', got {half!r}")
    return BspTree(tree.scope, _restrict(tree.root, axis, half == "high"), tree.log_scale)


def _map_leaves(node: Node, fn: Callable[[Leaf], Leaf]) -> Node:
    if isinstance(node, Leaf):
        return fn(node)
    return Split(node.axis, _map_leaves(node.low, fn), _map_leaves(node.high, fn))


class _Counter:
    visits = 0


def _combine(a: Node, b: Node, op: Callable[[float, float], float]) -> Node:
    # Structure follows ``b`` wherever the split axes disagree; ``a`` is adjusted.
    _Counter.visits += 1
    if isinstance(b, Leaf):
        if isinstance(a, Leaf):
            return Leaf(op(a.value, b.value), a.weight)
        bv = b.value
        return _map_leaves(a, lambda lf: Leaf(op(lf.value, bv), lf.weight))
    if isinstance(a, Leaf):
        return Split(b.axis, _combine(a, b.low, op), _combine(a, b.high, op))
    if a.axis != b.axis:
        a = Split(b.axis, _restrict(a, b.axis, False), _restrict(a, b.axis, True))
    return Split(a.axis, _combine(a.low, b.low, op), _combine(a.high, b.high, op))


def _align_nodes(a: Node, b: Node) -> tuple[Node, Node]:
    _Counter.visits += 1
    if isinstance(a, Leaf) and isinstance(b, Leaf):
        return a, b
    if isinstance(b, Leaf):
        return a, _map_leaves(a, lambda _lf: b)
    if isinstance(a, Leaf):
        return _map_leaves(b, lambda _lf: a), b
    if a.axis != b.axis:
        a = Split(b.axis, _restrict(a, b.axis, False), _restrict(a, b.axis, True))
    al, bl = _align_nodes(a.low, b.low)
    ah, bh = _align_nodes(a.high, b.high)
    return Split(a.axis, al, ah), Split(b.axis, bl, bh)


def _check_same_scope(a: BspTree, b: BspTree) -> None:
    if a.scope != b.scope:
        raise ScopeMismatchError(f"scopes differ: {a.scope} vs {b.scope}")


def align(a: BspTree, b: BspTree) -> tuple[BspTree, BspTree]:
    """Return both trees restructured onto a common split structure."""
    _check_same_scope(a, b)
    ra, rb = _align_nodes(a.root, b.root)
    return BspTree(a.scope, ra, a.log_scale), BspTree(b.scope, rb, b.log_scale)


def add(a: BspTree, b: BspTree) -> BspTree:
    _check_same_scope(a, b)
    scale = max(a.log_scale, b.log_scale)
    ka = math.exp(a.log_scale - scale)
    kb = math.exp(b.log_scale - scale)
    if ka == 1.0 and kb == 1.0:
        op = lambda x, y: x + y  # noqa: E731
    else:
        op = lambda x, y: x * ka + y * kb  # noqa: E731
    return BspTree(a.scope, _combine(a.root, b.root, op), scale)


def multiply(a: BspTree, b: BspTree) -> BspTree:
    _check_same_scope(a, b)
    return BspTree(a.scope, _combine(a.root, b.root, lambda x, y: x * y),
                   a.log_scale + b.log_scale)


def divide(a: BspTree, b: BspTree, floor: float = WEIGHT_FLOOR) -> BspTree:
    """Pointwise ``a / max(b, floor)``; log scales subtract."""
    _check_same_scope(a, b)
    return BspTree(a.scope, _combine(a.root, b.root, lambda x, y: x / max(y, floor)),
                   a.log_scale - b.log_scale)


def _integrate(node: Node, k: int) -> Node:
    if isinstance(node, Leaf):
        return node
    low = _integrate(node.low, k)
    high = _integrate(node.high, k)
    if node.axis == k:
        return _combine(low, high, lambda x, y: (x + y) * 0.5)
    return Split(node.axis - 1 if node.axis > k else node.axis, low, high)


def integrate_out(tree: BspTree, variable: str) -> BspTree:
    if variable not in tree.scope:
        raise ScopeMismatchError(f"{variable!r} not in scope {tree.scope}")
    k = tree.scope.index(variable)
    scope = tree.scope[:k] + tree.scope[k + 1:]
    return BspTree(scope, _integrate(tree.root, k), tree.log_scale)


def integrate_out_all(tree: BspTree, variables: Sequence[str]) -> BspTree:
    for v in variables:
        tree = integrate_out(tree, v)
    return tree


def marginalize_to(tree: BspTree, keep: Sequence[str]) -> BspTree:
    """Integrate out every variable not in ``keep``, then reorder to ``keep``."""
    out = integrate_out_all(tree, [v for v in tree.scope if v not in keep])
    if out.scope != tuple(keep):
        out = reorder_scope(out, keep)
    return out


def _raw_integral(tree: BspTree) -> float:
    return math.fsum(lf.leaf.value * lf.box.volume for lf in iter_leaves(tree))


def total_integral(tree: BspTree, honor_log_scale: bool = True) -> float:
    raw = _raw_integral(tree)
    return raw * math.exp(tree.log_scale) if honor_log_scale else raw


def normalize(tree: BspTree) -> BspTree:
    """Scale leaf values to unit mass, folding the factor into ``log_scale``."""
    z = _raw_integral(tree)
    if not (z > 0.0 and math.isfinite(z)):
        raise VanishedPotentialError(f"potential over {tree.scope} has total mass {z}")
    root = _map_leaves(tree.root, lambda lf: Leaf(lf.value / z, lf.weight))
    return BspTree(tree.scope, root, tree.log_scale + math.log(z))


def _reindex(node: Node, mapping: Sequence[int]) -> Node:
    if isinstance(node, Leaf):
        return node
    return Split(mapping[node.axis], _reindex(node.low, mapping), _reindex(node.high, mapping))


def extend_scope(tree: BspTree, new_scope: Sequence[str]) -> BspTree:
    """Re-express the tree over a superset scope; constant along added axes."""
    new_scope = tuple(new_scope)
    missing = [v for v in tree.scope if v not in new_scope]
    if missing:
        raise ScopeMismatchError(f"{missing} not in new scope {new_scope}")
    mapping = [new_scope.index(v) for v in tree.scope]
    return BspTree(new_scope, _reindex(tree.root, mapping), tree.log_scale)


def reorder_scope(tree: BspTree, new_order: Sequence[str]) -> BspTree:
    if sorted(new_order) != sorted(tree.scope):
        raise ScopeMismatchError(f"{new_order} is not a permutation of {tree.scope}")
    return extend_scope(tree, new_order)


def map_values(tree: BspTree, fn: Callable[[float], float]) -> BspTree:
    return BspTree(tree.scope, _map_leaves(tree.root, lambda lf: Leaf(fn(lf.value), lf.weight)),
                   tree.log_scale)


def weighted(tree: BspTree) -> BspTree:
    """Tree whose leaf values are ``value * weight`` (weights reset to 1)."""
    return BspTree(tree.scope, _map_leaves(tree.root, lambda lf: Leaf(lf.value * lf.weight, 1.0)),
                   tree.log_scale)


def with_constant_weight(tree: BspTree, weight: float) -> BspTree:
    w = min(max(weight, WEIGHT_FLOOR), WEIGHT_CEIL)
    return BspTree(tree.scope, _map_leaves(tree.root, lambda lf: Leaf(lf.value, w)), tree.log_scale)


def transfer_weights(tree: BspTree, source: BspTree) -> BspTree:
    """Copy ``source`` leaf values into ``tree`` leaf weights; structures must match."""

    def walk(a: Node, b: Node) -> Node:
        if isinstance(a, Leaf):
            if not isinstance(b, Leaf):
                raise BspError("structures differ")
            return Leaf(a.value, min(max(b.value, WEIGHT_FLOOR), WEIGHT_CEIL))
        if not isinstance(b, Split) or a.axis != b.axis:
            raise BspError("structures differ")
        return Split(a.axis, walk(a.low, b.low), walk(a.high, b.high))

    _check_same_scope(tree, source)
    return BspTree(tree.scope, walk(tree.root, source.root), tree.log_scale)


def structure_equal(a: BspTree, b: BspTree) -> bool:
    def walk(x: Node, y: Node) -> bool:
        if isinstance(x, Leaf) or isinstance(y, Leaf):
            return isinstance(x, Leaf) and isinstance(y, Leaf)
        return x.axis == y.axis and walk(x.low, y.low) and walk(x.high, y.high)

    return a.scope == b.scope and walk(a.root, b.root)


# --------------------------------------------------------------------------
# building from path maps, pruning


def from_leaf_paths(scope: Sequence[str], axes: Mapping[str, int],
                    leaves: Mapping[str, Leaf], log_scale: float = 0.0) -> BspTree:
    """Assemble a tree from ``path -> split axis`` and ``path -> leaf`` maps."""

    def build(path: str) -> Node:
        if path in leaves:
            return leaves[path]
        try:
            a = axes[path]
        except KeyError:
            raise BspError(f"path {path!r} is neither a leaf nor an internal node") from None
        return Split(a, build(path + "0"), build(path + "1"))

    return BspTree(tuple(scope), build(""), log_scale)


def _merge(low: Leaf, high: Leaf) -> Leaf:
    # Sibling halves have equal volume, so the volume-weighted mean is the plain mean.
    return Leaf((low.value + high.value) * 0.5, (low.weight + high.weight) * 0.5)


def prune(tree: BspTree, leaf_errors: Mapping[str, float]) -> BspTree:
    """Merge sibling leaves whose error estimates are both below the mean leaf error.

    Merging repeats upward: a merged leaf carries the sum of its children's
    estimates and is compared against the same mean, computed once up front.
    """
    infos = list(iter_leaves(tree))
    errs = [leaf_errors[lf.path] for lf in infos]
    if any(e < 0 for e in errs):
        raise BspError("leaf error estimates must be nonnegative")
    mean = math.fsum(errs) / len(errs)

    def walk(node: Node, path: str) -> tuple[Node, float | None]:
        if isinstance(node, Leaf):
            return node, leaf_errors[path]
        low, el = walk(node.low, path + "0")
        high, eh = walk(node.high, path + "1")
        if el is not None and eh is not None and el < mean and eh < mean:
            return _merge(low, high), el + eh
        return Split(node.axis, low, high), None

    root, _ = walk(tree.root, "")
    return BspTree(tree.scope, root, tree.log_scale)


def prune_to_budget(tree: BspTree, leaf_errors: Mapping[str, float], max_leaves: int) -> BspTree:
    """Greedily merge the cheapest sibling-leaf pairs until ``n_leaves <= max_leaves``."""
    if tree.n_leaves <= max_leaves:
        return tree
    axes: dict[str, int] = {}
    leaves: dict[str, Leaf] = {}
    errors: dict[str, float] = {}
    stack = [(tree.root, "")]
    while stack:
        node, path = stack.pop()
        if isinstance(node, Leaf):
            leaves[path] = node
            errors[path] = leaf_errors[path]
        else:
            axes[path] = node.axis
            stack.append((node.low, path + "0"))
            stack.append((node.high, path + "1"))

    heap: list[tuple[float, str]] = []

    def push(parent: str) -> None:
        lo, hi = parent + "0", parent + "1"
        if lo in leaves and hi in leaves:
            heapq.heappush(heap, (errors[lo] + errors[hi], parent))

    for p in axes:
        push(p)
    n = len(leaves)
    while n > max_leaves and heap:
        _, p = heapq.heappop(heap)
        lo, hi = p + "0", p + "1"
        if p not in axes or lo not in leaves or hi not in leaves:
            continue
        leaves[p] = _merge(leaves.pop(lo), leaves.pop(hi))
        errors[p] = errors.pop(lo) + errors.pop(hi)
        del axes[p]
        n -= 1
        if p:
            push(p[:-1])
    return from_leaf_paths(tree.scope, axes, leaves, tree.log_scale)


# --------------------------------------------------------------------------
# serialization


def serialize(tree: BspTree) -> str:
    lines = [f"BSP v1 scope={','.join(tree.scope)} logscale={float(tree.log_scale).hex()}"]
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if isinstance(node, Leaf):
            lines.append(f"L {float(node.value).hex()} {float(node.weight).hex()}")
        else:
            lines.append(f"I {node.axis}")
            stack.append(node.high)
            stack.append(node.low)
    return "\n".join(lines) + "\n"


def deserialize(text: str | bytes) -> BspTree:
    if isinstance(text, bytes):
        text = text.decode("ascii")
    lines = text.splitlines()
    if not lines:
        raise BspParseError("empty input", 1)
    head = lines[0].split()
    if len(head) != 4 or head[:2] != ["BSP", "v1"] or not head[2].startswith("scope=") \
            or not head[3].startswith("logscale="):
        raise BspParseError("bad header", 1)
    names = head[2][len("scope="):]
    scope = tuple(names.split(",")) if names else ()
    try:
        log_scale = float.fromhex(head[3][len("logscale="):])
    except ValueError:
        raise BspParseError("bad logscale", 1) from None

    pos = 1

    def parse() -> Node:
        nonlocal pos
        if pos >= len(lines):
            raise BspParseError("unexpected end of input", pos + 1)
        lineno = pos + 1
        tok = lines[pos].split()
        pos += 1
        try:
            if tok and tok[0] == "I" and len(tok) == 2:
                axis = int(tok[1])
                if not 0 <= axis < len(scope):
                    raise BspParseError(f"axis {axis} out of range", lineno)
                low = parse()
                return Split(axis, low, parse())
            if tok and tok[0] == "L" and len(tok) == 3:
                return Leaf(float.fromhex(tok[1]), float.fromhex(tok[2]))
        except BspParseError:
            raise
        except ValueError as exc:
            raise BspParseError(str(exc), lineno) from None
        raise BspParseError(f"unrecognized token line {lines[lineno - 1]!r}", lineno)

    try:
        root = parse()
        tree = BspTree(scope, root, log_scale)
    except RecursionError:
        raise BspParseError("tree too deep", pos) from None
    except BspParseError:
        raise
    except BspError as exc:
        raise BspParseError(str(exc), 1) from None
    if any(ln.strip() for ln in lines[pos:]):
        raise BspParseError("trailing content", pos + 1)
    return tree
