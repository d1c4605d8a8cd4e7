"""Hybrid network description and the line-oriented ``.net`` file format.

::

    var <name> continuous <a> <b>
    var <name> discrete <state,...>
    factor lingauss <out> <coeff*var> [<+-coeff*var> ...] [<+-constant>] var=<v>
    factor logistic <var> gain=<g> thresh=<t> [out=<sensor>]
    factor uniform <var>
    evidence <name>=<value>
    query <name>

``#`` starts a comment.  A logistic factor without ``out=`` belongs to the
only discrete variable that has no factor yet.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .factors import (
    ContinuousFactor,
    EvidenceError,
    VariableDomain,
    linear_gaussian,
    logistic_sensor,
    uniform_prior,
)


class NetworkError(ValueError):
    pass


class NetworkParseError(NetworkError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class HybridNetwork:
    variables: list[VariableDomain]
    factors: list[ContinuousFactor]
    evidence: dict[str, object] = field(default_factory=dict)
    query: str | None = None

    def __post_init__(self):
        self.validate()

    @property
    def domains(self) -> dict[str, VariableDomain]:
        return {v.name: v for v in self.variables}

    def index(self, name: str) -> int:
        return [v.name for v in self.variables].index(name)

    def parents(self, name: str) -> list[str]:
        for f in self.factors:
            if f.child == name:
                return [n for n in f.family if n != name]
        return []

    def validate(self) -> None:
        doms = self.domains
        if len(doms) != len(self.variables):
            raise NetworkError("duplicate variable names")
        children = [f.child for f in self.factors]
        for f in self.factors:
            if f.child is None:
                raise NetworkError("every factor needs a designated child variable")
            for n in f.family:
                if n not in doms:
                    raise NetworkError(f"factor refers to unknown variable {n!r}")
        dup = {c for c in children if children.count(c) > 1}
        if dup:
            raise NetworkError(f"variables with more than one factor: {sorted(dup)}")
        for name, value in self.evidence.items():
            if name not in doms:
                raise NetworkError(f"evidence on unknown variable {name!r}")
            try:
                doms[name].check_value(value)
            except EvidenceError as exc:
                raise NetworkError(str(exc)) from None
        for v in self.variables:
            if not v.is_continuous and v.name not in self.evidence:
                raise NetworkError(f"discrete variable {v.name} must be observed")
        if self.query is not None:
            if self.query not in doms:
                raise NetworkError(f"unknown query variable {self.query!r}")
            if not doms[self.query].is_continuous or self.query in self.evidence:
                raise NetworkError("query must be a continuous, unobserved variable")
        # acyclicity
        state: dict[str, int] = {}

        def visit(n: str) -> None:
            state[n] = 1
            for p in self.parents(n):
                if state.get(p) == 1:
                    raise NetworkError(f"cycle through {p!r}")
                if p not in state:
                    visit(p)
            state[n] = 2

        for v in self.variables:
            if v.name not in state:
                visit(v.name)

    def with_evidence(self, evidence: dict[str, object], query: str | None = None) -> "HybridNetwork":
        return HybridNetwork(list(self.variables), list(self.factors), dict(evidence),
                             query if query is not None else self.query)


_TERM = re.compile(r"([+-]?)\s*(\d*\.?\d+(?:[eE][+-]?\d+)?)?\s*(?:\*?\s*([A-Za-z_]\w*))?")


def _parse_linear(expr: str, doms: dict[str, VariableDomain], lineno: int):
    """Parse ``1*x1 -0.5*x2 +0.1`` into ([(coeff, domain)], constant)."""
    expr = expr.replace(" ", "")
    if not expr:
        raise NetworkParseError("empty linear expression", lineno)
    terms, const, pos = [], 0.0, 0
    while pos < len(expr):
        m = _TERM.match(expr, pos)
        if m is None or m.end() == pos:
            raise NetworkParseError(f"cannot parse linear term at {expr[pos:]!r}", lineno)
        sign, num, var = m.groups()
        if num is None and var is None:
            raise NetworkParseError(f"cannot parse linear term at {expr[pos:]!r}", lineno)
        if pos > 0 and not sign:
            raise NetworkParseError(f"missing sign before {expr[pos:]!r}", lineno)
        coeff = float(num) if num is not None else 1.0
        if sign == "-":
            coeff = -coeff
        if var is None:
            const += coeff
        else:
            if var not in doms:
                raise NetworkParseError(f"unknown variable {var!r}", lineno)
            terms.append((coeff, doms[var]))
        pos = m.end()
    return terms, const


def parse_network(text: str) -> HybridNetwork:
    doms: dict[str, VariableDomain] = {}
    order: list[VariableDomain] = []
    factors: list[tuple[int, str, dict]] = []
    evidence: dict[str, object] = {}
    query = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kw = tok[0]
        try:
            if kw == "var":
                if len(tok) < 3:
                    raise NetworkParseError("var needs a name and a kind", lineno)
                name, kind = tok[1], tok[2]
                if name in doms:
                    raise NetworkParseError(f"variable {name!r} declared twice", lineno)
                if kind == "continuous":
                    if len(tok) != 5:
                        raise NetworkParseError("continuous var needs <a> <b>", lineno)
                    dom = VariableDomain(name, "continuous", float(tok[3]), float(tok[4]))
                elif kind == "discrete":
                    if len(tok) != 4:
                        raise NetworkParseError("discrete var needs <state,...>", lineno)
                    dom = VariableDomain(name, "discrete", states=tuple(tok[3].split(",")))
                else:
                    raise NetworkParseError(f"unknown variable kind {kind!r}", lineno)
                doms[name] = dom
                order.append(dom)
            elif kw == "factor":
                if len(tok) < 3:
                    raise NetworkParseError("factor needs a type and a variable", lineno)
                factors.append((lineno, tok[1], {"args": tok[2:]}))
            elif kw == "evidence":
                if len(tok) != 2 or "=" not in tok[1]:
                    raise NetworkParseError("evidence needs <name>=<value>", lineno)
                name, value = tok[1].split("=", 1)
                if name not in doms:
                    raise NetworkParseError(f"evidence on unknown variable {name!r}", lineno)
                evidence[name] = float(value) if doms[name].is_continuous else value
                doms[name].check_value(evidence[name])
            elif kw == "query":
                if len(tok) != 2:
                    raise NetworkParseError("query needs one variable", lineno)
                query = tok[1]
            else:
                raise NetworkParseError(f"unknown keyword {kw!r}", lineno)
        except NetworkParseError:
            raise
        except ValueError as exc:
            raise NetworkParseError(str(exc), lineno) from None

    built: list[ContinuousFactor] = []
    pending_logistic = []
    for lineno, ftype, entry in factors:
        args = entry["args"]
        try:
            if ftype == "uniform":
                if len(args) != 1 or args[0] not in doms:
                    raise NetworkParseError("factor uniform <var>", lineno)
                built.append(uniform_prior(doms[args[0]]))
            elif ftype == "lingauss":
                kv = [a for a in args if a.startswith("var=")]
                rest = [a for a in args if not a.startswith("var=")]
                if len(kv) != 1 or not rest or rest[0] not in doms:
                    raise NetworkParseError("factor lingauss <out> <expr> var=<v>", lineno)
                terms, const = _parse_linear(" ".join(rest[1:]), doms, lineno) if rest[1:] else ([], 0.0)
                built.append(linear_gaussian(doms[rest[0]], terms, float(kv[0][4:]), const))
            elif ftype == "logistic":
                opts = dict(a.split("=", 1) for a in args[1:] if "=" in a)
                if args[0] not in doms or set(opts) - {"gain", "thresh", "out"} \
                        or {"gain", "thresh"} - set(opts) or any("=" not in a for a in args[1:]):
                    raise NetworkParseError("factor logistic <var> gain=<g> thresh=<t> [out=<sensor>]",
                                            lineno)
                pending_logistic.append((lineno, args[0], opts))
            else:
                raise NetworkParseError(f"unknown factor type {ftype!r}", lineno)
        except NetworkParseError:
            raise
        except ValueError as exc:
            raise NetworkParseError(str(exc), lineno) from None

    for lineno, var, opts in pending_logistic:
        out = opts.get("out")
        if out is None:
            taken = {f.child for f in built}
            free = [v.name for v in order if not v.is_continuous and v.name not in taken]
            if len(free) != 1:
                raise NetworkParseError("logistic factor needs out=<sensor>", lineno)
            out = free[0]
        if out not in doms:
            raise NetworkParseError(f"unknown sensor variable {out!r}", lineno)
        try:
            built.append(logistic_sensor(doms[out], doms[var], float(opts["gain"]),
                                         float(opts["thresh"])))
        except ValueError as exc:
            raise NetworkParseError(str(exc), lineno) from None

    try:
        return HybridNetwork(order, built, evidence, query)
    except NetworkError as exc:
        raise NetworkParseError(str(exc), 0) from None


def load_network(path: str | Path) -> HybridNetwork:
    return parse_network(Path(path).read_text())


def robot_network_text(o1: float = 0.2, o2: float = 0.8, o3: str = "true") -> str:
    return f"""\
# one-dimensional robot observed by two position sensors and a left-half detector
var x1 continuous 0 1
var x2 continuous 0 1
var x3 continuous 0 1
var o1 continuous 0 1
var o2 continuous 0 1
var o3 discrete true,false
factor uniform x1
factor lingauss x2 1*x1 var=0.01
factor lingauss x3 1*x2 var=0.01
factor lingauss o1 1*x1 var=0.01
factor lingauss o2 1*x2 var=0.01
factor logistic x3 gain=40 thresh=0.5 out=o3
evidence o1={o1!r}
evidence o2={o2!r}
evidence o3={o3}
query x3
"""


def robot_network(o1: float = 0.2, o2: float = 0.8, o3: str = "true") -> HybridNetwork:
    return parse_network(robot_network_text(o1, o2, o3))
