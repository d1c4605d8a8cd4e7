"""Continuous conditional-density terms over normalized coordinates.

Every factor is evaluated on points in the unit hypercube of its scope; the
coordinates are mapped back to natural units before the parametric form is
applied.  Densities are truncated to the variable ranges, not renormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence, Union

import numpy as np
from scipy.special import expit


class EvidenceError(ValueError):
    pass


@dataclass(frozen=True)
class VariableDomain:
    name: str
    kind: str = "continuous"        # "continuous" | "discrete"
    low: float = 0.0
    high: float = 1.0
    states: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if self.kind == "continuous" and not self.low < self.high:
            raise ValueError(f"{self.name}: empty range [{self.low}, {self.high}]")
        if self.kind == "discrete" and len(self.states) < 2:
            raise ValueError(f"{self.name}: a discrete variable needs at least two states")

    @property
    def is_continuous(self) -> bool:
        return self.kind == "continuous"

    @property
    def width(self) -> float:
        return self.high - self.low

    def to_unit(self, x):
        return (np.asarray(x, dtype=float) - self.low) / self.width

    def from_unit(self, u):
        return self.low + np.asarray(u, dtype=float) * self.width

    def check_value(self, value) -> None:
        if self.is_continuous:
            v = float(value)
            if not self.low <= v <= self.high:
                raise EvidenceError(f"{self.name}={v} outside range [{self.low}, {self.high}]")
        elif value not in self.states:
            raise EvidenceError(f"{self.name}={value!r} is not one of {self.states}")


@dataclass(frozen=True)
class LinearGaussian:
    """N(sum_i c_i x_i - offset; 0, variance) over natural-unit arguments."""

    coefficients: tuple[float, ...]
    offset: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        r = x @ np.asarray(self.coefficients, dtype=float) - self.offset
        return np.exp(-r * r / (2 * self.variance)) / math.sqrt(2 * math.pi * self.variance)


@dataclass(frozen=True)
class LogisticSensor:
    """P(sensor = first state | x) = 1 / (1 + exp(gain (x - threshold)))."""

    gain: float
    threshold: float
    observed: bool | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.observed is None:
            raise EvidenceError("logistic sensor evaluated without an observed state")
        z = self.gain * (x[:, 0] - self.threshold)
        return expit(-z) if self.observed else expit(z)


@dataclass(frozen=True)
class Uniform:
    level: float = 1.0

    def __post_init__(self):
        if not self.level >= 0:
            raise ValueError("uniform level must be nonnegative")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.full(x.shape[0], self.level)


@dataclass(frozen=True)
class PointwiseProduct:
    factors: tuple["ContinuousFactor", ...]


Form = Union[LinearGaussian, LogisticSensor, Uniform, PointwiseProduct]


@dataclass(frozen=True)
class ContinuousFactor:
    """A density term ``p(child | parents)`` restricted to its continuous arguments.

    ``variables`` are the remaining (continuous) arguments, in the column
    order expected by :meth:`evaluate`.  ``family`` keeps the full original
    node set (child plus parents, observed or not) for graph construction.
    """

    variables: tuple[VariableDomain, ...]
    form: Form
    child: str | None = None
    family: tuple[str, ...] = field(default=())

    def __post_init__(self):
        for v in self.variables:
            if not v.is_continuous:
                raise ValueError(f"factor argument {v.name} must be continuous")
        if len({v.name for v in self.variables}) != len(self.variables):
            raise ValueError("duplicate factor arguments")
        if isinstance(self.form, LinearGaussian) and len(self.form.coefficients) != len(self.variables):
            raise ValueError("one coefficient per argument required")
        if isinstance(self.form, LogisticSensor) and len(self.variables) != 1:
            raise ValueError("a logistic sensor takes exactly one argument")
        if isinstance(self.form, Uniform) and len(self.variables) > 1:
            raise ValueError("a uniform factor takes at most one argument")
        if not self.family:
            fam = tuple(v.name for v in self.variables)
            if self.child is not None and self.child not in fam:
                fam = (self.child,) + fam
            object.__setattr__(self, "family", fam)

    @property
    def scope(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def evaluate(self, points) -> np.ndarray:
        """Density at unit-coordinate points, shape ``(k, len(scope))`` or a single point."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        if pts.shape[1] != len(self.variables):
            raise ValueError(f"point dimension {pts.shape[1]} != factor scope size {len(self.variables)}")
        if isinstance(self.form, PointwiseProduct):
            out = np.ones(pts.shape[0])
            for sub in self.form.factors:
                cols = [self.scope.index(n) for n in sub.scope]
                out = out * sub.evaluate(pts[:, cols])
        else:
            nat = np.empty_like(pts)
            for j, v in enumerate(self.variables):
                nat[:, j] = v.from_unit(pts[:, j])
            out = self.form(nat)
        return float(out[0]) if single else out


def evaluate(factor: ContinuousFactor, point) -> np.ndarray | float:
    return factor.evaluate(point)


def linear_gaussian(child: VariableDomain, parents: Sequence[tuple[float, VariableDomain]],
                    variance: float, constant: float = 0.0) -> ContinuousFactor:
    """``child ~ N(sum c_j parent_j + constant, variance)``."""
    variables = (child,) + tuple(p for _, p in parents)
    coeffs = (1.0,) + tuple(-float(c) for c, _ in parents)
    return ContinuousFactor(variables, LinearGaussian(coeffs, float(constant), float(variance)),
                            child=child.name)


def logistic_sensor(sensor: VariableDomain, x: VariableDomain, gain: float,
                    threshold: float) -> ContinuousFactor:
    if sensor.is_continuous or len(sensor.states) != 2:
        raise ValueError("a logistic sensor must be a two-state discrete variable")
    return ContinuousFactor((x,), LogisticSensor(float(gain), float(threshold)),
                            child=sensor.name, family=(sensor.name, x.name))


def uniform_prior(x: VariableDomain) -> ContinuousFactor:
    return ContinuousFactor((x,), Uniform(1.0 / x.width), child=x.name)


def instantiate_evidence(factor: ContinuousFactor, evidence: Mapping[str, object],
                         domains: Mapping[str, VariableDomain] | None = None) -> ContinuousFactor:
    """Fix observed arguments and return a factor over the rest.

    Evidence on variables outside the factor's family is ignored.  Discrete
    observations need ``domains`` (or the sensor's own states) to decide
    which state was seen.
    """
    form = factor.form
    if isinstance(form, PointwiseProduct):
        subs = tuple(instantiate_evidence(s, evidence, domains) for s in form.factors)
        names = []
        for s in subs:
            names.extend(n for n in s.scope if n not in names)
        keep = tuple(v for v in factor.variables if v.name in names)
        return ContinuousFactor(keep, PointwiseProduct(subs), factor.child, factor.family)

    if isinstance(form, LogisticSensor):
        if factor.child in evidence:
            state = evidence[factor.child]
            if domains is None or factor.child not in domains:
                raise EvidenceError(f"no domain known for discrete variable {factor.child}")
            dom = domains[factor.child]
            dom.check_value(state)
            form = replace(form, observed=(state == dom.states[0]))
        x = factor.variables[0]
        if x.name in evidence:
            x.check_value(evidence[x.name])
            val = form(np.array([[float(evidence[x.name])]]))[0]
            return ContinuousFactor((), Uniform(float(val)), factor.child, factor.family)
        return ContinuousFactor(factor.variables, form, factor.child, factor.family)

    observed = [i for i, v in enumerate(factor.variables) if v.name in evidence]
    if not observed:
        return factor
    for i in observed:
        factor.variables[i].check_value(evidence[factor.variables[i].name])
    if isinstance(form, Uniform):
        return ContinuousFactor((), form, factor.child, factor.family)
    coeffs = form.coefficients
    offset = form.offset
    for i in observed:
        offset -= coeffs[i] * float(evidence[factor.variables[i].name])
    keep = [i for i in range(len(factor.variables)) if i not in observed]
    return ContinuousFactor(tuple(factor.variables[i] for i in keep),
                            LinearGaussian(tuple(coeffs[i] for i in keep), offset, form.variance),
                            factor.child, factor.family)


def product_evaluate(factors: Sequence[ContinuousFactor], points, scope: Sequence[str]) -> np.ndarray:
    """Product of factor densities at unit points over ``scope``; empty product is 1."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    scope = tuple(scope)
    out = np.ones(pts.shape[0])
    for fac in factors:
        try:
            cols = [scope.index(n) for n in fac.scope]
        except ValueError:
            raise ValueError(f"factor scope {fac.scope} not covered by {scope}") from None
        out = out * fac.evaluate(pts[:, cols])
    return out
