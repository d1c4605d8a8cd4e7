import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bspnet.factors import (
    ContinuousFactor,
    EvidenceError,
    LinearGaussian,
    LogisticSensor,
    PointwiseProduct,
    Uniform,
    VariableDomain,
    evaluate,
    instantiate_evidence,
    linear_gaussian,
    logistic_sensor,
    product_evaluate,
    uniform_prior,
)
from bspnet.network import (
    NetworkError,
    NetworkParseError,
    load_network,
    parse_network,
    robot_network,
    robot_network_text,
)

X = VariableDomain("x")
O = VariableDomain("o")
S = VariableDomain("s", "discrete", states=("true", "false"))
PEAK = 1 / math.sqrt(2 * math.pi * 0.01)


def test_domain_validation_and_roundtrip():
    with pytest.raises(ValueError):
        VariableDomain("a", low=1.0, high=1.0)
    with pytest.raises(ValueError):
        VariableDomain("a", "discrete", states=("only",))
    with pytest.raises(ValueError):
        VariableDomain("a", "mixed")
    d = VariableDomain("a", low=-3.0, high=7.5)
    x = np.random.default_rng(0).uniform(-3, 7.5, 1000)
    np.testing.assert_allclose(d.from_unit(d.to_unit(x)), x, atol=1e-12)


def test_linear_gaussian_peak():
    f = ContinuousFactor((X, O), LinearGaussian((1.0, -1.0), 0.0, 0.01))
    assert evaluate(f, [0.3, 0.3]) == pytest.approx(PEAK)
    assert PEAK == pytest.approx(3.989, abs=1e-3)


def test_logistic_at_threshold():
    f = ContinuousFactor((X,), LogisticSensor(40.0, 0.5, True))
    assert evaluate(f, [0.5]) == pytest.approx(0.5)
    g = ContinuousFactor((X,), LogisticSensor(40.0, 0.5, False))
    assert evaluate(g, [0.2]) == pytest.approx(1 - evaluate(f, [0.2]))


def test_uniform_level():
    assert evaluate(uniform_prior(X), [0.77]) == 1.0
    wide = VariableDomain("w", low=0.0, high=4.0)
    assert evaluate(uniform_prior(wide), [0.1]) == 0.25


def test_factor_arguments_are_validated():
    with pytest.raises(ValueError):
        ContinuousFactor((X, O), LinearGaussian((1.0,), 0.0, 0.01))
    with pytest.raises(ValueError):
        LinearGaussian((1.0,), 0.0, 0.0)
    with pytest.raises(ValueError):
        ContinuousFactor((S,), Uniform())
    with pytest.raises(ValueError):
        evaluate(ContinuousFactor((X, O), LinearGaussian((1.0, -1.0), 0.0, 0.01)), [0.1])


def test_sensor_evidence_fixes_peak():
    f = linear_gaussian(O, [(1.0, X)], 0.01)
    g = instantiate_evidence(f, {"o": 0.2})
    assert g.scope == ("x",)
    xs = np.linspace(0, 1, 100001)
    assert xs[np.argmax(g.evaluate(xs[:, None]))] == pytest.approx(0.2, abs=1e-5)
    assert g.evaluate([0.2]) == pytest.approx(PEAK)


def test_logistic_evidence_true_and_false():
    f = logistic_sensor(S, X, 40.0, 0.5)
    doms = {"s": S, "x": X}
    t = instantiate_evidence(f, {"s": "true"}, doms)
    xs = np.random.default_rng(1).random((50, 1))
    np.testing.assert_allclose(t.evaluate(xs), 1 / (1 + np.exp(40 * (xs[:, 0] - 0.5))))
    fl = instantiate_evidence(f, {"s": "false"}, doms)
    np.testing.assert_allclose(fl.evaluate(xs), 1 - t.evaluate(xs))
    with pytest.raises(EvidenceError):
        instantiate_evidence(f, {"s": "maybe"}, doms)


def test_irrelevant_evidence_leaves_factor_unchanged():
    f = linear_gaussian(O, [(1.0, X)], 0.01)
    assert instantiate_evidence(f, {"z": 0.3}) is f


def test_evidence_out_of_range():
    f = linear_gaussian(O, [(1.0, X)], 0.01)
    with pytest.raises(EvidenceError):
        instantiate_evidence(f, {"o": 1.5})


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2 ** 31))
def test_instantiation_commutes_with_evaluation(o, seed):
    y = VariableDomain("y", low=-1.0, high=2.0)
    f = linear_gaussian(O, [(0.7, X), (-0.4, y)], 0.05, constant=0.1)
    g = instantiate_evidence(f, {"o": o})
    rng = np.random.default_rng(seed)
    pts = rng.random((100, 2))                 # columns x, y
    full = np.column_stack([np.full(100, O.to_unit(o)), pts])  # columns o, x, y
    np.testing.assert_allclose(g.evaluate(pts), f.evaluate(full), rtol=1e-12)


def test_product_evaluate():
    assert product_evaluate([], [[0.3]], ("x",))[0] == 1.0
    g = instantiate_evidence(linear_gaussian(O, [(1.0, X)], 0.01), {"o": 0.2})
    assert product_evaluate([uniform_prior(X), g], [[0.2]], ("x",))[0] == pytest.approx(PEAK)
    rng = np.random.default_rng(3)
    pts = rng.random((100, 2))
    a = ContinuousFactor((X,), LinearGaussian((1.0,), 0.4, 1.0))
    b = ContinuousFactor((O,), LinearGaussian((1.0,), 0.6, 1.0))
    hand = a.evaluate(pts[:, :1]) * b.evaluate(pts[:, 1:])
    np.testing.assert_allclose(product_evaluate([a, b], pts, ("x", "o")), hand)
    with pytest.raises(ValueError):
        product_evaluate([a], pts[:, :1], ("o",))


def test_pointwise_product_form():
    a = ContinuousFactor((X,), LinearGaussian((1.0,), 0.4, 1.0))
    b = ContinuousFactor((X,), LogisticSensor(40.0, 0.5, True))
    p = ContinuousFactor((X,), PointwiseProduct((a, b)))
    xs = np.random.default_rng(4).random((30, 1))
    np.testing.assert_allclose(p.evaluate(xs), a.evaluate(xs) * b.evaluate(xs))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_factor_values_nonnegative_and_finite(seed):
    net = robot_network(0.2, 0.8)
    rng = np.random.default_rng(seed)
    for fac in net.factors:
        inst = instantiate_evidence(fac, net.evidence, net.domains)
        v = inst.evaluate(rng.random((50, len(inst.scope))))
        assert np.all(np.isfinite(v)) and np.all(v >= 0)


# --------------------------------------------------------------------------
# network files


def test_robot_file_structure():
    net = parse_network(robot_network_text(0.2, 0.8))
    assert [v.name for v in net.variables] == ["x1", "x2", "x3", "o1", "o2", "o3"]
    assert net.query == "x3"
    assert net.evidence == {"o1": 0.2, "o2": 0.8, "o3": "true"}
    assert net.parents("x3") == ["x2"]
    assert net.parents("o3") == ["x3"]
    sensor = next(f for f in net.factors if f.child == "o3")
    assert sensor.form == LogisticSensor(40.0, 0.5)
    trans = next(f for f in net.factors if f.child == "x2")
    assert trans.form.variance == 0.01


def test_bundled_file_matches_generator():
    from bspnet.cli import bundled_robot_net
    assert bundled_robot_net() == robot_network_text(0.2, 0.8, "true")


def test_load_network_from_path(tmp_path):
    p = tmp_path / "r.net"
    p.write_text(robot_network_text(0.6, 0.9))
    assert load_network(p).evidence["o2"] == 0.9


def test_linear_expression_with_constant():
    net = parse_network("""
var a continuous 0 1
var c continuous 0 1
var b continuous 0 2
factor uniform a
factor uniform c
factor lingauss b 0.5*a - 2*c + 0.25 var=0.1   # comment
query b
""")
    f = net.factors[2]
    assert f.scope == ("b", "a", "c")
    # residual b - 0.5 a + 2 c - 0.25
    assert f.form.coefficients == (1.0, -0.5, 2.0)
    assert f.form.offset == 0.25


@pytest.mark.parametrize("text,line", [
    ("var x continuous 0\n", 1),
    ("var x continuous 0 1\nvar x continuous 0 1\n", 2),
    ("var x continuous 0 1\nfactor uniform y\n", 2),
    ("var x continuous 0 1\n\nfactor gamma x\n", 3),
    ("var x continuous 0 1\nevidence x=2\n", 2),
    ("var x continuous 0 1\nbogus\n", 2),
    ("var x continuous 0 1\nfactor lingauss x 1*z var=1\n", 2),
    ("var x continuous 0 1\nfactor lingauss x var=0\n", 2),
    ("var x continuous 0 1\nvar s discrete a,b\nfactor logistic x gain=1\n", 3),
    ("var x discrete a\n", 1),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(NetworkParseError) as err:
        parse_network(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_network_level_errors():
    with pytest.raises(NetworkError):
        parse_network("var x continuous 0 1\nvar y continuous 0 1\n"
                      "factor lingauss x 1*y var=1\nfactor lingauss y 1*x var=1\n")
    with pytest.raises(NetworkError):
        parse_network("var x continuous 0 1\nvar s discrete a,b\nfactor uniform x\n"
                      "factor logistic x gain=1 thresh=0 out=s\n")  # unobserved discrete
    with pytest.raises(NetworkError):
        parse_network("var x continuous 0 1\nfactor uniform x\nevidence x=0.5\nquery x\n")
