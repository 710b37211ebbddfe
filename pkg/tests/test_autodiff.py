import math

import pytest

from sdvi import autodiff as ad
from sdvi.autodiff import Tape


def _finite_difference(fn, x, h=1e-6):
    return (fn(x + h) - fn(x - h)) / (2 * h)


def _gradient(fn, x):
    tape = Tape()
    v = tape.variable(x)
    out = fn(v)
    return out.value, tape.backward(out)[v]


UNARY_CASES = [
    (lambda x: x * x + 3.0 * x, 0.7),
    (lambda x: ad.exp(x) / (1.0 + x * x), -0.4),
    (lambda x: ad.log(x) * x, 2.5),
    (lambda x: ad.erf(x), 0.3),
    (lambda x: ad.tanh(2.0 * x), 0.1),
    (lambda x: ad.softplus(x), -1.2),
    (lambda x: ad.sqrt(x + 1.0), 3.0),
    (lambda x: x ** 3.0 - 2.0 / x, 1.3),
    (lambda x: 2.0 ** x, 0.9),
    (lambda x: -(x - 1.0) * (x + 2.0), 0.25),
]


@pytest.mark.parametrize("fn,x", UNARY_CASES)
def test_reverse_mode_matches_finite_differences(fn, x):
    value, grad = _gradient(fn, x)
    assert value == pytest.approx(float(fn(x)))
    expected = _finite_difference(lambda t: float(fn(t)), x)
    assert grad == pytest.approx(expected, rel=1e-6, abs=1e-8)


def test_gradient_of_two_inputs():
    tape = Tape()
    a = tape.variable(1.5)
    b = tape.variable(-0.5)
    out = a * b + ad.exp(a * b) - b / a
    grads = tape.backward(out).wrt([a, b])
    da = b.value + b.value * math.exp(a.value * b.value) + b.value / a.value ** 2
    db = a.value + a.value * math.exp(a.value * b.value) - 1.0 / a.value
    assert grads[0] == pytest.approx(da, rel=1e-12)
    assert grads[1] == pytest.approx(db, rel=1e-12)


def test_linearized_splices_value_and_partials():
    tape = Tape()
    a = tape.variable(2.0)
    b = tape.variable(3.0)
    out = ad.linearized(10.0, [a, b, 4.0], [0.5, -1.5, 7.0]) * 2.0
    assert out.value == pytest.approx(20.0)
    grads = tape.backward(out).wrt([a, b])
    assert grads.tolist() == pytest.approx([1.0, -3.0])


def test_linearized_without_tape_returns_the_value():
    assert ad.linearized(1.25, [1.0, 2.0], [3.0, 4.0]) == 1.25


def test_comparisons_use_values():
    tape = Tape()
    x = tape.variable(-0.1)
    assert x < 0
    assert not x >= 0
    assert abs(x).value == pytest.approx(0.1)


def test_domain_errors():
    with pytest.raises(ad.DomainError):
        ad.log(-1.0)
    with pytest.raises(ad.DomainError):
        ad.sqrt(-4.0)
    tape = Tape()
    with pytest.raises(ad.DomainError):
        ad.log(tape.variable(-1.0))
    assert ad.log(0.0) == -math.inf


def test_operands_from_different_tapes_are_rejected():
    x = Tape().variable(1.0)
    y = Tape().variable(2.0)
    with pytest.raises(ValueError):
        x + y
