import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sorpfit.quadrature import QuadratureWarning, check_doubling, gauss_legendre, integrate


@given(st.integers(1, 40), st.floats(-5, 5), st.floats(0.1, 10))
def test_polynomial_exactness(n, lo, width):
    hi = lo + width
    x, w = gauss_legendre(n, lo, hi)
    deg = 2 * n - 1
    exact = (hi ** (deg + 1) - lo ** (deg + 1)) / (deg + 1)
    # round-off scales with the magnitude of the terms, not of the (possibly zero) sum
    scale = w @ np.abs(x) ** deg
    assert w @ x ** deg == pytest.approx(exact, rel=1e-9, abs=1e-12 * scale)


def test_weights_sum_to_length():
    x, w = gauss_legendre(16, 0.2, 3.0, panels=[0.5, 1.0, 2.0])
    assert x.size == 64
    assert w.sum() == pytest.approx(2.8, rel=1e-14)
    assert np.all((x > 0.2) & (x < 3.0))


def test_panels_outside_interval_ignored():
    x1, _ = gauss_legendre(8, 0.0, 1.0, panels=[-1.0, 2.0])
    x2, _ = gauss_legendre(8, 0.0, 1.0)
    np.testing.assert_array_equal(x1, x2)


def test_integrate_converges():
    val, ok = integrate(np.exp, 0.0, 1.0, n=16)
    assert ok and val == pytest.approx(math.e - 1, rel=1e-14)


def test_doubling_flags_nonconvergence():
    # sqrt has an endpoint singularity in its derivative; a 2-point rule is coarse
    with pytest.warns(QuadratureWarning):
        _, ok = integrate(np.sqrt, 0.0, 1.0, n=2)
    assert not ok


def test_check_doubling_zero_entries():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert check_doubling(np.zeros(3), np.zeros(3))
    with pytest.warns(QuadratureWarning):
        assert not check_doubling([1.0], [np.inf])
