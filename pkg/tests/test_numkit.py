import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from richlab.numkit import (RngState, dot, euclidean_norm, gaussian_matrix, loglog_fit,
                            matmat, matvec, outer_product, transpose_matvec)


def test_matvec_example():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matvec(m, np.array([1.0, -1.0])), [-1.0, -1.0])
    np.testing.assert_array_equal(transpose_matvec(m, np.array([1.0, -1.0])), [-2.0, -2.0])
    np.testing.assert_array_equal(matmat(m, np.eye(2)), m)


def test_outer_and_dot():
    u, v = np.array([1.0, 2.0]), np.array([3.0, 4.0, 5.0])
    np.testing.assert_array_equal(outer_product(u, v), [[3, 4, 5], [6, 8, 10]])
    assert dot(v, v) == 50.0
    assert euclidean_norm(np.array([3.0, 4.0])) == 5.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_adjoint_identity(rows, cols, seed):
    gen = np.random.default_rng(seed)
    m = gen.standard_normal((rows, cols))
    x, y = gen.standard_normal(cols), gen.standard_normal(rows)
    assert math.isclose(dot(y, matvec(m, x)), dot(transpose_matvec(m, y), x),
                        rel_tol=1e-12, abs_tol=1e-12)


def test_gaussian_matrix_reproducible():
    a = gaussian_matrix(4, 3, 0.5, RngState(7))
    b = gaussian_matrix(4, 3, 0.5, RngState(7))
    c = gaussian_matrix(4, 3, 0.5, RngState(7, 1))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_gaussian_matrix_generator_continues():
    gen = RngState(3).generator()
    a = gaussian_matrix(2, 2, 1.0, gen)
    b = gaussian_matrix(2, 2, 1.0, gen)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, gaussian_matrix(2, 2, 1.0, RngState(3)))


def test_gaussian_matrix_scale_and_zero():
    z = gaussian_matrix(400, 400, 1.0, RngState(0))
    assert abs(z.std() - 1.0) < 0.01
    assert np.all(gaussian_matrix(3, 3, 0.0, RngState(0)) == 0)


@pytest.mark.parametrize("args", [(0, 3, 1.0), (3, 0, 1.0), (2, 2, -1.0)])
def test_gaussian_matrix_errors(args):
    with pytest.raises(ValueError):
        gaussian_matrix(*args, RngState(0))


def test_child_streams_distinct():
    root = RngState(0)
    kids = {root.child(s, k, n) for s in range(3) for k in (1, 2, 3) for n in (64, 128)}
    assert len(kids) == 18
    assert root.child(1) != root


def test_loglog_fit_hand_example():
    # logs base 2 of values are 0, 2, 3 at widths 1, 2, 4
    fit = loglog_fit([(1, 1.0), (2, 4.0), (4, 8.0)])
    assert fit.slope == pytest.approx(1.5, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(2) / 6, abs=1e-12)
    assert fit.slope_stderr == pytest.approx(math.sqrt(1 / 12), abs=1e-12)
    assert fit.n_points == 3


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, 2), st.floats(0.01, 100.0), st.integers(2, 8))
def test_loglog_fit_exact_power_law(slope, coef, m):
    widths = [2 ** (k + 4) for k in range(m)]
    fit = loglog_fit([(w, coef * w ** slope) for w in widths])
    assert abs(fit.slope - slope) <= 1e-10
    assert abs(fit.intercept - math.log(coef)) <= 1e-9
    assert fit.slope_stderr <= 1e-10


def test_loglog_fit_noisy_recovery():
    gen = np.random.default_rng(1)
    widths = [64, 128, 256, 512, 1024, 2048]
    inside = 0
    for _ in range(200):
        pts = [(w, 3.0 * w ** 0.25 * math.exp(0.05 * gen.standard_normal())) for w in widths]
        fit = loglog_fit(pts)
        inside += abs(fit.slope - 0.25) <= 2 * fit.slope_stderr
    # t-distribution with 4 dof puts about 88% within 2 standard errors
    assert 160 <= inside <= 195


def test_loglog_fit_errors():
    with pytest.raises(ValueError, match="insufficient points"):
        loglog_fit([(64, 1.0), (64, 2.0)])
    with pytest.raises(ValueError, match="nonpositive value"):
        loglog_fit([(64, 1.0), (128, 0.0)])
    with pytest.raises(ValueError, match="nonpositive value"):
        loglog_fit([(64, 1.0), (128, float("nan"))])
