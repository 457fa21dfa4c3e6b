import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcpmp.chebyshev import (
    CANONICAL,
    ChebCoeffMatrix,
    DegenerateGridError,
    FitDomain,
    cheb_basis,
    chebyshev_gauss_grid,
    distance_surface,
    eval_surface,
    fit_coeffs,
    fit_function,
    identify_domain,
    reference_matrix,
)

coef = st.floats(-10, 10, allow_nan=False)


@pytest.mark.parametrize("n,u,expected", [(0, 0.7, 1.0), (1, 0.7, 0.7), (2, 0.5, -0.5)])
def test_basis_values(n, u, expected):
    assert cheb_basis(n, u) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("n", [-1, 5, 1.5])
def test_basis_rejects_unsupported_order(n):
    with pytest.raises(ValueError):
        cheb_basis(n, 0.1)


def test_basis_recurrence_is_exact():
    u = np.random.default_rng(1).uniform(-1, 1, 1000)
    assert np.array_equal(cheb_basis(2, u), 2 * u * cheb_basis(1, u) - cheb_basis(0, u))


def test_basis_matches_cosine_form():
    u = np.linspace(-1, 1, 101)
    for n in range(5):
        np.testing.assert_allclose(cheb_basis(n, u), np.cos(n * np.arccos(u)), atol=1e-12)


def test_reference_matrix_at_domain_center():
    C = reference_matrix()
    x, y = C.domain.from_canonical(0.0, 0.0)
    assert eval_surface(C, x, y) == pytest.approx(0.70, abs=1e-12)


def test_constant_surface():
    c = np.zeros((3, 3))
    c[0, 0] = 5.0
    C = ChebCoeffMatrix(c, FitDomain.square(3.0, 9.0))
    pts = np.random.default_rng(0).uniform(0, 12, (50, 2))
    np.testing.assert_allclose(eval_surface(C, pts[:, 0], pts[:, 1]), 5.0)


def test_extrapolation_is_flagged_not_refused():
    C = reference_matrix()
    val, flag = eval_surface(C, np.array([0.0, 3.0]), np.array([0.0, 0.0]), return_flag=True)
    assert np.all(np.isfinite(val))
    assert flag.tolist() == [False, True]


def test_fit_of_linear_target():
    C = fit_function(lambda x, y: x, CANONICAL)
    assert eval_surface(C, 0.3, -0.8) == pytest.approx(0.3, abs=1e-9)


def test_fit_of_constant_and_basis_member():
    C = fit_function(lambda x, y: np.full_like(x, 5.0), CANONICAL)
    expected = np.zeros((3, 3))
    expected[0, 0] = 5.0
    np.testing.assert_allclose(C.c, expected, atol=1e-9)
    C = fit_function(lambda x, y: x * y, CANONICAL)
    expected = np.zeros((3, 3))
    expected[1, 1] = 1.0
    np.testing.assert_allclose(C.c, expected, atol=1e-9)


@given(st.lists(coef, min_size=9, max_size=9), st.floats(-5, 5), st.floats(0.5, 4))
def test_fit_reproduces_degree_two_polynomials(cs, lo, width):
    dom = FitDomain(lo, lo + width, lo - 1, lo - 1 + 2 * width)
    C = ChebCoeffMatrix(np.reshape(cs, (3, 3)), dom)
    x, y = chebyshev_gauss_grid(dom, 12)
    fit = fit_coeffs(x, y, eval_surface(C, x, y), dom)
    np.testing.assert_allclose(fit.c, C.c, atol=1e-9)
    assert np.max(np.abs(eval_surface(fit, x, y) - eval_surface(C, x, y))) < 1e-9


def test_fit_of_symmetric_function_is_symmetric():
    C = fit_function(lambda x, y: np.hypot(x, y) + x * x * y * y, FitDomain.square(-0.5, 2.0))
    assert C.is_symmetric(1e-9)


def test_degenerate_grid():
    with pytest.raises(DegenerateGridError):
        fit_coeffs(np.arange(5.0), np.arange(5.0), np.ones(5), CANONICAL)
    # nine points on one line: enough points but rank deficient
    x = np.linspace(-1, 1, 9)
    with pytest.raises(DegenerateGridError):
        fit_coeffs(x, np.zeros(9), x, CANONICAL)


def test_domain_validation():
    with pytest.raises(ValueError):
        FitDomain(1.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        ChebCoeffMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ChebCoeffMatrix(np.full((3, 3), np.nan))


def test_json_round_trip_and_schema():
    C = ChebCoeffMatrix(np.arange(9.0).reshape(3, 3), FitDomain(-1.5, 0.5, -2, 1), 0.25)
    doc = json.loads(C.to_json())
    assert set(doc) == {"domain", "c", "deviation_from_paper"}
    assert set(doc["domain"]) == {"x_lo", "x_hi", "y_lo", "y_hi"}
    back = ChebCoeffMatrix.from_json(C.to_json())
    assert np.array_equal(back.c, C.c) and back.domain == C.domain and back.deviation_from_paper == 0.25


def test_identify_round_trip():
    target = distance_surface(FitDomain.square(0.0, 1.0))
    m = identify_domain(target)
    assert m.domain == FitDomain.square(0.0, 1.0)
    assert m.deviation < 1e-9 and m.reproduced


def test_identify_reference_matrix():
    m = identify_domain(reference_matrix())
    # frozen from an independent run of the candidate search
    assert m.domain == FitDomain.square(-1.5, 0.5)
    assert m.deviation == pytest.approx(0.004721, abs=5e-6)
    assert m.reproduced
    assert len(m.table) >= 4


def test_identify_zero_matrix_is_unreproduced():
    m = identify_domain(ChebCoeffMatrix(np.zeros((3, 3))))
    assert not m.reproduced
    assert m.matrix is m.fitted



def test_distance_fit_is_accurate_far_from_the_origin():
    dom = FitDomain.square(2.0, 4.0)
    C = distance_surface(dom)
    x, y = np.meshgrid(np.linspace(2, 4, 41), np.linspace(2, 4, 41))
    r = np.hypot(x, y)
    assert np.max(np.abs(eval_surface(C, x, y) - r) / r) < 0.01
