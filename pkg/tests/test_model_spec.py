import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from indiffvol.model_spec import (ModelDomainError, TaylorTable, constant_model, grouped_arrays,
                                  grouped_coefficients, heston_model, reciprocal_heston_model,
                                  taylor_table)
from conftest import HESTON_REF, RECIP_REF


def test_heston_grouped_values(heston):
    gc = grouped_coefficients(heston, 0.0, 0.04)
    assert gc.a == pytest.approx(0.02, abs=1e-15)
    assert gc.b == pytest.approx(0.5 * 0.2**2 * 0.04, abs=1e-15)


def test_zero_drift_gives_zero_h():
    m = constant_model(0.3, beta=0.2, mu=0.0)
    for x, y in ((0, 0), (1.2, -3.0)):
        assert grouped_coefficients(m, x, y).h == 0.0


def test_reciprocal_heston_g_by_substitution(recip):
    y, rho, b, mu = 0.04, 0.2, 0.04, 0.02
    beta = -math.sqrt(2.0 / (1 - rho**2)) * (b / mu) * y**1.5
    assert grouped_coefficients(recip, 0.0, y).g == pytest.approx(rho * math.sqrt(y) * beta, rel=1e-13)


def test_domain_violation_names_coefficient(heston):
    with pytest.raises(ModelDomainError, match="y"):
        grouped_coefficients(heston, 0.0, -0.01)


def test_constant_table_has_no_higher_entries():
    tab = taylor_table(constant_model(0.2, beta=0.1, c=0.3, mu=0.05, rho=0.4), 0.1, 0.2)
    for name in "abfgh":
        arr = tab.coeff(name).copy()
        arr[0, 0] = 0.0
        assert np.all(arr == 0.0)


def test_heston_a_entries(heston):
    tab = taylor_table(heston, 0.0, 0.07)
    assert tab.a[0, 0] == pytest.approx(0.035)
    assert tab.a[0, 1] == pytest.approx(0.5)
    assert tab.a[0, 2] == 0.0 and tab.a[1, 0] == 0.0


def test_fd_path_matches_analytic_on_heston(heston_affine):
    an = taylor_table(heston_affine, 0.0, 0.04)
    fd = taylor_table(heston_affine, 0.0, 0.04, use_analytic=False)
    for name in "abfgh":
        np.testing.assert_allclose(fd.coeff(name), an.coeff(name), rtol=1e-6, atol=1e-9)


def test_heston_accepts_reference_parameters():
    m = heston_model(**HESTON_REF)
    assert m.rho == -0.4


def test_heston_zero_lambda():
    m = heston_model(**HESTON_REF, lambda_fn=0.0)
    for y in (0.01, 0.04, 0.2):
        gc = grouped_coefficients(m, 0.0, y)
        assert gc.f == pytest.approx(1.15 * (0.04 - y), abs=1e-15)
        assert gc.h == 0.0


@pytest.mark.parametrize("lam", [0.0, 0.5, (0.1, 0.0, 3.0)])
def test_heston_f_independent_of_lambda(lam):
    m = heston_model(**HESTON_REF, lambda_fn=lam)
    for y in (0.01, 0.04, 0.2):
        assert grouped_coefficients(m, 0.3, y).f == pytest.approx(1.15 * (0.04 - y), abs=1e-15)


def test_reciprocal_reference_accepted_and_feller():
    reciprocal_heston_model(**RECIP_REF)
    with pytest.raises(ValueError, match="Feller"):
        reciprocal_heston_model(a=0.01, b=1.0, kappa=0.01, mu=0.02, rho=0.2)


def test_reciprocal_b_zero_is_deterministic():
    m = reciprocal_heston_model(a=5.0, b=0.0, kappa=0.001, mu=0.02, rho=0.2)
    assert grouped_coefficients(m, 0.0, 0.05).b == 0.0


def _hand_heston(x, y, lam, d=0.2, th=0.04, ka=1.15, rho=-0.4):
    return dict(a=0.5 * y, b=0.5 * d * d * y, f=ka * (th - y), g=rho * d * y, h=0.5 * lam * lam)


def _hand_recip(x, y, a=5.0, b=0.04, ka=0.001, mu=0.02, rho=0.2):
    K = math.sqrt(2 / (1 - rho**2)) * b / mu
    C2 = 2 * (b * b - a * ka) / (mu**2 * (1 - rho**2))
    return dict(a=0.5 * y, b=b * b * y**3 / (mu**2 * (1 - rho**2)),
                f=(a + rho * K * mu) * y + C2 * y * y, g=-rho * K * y * y, h=mu * mu / (2 * y))


def test_builtins_match_hand_forms_at_random_points(heston, recip):
    rng = np.random.default_rng(11)
    for _ in range(20):
        x, y = rng.normal(), rng.uniform(0.005, 0.3)
        for model, hand in ((heston, _hand_heston(x, y, 0.5)), (recip, _hand_recip(x, y))):
            gc = grouped_coefficients(model, x, y).as_dict()
            for k, v in hand.items():
                assert gc[k] == pytest.approx(v, rel=1e-12, abs=1e-300)


def test_grouped_arrays_matches_pointwise(recip):
    ys = np.linspace(0.01, 0.2, 7)
    arr = grouped_arrays(recip, 0.0, ys)
    for i, y in enumerate(ys):
        gc = grouped_coefficients(recip, 0.0, y).as_dict()
        for k in "abfgh":
            assert arr[k][i] == pytest.approx(gc[k], rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-3, 3), y=st.floats(0.01, 0.3))
def test_table_invariant_under_x_shift(shift, y):
    m = heston_model(**HESTON_REF, lambda_fn=0.4)
    t0 = taylor_table(m, 0.0, y)
    t1 = taylor_table(m, shift, y)
    for name in "abfgh":
        np.testing.assert_array_equal(t0.coeff(name), t1.coeff(name))


@settings(max_examples=25, deadline=None)
@given(c=st.lists(st.floats(-0.02, 0.02), min_size=6, max_size=6), xb=st.floats(-1, 1), yb=st.floats(0.5, 2))
def test_fd_table_reproduces_quadratic(c, xb, yb):
    # a(x, y) is an exact quadratic of variance-rate magnitude
    def sig(x, y):
        q = c[0] + c[1] * (x - xb) + c[2] * (y - yb) + c[3] * (x - xb) ** 2 + c[4] * (x - xb) * (y - yb) + c[5] * (y - yb) ** 2
        return np.sqrt(2.0 * (q + 0.2))
    from indiffvol.model_spec import LSVModel
    m = LSVModel(mu=lambda x, y: 0.0 * x, sigma=sig, c=lambda x, y: 0.0 * x, beta=lambda x, y: 0.0 * x,
                 rho=0.0, domain=(-10, 10, -10, 10))
    tab = taylor_table(m, xb, yb)
    want = np.array([[c[0] + 0.2, c[2], c[5]], [c[1], c[4], 0.0], [c[3], 0.0, 0.0]])
    np.testing.assert_allclose(tab.a, want, atol=1e-8)


def test_table_rejects_bad_entries():
    with pytest.raises(ModelDomainError):
        TaylorTable.constant(a=0.0)
    with pytest.raises(ModelDomainError):
        TaylorTable.constant(a=0.02, b=-1.0)
    with pytest.raises(ModelDomainError, match=r"h\[0,1\]"):
        TaylorTable.from_entries(0, 0, 0, {"a": {(0, 0): 0.02}, "h": {(0, 1): float("nan")}})
