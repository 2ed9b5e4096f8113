import numpy as np
import pytest
from hypothesis import given, strategies as st

from scalimit.errors import DomainError
from scalimit.model import (
    PopulationModel, ScalingContext, birth_intensity, death_intensity, intensities, net_drift, validate_model,
)

rates = st.floats(0.0, 5.0)
pos = st.floats(0.01, 1e3)
xs = st.floats(0.0, 1e3)


def test_birth_intensity_examples(linear):
    assert birth_intensity(linear, 2, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert birth_intensity(linear, 1, 50.0) == pytest.approx(17.5)
    assert birth_intensity(linear, 7, 0.0) == 0.0


def test_death_intensity_examples(linear):
    assert death_intensity(linear, 2, 1.0) == pytest.approx(0.8)
    assert death_intensity(linear, 1, 50.0) == pytest.approx(12.5)
    assert death_intensity(linear, 7, 0.0) == 0.0


def test_net_drift_examples(linear):
    assert net_drift(linear, 50.0) == pytest.approx(5.0)
    assert net_drift(linear, 0.0) == 0.0
    sym = PopulationModel.linear(0.3, 0.3, 1.0)
    assert net_drift(sym, 12.5) == 0.0


def test_domain_errors(linear):
    with pytest.raises(DomainError):
        birth_intensity(linear, 1, -1.0)
    with pytest.raises(DomainError):
        death_intensity(linear, -1, 1.0)
    with pytest.raises(DomainError):
        PopulationModel.linear(-0.1, 0.1, 0.3)


def test_custom_maps_vanish_below_zero_and_reject_nan():
    m = PopulationModel.custom(lambda x: x + 1.0, lambda x: 0.5 * x, lambda x: x, nu=2.0, mu=1.0)
    assert birth_intensity(m, 3, 0.0) == 0.0
    with pytest.raises(DomainError):
        PopulationModel.custom(lambda x: np.where(x > 5.0, np.nan, x), lambda x: x, lambda x: x, nu=1, mu=1)


def test_scaling_context():
    ctx = ScalingContext(16, 50.0, 0.1)
    assert ctx.initial_count == 800
    assert ScalingContext(3, 0.5, 1.0).initial_count == round(1.5)
    with pytest.raises(DomainError):
        ScalingContext(0, 1.0, 1.0)
    with pytest.raises(DomainError):
        ScalingContext(1, 1.0, 0.0)


@given(rates, rates, rates, pos, xs)
def test_intensities_nonnegative_and_cancel(nu, mu, s2, K, x):
    m = PopulationModel.linear(nu, mu, s2)
    lb, ld = birth_intensity(m, K, x), death_intensity(m, K, x)
    assert lb >= 0 and ld >= 0
    assert lb - ld == pytest.approx(K * net_drift(m, x), rel=1e-9, abs=1e-9 * (1 + lb + ld))


@given(rates, rates, rates, st.floats(1.0, 1e4), xs)
def test_scaling_identity(nu, mu, s2, K, x):
    m = PopulationModel.linear(nu, mu, s2)
    lb, ld = intensities(m, K, np.array([x]))
    gap = abs((lb[0] + ld[0]) / K**2 - s2 * x)
    assert gap <= (nu + mu) * x / K * (1 + 1e-9) + 1e-12


@given(rates, rates, rates, pos)
def test_absorption_at_zero(nu, mu, s2, K):
    m = PopulationModel.linear(nu, mu, s2)
    assert birth_intensity(m, K, 0.0) == 0.0 and death_intensity(m, K, 0.0) == 0.0


def test_validate_linear_is_clean(linear):
    rep = validate_model(linear, np.linspace(0, 100, 1001))
    assert rep.violations == []
    assert rep.lipschitz_f == pytest.approx(0.1)


def test_validate_quadratic_birth_flags_x_above_one():
    m = PopulationModel.custom(lambda x: x**2, lambda x: 0 * x, lambda x: x, nu=1.0, mu=0.0)
    rep = validate_model(m, np.linspace(0, 10, 101))
    bad = [v.x for v in rep.violations if v.check == "birth_linear_bound"]
    assert bad and min(bad) > 1.0
    assert all(x > 1.0 for x in bad)


def test_validate_zero_sigma_flags_lower_bound():
    m = PopulationModel.custom(lambda x: x, lambda x: x, lambda x: 0 * x, nu=1.0, mu=1.0, eta_lo=0.5)
    rep = validate_model(m, np.linspace(0, 10, 11))
    bad = [v.x for v in rep.violations if v.check == "sigma2_lower_bound"]
    assert bad == list(np.linspace(1, 10, 10))


def test_validate_lipschitz_certificate():
    m = PopulationModel.custom(lambda x: np.sqrt(x), lambda x: 0 * x, lambda x: x, nu=10.0, mu=0.0)
    rep = validate_model(m, np.linspace(0, 1, 101), lipschitz_f=1.0)
    assert any(v.check == "lipschitz_f" for v in rep.violations)
