import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalimit.toy import (
    OdeTriple, ToyParams, admissibility_horizon, closed_form_a, figure1_experiment, figure2_experiment,
    optimal_control, optimal_control_K, solve_ode_triple, value_function,
)


def zero_gamma(p):
    return ToyParams(p.nu, p.mu, p.sigma2, 0.0, p.x_tilde, p.x0, p.T)


def test_terminal_conditions_exact(fig1):
    for K in (None, 4, 64):
        tr = solve_ode_triple(fig1, K)
        assert (tr.a[-1], tr.b[-1], tr.c[-1]) == (-1.0, 40.0, -400.0)


def test_zero_gamma_is_identically_zero(fig1):
    p = zero_gamma(fig1)
    tr = solve_ode_triple(p, 8)
    assert not np.any(tr.a) and not np.any(tr.b) and not np.any(tr.c)
    assert value_function(tr, 50.0) == 0.0
    assert optimal_control_K(tr, 8, 0.05, 30.0) == 0.0
    assert admissibility_horizon(p, 8) == p.T


def test_a0_matches_closed_form(fig1):
    a0 = solve_ode_triple(fig1).a[0]
    assert a0 == pytest.approx(float(closed_form_a(fig1, 0.0)), abs=1e-9)
    assert abs(a0 - (-0.848745)) < 5e-6


def test_a_is_K_independent(fig1):
    a = solve_ode_triple(fig1).a
    for K in (4, 32, 256):
        assert np.array_equal(solve_ode_triple(fig1, K).a, a)


def test_bc_converge_first_order(fig1):
    cont = solve_ode_triple(fig1)
    gaps = []
    for K in (8, 16, 32, 64, 128, 256):
        tr = solve_ode_triple(fig1, K)
        gaps.append(max(np.max(np.abs(tr.b - cont.b)), np.max(np.abs(tr.c - cont.c))))
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    assert np.all(np.abs(ratios - 0.5) < 0.05)


def test_rk4_order(fig1):
    vals = [np.array(solve_ode_triple(fig1, 16, fig1.T / n).at(0.0)) for n in (5, 10, 20)]
    d1, d2 = np.abs(vals[0] - vals[1]), np.abs(vals[1] - vals[2])
    assert np.all(d1 / d2 > 12)


def test_value_at_zero_is_c(fig1):
    tr = solve_ode_triple(fig1, 16)
    assert value_function(tr, 0.0) == tr.c[0]


def test_controls_vanish_at_zero(fig1):
    tr = solve_ode_triple(fig1, 16)
    assert optimal_control_K(tr, 16, 0.03, 0.0) == 0.0
    assert optimal_control(tr, 0.03, 0.0) == 0.0


def test_synthetic_triple_control():
    g = np.linspace(0, 1, 3)
    tr = OdeTriple(g, np.full(3, -0.7), np.zeros(3), np.zeros(3))
    assert optimal_control(tr, 0.4, np.array([1.0, 5.0])) == pytest.approx([1.4, 1.4])


@settings(deadline=None, max_examples=30)
@given(st.floats(1.0, 200.0), st.floats(0.0, 0.1))
def test_discrete_control_tends_to_limit(x, t):
    p = ToyParams.figure1()
    cont = solve_ode_triple(p)
    errs = [abs(optimal_control_K(solve_ode_triple(p, K), K, t, x) - optimal_control(cont, t, x)) for K in (32, 64)]
    assert errs[1] <= 0.5 * errs[0] * 1.1 + 1e-12


def test_control_is_minus_gradient_over_x(fig1):
    tr = solve_ode_triple(fig1)
    h, x = 1e-3, 50.0
    du = (value_function(tr, x + h) - value_function(tr, x - h)) / (2 * h)
    assert optimal_control(tr, 0.0, x) == pytest.approx(-du / x, abs=1e-8)


def test_admissibility_horizons(fig1):
    assert admissibility_horizon(fig1) >= 0.1
    big = ToyParams(fig1.nu, fig1.mu, fig1.sigma2, 1.0, 20.0, fig1.x0, fig1.T)
    assert 2 * big.gamma * big.x_tilde >= big.sigma2
    assert admissibility_horizon(big, 16) == 0.0


def test_figure1_first_order_rate(fig1):
    tab = figure1_experiment(fig1, [8, 16, 32, 64, 128])
    err = tab["abs_err"]
    assert np.all(np.diff(err) < 0)
    assert np.all(np.abs(err[1:] / err[:-1] - 0.5) <= 0.1)


def test_figure1_zero_gamma(fig1):
    tab = figure1_experiment(zero_gamma(fig1), [4, 8], bsde_K_max=8, mc_K_max=8, n_paths=200)
    for col in ("V0K_ode", "Y0K_bsde", "J0K_mc", "V0_cont"):
        assert np.all(tab[col] == 0.0)


def test_figure2_zero_gamma(fig1):
    res = figure2_experiment(zero_gamma(fig1), [4], 0.1, 300, dt=1e-3)
    assert np.all(res.samples[4] == 0.0) and np.all(res.reference == 0.0)
    assert res.table["ks_stat"][0] == 0.0


def test_figure2_writes_samples(fig1, tmp_path):
    res = figure2_experiment(fig1, [4], 0.05, 50, dt=1e-3)
    names = res.write(tmp_path)
    assert "figure2_alpha_K4.csv" in names and "figure2_X_limit.csv" in names
    lines = (tmp_path / "figure2_alpha_K4.csv").read_text().splitlines()
    assert lines[0] == "path_id,alpha_value" and len(lines) == 51


def test_assumption_warnings_reported(fig1):
    assert len(fig1.assumption_warnings()) == 2
