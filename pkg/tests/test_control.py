import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalimit.control import (
    ControlProblem, ControlProblemK, argmax_hamiltonian, build_generator, control_convergence_stats,
    perturbation_battery, solve_and_verify_continuous, solve_and_verify_K, toy_problem, toy_problem_K,
)
from scalimit.errors import DomainError
from scalimit.model import ScalingContext, intensities
from scalimit.simulate import zero_policy
from scalimit.toy import ToyParams, solve_ode_triple, value_function

P = ToyParams.figure1()


def zero(x, a):
    return np.zeros(np.broadcast(x, a).shape)


def ident(x):
    return np.asarray(x, float)


def numeric(problem):
    """Same problem without the analytic quadratic shortcut."""
    kw = dict(problem.__dict__, quadratic=None)
    return type(problem)(**kw)


def trivial_K(linear, K=4, x0=5.0):
    return ControlProblemK(linear, ScalingContext(K, x0, 0.1), zero, zero, 0.1, 1.0, ident)


def test_linear_objective_hits_upper_bound(linear):
    prob = ControlProblemK(linear, ScalingContext(4, 5.0, 0.1), zero, lambda x, a: x * a, 0.1, 1.5, ident)
    assert argmax_hamiltonian(prob, 2.0, 0.3) == pytest.approx(1.5, abs=1e-9)
    assert argmax_hamiltonian(prob, 2.0, -0.3) == pytest.approx(-0.1, abs=1e-9)


def test_toy_interior_maximiser():
    K, x, z = 8, 40.0, 0.05
    prob = toy_problem_K(P, K)
    assert argmax_hamiltonian(prob, x, z) == pytest.approx(z * K / x, rel=1e-12)
    assert argmax_hamiltonian(prob, x, 100.0) == 2.0
    assert argmax_hamiltonian(numeric(prob), x, z) == pytest.approx(z * K / x, abs=1e-9)


def test_concave_cost_peak_at_zero_z(linear):
    prob = ControlProblemK(linear, ScalingContext(4, 5.0, 0.1), lambda x, a: -(a - 0.3) ** 2, lambda x, a: x * a,
                           0.2, 1.0, ident)
    assert argmax_hamiltonian(prob, 3.0, 0.0) == pytest.approx(0.3, abs=1e-9)


def test_zero_state_and_nonfinite(linear):
    prob = toy_problem_K(P, 8)
    assert argmax_hamiltonian(prob, 0.0, 3.0) == 0.0
    bad = ControlProblemK(linear, ScalingContext(4, 5.0, 0.1), lambda x, a: np.log(a), zero, 0.1, 1.0, ident)
    with np.errstate(invalid="ignore", divide="ignore"), pytest.raises(DomainError):
        argmax_hamiltonian(bad, 1.0, 0.0)


@settings(deadline=None, max_examples=50)
@given(st.floats(0.5, 300.0), st.floats(-30.0, 30.0), st.sampled_from([4, 16, 64]))
def test_quadratic_matches_golden(x, z, K):
    prob = toy_problem_K(P, K)
    a1 = argmax_hamiltonian(prob, x, z / K)
    a2 = argmax_hamiltonian(numeric(prob), x, z / K)
    f1 = prob.cK(x, a1) + z / K * prob.hK(x, a1)
    f2 = prob.cK(x, a2) + z / K * prob.hK(x, a2)
    # golden section resolves the value to rounding, the location only to ~sqrt(eps)
    assert f2 == pytest.approx(f1, rel=1e-12, abs=1e-9)
    assert a1 == pytest.approx(a2, abs=1e-6)


def test_zero_generator_from_zero_pair(linear):
    gen = build_generator(trivial_K(linear))
    x = np.linspace(0, 10, 11)
    assert np.all(gen.g_d(x, 0 * x, 0 * x + 0.4) == 0) and np.all(gen.g_b(x, x, x) == 0)
    assert gen.lipschitz_L == 0.0


def test_birth_driver_is_identically_zero():
    gen = build_generator(toy_problem_K(P, 16))
    x = np.linspace(0, 200, 50)
    assert np.all(gen.g_b(x, x, x) == 0.0)


def test_envelope_property():
    K, x, z = 16, 50.0, 0.02
    prob = toy_problem_K(P, K)
    gen = build_generator(prob)
    _, ld = intensities(P.model, K, np.array([x]))
    a = argmax_hamiltonian(prob, x, z)
    for d in (1e-3, 1e-4):
        rem = gen.g_d(x, 0.0, z + d) - gen.g_d(x, 0.0, z) - d * prob.hK(x, a) / ld[0]
        assert rem == pytest.approx(d * d * K * K / (2 * ld[0]), rel=1e-5)


def test_discrete_generator_value_at_argmax():
    K, x, z = 8, 30.0, 0.01
    prob = toy_problem_K(P, K)
    a = argmax_hamiltonian(prob, x, z)
    _, ld = intensities(P.model, K, np.array([x]))
    assert build_generator(prob).g_d(x, 0.0, z) == pytest.approx((prob.cK(x, a) + z * prob.hK(x, a)) / ld[0])


@settings(deadline=None, max_examples=30)
@given(st.floats(1.0, 200.0), st.floats(-1.0, 1.0))
def test_continuous_generator_closed_form(x, frac):
    z = frac * 0.1 * x
    g = build_generator(numeric(toy_problem(P)))
    assert g(x, 0.0, z) == pytest.approx(z * z / (2 * P.sigma2 * x), abs=1e-8)


def test_certificate(linear):
    cert = toy_problem_K(P, 8).certificate(np.linspace(0, 200, 101))
    assert cert["min_death_rate"] >= 0
    assert cert["lipschitz_z"] > 0 and np.isfinite(cert["C_hat"])


def test_battery_shape():
    names = [n for n, _, _ in perturbation_battery(0.2, 2.0)]
    assert names[:4] == ["opt+0.1", "opt-0.1", "opt+0.5", "opt-0.5"] and len(names) == 9


def test_verify_trivial_discrete(linear, within):
    rep = solve_and_verify_K(trivial_K(linear), n_paths=2000, seed=1)
    within(rep.Y0, rep.mc_optimal["mean"], rep.mc_optimal["se"])
    assert rep.passed
    assert {p["mean"] for p in rep.perturbations} == {rep.mc_optimal["mean"]}


def test_verify_trivial_continuous(linear):
    prob = ControlProblem(linear, 5.0, 0.1, zero, zero, 0.1, 1.0, ident)
    rep = solve_and_verify_continuous(prob, {"x_max": 20.0, "nx": 400, "dt": 1e-3}, n_paths=2000, dt_mc=1e-3)
    assert rep.Y0 == pytest.approx(5.0 * np.exp(0.01), rel=1e-5)
    assert rep.passed and rep.to_dict()["pass"] is True


@pytest.mark.slow
def test_verify_toy_discrete():
    rep = solve_and_verify_K(toy_problem_K(P, 16), n_paths=10_000, seed=4)
    vk = value_function(solve_ode_triple(P, 16), P.ctx(16).x_start)
    assert rep.passed
    assert abs(rep.Y0 - vk) <= 1e-3 * abs(vk)
    opt = rep.mc_optimal
    adv = next(p for p in rep.perturbations if p["name"] == "opt+0.5")
    assert opt["mean"] - adv["mean"] > 3 * np.hypot(opt["se"], adv["se"])


@pytest.mark.slow
def test_verify_toy_continuous():
    rep = solve_and_verify_continuous(toy_problem(P), n_paths=10_000, seed=4)
    v0 = value_function(solve_ode_triple(P), P.x0)
    assert rep.passed
    assert abs(rep.Y0 - v0) <= 1e-3 * abs(v0)
    opt = rep.mc_optimal
    for p in rep.perturbations:
        if p["name"].startswith("const"):
            assert opt["mean"] - p["mean"] > 3 * np.hypot(opt["se"], p["se"]), p["name"]


def test_control_convergence_trivial(linear):
    tab = control_convergence_stats(linear, 5.0, 0.1, [2, 4], lambda K: zero_policy(),
                                    lambda t, x: 0 * x, zero, 500, dt=1e-3)
    assert np.all(tab["int_alpha_err"] == 0) and np.all(tab["int_alpha2_err"] == 0)
