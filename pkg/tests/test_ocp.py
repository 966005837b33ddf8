import numpy as np
import pytest

from cdkf_sched.auglag import FunctionNlp, SolverOptions, gradient_check, minimize_auglag
from cdkf_sched.model import TimeGrid
from cdkf_sched.ocp import DecisionVector, OcpSpec, TranscriptionError, extract_plan, solve_nlp, transcribe
from cdkf_sched.scenarios import build_scenario, load_config

from conftest import no_aux, scalar_process, scalar_sensor


def _scalar_ocp(N=11, w_lambda=0.1, rate_upper=None):
    spec = OcpSpec(running_cost=lambda xi, S, u, lam, eps, t: np.trace(S, axis1=-2, axis2=-1)
                   + w_lambda * np.sum(lam**2, -1),
                   u_lower=np.zeros(0), u_upper=np.zeros(0), rate_upper=rate_upper)
    return transcribe(spec, scalar_process(0.0, 0.5), no_aux(), [scalar_sensor()],
                      TimeGrid.uniform(0.0, 1.0, N), np.eye(1), np.zeros(0))


def _scenario_nlp(name, **overrides):
    scen = build_scenario(dict(load_config(name), **overrides))
    return scen, transcribe(scen.spec, scen.process, scen.aux, scen.sensors, scen.grid, scen.sigma0, scen.xi0)


def test_rollout_has_no_defects():
    nlp = _scalar_ocp()
    x = nlp.pack(nlp.rollout(np.full(1, 2.0), np.zeros(0)))
    assert np.abs(nlp.evaluate(x, derivatives=False).c_eq).max() < 1e-12


def test_robot_layout_and_rollout():
    scen, nlp = _scenario_nlp("robot")
    assert nlp.n == len(scen.grid) * nlp.d
    x = nlp.pack(nlp.initial_guess())
    assert np.abs(nlp.evaluate(x, derivatives=False).c_eq).max() < 1e-10
    dv = nlp.unpack(x)
    assert isinstance(dv, DecisionVector)
    np.testing.assert_array_equal(nlp.pack(dv), x)


def test_zero_rate_rollout_is_euler_prediction():
    nlp = _scalar_ocp(N=11)
    dv = nlp.rollout(np.zeros(1), np.zeros(0))
    # dS/dt = 0.5 without measurements
    np.testing.assert_allclose(dv.sigma[:, 0, 0], 1.0 + 0.5 * nlp.grid.nodes, atol=1e-12)


def test_too_coarse_grid_rejected():
    with pytest.raises(TranscriptionError):
        _scalar_ocp(N=2)


def test_bound_constrained_quadratic():
    nlp = FunctionNlp(lambda x: x[0] ** 2, 1, grad=lambda x: 2 * x, lower=[1.0])
    res = minimize_auglag(nlp, np.array([3.0]))
    assert res.converged
    assert res.x[0] == pytest.approx(1.0, abs=1e-6)


def test_inequality_constrained_quadratic():
    nlp = FunctionNlp(lambda x: (x[0] - 2) ** 2 + (x[1] - 2) ** 2, 2,
                      grad=lambda x: 2 * (x - 2),
                      c_in=lambda x: np.array([x[0] + x[1] - 2.0]),
                      jac_in=lambda x: np.array([[1.0, 1.0]]))
    res = minimize_auglag(nlp, np.zeros(2))
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)
    assert res.multipliers_in[0] == pytest.approx(2.0, rel=1e-3)


def test_equality_constrained_quadratic():
    nlp = FunctionNlp(lambda x: x @ x, 2, grad=lambda x: 2 * x,
                      c_eq=lambda x: np.array([x[0] + 2 * x[1] - 5.0]),
                      jac_eq=lambda x: np.array([[1.0, 2.0]]))
    res = minimize_auglag(nlp, np.zeros(2))
    np.testing.assert_allclose(res.x, [1.0, 2.0], atol=1e-5)


def test_merit_history_is_recorded_per_outer_iteration():
    nlp = FunctionNlp(lambda x: (x[0] - 2) ** 2 + (x[1] - 2) ** 2, 2,
                      c_in=lambda x: np.array([x[0] + x[1] - 2.0]))
    res = minimize_auglag(nlp, np.zeros(2))
    assert len(res.merit_history) == res.outer_iterations
    assert all(after <= before + 1e-10 for before, after in res.merit_history)
    assert res.evaluations > 0


def test_inner_solves_never_raise_the_merit_on_water():
    _, nlp = _scenario_nlp("water", N=15)
    res = solve_nlp(nlp).result
    assert all(after <= before + 1e-10 for before, after in res.merit_history)


def test_solver_options_from_mapping():
    opts = SolverOptions.from_mapping({"feas_tol": 1e-4, "max_outer": 3, "unrelated": 1})
    assert opts.feas_tol == 1e-4 and opts.max_outer == 3


def test_gradient_check_on_quadratic():
    nlp = FunctionNlp(lambda x: 0.5 * x @ x, 5, grad=lambda x: x)
    assert gradient_check(nlp, np.arange(5.0)) < 1e-7


def test_gradient_check_flags_wrong_gradient():
    nlp = FunctionNlp(lambda x: 0.5 * x @ x, 3, grad=lambda x: 2 * x)
    assert gradient_check(nlp, np.ones(3)) > 0.1


def test_gradient_check_at_origin_is_finite():
    nlp = FunctionNlp(lambda x: np.sum(x**4), 4, grad=lambda x: 4 * x**3)
    assert np.isfinite(gradient_check(nlp, np.zeros(4)))


def test_robot_derivatives():
    _, nlp = _scenario_nlp("robot")
    x = nlp.pack(nlp.initial_guess(rate=2.0))
    x += 1e-3 * np.random.default_rng(1).normal(size=x.size)
    x = np.clip(x, nlp.lower, nlp.upper)
    assert gradient_check(nlp, x, n_coords=40) < 1e-4


def test_constant_rate_start_is_improved():
    nlp = _scalar_ocp()
    x0 = nlp.pack(nlp.initial_guess())
    sol = solve_nlp(nlp)
    assert sol.converged
    assert sol.result.f <= nlp.evaluate(x0, derivatives=False).f


def test_optimum_beats_never_measuring():
    nlp = _scalar_ocp()
    never = nlp.evaluate(nlp.pack(nlp.rollout(np.zeros(1), np.zeros(0))), derivatives=False).f
    assert solve_nlp(nlp).result.f <= never


def test_zero_weight_objective_converges_at_start():
    spec = OcpSpec(running_cost=lambda xi, S, u, lam, eps, t: 0.0 * np.sum(lam, -1),
                   u_lower=np.zeros(0), u_upper=np.zeros(0))
    nlp = transcribe(spec, scalar_process(), no_aux(), [scalar_sensor()], TimeGrid.uniform(0.0, 1.0, 6),
                     np.eye(1), np.zeros(0))
    sol = solve_nlp(nlp)
    assert sol.converged
    assert sol.result.f == 0.0
    assert sol.result.inner_iterations == 0


def test_extract_plan_uses_left_nodes():
    nlp = _scalar_ocp(N=4)
    dv = nlp.rollout(np.zeros(1), np.zeros(0))
    dv.lam[:, 0] = [1.0, 2.0, -1e-14, 9.0]
    plan, inputs = extract_plan(dv, nlp.grid)
    np.testing.assert_array_equal(plan.rates, [[1.0, 2.0, 0.0]])
    assert inputs.shape == (3, 0)
