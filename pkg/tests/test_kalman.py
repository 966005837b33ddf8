import numpy as np
import pytest
from scipy import linalg

from cdkf_sched.kalman import (
    IllConditionedInnovation,
    ScheduleOutOfRange,
    build_kernel_ssm,
    filter_pass,
    kalman_gain,
    kernel_function,
    predict,
    rts_smooth,
    update,
)
from cdkf_sched.model import GaussianBelief, ModelError, Schedule, TimeGrid
from cdkf_sched.pipeline import dense_gp_posterior

from conftest import no_aux_traj, scalar_process, scalar_sensor


def test_predict_pure_diffusion():
    b = predict(GaussianBelief([3.0], [[0.0]]), scalar_process(0.0, 1.0), no_aux_traj, 0.0, 1.0, 0.01)
    assert b.mean[0] == pytest.approx(3.0, abs=1e-12)
    assert b.cov[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_predict_linear_decay():
    b = predict(GaussianBelief([0.0], [[1.0]]), scalar_process(-1.0, 0.0), no_aux_traj, 0.0, 1.0, 0.01)
    assert b.cov[0, 0] == pytest.approx(np.exp(-2.0), abs=1e-6)


def test_predict_matern_matches_fine_step():
    process, _, _ = build_kernel_ssm("matern32", 0.8, 1.0)
    b0 = GaussianBelief(np.zeros(2), np.zeros((2, 2)))
    coarse = predict(b0, process, no_aux_traj, 0.0, 1.0, 0.01)
    fine = predict(b0, process, no_aux_traj, 0.0, 1.0, 1e-4)
    np.testing.assert_allclose(coarse.cov, fine.cov, atol=1e-6)


def test_predict_rejects_reversed_interval():
    with pytest.raises(ValueError):
        predict(GaussianBelief([0.0], [[1.0]]), scalar_process(), no_aux_traj, 1.0, 0.0, 0.1)


def test_gain_scalar_and_diagonal():
    assert kalman_gain(np.eye(1), np.eye(1), np.eye(1))[0, 0] == pytest.approx(0.5)
    K = kalman_gain(2.0 * np.eye(2), np.array([[1.0, 0.0]]), np.eye(1))
    np.testing.assert_allclose(K.ravel(), [2.0 / 3.0, 0.0], atol=1e-15)


def test_gain_defining_identity():
    rng = np.random.default_rng(4)
    M = rng.normal(size=(3, 3))
    S = M @ M.T + 0.5 * np.eye(3)
    K = kalman_gain(S, np.eye(3), np.eye(3))
    np.testing.assert_allclose(K @ (S + np.eye(3)), S, atol=1e-10)


def test_gain_refuses_singular_innovation():
    with pytest.raises(IllConditionedInnovation):
        kalman_gain(np.eye(1), np.ones((2, 1)), 1e-14 * np.eye(2))


def test_update_scalar():
    b = update(GaussianBelief([0.0], [[1.0]]), scalar_sensor(), None, 0.0, [1.0])
    assert b.mean[0] == pytest.approx(0.5)
    assert b.cov[0, 0] == pytest.approx(0.5)


def test_update_with_huge_noise_ignores_measurement():
    b0 = GaussianBelief([0.2], [[1.0]])
    b = update(b0, scalar_sensor(r=1e12), None, 0.0, [5.0])
    assert abs(b.mean[0] - 0.2) < 1e-6
    assert abs(b.cov[0, 0] - 1.0) < 1e-6


def test_update_with_zero_output_leaves_belief_unchanged():
    b0 = GaussianBelief([0.3, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    sensor = scalar_sensor()
    sensor = type(sensor)(id=1, q=1, output=lambda xi, t: np.zeros((1, 2)),
                          noise_cov=lambda xi, t: np.eye(1), jump=sensor.jump)
    b = update(b0, sensor, None, 0.0, [4.0])
    np.testing.assert_array_equal(b.mean, b0.mean)
    np.testing.assert_array_equal(b.cov, b0.cov)


def _two_sensor_setup():
    process, P_inf, H = build_kernel_ssm("matern32", 1.0, 1.0)
    s1 = scalar_sensor(sid=1)
    s1 = type(s1)(id=1, q=1, output=lambda xi, t: H, noise_cov=lambda xi, t: np.array([[0.3]]), jump=s1.jump)
    s2 = type(s1)(id=2, q=1, output=lambda xi, t: np.array([[0.0, 1.0]]),
                  noise_cov=lambda xi, t: np.array([[0.7]]), jump=s1.jump)
    return process, P_inf, [s1, s2]


def test_empty_schedule_equals_prediction(unit_grid):
    process = scalar_process(-0.5, 1.0)
    prior = GaussianBelief([1.0], [[0.2]])
    traj = filter_pass(process, [scalar_sensor()], no_aux_traj, Schedule.empty(1), [[]], prior, unit_grid)
    assert all(e.event == "predicted" for e in traj.entries)
    step = float(unit_grid.steps.min()) / 10.0
    ref = predict(prior, process, no_aux_traj, 0.0, 1.0, step)
    np.testing.assert_allclose(traj.covs()[-1], ref.cov, atol=1e-12)
    np.testing.assert_allclose(traj.means()[-1], ref.mean, atol=1e-12)


def test_event_at_start_updates_prior(unit_grid):
    prior = GaussianBelief([0.0], [[1.0]])
    traj = filter_pass(scalar_process(), [scalar_sensor()], no_aux_traj, Schedule(([0.0],)), [[1.0]], prior,
                       unit_grid)
    first = traj.posterior()[0]
    assert first.time == 0.0
    assert first.belief.cov[0, 0] == pytest.approx(0.5)
    assert first.belief.mean[0] == pytest.approx(0.5)


def test_simultaneous_updates_match_stacked_update(unit_grid):
    process, P_inf, sensors = _two_sensor_setup()
    prior = GaussianBelief(np.zeros(2), P_inf)
    t = 0.45
    traj = filter_pass(process, sensors, no_aux_traj, Schedule(([t], [t])), [[0.8], [-0.4]], prior, unit_grid)
    after = [e for e in traj.entries if e.time == t]
    pred = after[0].belief
    C = np.vstack([sensors[0].C(None, t, 2), sensors[1].C(None, t, 2)])
    R = linalg.block_diag(0.3, 0.7)
    K = pred.cov @ C.T @ np.linalg.inv(C @ pred.cov @ C.T + R)
    mean = pred.mean + K @ (np.array([0.8, -0.4]) - C @ pred.mean)
    cov = pred.cov - K @ C @ pred.cov
    np.testing.assert_allclose(after[-1].belief.mean, mean, atol=1e-8)
    np.testing.assert_allclose(after[-1].belief.cov, cov, atol=1e-8)


def test_event_outside_horizon_rejected(unit_grid):
    with pytest.raises(ScheduleOutOfRange):
        filter_pass(scalar_process(), [scalar_sensor()], no_aux_traj, Schedule(([1.5],)), [[0.0]],
                    GaussianBelief([0.0], [[1.0]]), unit_grid)


def test_smoother_without_measurements_equals_filter(unit_grid):
    prior = GaussianBelief([1.0], [[0.5]])
    process = scalar_process(-1.0, 2.0)
    traj = filter_pass(process, [scalar_sensor()], no_aux_traj, Schedule.empty(1), [[]], prior, unit_grid)
    sm = rts_smooth(traj, process, no_aux_traj)
    np.testing.assert_allclose(sm.means, sm.filtered_means, atol=1e-8)
    np.testing.assert_allclose(sm.covs, sm.filtered_covs, atol=1e-8)


def test_smoother_terminal_node_equals_filter(unit_grid):
    process, P_inf, sensors = _two_sensor_setup()
    traj = filter_pass(process, sensors, no_aux_traj, Schedule(([0.2, 0.9], [0.5])), [[0.1, 0.3], [1.0]],
                       GaussianBelief(np.zeros(2), P_inf), unit_grid)
    sm = rts_smooth(traj, process, no_aux_traj)
    np.testing.assert_array_equal(sm.means[-1], sm.filtered_means[-1])
    np.testing.assert_array_equal(sm.covs[-1], sm.filtered_covs[-1])


@pytest.mark.parametrize("kind", ["exponential", "matern32"])
def test_smoother_matches_dense_gp(kind):
    rng = np.random.default_rng(11)
    times = np.sort(rng.uniform(0.0, 2.0, 5))
    y = rng.normal(size=5)
    process, P_inf, H = build_kernel_ssm(kind, 0.6, 1.4)
    sensor = scalar_sensor()
    sensor = type(sensor)(id=1, q=1, output=lambda xi, t: H, noise_cov=lambda xi, t: np.array([[0.2]]),
                          jump=sensor.jump)
    traj = filter_pass(process, [sensor], no_aux_traj, Schedule((times,)), [y],
                       GaussianBelief(np.zeros(process.n), P_inf), TimeGrid(times), step=1e-3)
    sm = rts_smooth(traj, process, no_aux_traj, step=1e-3)
    m_gp, v_gp = dense_gp_posterior(kernel_function(kind, 0.6, 1.4), times, y, 0.2)
    np.testing.assert_allclose((sm.means @ H.T).ravel(), m_gp, atol=1e-8)
    np.testing.assert_allclose(np.einsum("ij,kjl,il->k", H, sm.covs, H), v_gp, atol=1e-8)


@pytest.mark.parametrize("kind", ["exponential", "matern32"])
def test_kernel_realization_is_stationary(kind):
    process, P_inf, H = build_kernel_ssm(kind, 1.0, 1.0)
    A, L = process.A(np.zeros(0), 0.0), process.sigma(np.zeros(0), 0.0)
    np.testing.assert_allclose(A @ P_inf + P_inf @ A.T + L @ L.T, 0.0, atol=1e-12)
    assert (H @ P_inf @ H.T)[0, 0] == pytest.approx(1.0)


def test_kernel_parameters_exponential_and_matern():
    process, _, _ = build_kernel_ssm("exponential", 1.0, 1.0)
    assert process.A(np.zeros(0), 0.0)[0, 0] == pytest.approx(-1.0)
    L = process.sigma(np.zeros(0), 0.0)
    assert (L @ L.T)[0, 0] == pytest.approx(2.0)
    process, _, _ = build_kernel_ssm("matern32", 1.0, 1.0)
    A = process.A(np.zeros(0), 0.0)
    lam = np.sqrt(3.0)
    np.testing.assert_allclose(A, [[0.0, 1.0], [-lam**2, -2 * lam]], atol=1e-15)


def test_kernel_rejects_bad_hyperparameters():
    with pytest.raises((ValueError, ModelError)):
        build_kernel_ssm("matern32", -1.0, 1.0)
    with pytest.raises((ValueError, ModelError)):
        build_kernel_ssm("exponential", 1.0, 0.0)


def test_smoother_handles_event_next_to_grid_node():
    grid = TimeGrid.uniform(0.0, 1.0, 41)
    t = grid.nodes[12] + 1e-15
    traj = filter_pass(scalar_process(-1.0, 1.0), [scalar_sensor()], no_aux_traj, Schedule(([t],)), [[0.3]],
                       GaussianBelief([0.0], [[1.0]]), grid)
    sm = rts_smooth(traj, scalar_process(-1.0, 1.0), no_aux_traj)
    assert np.all(np.isfinite(sm.covs))
