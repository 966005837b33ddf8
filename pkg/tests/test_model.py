import numpy as np
import pytest

from cdkf_sched.model import (
    GaussianBelief,
    ModelError,
    ProcessModel,
    RatePlan,
    Schedule,
    Sensor,
    TimeGrid,
    validate_model,
)

from conftest import no_aux, no_aux_traj, scalar_process, scalar_sensor


def test_well_formed_scalar_model_has_no_violations(unit_grid):
    assert validate_model(scalar_process(), no_aux(), [scalar_sensor()], unit_grid, no_aux_traj) == []


def test_indefinite_noise_reported_once(unit_grid):
    bad = Sensor(id=1, q=2, output=lambda xi, t: np.ones((2, 1)),
                 noise_cov=lambda xi, t: np.diag([1.0, -0.1]), jump=lambda xi, u, t: np.zeros(0))
    report = validate_model(scalar_process(), no_aux(), [bad], unit_grid, no_aux_traj)
    assert len(report) == 1
    assert "non-PD noise" in report[0]


def test_wrong_drift_shape_reported_once(unit_grid):
    proc = ProcessModel(n=2, m=2, drift=lambda xi, t: np.zeros((2, 3)), diffusion=lambda xi, t: np.eye(2))
    sensor = Sensor(id=1, q=1, output=lambda xi, t: np.array([[1.0, 0.0]]),
                    noise_cov=lambda xi, t: np.eye(1), jump=lambda xi, u, t: np.zeros(0))
    report = validate_model(proc, no_aux(), [sensor], unit_grid, no_aux_traj)
    assert len(report) == 1
    assert "drift" in report[0]


def test_callback_exception_is_reported_not_raised(unit_grid):
    def boom(xi, t):
        raise RuntimeError("nope")

    proc = ProcessModel(n=1, m=1, drift=boom, diffusion=lambda xi, t: np.eye(1))
    report = validate_model(proc, no_aux(), [scalar_sensor()], unit_grid, no_aux_traj)
    assert any("drift failed" in r for r in report)


def test_sensor_ids_must_be_contiguous(unit_grid):
    report = validate_model(scalar_process(), no_aux(), [scalar_sensor(sid=2)], unit_grid, no_aux_traj)
    assert any("sensor ids" in r for r in report)


def test_time_grid_rejects_unordered_nodes():
    with pytest.raises(ModelError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ModelError):
        TimeGrid(np.array([0.0]))


def test_interval_index_maps_final_node_to_last_interval():
    g = TimeGrid.uniform(0.0, 1.0, 5)
    assert g.interval_index(0.0) == 0
    assert g.interval_index(0.3) == 1
    assert g.interval_index(1.0) == 3


def test_belief_rejects_clearly_negative_covariance():
    with pytest.raises(ModelError):
        GaussianBelief(np.zeros(1), np.array([[-1.0]]))


def test_belief_symmetrizes():
    b = GaussianBelief(np.zeros(2), np.array([[2.0, 1.0], [0.0, 2.0]]))
    np.testing.assert_array_equal(b.cov, b.cov.T)


def test_rate_plan_validation():
    g = TimeGrid.uniform(0.0, 1.0, 3)
    with pytest.raises(ModelError):
        RatePlan(g, np.array([[1.0, -1.0]]))
    with pytest.raises(ModelError):
        RatePlan(g, np.array([[1.0, 1.0, 1.0]]))
    plan = RatePlan.constant(g, [2.0, 0.5])
    assert plan.n_sensors == 2
    np.testing.assert_array_equal(plan.at(0.75), [2.0, 0.5])


def test_schedule_events_order_ties_by_sensor_id():
    s = Schedule((np.array([0.5, 0.7]), np.array([0.1, 0.5])))
    assert s.events() == [(0.1, 2), (0.5, 1), (0.5, 2), (0.7, 1)]
    assert s.counts() == [2, 2]
    with pytest.raises(ModelError):
        Schedule((np.array([0.5, 0.2]),))
