import json

import numpy as np
import pytest

from cdkf_sched.model import validate_model
from cdkf_sched.scenarios import (
    ConfigError,
    build_robot_scenario,
    build_scenario,
    load_config,
    shipped_config_path,
    validate_config,
)

SHIPPED = ["robot", "robot_radiation", "water", "scalar"]


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_build_and_validate(name):
    scen = build_scenario(load_config(name))
    assert validate_model(scen.process, scen.aux, scen.sensors, scen.grid, scen.nominal_aux()) == []


@pytest.mark.parametrize("name", ["robot", "robot_radiation", "water"])
def test_experiment_configs_are_flagged_as_placeholders(name):
    assert "placeholder defaults" in load_config(name)["_note"]


def test_robot_energy_at_charging_peak():
    scen = build_scenario(load_config("robot"))
    xi = scen.xi0.copy()
    fp, fu = scen.aux.rhs(xi, np.zeros(2), 0.0)
    assert fp[0] == pytest.approx(scen.config["c_e"], abs=1e-15)
    np.testing.assert_allclose(fu, 0.0)


def test_robot_noise_at_target_is_minimal():
    cfg = load_config("robot")
    scen = build_scenario(cfg)
    xi = scen.xi0.copy()
    xi[1:3] = cfg["p_p"]
    assert scen.sensors[0].R(xi, 0.0)[0, 0] == pytest.approx(cfg["R_1max"])
    assert scen.sensors[1].R(xi, 0.0)[0, 0] == pytest.approx(cfg["R_2max"])


def test_radiation_without_damage_matches_plain_noise():
    cfg = load_config("robot_radiation")
    plain = build_robot_scenario(cfg, with_radiation=False)
    rad = build_robot_scenario(cfg)
    xi_plain = np.array([40.0, 0.3, -0.2, 1.0])
    xi_rad = np.array([40.0, 0.0, 0.0, 0.3, -0.2, 1.0])
    for s_p, s_r in zip(plain.sensors, rad.sensors):
        assert s_r.R(xi_rad, 0.0)[0, 0] == pytest.approx(s_p.R(xi_plain, 0.0)[0, 0], rel=1e-14)


def test_robot_jumps_spend_energy():
    cfg = load_config("robot")
    scen = build_scenario(cfg)
    np.testing.assert_allclose(scen.sensors[0].g(scen.xi0, np.zeros(2), 0.0, 1), [-cfg["c_1"]])
    np.testing.assert_allclose(scen.sensors[1].g(scen.xi0, np.zeros(2), 0.0, 1), [-cfg["c_2"]])


def test_robot_orderings_are_enforced():
    cfg = dict(load_config("robot"), r_1=12.0, c_2=3.0)
    with pytest.raises(ConfigError) as exc:
        build_scenario(cfg)
    assert len(exc.value.problems) == 2


def test_water_noise_and_fouling():
    cfg = load_config("water")
    scen = build_scenario(cfg)
    assert scen.sensors[0].R(np.zeros(2), 0.0)[0, 0] == pytest.approx(cfg["R_10"])
    xi = np.array([0.4, 0.2])
    fp, _ = scen.aux.rhs(xi, np.zeros(2), 0.0)
    np.testing.assert_allclose(fp, -cfg["alpha_f"] * xi)
    np.testing.assert_allclose(scen.sensors[1].g(xi, np.zeros(2), 0.0, 2), [0.0, cfg["rho_2f"]])


def test_water_orderings_are_enforced():
    with pytest.raises(ConfigError):
        build_scenario(dict(load_config("water"), rho_1f=0.5))


def test_schema_rejects_unknown_scenario_and_bad_types(tmp_path):
    bad = dict(load_config("water"), N="sixty")
    with pytest.raises(ConfigError):
        validate_config(bad)
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        build_scenario({"scenario": "submarine"})


def test_grid_override():
    scen = build_scenario(load_config("water"), grid_n=25)
    assert len(scen.grid) == 25


def test_config_files_are_plain_json():
    for name in SHIPPED:
        json.loads(shipped_config_path(name).read_text())
