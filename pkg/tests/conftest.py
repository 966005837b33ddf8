import numpy as np
import pytest

from cdkf_sched.model import AuxModel, ProcessModel, Sensor, TimeGrid


def _empty(x, u, t):
    return np.zeros(np.shape(x)[:-1] + (0,))


def scalar_process(a=0.0, s2=1.0):
    return ProcessModel(n=1, m=1, drift=lambda xi, t: np.array([[a]]),
                        diffusion=lambda xi, t: np.array([[np.sqrt(s2)]]))


def scalar_sensor(c=1.0, r=1.0, sid=1, jump=_empty):
    return Sensor(id=sid, q=1, output=lambda xi, t: np.array([[c]]),
                  noise_cov=lambda xi, t: np.array([[r]]), jump=jump)


def no_aux():
    return AuxModel(n_xi=0, n_p=0, m_u=0, f_p=_empty, f_u=_empty)


def no_aux_traj(t):
    return np.zeros(0)


def energy_aux(decay=1.0, cost=0.5):
    """One perturbed state ``e`` with ``de/dt = -decay * e`` and a jump of ``-cost`` per event."""
    aux = AuxModel(n_xi=1, n_p=1, m_u=0, f_p=lambda xi, u, t: -decay * xi[..., :1], f_u=_empty)

    def jump(xi, u, t):
        return -cost * np.ones(np.shape(xi)[:-1] + (1,))

    return aux, jump


@pytest.fixture
def unit_grid():
    return TimeGrid.uniform(0.0, 1.0, 11)
