import numpy as np
import pytest

from rfrec.comm import DOWNLOAD, UPLOAD
from rfrec.fcf import FcfState, fcf_objective, fcf_round
from rfrec.model import Observations, RatingRow
from rfrec.synthetic import planted_instance


def scalar_obs(r=3.0):
    return Observations.from_rows([RatingRow([0], [r])], 1)


def test_scalar_round_by_hand():
    state = FcfState(np.array([[1.0]]), np.array([[2.0]]), lambda_u=0.1, lambda_v=0.1)
    state, events = fcf_round(state, scalar_obs(), alpha=0.1)
    # u: 1 - 0.1 * (0.2 - 2 * 1 * 2) = 1.38
    assert state.U[0, 0] == pytest.approx(1.38, abs=1e-14)
    # h = (3 - 1.38 * 2) * 1.38; v: 2 - 0.1 * (-2 h + 0.4)
    h = (3 - 1.38 * 2) * 1.38
    assert state.V[0, 0] == pytest.approx(2 - 0.1 * (-2 * h + 0.4), abs=1e-14)
    assert state.last_delta == pytest.approx(abs(0.1 * (-2 * h + 0.4)) / 2.0, rel=1e-12)
    assert [e.direction for e in events] == [UPLOAD, DOWNLOAD]
    assert state.iter == 1


def test_objective_decreases_with_small_step():
    inst = planted_instance(6, 8, 2, scale=1.0, noise=0.1, density=0.7, seed=1)
    obs = inst.data.obs
    rng = np.random.default_rng(0)
    state = FcfState(rng.normal(0, 0.5, (6, 2)), rng.normal(0, 0.5, (2, 8)))
    values = [fcf_objective(state, obs)]
    for _ in range(200):
        fcf_round(state, obs, alpha=0.01)
        values.append(fcf_objective(state, obs))
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] < 0.5 * values[0]


def test_dropout_freezes_absent_users():
    inst = planted_instance(6, 5, 2, seed=2)
    obs = inst.data.obs
    state = FcfState(np.ones((6, 2)), np.ones((2, 5)), dropout_rng=np.random.default_rng(3))
    before = state.U.copy()
    _, events = fcf_round(state, obs, alpha=0.01, dropout_rate=0.5)
    moved = np.any(state.U != before, axis=1)
    assert events[0].participants == moved.sum()
    assert events[1].participants == 6


def test_shape_errors():
    with pytest.raises(ValueError):
        FcfState(np.ones((2, 3)), np.ones((2, 4)))
    state = FcfState(np.ones((2, 1)), np.ones((1, 4)))
    with pytest.raises(ValueError):
        fcf_round(state, scalar_obs(), alpha=0.1)
    with pytest.raises(ValueError):
        fcf_round(FcfState(np.ones((1, 1)), np.ones((1, 1))), scalar_obs(), alpha=0.0)
