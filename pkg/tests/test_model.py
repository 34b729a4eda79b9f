import numpy as np
import pytest

from compmdp.grid import Box
from compmdp.model import (InterconnectionSpec, LinearSubsystem, circulant_coupling, concrete_step, room_network,
                           room_subsystem, validate_interconnection)


def _scalar(**kw):
    base = dict(A=[[0.5]], B=[[1.0]], D=[[0.1]], N=[[0.2]], C1=[[1.0]], C2=[[1.0]],
                state_box=[(0, 1)], input_box=[(0, 1)], internal_box=[(0, 1)])
    base.update(kw)
    return LinearSubsystem(**base)


def test_dimension_checks():
    with pytest.raises(ValueError):
        _scalar(A=[[1.0, 0.0]])
    with pytest.raises(ValueError):
        _scalar(B=[[1.0], [1.0]])
    with pytest.raises(ValueError):
        _scalar(C1=[[1.0, 2.0]])
    with pytest.raises(ValueError):
        _scalar(state_box=[(0, 1), (0, 1)])


def test_room_dynamics_match_closed_form():
    s = room_subsystem(0.1, 0.022, 0.05, 50.0, -1.0, 0.28)
    T, nu, w, z = 20.3, 0.36, 40.1, 0.7
    expected = (1 - 0.2 - 0.022 - 0.05 * nu) * T + 0.05 * 50 * nu + 0.1 * w + 0.022 * -1 + 0.28 * z
    got = concrete_step(s, np.array([T]), np.array([nu]), np.array([w]), np.array([z]))
    assert got[0] == pytest.approx(expected, abs=1e-13)
    assert s.state_matrix([0.6])[0, 0] == pytest.approx(0.748)


def test_room_internal_box_is_neighbour_sum():
    s = room_subsystem(0.1, 0.022, 0.05, 50.0, -1.0, 0.28)
    assert s.internal_box == Box([38.0], [42.0])


def test_circulant_coupling():
    M = circulant_coupling(5)
    np.testing.assert_array_equal(M, M.T)
    np.testing.assert_array_equal(M.sum(axis=1), 2)
    assert M[0, 4] == 1 and M[4, 0] == 1 and M[0, 2] == 0
    with pytest.raises(ValueError):
        circulant_coupling(2)


def test_room_network_well_posed():
    rep = validate_interconnection(room_network(15))
    assert rep.passed
    np.testing.assert_allclose(rep.image_lower, 38.0)
    np.testing.assert_allclose(rep.image_upper, 42.0)


def test_narrow_internal_box_is_ill_posed():
    # each room sees two neighbours, so [19, 21] cannot hold their sum
    s = _scalar(A=[[0.5]], state_box=[(19, 21)], internal_box=[(19, 21)])
    spec = InterconnectionSpec((s, s, s), circulant_coupling(3))
    rep = validate_interconnection(spec)
    assert not rep.passed
    assert rep.slack.min() == pytest.approx(-21.0)


def test_coupling_shape_and_weights_validated():
    s = _scalar()
    with pytest.raises(ValueError):
        InterconnectionSpec((s, s), np.eye(3))
    with pytest.raises(ValueError):
        InterconnectionSpec((s, s), np.eye(2), mu=[1.0, 0.0])


def test_room_network_size_guard():
    with pytest.raises(ValueError):
        room_network(2)


def test_fingerprint_identifies_identical_rooms():
    net = room_network(4)
    assert len({s.fingerprint() for s in net.subsystems}) == 1
    other = room_subsystem(0.1, 0.4, 0.5, 50.0, -1.0, 0.21)
    assert other.fingerprint() != net.subsystems[0].fingerprint()


def test_batched_step_shapes():
    s = _scalar()
    x = np.zeros((7, 1))
    out = concrete_step(s, x, x, x, x)
    assert out.shape == (7, 1)
    with pytest.raises(ValueError):
        concrete_step(s, np.zeros((7, 2)), x, x, x)
