import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from compmdp.estimators import FiniteAbstraction, GridQuantizer, SafetyController
from compmdp.grid import Box


def test_quantizer_params_and_clone():
    q = GridQuantizer(cells_per_dim=4, bounds=[(0.0, 1.0)])
    assert q.get_params() == {"cells_per_dim": 4, "bounds": [(0.0, 1.0)], "extend": False}
    c = clone(q).set_params(cells_per_dim=8)
    assert c.cells_per_dim == 8 and q.cells_per_dim == 4
    with pytest.raises(NotFittedError):
        q.transform([0.5])


def test_quantizer_fit_transform_predict():
    q = GridQuantizer(cells_per_dim=4, bounds=[(0.0, 1.0)]).fit(None)
    np.testing.assert_allclose(q.transform([0.1, 0.3, 0.99]).ravel(), [0.125, 0.375, 0.875])
    np.testing.assert_array_equal(q.predict([0.1, 0.3, 0.99]), [0, 1, 3])
    data = np.array([[0.0, -1.0], [2.0, 1.0]])
    q2 = GridQuantizer(cells_per_dim=2).fit(data)
    np.testing.assert_allclose(q2.fit_transform(data), [[0.5, -0.5], [1.5, 0.5]])
    q3 = GridQuantizer(cells_per_dim=2).fit(Box.from_pairs([(0.0, 1.0)]))
    assert q3.n_features_in_ == 1


def test_quantizer_extend_flags_outside():
    q = GridQuantizer(cells_per_dim=4, bounds=[(0.0, 1.0)], extend=True).fit(None)
    assert q.predict([1.5])[0] == -1
    with pytest.raises(ValueError, match="features"):
        q.transform([[0.1, 0.2]])


@pytest.fixture(scope="module")
def abstraction(room):
    return FiniteAbstraction(state_cells=40, input_cells=5).fit(room)


def test_abstraction_rows_are_stochastic(abstraction):
    assert abstraction.report_.ok
    rows = abstraction.transition_rows([0, 10], [0, 4])
    assert rows.shape == (2, 41)
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)
    assert abstraction.predict([19.01, 20.99]).tolist() == [0, 39]
    with pytest.raises(TypeError):
        FiniteAbstraction().fit("room")


def test_controller_on_abstraction(abstraction):
    ctl = SafetyController(horizon=5, mode="nominal", nominal_internal=0).fit(abstraction)
    u = ctl.predict([19.2, 20.8])
    assert u[0] >= u[1]
    assert 0.0 < ctl.score([20.0]) <= 1.0
    assert clone(ctl).get_params()["horizon"] == 5
    late = clone(ctl).set_params(step=4).fit(abstraction)
    assert late.score([20.0]) >= ctl.score([20.0])
