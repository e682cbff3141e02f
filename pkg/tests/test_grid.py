import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cspnpp.exceptions import ConfigurationError, DimensionError
from cspnpp.grid import (AffinityField, AssemblyWeights, DepthGrid, ObjectiveConfig,
                         PropagationConfig, SparseObservations, make_grid, normalized_alpha,
                         normalized_lambda, sigmoid_normalize)


def test_default_config():
    cfg = PropagationConfig()
    assert cfg.kernel_sizes == (3, 5, 7)
    assert cfg.iteration_checkpoints == (3, 6, 9, 12)
    assert (cfg.n_steps, cfg.k_max, cfg.n_neighbors) == (12, 7, 48)


@pytest.mark.parametrize("kernels, iters", [
    ((3, 4), (3,)), ((5, 3), (3,)), ((1, 3), (3,)), ((3,), (6, 3)), ((3,), ()), ((), (3,)),
])
def test_config_rejects_bad_lists(kernels, iters):
    with pytest.raises(ConfigurationError):
        PropagationConfig(kernels, iters)


def test_make_grid_examples():
    g = make_grid(2, 2, 1, 0.0)
    assert g.shape == (2, 2, 1) and np.all(np.asarray(g) == 0.0)
    g = make_grid(1, 1, 3, 5.0)
    assert g.shape == (1, 1, 3) and np.all(np.asarray(g) == 5.0)
    with pytest.raises(DimensionError):
        make_grid(0, 4, 1, 0.0)


def test_grid_is_immutable_and_rejects_nan():
    g = make_grid(2, 2)
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        DepthGrid(np.array([[np.nan]]))


@given(st.integers(0, 3), st.integers(0, 4), st.integers(0, 1),
       st.floats(-1e6, 1e6, allow_nan=False))
def test_cell_round_trip(y, x, c, value):
    g = make_grid(4, 5, 2).with_cell(y, x, c, value)
    assert g[y, x, c] == value


def test_alpha_examples():
    cfg = PropagationConfig()
    w = AssemblyWeights.uniform(1, 1, cfg)
    np.testing.assert_allclose(normalized_alpha(w, (0, 0)), [1 / 3] * 3, rtol=0, atol=1e-15)
    w.alpha_logits[0, 0] = [math.log(3), 0, 0]
    np.testing.assert_allclose(normalized_alpha(w, (0, 0)), [3 / 7, 2 / 7, 2 / 7], atol=1e-15)
    assert normalized_alpha(w, (0, 0))[0] == pytest.approx(0.4285714, abs=1e-7)
    w.alpha_logits[0, 0] = [50, -50, -50]
    a = normalized_alpha(w, (0, 0))
    assert a[0] == pytest.approx(1.0, abs=1e-20) and 0 < a[1] < 1e-20


def test_lambda_examples():
    cfg = PropagationConfig()
    w = AssemblyWeights.uniform(1, 1, cfg)
    np.testing.assert_allclose(normalized_lambda(w, (0, 0), 1), [0.25] * 4, atol=1e-15)
    w.lambda_logits[0, 0, 1] = [math.log(3), 0, 0, 0]
    np.testing.assert_allclose(normalized_lambda(w, (0, 0), 1), [1 / 3, 2 / 9, 2 / 9, 2 / 9],
                               atol=1e-15)
    w.lambda_logits[0, 0, 2] = [-40, -40, 40, -40]
    lam = normalized_lambda(w, (0, 0), 2)
    assert lam[2] == pytest.approx(1.0) and lam.argmax() == 2


@settings(max_examples=200)
@given(hnp.arrays(np.float64, (5,), elements=st.floats(-30, 30)), st.floats(-5, 5))
def test_sigmoid_normalize_properties(logits, shift):
    p = sigmoid_normalize(logits)
    assert np.all(p > 0) and np.all(p < 1) or len(set(logits)) == 1
    assert abs(p.sum() - 1.0) < 1e-12
    # shifting changes the values in general but never the ranking
    q = sigmoid_normalize(logits + shift)
    assert np.argmax(q) == np.argmax(p) or np.isclose(q.max(), q[np.argmax(p)])


def test_shift_changes_values():
    logits = np.array([1.0, 0.0, -1.0])
    assert not np.allclose(sigmoid_normalize(logits), sigmoid_normalize(logits + 2.0))


def test_sparse_observations_ignore_masked_values():
    obs = SparseObservations(np.array([[5.0, np.nan]]), np.array([[True, False]]),
                             np.array([[0.0, 100.0]]))
    assert obs.values[0, 1] == 0.0
    np.testing.assert_array_equal(obs.confidence, [[0.5, 0.0]])


@given(hnp.arrays(np.float64, (3, 3), elements=st.floats(-40, 40)),
       hnp.arrays(bool, (3, 3)))
def test_confidence_in_unit_interval(logits, mask):
    g = SparseObservations(np.ones((3, 3)), mask, logits).confidence
    assert np.all(g >= 0) and np.all(g <= 1)
    assert np.all(g[~mask] == 0)


def test_affinity_field_flags_out_of_image_slots():
    f = AffinityField(np.zeros((4, 4, 8)))
    assert f.k_max == 3
    assert f.valid[0, 0].sum() == 3 and f.valid[1, 1].sum() == 8
    with pytest.raises(DimensionError):
        AffinityField(np.zeros((4, 4, 7)))


def test_weights_shape_check():
    cfg = PropagationConfig()
    with pytest.raises(ConfigurationError):
        AssemblyWeights(np.zeros((2, 2, 3)), np.zeros((2, 2, 3, 3))).check(cfg)
    with pytest.raises(DimensionError):
        AssemblyWeights(np.zeros((2, 2, 3)), np.zeros((2, 3, 3, 4)))


def test_objective_config_budget_range():
    with pytest.raises(ConfigurationError):
        ObjectiveConfig(budget_latency=1.5)
    with pytest.raises(ConfigurationError):
        ObjectiveConfig(budget_memory=0.0)
