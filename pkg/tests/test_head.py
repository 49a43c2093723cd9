import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bayes_sl import tensor as T
from bayes_sl.errors import DataError, DimensionError
from bayes_sl.head import (GaussianPrediction, HeadConfig, MixtureDistribution, class_probabilities,
                           gaussian_nll, mixture_cll, reparameterized_sample, split_statistics)
from bayes_sl.tensor import Tensor

from oracles import finite_difference, mixture_cll_loops, rel_err

finite = st.floats(-30, 30, allow_nan=False)


def gp(mu, sigma):
    return GaussianPrediction(Tensor(np.asarray(mu, float)), Tensor(np.asarray(sigma, float)))


def test_split_zero_logvar_gives_unit_sigma():
    pred = split_statistics(Tensor(np.array([[0.3], [0.0]])), axis=0)
    assert pred.mu.data[0, 0] == 0.3
    assert pred.sigma.data[0, 0] == 1.0


def test_split_two_ln2_gives_sigma_two():
    pred = split_statistics(Tensor(np.array([1.0, 2 * math.log(2)])), axis=0)
    assert pred.sigma.data[0] == pytest.approx(2.0, rel=1e-15)


def test_split_batched_channel_axis():
    raw = np.random.default_rng(0).normal(size=(2, 6, 3, 3))
    pred = split_statistics(Tensor(raw), axis=1)
    np.testing.assert_array_equal(pred.mu.data, raw[:, :3])
    np.testing.assert_allclose(pred.sigma.data, np.exp(raw[:, 3:] / 2))


def test_split_odd_extent_raises():
    with pytest.raises(DimensionError):
        split_statistics(Tensor(np.ones((3, 2))), axis=0)


def test_constant_sigma_bypasses_split():
    raw = Tensor(np.ones((4, 1)))
    pred = split_statistics(raw, constant_sigma=1.0)
    assert pred.mu is raw
    assert np.all(pred.sigma.data == 1.0)


@given(hnp.arrays(np.float64, (2, 4), elements=st.floats(-1e6, 1e6)))
def test_sigma_positive_finite_for_any_logvar(raw):
    pred = split_statistics(Tensor(raw), axis=0)
    assert np.all(pred.sigma.data > 0) and np.all(np.isfinite(pred.sigma.data))


def test_reparameterization_examples():
    pred = gp([1.0], [0.5])
    assert reparameterized_sample(pred, [0.0]).data[0] == 1.0
    assert reparameterized_sample(pred, [-2.0]).data[0] == 0.0
    tiny = gp([1.0], [1e-12])
    assert reparameterized_sample(tiny, [5.0]).data[0] == pytest.approx(1.0)


def test_reparameterization_shape_check():
    with pytest.raises(DimensionError):
        reparameterized_sample(gp([1.0, 2.0], [1.0, 1.0]), [0.0])


def test_reparameterization_moments():
    z = np.random.default_rng(0).standard_normal(10**5)
    y = reparameterized_sample(gp(np.ones(10**5), np.full(10**5, 0.5)), z).data
    assert abs(y.mean() - 1.0) < 0.01
    assert abs(y.std() - 0.5) < 0.005


def test_reparameterization_differentiable_in_mu_and_sigma():
    mu = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    sigma = Tensor(np.array([0.5, 0.25]), requires_grad=True)
    z = np.array([0.3, -1.2])
    T.backward(T.tsum(reparameterized_sample(GaussianPrediction(mu, sigma), z)))
    np.testing.assert_array_equal(mu.grad, 1.0)
    np.testing.assert_array_equal(sigma.grad, z)


def test_class_probabilities_examples():
    assert np.allclose(class_probabilities(Tensor(np.zeros((4, 2))), axis=0).data, 0.25)
    p = class_probabilities(Tensor(np.array([50.0, 0.0, 0.0])), axis=0).data
    assert p[1:].sum() < 1e-20  # 1 - 1e-20 is not representable; check the complement


@given(hnp.arrays(np.float64, (3, 5), elements=finite), hnp.arrays(np.float64, (3, 5), elements=finite),
       hnp.arrays(np.float64, (3, 5), elements=st.floats(-5, 5)))
def test_softmax_of_sample_is_simplex(mu, logvar, z):
    pred = split_statistics(Tensor(np.concatenate([mu, logvar])), axis=0)
    p = class_probabilities(reparameterized_sample(pred, z), axis=0).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=0), 1.0)


def test_nll_closed_forms():
    base = 0.5 * math.log(2 * math.pi)
    assert gaussian_nll(gp([0.3], [1.0]), [0.3]).item() == pytest.approx(0.918939, abs=1e-6)
    assert gaussian_nll(gp([0.3], [1.0]), [1.3]).item() == pytest.approx(base + 0.5, abs=1e-15)


def test_nll_minimized_at_sigma_equal_residual():
    r = 0.37
    grid = np.linspace(0.05, 2.0, 3901)
    values = [gaussian_nll(gp([0.0], [s]), [r]).item() for s in grid]
    assert grid[int(np.argmin(values))] == pytest.approx(r, abs=1e-3)


def test_nll_gradient_in_mu():
    rng = np.random.default_rng(0)
    mu, sigma, y = rng.normal(size=5), rng.uniform(0.3, 2, size=5), rng.normal(size=5)
    m = Tensor(mu.copy(), requires_grad=True)
    T.backward(gaussian_nll(GaussianPrediction(m, Tensor(sigma)), y))
    np.testing.assert_allclose(m.grad, (mu - y) / sigma**2 / 5, rtol=1e-12)
    (fd,) = finite_difference(lambda: gaussian_nll(gp(mu, sigma), y).item(), [mu])
    assert rel_err(m.grad, fd) < 1e-4


def test_nll_shape_check():
    with pytest.raises(DimensionError):
        gaussian_nll(gp([0.0, 1.0], [1.0, 1.0]), [0.0])


def test_mixture_cll_examples():
    one = MixtureDistribution(np.array([[[1.0], [0.0]]]))
    assert mixture_cll(one, np.array([0])) == 0.0
    uniform = MixtureDistribution(np.full((3, 4, 5), 0.25))
    assert mixture_cll(uniform, np.zeros(5, int)) == pytest.approx(math.log(4))
    two = MixtureDistribution(np.array([[[0.9], [0.1]], [[0.1], [0.9]]]))
    assert mixture_cll(two, np.array([0])) == pytest.approx(0.6931, abs=1e-4)


def test_mixture_cll_floor_and_label_range():
    zero = MixtureDistribution(np.array([[[0.0], [1.0]]]))
    assert mixture_cll(zero, np.array([0])) == pytest.approx(-math.log(1e-12))
    with pytest.raises(DataError):
        mixture_cll(zero, np.array([2]))
    with pytest.raises(DimensionError):
        mixture_cll(zero, np.array([0, 1]))


@given(st.integers(1, 6), st.integers(2, 4), st.integers(1, 6), st.integers(0, 2**31))
@settings(max_examples=30)
def test_mixture_cll_permutation_invariant_and_matches_loops(s, c, n, seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(c), size=(s, n)).transpose(0, 2, 1)
    labels = rng.integers(0, c, size=n)
    value = mixture_cll(MixtureDistribution(probs), labels)
    assert value == pytest.approx(mixture_cll(MixtureDistribution(probs[rng.permutation(s)]), labels),
                                  abs=1e-12)
    assert abs(value - mixture_cll_loops(probs, labels)) < 1e-10


def test_head_config_views():
    raw = Tensor(np.random.default_rng(0).normal(size=(2, 6, 2, 2)))
    head = HeadConfig(disc_view="softmax", channel_axis=1)
    pred = head.gaussian(raw)
    assert pred.mu.shape == (2, 3, 2, 2)
    np.testing.assert_allclose(head.view(pred.mu).data.sum(axis=1), 1.0)
    assert HeadConfig().view(pred.mu) is pred.mu
