import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayes_sl import tensor as T
from bayes_sl.dropout import sample_model
from bayes_sl.errors import ConfigError, TrainingError, UsageError
from bayes_sl.head import HeadConfig
from bayes_sl.optim import adam_step
from bayes_sl.synthetic import (Discriminator, HybridLossConfig, TrainState, alpha_schedule, beta_schedule,
                                discriminator_loss, frozen, generator_loss, sampled_forward, synthetic_ll,
                                train_step)

GEN = {"kind": "mlp", "in": 2, "hidden": [8], "out": 2}
DISC = {"kind": "mlp", "in": 3, "hidden": [8], "out": 1, "activation": "leaky_relu", "slope": 0.2}


def batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 2)), rng.normal(size=(n, 1))


def state(alpha=1.0, beta=1.0, disc=DISC, seed=0, **kw):
    return TrainState.create(GEN, disc, 0.5, HybridLossConfig(alpha, beta), HeadConfig(), seed, 1e-3, 1e-3, **kw)


def test_synthetic_ll_is_identity_on_grid():
    grid = np.linspace(-20.0, 20.0, 4001)
    assert np.array_equal(synthetic_ll(grid).data, grid)


def test_synthetic_ll_matches_log_odds():
    for l in (-7.5, -1.0, 0.0, 2.0, 9.0):
        d = 1 / (1 + math.exp(-l))
        assert synthetic_ll(l).item() == pytest.approx(math.log(d / (1 - d)), abs=1e-9)


def test_synthetic_ll_clamps_far_logits():
    assert synthetic_ll(np.array([1e6, -1e6])).data.tolist() == [20.0, -20.0]


@given(st.floats(-1e3, 1e3))
def test_synthetic_ll_bounded(l):
    v = synthetic_ll(l).item()
    assert -20.0 <= v <= 20.0
    if abs(l) <= 20:
        assert v == l


def test_discriminator_loss_at_zero_logit_is_log2():
    disc = Discriminator(DISC, np.random.default_rng(0))
    for p in disc.parameters().values():
        p.data[:] = 0.0
    x, y = batch()
    assert discriminator_loss(disc, x, y, y + 1).item() == pytest.approx(math.log(2), abs=1e-15)


def test_discriminator_loss_batch_mismatch():
    disc = Discriminator(DISC, np.random.default_rng(0))
    x, y = batch()
    with pytest.raises(UsageError):
        discriminator_loss(disc, x, y, y[:3])


def test_discriminator_loss_decreases_when_trained():
    st_ = state()
    x, y = batch(n=64)
    fake = y + 2.0
    first = None
    for _ in range(200):
        loss = discriminator_loss(st_.disc, x, y, fake)
        first = loss.item() if first is None else first
        T.backward(loss)
        params = st_.disc.parameters()
        adam_step(params, {k: p.grad for k, p in params.items()}, st_.disc_opt)
        for p in params.values():
            p.grad = None
    assert discriminator_loss(st_.disc, x, y, fake).item() < 0.75 * first


def test_discriminator_joins_inputs_along_axis_one():
    grid = {"kind": "convdisc", "in_channels": 3, "input_hw": [8, 8], "blocks": [[4]], "dense": [4]}
    disc = Discriminator(grid, np.random.default_rng(0))
    out = disc(np.zeros((2, 1, 8, 8)), np.zeros((2, 2, 8, 8)))
    assert out.shape == (2,)


def test_alpha_zero_beta_one_equals_plain_nll_plus_kl():
    st_ = state(alpha=0.0, disc=None)
    x, y = batch()
    sample = sample_model(st_.generator, np.random.default_rng(3))
    loss = generator_loss(st_.generator, sample, (x, y), None, st_.cfg, st_.head, None)
    assert loss.alpha_term == 0.0
    assert loss.total.item() == pytest.approx(loss.beta_term + loss.kl, rel=1e-14)


def test_alpha_needs_discriminator():
    st_ = state(alpha=0.0, disc=None)
    x, y = batch()
    sample = sample_model(st_.generator, np.random.default_rng(3))
    with pytest.raises(UsageError):
        generator_loss(st_.generator, sample, (x, y), None, HybridLossConfig(1.0, 1.0), st_.head, None)


def test_generator_step_leaves_discriminator_untouched():
    st_ = state()
    before = st_.disc.state_arrays()
    x, y = batch()
    sample = sample_model(st_.generator, np.random.default_rng(0))
    loss = generator_loss(st_.generator, sample, (x, y), st_.disc, st_.cfg, st_.head,
                          np.zeros((6, 1)))
    with frozen(st_.disc.parameters()):
        T.backward(loss.total)
    assert all(p.grad is None for p in st_.disc.parameters().values())
    assert all(np.array_equal(before[k], v) for k, v in st_.disc.state_arrays().items())
    assert any(p.grad is not None and np.any(p.grad != 0) for p in st_.generator.parameters().values())


def test_discriminator_step_leaves_generator_untouched():
    st_ = state()
    gen_before = {k: v.data.copy() for k, v in st_.generator.parameters().items()}
    x, y = batch()
    T.backward(discriminator_loss(st_.disc, x, y, y + 1))
    assert all(p.grad is None for p in st_.generator.parameters().values())
    assert all(np.array_equal(gen_before[k], v.data) for k, v in st_.generator.parameters().items())


def test_alpha_zero_pipeline_is_bitwise_discriminator_free():
    with_disc, without = state(alpha=0.0, beta=1.0), state(alpha=0.0, beta=1.0, disc=None)
    data = np.random.default_rng(11)
    for _ in range(500):
        b = (data.normal(size=(6, 2)), data.normal(size=(6, 1)))
        train_step(with_disc, b)
        train_step(without, b)
    for k, p in without.generator.parameters().items():
        assert np.array_equal(p.data, with_disc.generator.parameters()[k].data), k


def test_same_seed_same_trajectory():
    a, b = state(seed=4), state(seed=4)
    for i in range(20):
        ra, rb = train_step(a, batch(i)), train_step(b, batch(i))
        assert ra == rb
    assert not np.array_equal(state(seed=5).generator.parameters()["dense1.M"].data,
                              a.generator.parameters()["dense1.M"].data)


def test_train_step_record_and_counters():
    st_ = state()
    rec = train_step(st_, batch())
    assert {"gen_loss", "disc_loss", "alpha_term", "beta_term", "kl", "beta"} <= set(rec)
    assert st_.step == 1


def test_several_samples_split_the_batch():
    st_ = state(s_train=3)
    samples = [sample_model(st_.generator, np.random.default_rng(i)) for i in range(3)]
    x = np.random.default_rng(0).normal(size=(7, 2))
    out = sampled_forward(st_.generator, samples, x).data
    bounds = [0, 2, 4, 7]
    for s, lo, hi in zip(samples, bounds[:-1], bounds[1:]):
        np.testing.assert_array_equal(out[lo:hi], sampled_forward(st_.generator, s, x[lo:hi]).data)
    with pytest.raises(UsageError):
        sampled_forward(st_.generator, samples * 3, x)
    train_step(st_, batch())


def test_beta_schedule_piecewise():
    cfg = HybridLossConfig(1.0, 1.0, beta_schedule=[[4, 0.0], [0, 1e-4]])
    assert [beta_schedule(e, cfg) for e in (0, 3, 4, 10)] == [1e-4, 1e-4, 0.0, 0.0]
    assert beta_schedule(7, HybridLossConfig(1.0, 0.5)) == 0.5
    with pytest.raises(UsageError):
        beta_schedule(-1, cfg)


def test_alpha_warmup_leaves_discriminator_idle():
    cfg = HybridLossConfig(1.0, 1.0, alpha_schedule=[[2, 1.0], [0, 0.0]])
    assert [alpha_schedule(e, cfg) for e in (0, 1, 2, 5)] == [0.0, 0.0, 1.0, 1.0]
    warm = TrainState.create(GEN, DISC, 0.5, cfg, HeadConfig(), 3, 1e-3, 1e-3)
    plain = state(alpha=0.0, disc=None, seed=3)
    before = {k: p.data.copy() for k, p in warm.disc.parameters().items()}
    for _ in range(5):
        b = batch(4)
        rec = train_step(warm, b)
        train_step(plain, b)
    assert "disc_loss" not in rec and rec["alpha"] == 0.0
    assert all(np.array_equal(p.data, before[k]) for k, p in warm.disc.parameters().items())
    assert all(np.array_equal(p.data, plain.generator.parameters()[k].data)
               for k, p in warm.generator.parameters().items())
    warm.epoch = 2
    rec = train_step(warm, batch(5))
    assert rec["alpha"] == 1.0 and rec["alpha_term"] != 0.0 and "disc_loss" in rec


def test_config_validation():
    with pytest.raises(ConfigError):
        HybridLossConfig(-1.0, 0.0)
    with pytest.raises(ConfigError):
        HybridLossConfig(1.0, 0.0, weight_decay=-1)
    with pytest.raises(ConfigError):
        HybridLossConfig(1.0, 0.0, alpha_schedule=[[3, -1.0]])
    with pytest.raises(ConfigError):
        state(s_train=0)
    assert not HybridLossConfig(0.0, 1.0).alpha_dominates


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises_training_error():
    st_ = state(alpha=0.0, disc=None)
    with pytest.raises(TrainingError):
        train_step(st_, (np.array([[np.inf, 0.0]] * 2), np.zeros((2, 1))))


def test_thousand_steps_stay_finite():
    st_ = state()
    data = np.random.default_rng(2)
    for _ in range(1000):
        rec = train_step(st_, (data.normal(size=(8, 2)), data.normal(size=(8, 1))))
    assert all(np.isfinite(v) for v in rec.values())
    assert all(np.all(np.isfinite(p.data)) for p in st_.generator.parameters().values())


def test_discriminator_sees_real_targets_through_the_same_view(monkeypatch):
    import bayes_sl.synthetic as S
    gen = {"kind": "mlp", "in": 2, "hidden": [4], "out": 3}
    disc = {"kind": "mlp", "in": 5, "hidden": [4], "out": 1}
    head = HeadConfig(constant_sigma=1.0, sample_noise=False, disc_view="softmax", channel_axis=1)
    st_ = TrainState.create(gen, disc, 0.5, HybridLossConfig(1.0, 1.0), head, 0)
    seen = {}
    real_loss = S.discriminator_loss

    def spy(d, x, real, fake):
        seen["real"] = np.asarray(real)
        return real_loss(d, x, real, fake)

    monkeypatch.setattr(S, "discriminator_loss", spy)
    y = 5.0 * np.eye(3)[[0, 2]]
    train_step(st_, (np.zeros((2, 2)), y))
    np.testing.assert_allclose(seen["real"].sum(axis=1), 1.0)
    assert seen["real"][0, 0] == pytest.approx(np.exp(5) / (np.exp(5) + 2))
