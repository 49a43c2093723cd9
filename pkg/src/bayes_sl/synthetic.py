"""Synthetic-likelihood training: discriminator, hybrid objective, alternating updates.

The discriminator's log-odds stand in for the log likelihood ratio of a
generated sample, so the generator is rewarded for producing samples that
look like data rather than for explaining every data point.  A Gaussian
log-likelihood term weighted by ``beta`` can be mixed in; ``alpha = 0``
recovers ordinary Monte-Carlo dropout training.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nets
from . import tensor as T
from .dropout import ModelSample, VariationalModel, forward_with_sample, kl_regularizer, sample_model
from .errors import ConfigError, TrainingError, UsageError
from .head import HeadConfig, gaussian_nll, reparameterized_sample
from .optim import AdamState, adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)

LOGIT_CLAMP = 20.0


class Discriminator:
    """Deterministic network scoring ``(x, y)`` pairs with one raw logit each.

    Inputs are joined along axis 1: feature concatenation for vectors,
    channel concatenation for grids.
    """

    def __init__(self, arch: Mapping, rng: np.random.Generator):
        self.arch = dict(arch)
        self.weights = {
            name: (Tensor(M, requires_grad=True, name=f"{name}.M"),
                   Tensor(b, requires_grad=True, name=f"{name}.b"))
            for name, (M, b) in nets.init_params(self.arch, rng).items()
        }

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, (M, b) in self.weights.items():
            out[f"{name}.M"] = M
            out[f"{name}.b"] = b
        return out

    def __call__(self, x, y) -> Tensor:
        x, y = T.as_tensor(x), T.as_tensor(y)
        if x.ndim == 2 and y.ndim > 2:
            y = T.reshape(y, (y.shape[0], -1))
        joined = T.concat([x, y], axis=1)
        return T.reshape(nets.forward(self.arch, self.weights, joined), (-1,))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            p.data = np.array(arrays[k], dtype=np.float64)


@contextlib.contextmanager
def frozen(params: Mapping[str, Tensor]):
    """Temporarily stop gradient tracking on ``params``."""
    flags = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = flags[k]


@dataclass
class HybridLossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    beta_schedule: list[tuple[int, float]] = field(default_factory=list)
    weight_decay: float = 1e-6
    alpha_schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        self.beta_schedule = sorted((int(e), float(b)) for e, b in self.beta_schedule)
        self.alpha_schedule = sorted((int(e), float(a)) for e, a in self.alpha_schedule)
        if any(v < 0 for _, v in self.beta_schedule + self.alpha_schedule):
            raise ConfigError("alpha_schedule and beta_schedule values must be >= 0")

    @property
    def alpha_dominates(self) -> bool:
        """Whether the recommended ``alpha >= beta`` ordering holds."""
        return self.alpha >= max([self.beta, *(b for _, b in self.beta_schedule)])


def _piecewise(epoch: int, base: float, entries: list[tuple[int, float]]) -> float:
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    value = base
    for start, v in entries:
        if start <= epoch:
            value = v
    return value


def beta_schedule(epoch: int, cfg: HybridLossConfig) -> float:
    """Piecewise-constant beta: the last schedule entry starting at or before ``epoch``."""
    return _piecewise(epoch, cfg.beta, cfg.beta_schedule)


def alpha_schedule(epoch: int, cfg: HybridLossConfig) -> float:
    """Piecewise-constant alpha, same rule as :func:`beta_schedule`."""
    return _piecewise(epoch, cfg.alpha, cfg.alpha_schedule)


def synthetic_ll(logit) -> Tensor:
    """``log(D / (1 - D))`` for ``D = sigmoid(logit)``, which is the logit itself, clamped."""
    return T.clip(T.as_tensor(logit), -LOGIT_CLAMP, LOGIT_CLAMP)


@dataclass
class GeneratorLoss:
    total: Tensor
    alpha_term: float
    beta_term: float
    kl: float
    fake: np.ndarray | None = None

    def components(self) -> dict[str, float]:
        return {"alpha_term": self.alpha_term, "beta_term": self.beta_term, "kl": self.kl}


def sampled_forward(model: VariationalModel, samples: ModelSample | Sequence[ModelSample], x) -> Tensor:
    """Forward ``x`` with one model sample, or split the batch evenly across several."""
    if isinstance(samples, ModelSample):
        return forward_with_sample(model, samples, x)
    x = T.as_tensor(x)
    if not 1 <= len(samples) <= x.shape[0]:
        raise UsageError(f"cannot split a batch of {x.shape[0]} across {len(samples)} model samples")
    bounds = np.linspace(0, x.shape[0], len(samples) + 1).astype(int)
    parts = [forward_with_sample(model, s, T.take(x, slice(lo, hi)))
             for s, lo, hi in zip(samples, bounds[:-1], bounds[1:])]
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)


def generator_loss(model: VariationalModel, sample: ModelSample | Sequence[ModelSample], batch: tuple,
                   disc: Discriminator | None, cfg: HybridLossConfig, head: HeadConfig,
                   noise: np.ndarray | None, beta: float | None = None,
                   alpha: float | None = None) -> GeneratorLoss:
    """``-alpha * mean synthetic_ll(D(x, y_hat)) + beta * NLL + KL``.

    ``sample`` is one model sample, or several sharing the batch in equal
    contiguous slices.  ``y_hat`` is the reparameterized sample built from
    ``noise``; gradients reach the generator through both the discriminator
    and the NLL.  The returned ``fake`` is the detached discriminator view of
    ``y_hat``.
    """
    x, y = batch
    beta = cfg.beta if beta is None else beta
    alpha = cfg.alpha if alpha is None else alpha
    pred = head.gaussian(sampled_forward(model, sample, x))
    kl = kl_regularizer(model, cfg.weight_decay)
    total = kl
    alpha_val = beta_val = 0.0
    fake = None
    if disc is not None:
        z = np.zeros(pred.mu.shape) if noise is None else noise
        view = head.view(reparameterized_sample(pred, z))
        fake = view.data.copy()
        alpha_term = T.mean(synthetic_ll(disc(x, view))) * (-alpha)
        alpha_val = alpha_term.item()
        total = alpha_term + total
    if disc is None and alpha != 0:
        raise UsageError("alpha > 0 needs a discriminator")
    if beta != 0 or disc is None:
        beta_term = gaussian_nll(pred, y) * beta
        beta_val = beta_term.item()
        total = beta_term + total
    if not np.isfinite(total.item()):
        raise TrainingError("non-finite generator loss", alpha_term=alpha_val,
                            beta_term=beta_val, kl=kl.item())
    return GeneratorLoss(total, alpha_val, beta_val, kl.item(), fake)


def discriminator_loss(disc: Discriminator, x, real_y, fake_y) -> Tensor:
    """Binary cross-entropy from logits: real pairs labelled 1, generated pairs 0."""
    real_y, fake_y = T.as_tensor(real_y), T.as_tensor(fake_y).detach()
    if real_y.shape[0] != fake_y.shape[0]:
        raise UsageError(f"real batch ({real_y.shape[0]}) and fake batch ({fake_y.shape[0]}) differ in size")
    real = T.mean(T.softplus(-disc(x, real_y)))
    fake = T.mean(T.softplus(disc(x, fake_y)))
    return (real + fake) * 0.5


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams per role, all derived from one integer seed."""
    roles = ("init", "disc", "mask", "noise", "data")
    children = np.random.SeedSequence(seed).spawn(len(roles))
    return {role: np.random.default_rng(child) for role, child in zip(roles, children)}


@dataclass
class TrainState:
    generator: VariationalModel
    gen_opt: AdamState
    disc: Discriminator | None
    disc_opt: AdamState | None
    cfg: HybridLossConfig
    head: HeadConfig
    rngs: dict[str, np.random.Generator]
    epoch: int = 0
    step: int = 0
    gen_updates: int = 1
    disc_updates: int = 1
    s_train: int = 1

    @classmethod
    def create(cls, gen_arch: Mapping, disc_arch: Mapping | None, dropout_rate: float,
               cfg: HybridLossConfig, head: HeadConfig, seed: int, gen_lr: float = 1e-4,
               disc_lr: float = 1e-4, gen_updates: int = 1, disc_updates: int = 1,
               s_train: int = 1, betas: tuple[float, float] = (0.9, 0.999)) -> "TrainState":
        rngs = make_rngs(seed)
        generator = VariationalModel(gen_arch, dropout_rate, rngs["init"])
        disc = Discriminator(disc_arch, rngs["disc"]) if disc_arch is not None else None
        if not cfg.alpha_dominates:
            log.info("alpha=%s is below beta=%s; training is plain likelihood-dominated",
                     cfg.alpha, cfg.beta)
        if s_train < 1:
            raise ConfigError(f"s_train must be >= 1, got {s_train}")
        b1, b2 = betas
        return cls(generator, AdamState(lr=gen_lr, beta1=b1, beta2=b2), disc,
                   AdamState(lr=disc_lr, beta1=b1, beta2=b2) if disc is not None else None,
                   cfg, head, rngs, gen_updates=gen_updates, disc_updates=disc_updates, s_train=s_train)


def train_step(state: TrainState, batch: tuple) -> dict[str, float]:
    """One iteration: generator update(s) on ``s_train`` model samples, then discriminator update(s).

    Mutates ``state`` and returns a log record.
    """
    x, y = (T.as_tensor(a) for a in batch)
    beta = beta_schedule(state.epoch, state.cfg)
    alpha = alpha_schedule(state.epoch, state.cfg)
    # a scheduled alpha of 0 is a warm-up: the discriminator sits out
    disc = state.disc if alpha > 0 or not state.cfg.alpha_schedule else None
    gen_params = state.generator.parameters()
    disc_params = disc.parameters() if disc is not None else {}
    record: dict[str, float] = {"step": state.step, "epoch": state.epoch, "alpha": alpha, "beta": beta}

    fake = None
    for _ in range(state.gen_updates):
        if state.s_train == 1:
            sample = sample_model(state.generator, state.rngs["mask"])
        else:
            sample = [sample_model(state.generator, state.rngs["mask"]) for _ in range(state.s_train)]
        noise = None
        if disc is not None and state.head.sample_noise:
            mu_shape = _mu_shape(state, x)
            noise = state.rngs["noise"].standard_normal(mu_shape)
        with frozen(disc_params):
            loss = generator_loss(state.generator, sample, (x, y), disc, state.cfg,
                                  state.head, noise, beta, alpha)
            T.backward(loss.total)
        try:
            adam_step(gen_params, {k: p.grad for k, p in gen_params.items()}, state.gen_opt)
        except TrainingError as err:
            err.details.update(loss.components())
            raise
        for p in gen_params.values():
            p.grad = None
        fake = loss.fake
        record.update(loss.components())
        record["gen_loss"] = loss.total.item()

    if disc is not None:
        real = state.head.view(y).data  # the discriminator compares like with like
        for _ in range(state.disc_updates):
            d_loss = discriminator_loss(disc, x, real, fake)
            if not np.isfinite(d_loss.item()):
                raise TrainingError("non-finite discriminator loss", disc_loss=d_loss.item())
            T.backward(d_loss)
            adam_step(disc_params, {k: p.grad for k, p in disc_params.items()}, state.disc_opt)
            for p in disc_params.values():
                p.grad = None
        record["disc_loss"] = d_loss.item()
    state.step += 1
    return record


def _mu_shape(state: TrainState, x: Tensor) -> tuple[int, ...]:
    shapes = nets.layer_shapes(state.generator.arch)
    _, _, n_out = list(shapes.values())[-1]
    if state.head.constant_sigma is None:
        n_out //= 2
    return (x.shape[0], n_out) + tuple(x.shape[2:])


def train_epoch(state: TrainState, batches: Sequence[tuple]) -> list[dict[str, float]]:
    records = [train_step(state, b) for b in batches]
    state.epoch += 1
    return records
