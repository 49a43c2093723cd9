"""Weight-level Bernoulli variational distribution over network parameters.

Each kernel element gets its own Bernoulli mask bit; one sampled kernel is
shared by every spatial location.  Masked weights are never rescaled, and
biases are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nets
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class WeightDropoutLayer:
    name: str
    M: Tensor
    b: Tensor
    retain_prob: float
    kind: str = "dense"

    def __post_init__(self):
        if not 0.0 < self.retain_prob <= 1.0:
            raise ConfigError(f"layer {self.name!r}: retain_prob must lie in (0, 1], "
                              f"got {self.retain_prob}")
        if self.kind not in ("dense", "conv"):
            raise ConfigError(f"layer {self.name!r}: unknown kind {self.kind!r}")


@dataclass
class ModelSample:
    """One draw from the variational distribution: a 0/1 mask per layer."""

    masks: dict[str, np.ndarray]
    seed: int | None = None


class VariationalModel:
    """Network whose kernels are variational parameters ``M`` under weight dropout."""

    def __init__(self, arch: Mapping, dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None):
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        self.arch = dict(arch)
        self.dropout_rate = float(dropout_rate)
        retain = 1.0 - self.dropout_rate
        rng = rng if rng is not None else np.random.default_rng(0)
        shapes = nets.layer_shapes(self.arch)
        init = nets.init_params(self.arch, rng, retain)
        self.layers: dict[str, WeightDropoutLayer] = {}
        for name, (kind, _, _) in shapes.items():
            M, b = init[name]
            self.layers[name] = WeightDropoutLayer(
                name, Tensor(M, requires_grad=True, name=f"{name}.M"),
                Tensor(b, requires_grad=True, name=f"{name}.b"), retain, kind)

    @property
    def retain_prob(self) -> float:
        return 1.0 - self.dropout_rate

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.M"] = layer.M
            out[f"{name}.b"] = layer.b
        return out

    def mean_weights(self) -> dict[str, tuple[Tensor, Tensor]]:
        return {n: (layer.M, layer.b) for n, layer in self.layers.items()}

    def forward(self, x: Tensor) -> Tensor:
        """Deterministic forward pass with the unmasked parameters ``M``."""
        return nets.forward(self.arch, self.mean_weights(), T.as_tensor(x))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            if arrays[k].shape != p.shape:
                raise DimensionError(f"checkpoint entry {k!r} has shape {arrays[k].shape}, "
                                     f"model expects {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)


def sample_model(model: VariationalModel, rng: np.random.Generator) -> ModelSample:
    """Draw independent Bernoulli(retain_prob) bits for every kernel element."""
    seed = int(rng.integers(2**63 - 1))
    mask_rng = np.random.default_rng(seed)
    masks = {}
    for name, layer in model.layers.items():
        if layer.retain_prob >= 1.0:
            masks[name] = np.ones(layer.M.shape)
        else:
            masks[name] = (mask_rng.random(layer.M.shape) < layer.retain_prob).astype(np.float64)
    return ModelSample(masks, seed)


def sampled_weights(model: VariationalModel, sample: ModelSample) -> dict[str, tuple[Tensor, Tensor]]:
    weights = {}
    for name, layer in model.layers.items():
        mask = sample.masks.get(name)
        if mask is None or mask.shape != layer.M.shape:
            got = None if mask is None else mask.shape
            raise DimensionError(f"sample mask for {name!r} has shape {got}, expected {layer.M.shape}")
        weights[name] = (T.mul(layer.M, mask), layer.b)
    return weights


def forward_with_sample(model: VariationalModel, sample: ModelSample, x) -> Tensor:
    """Forward pass with effective kernels ``M * Z``; differentiable in ``M`` and ``b``."""
    return nets.forward(model.arch, sampled_weights(model, sample), T.as_tensor(x))


@dataclass
class PredictiveEnsemble:
    """Outputs of ``S`` sampled models, indexed by sample number."""

    outputs: np.ndarray
    seeds: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.outputs.shape[0]

    def mean(self) -> np.ndarray:
        return self.outputs.mean(axis=0)


def predictive_ensemble(model: VariationalModel, x, S: int, rng: np.random.Generator,
                        transform: Callable[[Tensor], np.ndarray] | None = None) -> PredictiveEnsemble:
    """Monte-Carlo approximation of the predictive distribution with ``S`` models.

    ``transform`` maps each raw network output to what gets stored (default:
    the raw output array).
    """
    if S < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {S}")
    outputs, seeds = [], []
    for _ in range(S):
        sample = sample_model(model, rng)
        out = forward_with_sample(model, sample, x)
        outputs.append(out.data if transform is None else transform(out))
        seeds.append(sample.seed)
    return PredictiveEnsemble(np.stack(outputs), seeds)


def kl_regularizer(model: VariationalModel, weight_decay: float) -> Tensor:
    """``weight_decay * sum_layers retain * (|M|^2 + |b|^2) / 2``."""
    if weight_decay < 0:
        raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
    total = T.Tensor(0.0)
    for layer in model.layers.values():
        sq = T.tsum(T.mul(layer.M, layer.M)) + T.tsum(T.mul(layer.b, layer.b))
        total = total + sq * (0.5 * layer.retain_prob)
    return total * weight_decay


# ---------------------------------------------------------------------------
# patch dropout versus weight dropout: size of the model space


@dataclass
class UnitCount:
    name: str
    patch_count: int
    weight_count: int


@dataclass
class UnitReport:
    rows: list[UnitCount]

    @property
    def total_patches(self) -> int:
        return sum(r.patch_count for r in self.rows)

    @property
    def total_weights(self) -> int:
        return sum(r.weight_count for r in self.rows)

    @property
    def reduction(self) -> float:
        return 1.0 - self.total_weights / self.total_patches


def count_units(rows: Sequence[Mapping]) -> UnitReport:
    """Count dropout units for per-patch versus per-weight Bernoulli masks.

    Each row needs ``k``, ``c_in``, ``c_out``, ``h`` and ``w``; ``name`` is
    optional.  Patches: ``h * w * c_out``.  Weights: ``k * k * c_in * c_out + c_out``.
    """
    out = []
    for i, row in enumerate(rows):
        k, c_in, c_out, h, w = (int(row[key]) for key in ("k", "c_in", "c_out", "h", "w"))
        if min(k, c_in, c_out, h, w) <= 0:
            raise ConfigError(f"row {i}: all extents must be positive, got {dict(row)}")
        out.append(UnitCount(row.get("name", f"layer{i}"), h * w * c_out, k * k * c_in * c_out + c_out))
    return UnitReport(out)
