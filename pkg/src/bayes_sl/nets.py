"""Architecture descriptors: parameter shapes plus a forward pass.

A descriptor is a plain dict (JSON-compatible), selected by ``kind``:

``mlp``
    ``{"kind": "mlp", "in": 2, "hidden": [256, 128], "out": 1,
    "activation": "relu" | "leaky_relu", "slope": 0.2}``
``encdec``
    Fully convolutional encoder-decoder: three residual encoder blocks with
    max-pooling in between, a residual decoder block and a plain
    convolutional block with nearest up-sampling in between, and a final
    linear convolution.  ``{"kind": "encdec", "in_channels": 12,
    "out_channels": 6, "widths": [16, 32, 64], "tail": [16, 8, 8],
    "kernel": 3}``
``convdisc``
    Convolutional classifier ending in a single logit.  ``{"kind":
    "convdisc", "in_channels": 15, "input_hw": [32, 32], "blocks": [[16, 16],
    [32, 32], [64], [64]], "dense": [128, 128], "kernel": 3}``

Forward functions take ``weights``: a mapping from layer name to an
``(effective_kernel, bias)`` pair, so the same code serves deterministic
evaluation and evaluation under a sampled weight mask.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

Weights = Mapping[str, tuple[Tensor, Tensor]]


def layer_shapes(arch: Mapping) -> dict[str, tuple[str, tuple[int, ...], int]]:
    """Return ``{name: (kind, kernel_shape, n_out)}`` in forward order."""
    kind = arch.get("kind")
    shapes: dict[str, tuple[str, tuple[int, ...], int]] = {}
    if kind == "mlp":
        sizes = [arch["in"], *arch.get("hidden", []), arch["out"]]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            shapes[f"dense{i}"] = ("dense", (a, b), b)
    elif kind == "encdec":
        k = arch.get("kernel", 3)
        w1, w2, w3 = arch["widths"]
        c = arch["in_channels"]
        for block, width in zip((1, 2, 3, 4), (w1, w2, w3, w2)):
            for j in (1, 2, 3):
                shapes[f"conv{block}_{j}"] = ("conv", (width, c, k, k), width)
                c = width
        for j, width in enumerate(arch["tail"], start=1):
            shapes[f"conv5_{j}"] = ("conv", (width, c, k, k), width)
            c = width
        shapes["conv6"] = ("conv", (arch["out_channels"], c, k, k), arch["out_channels"])
    elif kind == "convdisc":
        k = arch.get("kernel", 3)
        c = arch["in_channels"]
        h, w = arch["input_hw"]
        for bi, block in enumerate(arch["blocks"], start=1):
            for j, width in enumerate(block, start=1):
                shapes[f"conv{bi}_{j}"] = ("conv", (width, c, k, k), width)
                c = width
            if h % 2 or w % 2:
                raise ConfigError(f"convdisc input {arch['input_hw']} cannot be pooled "
                                  f"{len(arch['blocks'])} times")
            h, w = h // 2, w // 2
        n = c * h * w
        for i, width in enumerate([*arch.get("dense", []), 1], start=1):
            shapes[f"dense{i}"] = ("dense", (n, width), width)
            n = width
    else:
        raise ConfigError(f"unknown architecture kind {kind!r}")
    return shapes


def init_params(arch: Mapping, rng: np.random.Generator,
                retain_prob: float = 1.0) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """He-normal kernels with variance divided by ``retain_prob``.

    The division keeps activation scale roughly constant under weight masks
    that are never rescaled.  Biases start at zero unless the descriptor sets
    ``"bias_init": "uniform"``, which draws them from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)); low-dimensional inputs need this, since a zero-bias ReLU
    net is positively homogeneous in its input.
    """
    bias_init = arch.get("bias_init", "zeros")
    if bias_init not in ("zeros", "uniform"):
        raise ConfigError(f"bias_init must be 'zeros' or 'uniform', got {bias_init!r}")
    params = {}
    for name, (_, shape, n_out) in layer_shapes(arch).items():
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        std = np.sqrt(2.0 / (fan_in * retain_prob))
        kernel = rng.normal(0.0, std, size=shape)
        if bias_init == "uniform":
            bound = 1.0 / np.sqrt(fan_in)
            bias = rng.uniform(-bound, bound, size=n_out)
        else:
            bias = np.zeros(n_out)
        params[name] = (kernel, bias)
    return params


def _act(arch: Mapping, x: Tensor) -> Tensor:
    if arch.get("activation", "relu") == "leaky_relu":
        return T.leaky_relu(x, arch.get("slope", 0.2))
    return T.relu(x)


def _dense(x: Tensor, wb: tuple[Tensor, Tensor]) -> Tensor:
    return T.matmul(x, wb[0]) + wb[1]


def _conv(x: Tensor, wb: tuple[Tensor, Tensor]) -> Tensor:
    return T.conv2d(x, wb[0], wb[1])


def forward(arch: Mapping, weights: Weights, x: Tensor) -> Tensor:
    kind = arch["kind"]
    if kind == "mlp":
        n = len(arch.get("hidden", [])) + 1
        if x.ndim != 2 or x.shape[1] != arch["in"]:
            raise DimensionError(f"mlp expects N x {arch['in']} input, got {x.shape}")
        h = x
        for i in range(1, n + 1):
            h = _dense(h, weights[f"dense{i}"])
            if i < n:
                h = _act(arch, h)
        return h
    if kind == "encdec":
        return _encdec(arch, weights, x)
    if kind == "convdisc":
        h = x
        for bi, block in enumerate(arch["blocks"], start=1):
            for j in range(1, len(block) + 1):
                h = _act(arch, _conv(h, weights[f"conv{bi}_{j}"]))
            h = T.max_pool2(h)
        h = T.reshape(h, (h.shape[0], -1))
        n = len(arch.get("dense", [])) + 1
        for i in range(1, n + 1):
            h = _dense(h, weights[f"dense{i}"])
            if i < n:
                h = _act(arch, h)
        return h
    raise ConfigError(f"unknown architecture kind {kind!r}")


def _residual_block(arch, weights, x, block: int) -> Tensor:
    first = T.relu(_conv(x, weights[f"conv{block}_1"]))
    h = T.relu(_conv(first, weights[f"conv{block}_2"]))
    h = T.relu(_conv(h, weights[f"conv{block}_3"]))
    return T.residual_add(first, h)


def _encdec(arch, weights, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != arch["in_channels"]:
        raise DimensionError(f"encdec expects N x {arch['in_channels']} x H x W input, got {x.shape}")
    h = T.max_pool2(_residual_block(arch, weights, x, 1))
    h = T.max_pool2(_residual_block(arch, weights, h, 2))
    h = T.upsample_nearest2(_residual_block(arch, weights, h, 3))
    h = T.upsample_nearest2(_residual_block(arch, weights, h, 4))
    for j in range(1, len(arch["tail"]) + 1):
        h = T.relu(_conv(h, weights[f"conv5_{j}"]))
    return _conv(h, weights["conv6"])


def conv_rows(arch: Mapping, input_hw: tuple[int, int]) -> list[dict]:
    """Per-convolution rows (name, k, c_in, c_out, h, w) for unit counting."""
    if arch["kind"] != "encdec":
        raise ConfigError("conv_rows is defined for encdec architectures only")
    h, w = input_hw
    scale = {1: 1, 2: 2, 3: 4, 4: 2, 5: 1, 6: 1}
    rows = []
    for name, (_, shape, _) in layer_shapes(arch).items():
        block = int(name[4])
        c_out, c_in, k, _ = shape
        rows.append({"name": name, "k": k, "c_in": c_in, "c_out": c_out,
                     "h": h // scale[block], "w": w // scale[block]})
    return rows
