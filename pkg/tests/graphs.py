"""Randomized computation graphs touching every tensor primitive."""
import numpy as np

from bayes_sl import tensor as T
from bayes_sl.tensor import ComputationGraph, Tensor

KINK_MARGIN = 1e-4


def build_random_graph(rng):
    """Return (leaves, loss_fn) for a random graph; ``loss_fn()`` rebuilds the loss."""
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    hw = 2 * int(rng.integers(1, 3))
    c_mid = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    classes = int(rng.integers(2, 4))
    slope = float(rng.uniform(0.05, 0.5))

    leaves = {
        "x": rng.normal(size=(n, c, hw, hw)),
        "k1": rng.normal(size=(c_mid, c, k, k)),
        "b1": rng.normal(size=c_mid),
        "k2": rng.normal(size=(c_mid, c_mid, 3, 3)) * 0.5,
        "b2": rng.normal(size=c_mid),
        "w": rng.normal(size=(c_mid * hw * hw + c, classes)) * 0.3,
        "v": rng.normal(size=classes),
        "pos": rng.uniform(0.5, 2.0, size=(n, classes)),
    }
    tensors = {name: Tensor(a, requires_grad=True, name=name) for name, a in leaves.items()}
    labels = rng.integers(0, classes, size=n)
    order = rng.permutation(3)

    def loss_fn():
        t = tensors
        h = T.conv2d(t["x"], t["k1"], t["b1"])
        h = T.leaky_relu(h, slope) if order[0] else T.relu(h)
        r = T.conv2d(h, t["k2"], t["b2"])
        h = T.layer_forward("residual_add", h, T.sigmoid(r))
        h = T.residual_add(h, t["x"]) if c <= c_mid else h
        h = T.upsample_nearest2(T.max_pool2(h))
        flat = T.reshape(h, (n, -1))
        pooled = T.mean(t["x"], axis=(2, 3))
        feats = T.concat([flat, T.softplus(pooled)], axis=1)
        logits = T.matmul(feats, t["w"]) + t["v"]
        logits = T.clip(logits, -50.0, 50.0)
        probs = T.softmax(logits, axis=1)
        ce = T.softmax_cross_entropy(logits, labels)
        extra = T.tsum(T.log(t["pos"]) * probs) + T.mean(T.exp(probs * 0.5) / t["pos"])
        extra = extra + T.tsum(T.take(probs, (slice(None), 0)) ** 2) - T.log_softmax(logits, 1)[0, 0]
        return ce + extra * 0.1 + T.tsum(probs) * 0.0 + (order[1] - order[2]) * T.mean(h)

    return tensors, loss_fn


def near_kink(loss: Tensor) -> bool:
    """True if any non-smooth primitive is evaluated too close to its kink."""
    for node in ComputationGraph.from_output(loss).nodes:
        if node.op in ("relu", "leaky_relu"):
            if np.min(np.abs(node._parents[0].data)) < KINK_MARGIN:
                return True
        elif node.op == "clip":
            d = node._parents[0].data
            if np.min(np.abs(np.abs(d) - 50.0)) < KINK_MARGIN:
                return True
        elif node.op == "max_pool2":
            d = node._parents[0].data
            d = d if d.ndim == 4 else d[None]
            n, c, h, w = d.shape
            win = np.sort(d.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                          .reshape(n, c, h // 2, w // 2, 4), axis=-1)
            if np.min(win[..., -1] - win[..., -2]) < KINK_MARGIN:
                return True
    return False
