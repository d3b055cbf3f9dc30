"""Finite-difference verification of backward passes."""

from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np

from topogan.nn.layers import MaxPool2D
from topogan.nn.network import INPUT, Model

log = logging.getLogger(__name__)

LossFn = Callable[[Sequence[np.ndarray]], tuple[float, list[np.ndarray]]]


def projection_loss(model: Model, seed: int = 0) -> LossFn:
    """Loss sum_k <out_k, R_k> with fixed random R_k; gives O(1) gradients everywhere."""
    rng = np.random.default_rng(seed)
    weights = None

    def loss(outs):
        nonlocal weights
        if weights is None:
            weights = [rng.standard_normal(o.shape) for o in outs]
        return float(sum(np.sum(o * w) for o, w in zip(outs, weights))), [w.copy() for w in weights]

    return loss


def _maxpool_gap(model: Model, x: np.ndarray) -> float:
    values = {INPUT: x}
    gap = math.inf
    for layer in model.layers:
        inp = values[model.sources[layer.name]]
        if isinstance(layer, MaxPool2D):
            gap = min(gap, layer.min_gap(inp))
        values[layer.name], _ = layer.forward(inp, True)
    return gap


def gradient_check(model: Model, x: np.ndarray, loss: LossFn | None = None, eps: float = 1e-6,
                   check_input: bool = True, floor: float = 1e-6) -> float:
    """Worst relative error between backward gradients and central differences.

    Runs in train mode, so batchnorm uses batch statistics (running stats are
    restored afterwards).  Relative error is |a - n| / max(|a|, |n|, floor * s)
    with s the largest numeric gradient magnitude.  Returns ``nan`` when a
    maxpool window holds a near-tie, where the gradient is only a subgradient
    and the check is skipped.
    """
    if model.dtype != np.float64:
        model = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    loss = loss or projection_loss(model)
    saved = {k: v.copy() for k, v in model.states().items()}

    def f():
        outs, _ = model.forward(x, train=True)
        return loss(outs)[0]

    if _maxpool_gap(model, x) < 100 * eps:
        log.warning("maxpool tie within %.1e; gradient check skipped", 100 * eps)
        return math.nan

    outs, cache = model.forward(x, train=True)
    _, douts = loss(outs)
    grads, dx = model.backward(cache, douts)

    pairs = []
    for name, w in model.parameters().items():
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + eps
            fp = f()
            w[idx] = orig - eps
            fm = f()
            w[idx] = orig
            num[idx] = (fp - fm) / (2 * eps)
        pairs.append((grads[name], num))
    if check_input:
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + eps
            fp = f()
            x[idx] = orig - eps
            fm = f()
            x[idx] = orig
            num[idx] = (fp - fm) / (2 * eps)
        pairs.append((dx, num))

    model.set_parameters(saved, state=True)
    scale = max(float(np.max(np.abs(n))) for _, n in pairs if n.size) if pairs else 0.0
    worst = 0.0
    for a, n in pairs:
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * max(scale, 1e-30))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst
