"""Adam and RMSProp acting in place on a model's parameter dict."""

from __future__ import annotations

import dataclasses

import numpy as np

from topogan.errors import TrainingError


@dataclasses.dataclass
class OptimizerState:
    kind: str
    lr: float
    step: int = 0
    moments: dict[str, dict[str, np.ndarray]] = dataclasses.field(default_factory=dict)


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(f"non-finite gradient in {name} ({bad} of {np.size(g)} entries)")


class Adam:
    def __init__(self, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState("adam", lr)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_finite(grads)
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** st.step
        c2 = 1 - b2 ** st.step
        for name, w in params.items():
            g = grads[name]
            mom = st.moments.setdefault(name, {"m": np.zeros_like(w), "v": np.zeros_like(w)})
            mom["m"] *= b1
            mom["m"] += (1 - b1) * g
            mom["v"] *= b2
            mom["v"] += (1 - b2) * g * g
            w -= (st.lr * (mom["m"] / c1) / (np.sqrt(mom["v"] / c2) + self.eps)).astype(w.dtype)


class RMSProp:
    def __init__(self, lr: float = 5e-5, rho: float = 0.9, eps: float = 1e-8):
        self.rho, self.eps = rho, eps
        self.state = OptimizerState("rmsprop", lr)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_finite(grads)
        st = self.state
        st.step += 1
        for name, w in params.items():
            g = grads[name]
            mom = st.moments.setdefault(name, {"v": np.zeros_like(w)})
            mom["v"] *= self.rho
            mom["v"] += (1 - self.rho) * g * g
            w -= (st.lr * g / (np.sqrt(mom["v"]) + self.eps)).astype(w.dtype)


def clip_weights(model, c: float):
    """Clamp every trainable parameter to [-c, c]; batchnorm running stats are left alone."""
    if not c > 0:
        raise ValueError(f"clip constant must be positive, got {c}")
    for w in model.parameters().values():
        np.clip(w, -c, c, out=w)
    return model
