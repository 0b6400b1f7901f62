"""Adaptive optimizers operating on named parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def default_decay_filter(name: str) -> bool:
    """Weight decay applies to matrices and embeddings only.

    Gains, biases and the temperature are excluded.
    """
    leaf = name.rsplit("/", 1)[-1]
    return leaf not in {"b", "g", "bias", "gain"} and name != "logit_scale"


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    ``factored=True`` switches 2-D parameters to an Adafactor-style second
    moment estimated from row and column running means.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    factored: bool = False
    decay_filter: object = default_decay_filter
    state: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = self._init_state(p)
            st["t"] += 1
            t = st["t"]
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            m_hat = st["m"] / (1.0 - self.beta1 ** t)
            if "vr" in st:
                sq = g * g + 1e-30
                st["vr"] = self.beta2 * st["vr"] + (1.0 - self.beta2) * sq.mean(axis=1)
                st["vc"] = self.beta2 * st["vc"] + (1.0 - self.beta2) * sq.mean(axis=0)
                v = np.outer(st["vr"], st["vc"]) / st["vr"].mean()
            else:
                st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
                v = st["v"]
            v_hat = v / (1.0 - self.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and self.decay_filter(name):
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def _init_state(self, p: Tensor) -> dict:
        st = {"t": 0, "m": np.zeros_like(p.data)}
        if self.factored and p.ndim == 2:
            st["vr"] = np.zeros(p.shape[0])
            st["vc"] = np.zeros(p.shape[1])
        else:
            st["v"] = np.zeros_like(p.data)
        return st

    def reset(self, name: str) -> None:
        self.state.pop(name, None)
