"""Symmetric in-batch InfoNCE with a learnable temperature."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Bounds on the inverse temperature 1/tau.
MIN_INV_TAU = 1.0
MAX_INV_TAU = 100.0


def _inv_tau(tau):
    if isinstance(tau, Tensor):
        return T.div(1.0, tau)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return 1.0 / tau


def logits(P, Q, tau=1.0, inv_tau=None) -> Tensor:
    """``[B, B]`` matrix of ``p_i . q_j / tau``.

    Pass ``inv_tau`` (e.g. ``exp(logit_scale)``) instead of ``tau`` to scale
    by the inverse temperature directly.
    """
    P, Q = T._as_tensor(P), T._as_tensor(Q)
    if P.shape != Q.shape:
        raise ValueError(f"image batch {P.shape} and text batch {Q.shape} do not align")
    sims = T.matmul(P, Q.transpose(1, 0))
    return T.mul(sims, _inv_tau(tau) if inv_tau is None else inv_tau)


def info_nce(P, Q, tau=1.0, inv_tau=None) -> Tensor:
    """Average of the image-to-text and text-to-image cross entropies.

    Rows of the logit matrix are softmaxed for image-to-text, columns for
    text-to-image; matched pairs sit on the diagonal.
    """
    L = logits(P, Q, tau, inv_tau)
    B = L.shape[0]
    diag = np.eye(B)
    i2t = -T.sum(T.mul(T.log_softmax(L, axis=1), diag)) * (1.0 / B)
    t2i = -T.sum(T.mul(T.log_softmax(L, axis=0), diag)) * (1.0 / B)
    return (i2t + t2i) * 0.5


def directional_losses(P, Q, tau=1.0) -> tuple[float, float]:
    """Image-to-text and text-to-image losses as plain floats."""
    with T.no_grad():
        L = logits(P, Q, tau)
        B = L.shape[0]
        i2t = -np.trace(T.log_softmax(L, axis=1).data) / B
        t2i = -np.trace(T.log_softmax(L, axis=0).data) / B
    return float(i2t), float(t2i)


def clamp_logit_scale(param: Tensor) -> None:
    """Keep ``exp(param)`` = 1/tau inside ``[MIN_INV_TAU, MAX_INV_TAU]``."""
    param.data = np.clip(param.data, math.log(MIN_INV_TAU), math.log(MAX_INV_TAU))


def model_loss(model, images, tokens, lengths=None, keep_ratio: float = 1.0, mask_seed=None) -> Tensor:
    P = model.encode_image(images, keep_ratio=keep_ratio, mask_seed=mask_seed)
    Q = model.encode_text(tokens, lengths)
    return info_nce(P, Q, inv_tau=T.exp(model.params["logit_scale"]))
