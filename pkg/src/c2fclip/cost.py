"""Analytical FLOP accounting for the dual encoder and training schedules.

Counting convention: every multiply-accumulate costs ``flops_per_mac`` FLOPs
(2 by default) and every elementwise op (normalisation, activation, softmax,
residual add, pooling) costs one.  A training step costs three forward passes
(one forward, two for backward).
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .encoders import TEXT_REFERENCE, VIT_L16, EncoderConfig


def token_count(h: int, w: int, p: int) -> int:
    """Number of non-overlapping ``p x p`` patches in an ``h x w`` image."""
    if p <= 0 or h % p or w % p:
        raise ValueError(f"patch size {p} does not divide image {h}x{w}")
    return (h // p) * (w // p)


@dataclass
class CostReport:
    """FLOPs of one forward pass of one tower for a single example."""

    token_count: int
    n_layers: int
    attention_quadratic: float
    attention_projection: float
    mlp: float
    elementwise: float
    embed: float
    head: float
    per_layer: dict = field(default_factory=dict)

    @property
    def linear_terms(self) -> float:
        return self.attention_projection + self.mlp

    @property
    def total(self) -> float:
        return (self.attention_quadratic + self.attention_projection + self.mlp
                + self.elementwise + self.embed + self.head)

    def parts(self) -> dict[str, float]:
        return {
            "attention_quadratic": self.attention_quadratic,
            "attention_projection": self.attention_projection,
            "mlp": self.mlp,
            "elementwise": self.elementwise,
            "embed": self.embed,
            "head": self.head,
        }


def forward_flops(cfg: EncoderConfig, seq_len: int, flops_per_mac: float = 2.0) -> CostReport:
    """Per-example forward FLOPs of a transformer tower at ``seq_len`` tokens."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    n, w, m, L = seq_len, cfg.width, cfg.mlp_width, cfg.n_layers
    layer = {
        "attention_projection": flops_per_mac * 4 * n * w * w,   # q, k, v, out
        "attention_quadratic": flops_per_mac * 2 * n * n * w,    # scores + weighted sum
        "mlp": flops_per_mac * 2 * n * w * m,
        # two layer norms, GELU, softmax, two residual adds
        "elementwise": 2 * n * w + n * m + cfg.n_heads * n * n + 2 * n * w,
    }
    if cfg.patch_size is not None:
        embed = flops_per_mac * n * cfg.patch_size ** 2 * cfg.channels * w
    else:
        embed = 0.0  # table lookup
    head = n * w + flops_per_mac * w * cfg.embed_dim  # mean pool + projection
    return CostReport(
        token_count=n,
        n_layers=L,
        attention_quadratic=L * layer["attention_quadratic"],
        attention_projection=L * layer["attention_projection"],
        mlp=L * layer["mlp"],
        elementwise=L * layer["elementwise"],
        embed=embed,
        head=head,
        per_layer=layer,
    )


def dual_forward_flops(image_cfg: EncoderConfig, text_cfg: EncoderConfig, image_size: int,
                       text_len: int, flops_per_mac: float = 2.0, keep_ratio: float = 1.0) -> float:
    n = token_count(image_size, image_size, image_cfg.patch_size)
    if keep_ratio < 1.0:
        n = max(1, int(np.floor(keep_ratio * n + 0.5)))
    return (forward_flops(image_cfg, n, flops_per_mac).total
            + forward_flops(text_cfg, text_len, flops_per_mac).total)


# Model / image size / text length / reported GFLOPs.  The 224 and 112 rows
# only reproduce with a 64-token text tower, the 80 and 64 rows with 16.
TABLE2_ROWS = (
    ("CLIP, our repro.", 224, 64, 71.4),
    ("RECLIP-112", 112, 64, 24.8),
    ("RECLIP-80", 80, 16, 10.1),
    ("RECLIP-64", 64, 16, 7.3),
)
# Image-classification GFLOPs are conventionally reported as MAC counts.
TABLE2_FLOPS_PER_MAC = 1.0


def table2(image_cfg: EncoderConfig = VIT_L16, text_cfg: EncoderConfig = TEXT_REFERENCE,
           rows=TABLE2_ROWS, flops_per_mac: float = TABLE2_FLOPS_PER_MAC) -> list[dict]:
    out = []
    for name, size, text_len, reported in rows:
        img = forward_flops(image_cfg, token_count(size, size, image_cfg.patch_size), flops_per_mac)
        txt = forward_flops(text_cfg, text_len, flops_per_mac)
        g = (img.total + txt.total) / 1e9
        out.append({
            "model": name, "image_size": size, "tokens": img.token_count, "text_len": text_len,
            "image_gflops": img.total / 1e9, "text_gflops": txt.total / 1e9, "gflops": g,
            "reported": reported, "rel_err": g / reported - 1.0 if reported else float("nan"),
        })
    return out


def step_flops(phase, image_cfg: EncoderConfig, text_cfg: EncoderConfig, text_len: int | None = None,
               flops_per_mac: float = 2.0) -> float:
    """Training FLOPs of one optimizer step of ``phase`` (forward + 2x backward)."""
    text_len = text_cfg.max_seq_len if text_len is None else text_len
    keep = phase.keep_ratio if phase.mode == "mask" else 1.0
    per_example = dual_forward_flops(image_cfg, text_cfg, phase.image_size, text_len, flops_per_mac, keep)
    return 3.0 * phase.batch_size * per_example


def schedule_cost(schedule, image_cfg: EncoderConfig, text_cfg: EncoderConfig,
                  text_len: int | None = None, flops_per_mac: float = 2.0) -> float:
    """Total training FLOPs of every phase in ``schedule``."""
    return sum(ph.steps * step_flops(ph, image_cfg, text_cfg, text_len, flops_per_mac)
               for ph in schedule.phases)


_TERMS = {
    "attention_only": lambda rep: rep.attention_quadratic,
    "linear_only": lambda rep: rep.linear_terms,
    "total": lambda rep: rep.total,
}


def scaling_exponent(cfg: EncoderConfig, sizes, which: str = "total", flops_per_mac: float = 2.0) -> float:
    """Least-squares slope of log FLOPs against log(1/r) for the image tower.

    ``r`` is measured relative to the largest size.  Pure attention gives 4,
    pure linear layers give 2.
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("scaling_exponent needs at least two image sizes")
    if which not in _TERMS:
        raise ValueError(f"unknown term {which!r}; choose from {sorted(_TERMS)}")
    top = max(sizes)
    x = np.log([s / top for s in sizes])  # log(1/r)
    y = np.log([_TERMS[which](forward_flops(cfg, token_count(s, s, cfg.patch_size), flops_per_mac))
                for s in sizes])
    return float(np.polyfit(x, y, 1)[0])


def measured_step_time(model, image_size: int, n_trials: int = 5, batch_size: int = 8, seed: int = 0) -> dict:
    """Wall-clock median and IQR of one forward+backward step at ``image_size``."""
    from . import tensor as T
    from .contrastive import model_loss
    from .data import MAX_TEXT_LEN, VOCAB_SIZE

    rng = np.random.default_rng(seed)
    images = rng.random((batch_size, image_size, image_size, model.image_cfg.channels))
    tokens = rng.integers(1, VOCAB_SIZE, size=(batch_size, MAX_TEXT_LEN))
    times = []
    for _ in range(n_trials):
        t0 = time.perf_counter()
        loss = model_loss(model, images, tokens)
        T.backward(loss)
        times.append(time.perf_counter() - t0)
        model.zero_grad()
    q1, _, q3 = np.percentile(times, [25, 50, 75])
    return {"image_size": image_size, "median_s": statistics.median(times),
            "q1_s": float(q1), "q3_s": float(q3), "iqr_s": float(q3 - q1), "times_s": times}
