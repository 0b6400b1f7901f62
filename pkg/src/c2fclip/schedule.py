"""Coarse-to-fine training: phases, presets, resolution transfer and the trainer loop."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cost
from . import data as D
from . import tensor as T
from .contrastive import clamp_logit_scale, model_loss
from .encoders import DESK_IMAGE, DESK_TEXT, DualEncoder, EncoderConfig, grid_for, save_checkpoint
from .evaluation import evaluate
from .optim import AdamW

METRIC_COLUMNS = ("step", "phase", "loss", "lr", "flops_cum", "wall_ms", "r1_i2t", "r1_t2i", "zs_acc")


class ScheduleError(ValueError):
    """A schedule or phase violates its invariants."""


@dataclass(frozen=True)
class Phase:
    name: str
    image_size: int
    batch_size: int
    steps: int
    peak_lr: float
    warmup_steps: int
    weight_decay: float = 0.01
    mode: str = "resize"
    keep_ratio: float = 1.0

    def validate(self, patch_size: int) -> None:
        if self.image_size % patch_size:
            raise ScheduleError(f"phase {self.name!r}: image_size {self.image_size} "
                                f"is not a multiple of patch size {patch_size}")
        if not self.steps > self.warmup_steps >= 0:
            raise ScheduleError(f"phase {self.name!r}: need steps > warmup_steps >= 0, "
                                f"got steps={self.steps} warmup_steps={self.warmup_steps}")
        if self.batch_size < 1:
            raise ScheduleError(f"phase {self.name!r}: batch_size must be positive")
        if self.mode not in ("resize", "mask"):
            raise ScheduleError(f"phase {self.name!r}: mode must be 'resize' or 'mask', got {self.mode!r}")
        if not 0 < self.keep_ratio <= 1:
            raise ScheduleError(f"phase {self.name!r}: keep_ratio must be in (0, 1]")

    def replace(self, **changes) -> "Phase":
        return replace(self, **changes)


@dataclass
class ScheduleConfig:
    phases: list[Phase]
    seed: int = 0
    eval_every: int = 250
    preset: str = "custom"

    def validate(self, patch_size: int) -> None:
        if not self.phases:
            raise ScheduleError("schedule has no phases")
        if self.eval_every < 1:
            raise ScheduleError("eval_every must be positive")
        for ph in self.phases:
            ph.validate(patch_size)

    def transfers(self) -> int:
        """Number of positional-embedding resamples the schedule will perform."""
        sizes = [ph.image_size for ph in self.phases]
        return sum(a != b for a, b in zip(sizes, sizes[1:]))


def lr_at(step: int, phase: Phase) -> float:
    """Linear warmup from 0 to ``peak_lr`` then linear decay towards 0."""
    if not 0 <= step < phase.steps:
        raise ScheduleError(f"step {step} outside phase {phase.name!r} of {phase.steps} steps")
    if step < phase.warmup_steps:
        return phase.peak_lr * step / phase.warmup_steps
    return phase.peak_lr * (phase.steps - step) / (phase.steps - phase.warmup_steps)


# -- presets ---------------------------------------------------------------------

DESK = {
    "canvas": 32,
    "batch_size": 64,
    "main_steps": 3000,
    "finetune_steps": 300,
    "main_warmup": 100,
    "finetune_warmup": 50,
    "main_lr": 1e-3,
    "finetune_lr": 1e-4,
    "weight_decay": 0.01,
    "eval_every": 250,
}

PRESETS = ("reclip", "reclip-16", "reclip-f20k", "multistage", "multigrid", "baseline",
           "mask", "mask-16")


def token_count_ratio(size: int, canvas: int, patch: int) -> float:
    return cost.token_count(size, size, patch) / cost.token_count(canvas, canvas, patch)


def build_schedule(preset: str, seed: int = 0, patch_size: int = 4, **overrides) -> ScheduleConfig:
    """Resolve a named desk-scale preset into concrete phases.

    ``overrides`` replaces entries of :data:`DESK` (batch size, step counts,
    learning rates, ...).
    """
    unknown = set(overrides) - set(DESK)
    if unknown:
        raise ScheduleError(f"unknown schedule settings {sorted(unknown)}; valid: {sorted(DESK)}")
    k = {**DESK, **overrides}
    S, B = k["canvas"], k["batch_size"]
    main_n, ft_n = k["main_steps"], k["finetune_steps"]
    wd = k["weight_decay"]

    def main(size, steps=main_n, batch=B, **kw):
        return Phase("main", size, batch, steps, k["main_lr"], k["main_warmup"], wd, **kw)

    def finetune(size=S, steps=ft_n, warmup=k["finetune_warmup"], name="finetune"):
        return Phase(name, size, B, steps, k["finetune_lr"], warmup, wd)

    if preset in ("reclip", "reclip-16"):
        low = S // 4 if preset == "reclip" else S // 2
        phases = [main(low), finetune()]
    elif preset == "reclip-f20k":
        # 20k vs 50k finetune, same 25% warmup fraction as the short schedule
        n = max(2, int(round(ft_n * 0.4)))
        phases = [main(S // 4), finetune(steps=n, warmup=n // 4)]
    elif preset == "multistage":
        n = max(2, int(round(main_n * 40 / 300)))
        phases = [main(S // 4), finetune(S // 2, n, name="finetune1"),
                  finetune(S, n, name="finetune2")]
    elif preset == "multigrid":
        total = main_n + ft_n
        each = total // 3
        sizes = (S // 2, (3 * S // 4) // patch_size * patch_size, S)
        phases = [Phase(f"stage{i + 1}", size, B * 2 ** (2 - i), each, k["main_lr"],
                        min(k["main_warmup"], each - 1), wd)
                  for i, size in enumerate(sizes)]
    elif preset == "baseline":
        phases = [main(S, steps=main_n + ft_n)]
    elif preset in ("mask", "mask-16"):
        low = S // 4 if preset == "mask" else S // 2
        phases = [main(S, mode="mask", keep_ratio=token_count_ratio(low, S, patch_size)), finetune()]
    else:
        raise ScheduleError(f"unknown preset {preset!r}; valid presets: {', '.join(PRESETS)}")
    sched = ScheduleConfig(phases, seed=seed, eval_every=k["eval_every"], preset=preset)
    sched.validate(patch_size)
    return sched


def resize_preset(size: int, canvas: int = 32) -> str:
    return {canvas // 4: "reclip", canvas // 2: "reclip-16"}[size]


def mask_preset(size: int, canvas: int = 32) -> str:
    return {canvas // 4: "mask", canvas // 2: "mask-16"}[size]


# -- resolution transfer ---------------------------------------------------------

def transfer_resolution(model: DualEncoder, from_size: int, to_size: int,
                        optimizer: AdamW | None = None) -> DualEncoder:
    """Resample the image position table from ``from_size`` to ``to_size`` inputs.

    All other weights are untouched.  Optimizer moments of the position
    table are dropped; every other parameter keeps its state.
    """
    p = model.image_cfg.patch_size
    old, new = grid_for(from_size, p), grid_for(to_size, p)
    if tuple(model.grid) != old:
        raise ScheduleError(f"model grid {model.grid} does not match from_size {from_size}")
    if old == new:
        return model
    model.resample_pos_embed(new)
    if optimizer is not None:
        optimizer.reset("image/pos")
    return model


# -- trainer ---------------------------------------------------------------------

@dataclass
class RunResult:
    model: DualEncoder
    metrics: list[dict] = field(default_factory=list)
    phase_end: list[dict] = field(default_factory=list)
    timing: list[dict] = field(default_factory=list)
    flops: float = 0.0


class Trainer:
    """Owns one model, its optimizer and the training data stream."""

    def __init__(self, schedule: ScheduleConfig, corpus: D.Corpus,
                 image_cfg: EncoderConfig = DESK_IMAGE, text_cfg: EncoderConfig = DESK_TEXT,
                 model: DualEncoder | None = None, factored: bool = False, verbose: bool = False):
        schedule.validate(image_cfg.patch_size)
        if any(ph.batch_size > len(corpus.train) for ph in schedule.phases):
            raise D.ConfigurationError(
                f"corpus has {len(corpus.train)} training pairs, fewer than the largest batch size")
        self.schedule = schedule
        self.corpus = corpus
        first = schedule.phases[0]
        start_size = corpus.canvas if first.mode == "mask" else first.image_size
        self.model = model or DualEncoder(image_cfg, text_cfg, image_size=start_size, seed=schedule.seed)
        self.optimizer = AdamW(weight_decay=first.weight_decay, factored=factored)
        self.sampler = corpus.stream(first.batch_size, schedule.seed)
        self.verbose = verbose
        self.global_step = 0
        self.flops = 0.0
        self._resized: dict[int, np.ndarray] = {}

    def _train_images(self, size: int) -> np.ndarray:
        if size not in self._resized:
            self._resized[size] = D.resize_to(self.corpus.train.images, size,
                                              self.model.image_cfg.patch_size)
        return self._resized[size]

    def run_phase(self, index: int, phase: Phase) -> tuple[list[dict], list[dict]]:
        model, cfg = self.model, self.model.image_cfg
        input_size = self.corpus.canvas if phase.mode == "mask" else phase.image_size
        if tuple(model.grid) != grid_for(input_size, cfg.patch_size):
            transfer_resolution(model, model.image_size, input_size, self.optimizer)
        self.optimizer.weight_decay = phase.weight_decay
        images = self._train_images(input_size)
        keep = phase.keep_ratio if phase.mode == "mask" else 1.0
        per_step = cost.step_flops(phase, cfg, model.text_cfg)
        every = self.schedule.eval_every
        rows, timing = [], []
        t_phase = time.perf_counter()
        for step in range(phase.steps):
            idx = self.sampler.next_indices(phase.batch_size)
            lr = lr_at(step, phase)
            loss = model_loss(model, images[idx], self.corpus.train.tokens[idx],
                              self.corpus.train.lengths[idx], keep_ratio=keep,
                              mask_seed=[self.schedule.seed, index, step])
            T.backward(loss)
            self.optimizer.step(model.params, lr)
            clamp_logit_scale(model.params["logit_scale"])
            model.zero_grad()
            self.flops += per_step
            self.global_step += 1
            if step % every == 0:
                wall_ms = (time.perf_counter() - t_phase) * 1e3
                ev = evaluate(model, self.corpus)
                rows.append({"step": self.global_step, "phase": phase.name, "loss": loss.item(),
                             "lr": lr, "flops_cum": self.flops, "wall_ms": "",
                             "r1_i2t": ev["r1_i2t"], "r1_t2i": ev["r1_t2i"], "zs_acc": ev["zs_acc"]})
                timing.append({"step": self.global_step, "phase": phase.name, "wall_ms": round(wall_ms, 3)})
                if self.verbose:
                    print(f"[{phase.name}] step {step}/{phase.steps} loss={loss.item():.4f} lr={lr:.2e} "
                          f"r1={ev['r1_i2t']:.1f}/{ev['r1_t2i']:.1f} zs={ev['zs_acc']:.1f}", flush=True)
        return rows, timing

    def run(self, out_dir=None) -> RunResult:
        result = RunResult(self.model)
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        for i, phase in enumerate(self.schedule.phases):
            rows, timing = self.run_phase(i, phase)
            result.metrics.extend(rows)
            result.timing.extend(timing)
            ev = evaluate(self.model, self.corpus)
            result.phase_end.append({"phase": phase.name, "step": self.global_step,
                                     "image_size": self.model.image_size, "flops_cum": self.flops,
                                     "r1_i2t": ev["r1_i2t"], "r1_t2i": ev["r1_t2i"],
                                     "r1_mean": 0.5 * (ev["r1_i2t"] + ev["r1_t2i"]),
                                     "zs_acc": ev["zs_acc"]})
            if out is not None:
                save_checkpoint(self.model, out / f"phase{i}_{phase.name}.ckpt",
                                extra={"phase": phase.name, "step": self.global_step,
                                       "preset": self.schedule.preset, "seed": self.schedule.seed})
        result.flops = self.flops
        if out is not None:
            save_checkpoint(self.model, out / "final.ckpt",
                            extra={"preset": self.schedule.preset, "seed": self.schedule.seed,
                                   "step": self.global_step})
            write_csv(out / "metrics.csv", result.metrics, METRIC_COLUMNS)
            write_csv(out / "phase_end.csv", result.phase_end,
                      ("phase", "step", "image_size", "flops_cum", "r1_i2t", "r1_t2i", "r1_mean", "zs_acc"))
            write_csv(out / "timing.csv", result.timing, ("step", "phase", "wall_ms"))
        return result


def run_schedule(schedule: ScheduleConfig, corpus: D.Corpus, out_dir=None, **kwargs) -> RunResult:
    return Trainer(schedule, corpus, **kwargs).run(out_dir)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])
