"""Command-line entry point: ``c2fclip {data-gen,train,eval,cost,compare}``.

Run configuration comes from an optional plain ``key=value`` file (``#``
starts a comment) plus repeated ``--set key=value`` flags, which win over the
file.  Everything is validated before any data is generated or any step is
taken; a bad key or value exits with status 2 and names the offending line.
"""
from __future__ import annotations

import argparse
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import cost
from . import data as D
from .encoders import DESK_IMAGE, DESK_TEXT, EncoderConfig, load_checkpoint
from .evaluation import evaluate
from .schedule import DESK, PRESETS, ScheduleError, build_schedule, mask_preset, resize_preset, write_csv


class ConfigError(ValueError):
    """A configuration file or override is malformed."""


# -- configuration ---------------------------------------------------------------

RUN_KEYS = {
    "preset": str,
    "seed": int,
    "n_train": int,
    "n_eval": int,
    "n_classify": int,
    "data_seed": int,
    "factored": bool,
}
RUN_DEFAULTS = {"preset": "reclip", "seed": 0, "n_train": 2048, "n_eval": 256, "n_classify": 256,
                "data_seed": 0, "factored": False}
SCHEDULE_KEYS = {k: type(v) for k, v in DESK.items()}
ENCODER_FIELDS = {"n_layers": int, "n_heads": int, "width": int, "mlp_ratio": int, "embed_dim": int,
                  "patch_size": int}
TEXT_FIELDS = {k: t for k, t in ENCODER_FIELDS.items() if k != "patch_size"}


def _key_type(key: str):
    if key in RUN_KEYS:
        return RUN_KEYS[key]
    if key in SCHEDULE_KEYS:
        return SCHEDULE_KEYS[key]
    tower, _, name = key.partition(".")
    if tower == "image" and name in ENCODER_FIELDS:
        return ENCODER_FIELDS[name]
    if tower == "text" and name in TEXT_FIELDS:
        return TEXT_FIELDS[name]
    return None


def _valid_keys() -> list[str]:
    return (sorted(RUN_KEYS) + sorted(SCHEDULE_KEYS) + [f"image.{k}" for k in ENCODER_FIELDS]
            + [f"text.{k}" for k in TEXT_FIELDS])


def _convert(key: str, raw: str, where: str):
    kind = _key_type(key)
    if kind is None:
        raise ConfigError(f"{where}: unknown key {key!r}; valid keys: {', '.join(_valid_keys())}")
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: {key}={raw!r} is not a valid {kind.__name__}") from None


def parse_assignment(text: str, where: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    key, raw = (s.strip() for s in text.split("=", 1))
    if not key:
        raise ConfigError(f"{where}: empty key")
    return key, _convert(key, raw, where)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        key, value = parse_assignment(line, where)
        if key in out:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    preset: str = "reclip"
    seed: int = 0
    n_train: int = 2048
    n_eval: int = 256
    n_classify: int = 256
    data_seed: int = 0
    factored: bool = False
    schedule: dict = field(default_factory=dict)
    image_cfg: EncoderConfig = DESK_IMAGE
    text_cfg: EncoderConfig = DESK_TEXT

    def build(self, preset: str | None = None, seed: int | None = None):
        return build_schedule(preset or self.preset, seed=self.seed if seed is None else seed,
                              patch_size=self.image_cfg.patch_size, **self.schedule)

    @property
    def canvas(self) -> int:
        return self.schedule.get("canvas", DESK["canvas"])


def resolve_config(config_path=None, sets=(), seed=None, preset=None) -> RunConfig:
    """Merge file, ``--set`` overrides and dedicated flags, then validate."""
    values = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values.update(parse_config_text(path.read_text(), str(path)))
    for i, item in enumerate(sets, 1):
        key, value = parse_assignment(item, f"--set #{i}")
        values[key] = value
    if seed is not None:
        values["seed"] = seed
    if preset is not None:
        values["preset"] = preset

    run = {k: values.get(k, v) for k, v in RUN_DEFAULTS.items()}
    sched = {k: v for k, v in values.items() if k in SCHEDULE_KEYS}
    img = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("image.")}
    txt = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("text.")}
    try:
        image_cfg = DESK_IMAGE.replace(**img)
        text_cfg = DESK_TEXT.replace(**txt)
    except ValueError as exc:
        raise ConfigError(f"encoder config: {exc}") from None
    rc = RunConfig(schedule=sched, image_cfg=image_cfg, text_cfg=text_cfg, **run)
    if rc.preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {rc.preset!r}; valid presets: {', '.join(PRESETS)}")
    for name in ("n_train", "n_eval", "n_classify"):
        if getattr(rc, name) < 1:
            raise ConfigError(f"{name}: must be positive")
    try:
        schedule = rc.build()
    except ScheduleError as exc:
        raise ConfigError(str(exc)) from None
    biggest = max(ph.batch_size for ph in schedule.phases)
    if biggest > rc.n_train:
        raise ConfigError(f"n_train: {rc.n_train} training pairs cannot fill a batch of {biggest}")
    if rc.canvas % 16 or rc.canvas < 32:
        raise ConfigError(f"canvas: must be a multiple of 16 and at least 32, got {rc.canvas}")
    return rc


# -- helpers ---------------------------------------------------------------------

def _corpus_for(rc: RunConfig, data_dir=None) -> D.Corpus:
    if data_dir is not None:
        path = Path(data_dir)
        if not (path / "meta.txt").is_file():
            raise ConfigError(f"data directory {path} has no meta.txt (run `c2fclip data-gen` first)")
        corpus = D.load_corpus(path)
        if corpus.canvas != rc.canvas:
            raise ConfigError(f"data directory canvas {corpus.canvas} != configured canvas {rc.canvas}")
        return corpus
    return D.make_dataset(rc.n_train, canvas=rc.canvas, seed0=rc.data_seed, n_eval=rc.n_eval,
                          n_classify=rc.n_classify)


def _print_table(rows: list[dict], columns, out=None) -> None:
    out = out or sys.stdout

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)
    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)), file=out)
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)), file=out)


def _phase_tokens(ph, patch_size: int) -> int:
    n = cost.token_count(ph.image_size, ph.image_size, patch_size)
    if ph.mode == "mask":
        n = max(1, int(ph.keep_ratio * n + 0.5))
    return n


def _schedule_rows(schedule, rc: RunConfig) -> list[dict]:
    rows = []
    for i, ph in enumerate(schedule.phases):
        rows.append({"index": i, "phase": ph.name, "image_size": ph.image_size,
                     "batch_size": ph.batch_size, "steps": ph.steps, "peak_lr": ph.peak_lr,
                     "warmup_steps": ph.warmup_steps, "mode": ph.mode, "keep_ratio": ph.keep_ratio,
                     "tokens": _phase_tokens(ph, rc.image_cfg.patch_size),
                     "flops": ph.steps * cost.step_flops(ph, rc.image_cfg, rc.text_cfg)})
    return rows


SCHEDULE_COLUMNS = ("index", "phase", "image_size", "batch_size", "steps", "peak_lr", "warmup_steps",
                    "mode", "keep_ratio", "tokens", "flops")


def _print_schedule(schedule, rc: RunConfig) -> None:
    print(f"preset={schedule.preset} seed={schedule.seed} eval_every={schedule.eval_every}")
    _print_table(_schedule_rows(schedule, rc), SCHEDULE_COLUMNS)
    total = cost.schedule_cost(schedule, rc.image_cfg, rc.text_cfg)
    print(f"schedule_cost: {total:.6g} FLOPs")


# -- subcommands -----------------------------------------------------------------

def cmd_data_gen(args) -> int:
    if args.n < 1 or args.n_eval < 1 or args.n_classify < 1:
        raise ConfigError("--n, --n-eval and --n-classify must be positive")
    corpus = D.make_dataset(args.n, canvas=args.canvas, seed0=args.seed, n_eval=args.n_eval,
                            n_classify=args.n_classify)
    out = D.save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.train)} train / {len(corpus.eval)} eval / {len(corpus.classify)} "
          f"classify pairs to {out}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_training
    from .schedule import Trainer

    rc = resolve_config(args.config, args.set, args.seed, args.preset)
    schedule = rc.build()
    _print_schedule(schedule, rc)
    if args.dry_run:
        return 0
    corpus = _corpus_for(rc, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "schedule.csv", _schedule_rows(schedule, rc), SCHEDULE_COLUMNS)
    trainer = Trainer(schedule, corpus, rc.image_cfg, rc.text_cfg, factored=rc.factored,
                      verbose=not args.quiet)
    result = trainer.run(out)
    if not args.no_plots and result.metrics:
        plot_training(result.metrics, out / "training.png", title=f"{rc.preset} seed {rc.seed}")
    _print_table(result.phase_end, ("phase", "step", "image_size", "r1_i2t", "r1_t2i", "zs_acc"))
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        ks = tuple(int(k) for k in args.ks.split(","))
    except ValueError:
        raise ConfigError(f"--ks: expected comma-separated integers, got {args.ks!r}") from None
    if any(k < 1 for k in ks):
        raise ConfigError("--ks: every k must be >= 1")
    model, _ = load_checkpoint(path)
    data_dir = Path(args.data)
    if not (data_dir / "meta.txt").is_file():
        raise ConfigError(f"data directory {data_dir} has no meta.txt (run `c2fclip data-gen` first)")
    ev = evaluate(model, D.load_corpus(data_dir), ks)
    rows = [{"metric": f"r{k}_{d}", "value": v} for d, k, v in ev["retrieval"].as_rows()]
    rows.append({"metric": "zs_acc", "value": ev["zs_acc"]})
    _print_table(rows, ("metric", "value"))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(out, rows, ("metric", "value"))
    return 0


def cmd_cost(args) -> int:
    from .plotting import plot_cost

    rc = resolve_config(args.config, args.set, None, None)
    t2 = cost.table2()
    t2_cols = ("model", "image_size", "tokens", "text_len", "image_gflops", "text_gflops", "gflops",
               "reported", "rel_err")
    print("Reference-scale forward GFLOPs per example (ViT-L/16 image tower + text tower):")
    _print_table(t2, t2_cols)
    presets = args.presets.split(",") if args.presets else list(PRESETS)
    rows = []
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(f"--presets: unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
        sched = rc.build(preset=name)
        rows.append({"preset": name, "phases": len(sched.phases),
                     "steps": sum(p.steps for p in sched.phases),
                     "flops": cost.schedule_cost(sched, rc.image_cfg, rc.text_cfg)})
    base = next((r["flops"] for r in rows if r["preset"] == "baseline"),
                cost.schedule_cost(rc.build(preset="baseline"), rc.image_cfg, rc.text_cfg))
    for r in rows:
        r["vs_baseline"] = r["flops"] / base
    print("\nDesk-scale training cost per preset:")
    _print_table(rows, ("preset", "phases", "steps", "flops", "vs_baseline"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "table2.csv", t2, t2_cols)
        write_csv(out / "schedule_cost.csv", rows, ("preset", "phases", "steps", "flops", "vs_baseline"))
        if not args.no_plots:
            plot_cost(t2, out / "table2.png")
            plot_cost(rows, out / "schedule_cost.png", label_key="preset", value_key="vs_baseline",
                      reference_key=None, ylabel="training FLOPs / baseline")
        print(f"wrote {out}")
    return 0


COMPARE_COLUMNS = ("mode", "size", "seed", "preset", "r1_i2t", "r1_t2i", "zs_acc", "flops")


def compare_rows(per_seed: list[dict]) -> list[dict]:
    """Per-seed rows followed by one median row per (mode, size)."""
    rows = list(per_seed)
    groups = {}
    for r in per_seed:
        groups.setdefault((r["mode"], r["size"]), []).append(r)
    for (mode, size), items in groups.items():
        rows.append({"mode": mode, "size": size, "seed": "median", "preset": items[0]["preset"],
                     **{k: statistics.median(r[k] for r in items)
                        for k in ("r1_i2t", "r1_t2i", "zs_acc", "flops")}})
    return rows


def cmd_compare(args) -> int:
    from .plotting import plot_compare
    from .schedule import Trainer

    rc = resolve_config(args.config, args.set, None, None)
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise ConfigError("--sizes and --seeds take comma-separated integers") from None
    plans = []
    for size in sizes:
        try:
            pair = (("resize", resize_preset(size, rc.canvas)), ("mask", mask_preset(size, rc.canvas)))
        except KeyError:
            raise ConfigError(f"--sizes: {size} has no preset; use {rc.canvas // 4} or {rc.canvas // 2}") from None
        for seed in seeds:
            for mode, preset in pair:
                plans.append((mode, size, seed, preset, rc.build(preset=preset, seed=seed)))
    for mode, size, seed, preset, sched in plans:
        print(f"{mode:6s} size={size} seed={seed} preset={preset} "
              f"flops={cost.schedule_cost(sched, rc.image_cfg, rc.text_cfg):.6g}")
    if args.dry_run:
        return 0
    corpus = _corpus_for(rc, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_seed = []
    for mode, size, seed, preset, sched in plans:
        result = Trainer(sched, corpus, rc.image_cfg, rc.text_cfg, factored=rc.factored).run()
        end = result.phase_end[-1]
        per_seed.append({"mode": mode, "size": size, "seed": seed, "preset": preset,
                         "r1_i2t": end["r1_i2t"], "r1_t2i": end["r1_t2i"], "zs_acc": end["zs_acc"],
                         "flops": result.flops})
        print(f"done {mode} size={size} seed={seed}: zs_acc={end['zs_acc']:.2f}", flush=True)
    rows = compare_rows(per_seed)
    write_csv(out / "compare.csv", rows, COMPARE_COLUMNS)
    _print_table(rows, COMPARE_COLUMNS)
    if not args.no_plots:
        plot_compare(rows, out / "compare.png")
    print(f"wrote {out}")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="c2fclip", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    g = sub.add_parser("data-gen", help="render a synthetic caption corpus to disk")
    g.add_argument("--n", type=int, default=2048, help="training pairs")
    g.add_argument("--n-eval", type=int, default=256)
    g.add_argument("--n-classify", type=int, default=256)
    g.add_argument("--canvas", type=int, default=32)
    g.add_argument("--seed", type=int, default=0, help="first scene seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_data_gen)

    t = sub.add_parser("train", help="train a preset schedule")
    config_flags(t)
    t.add_argument("--preset", choices=PRESETS)
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="corpus directory from data-gen (default: generate in memory)")
    t.add_argument("--out", default="runs/train")
    t.add_argument("--dry-run", action="store_true", help="print the schedule and its cost, then exit")
    t.add_argument("--no-plots", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out retrieval and zero-shot accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ks", default="1,5,10")
    e.add_argument("--out", help="CSV path for the metrics table")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cost", help="analytical FLOP tables")
    config_flags(c)
    c.add_argument("--presets", help="comma-separated presets (default: all)")
    c.add_argument("--out", help="directory for CSV and PNG outputs")
    c.add_argument("--no-plots", action="store_true")
    c.set_defaults(func=cmd_cost)

    m = sub.add_parser("compare", help="resize vs compute-matched token masking")
    config_flags(m)
    m.add_argument("--sizes", default="8,16")
    m.add_argument("--seeds", default="0,1,2")
    m.add_argument("--data")
    m.add_argument("--out", default="runs/compare")
    m.add_argument("--dry-run", action="store_true")
    m.add_argument("--no-plots", action="store_true")
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, D.ConfigurationError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
