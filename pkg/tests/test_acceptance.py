"""Acceptance criteria 1-9, one verdict line per criterion.

Criteria 7 and 8 train 9 models end to end (about 25 minutes on one CPU
core); they share a single module-scoped sweep.  Deselect them with
``-m "not slow"``.
"""
import math
import statistics
import time

import numpy as np
import pytest

from c2fclip import cli, cost
from c2fclip import data as D
from c2fclip import tensor as T
from c2fclip.contrastive import info_nce, model_loss
from c2fclip.encoders import DESK_IMAGE, DESK_TEXT, TEXT_REFERENCE, VIT_L16, DualEncoder, resample_grid
from c2fclip.schedule import Trainer, build_schedule, transfer_resolution

SEEDS = (0, 1, 2)
# Reduced-budget variant of the desk presets: same 10:1 main:finetune split and
# phase structure, sized so the nine runs below fit the runtime target.
E2E = dict(batch_size=32, main_steps=1200, finetune_steps=120, main_warmup=100, finetune_warmup=30,
           finetune_lr=3e-4, eval_every=100_000)


# -- 1-3: analytical cost model ---------------------------------------------------

def test_criterion_1_table2_reproduction(acceptance):
    t0 = time.perf_counter()
    rows = cost.table2(VIT_L16, TEXT_REFERENCE)
    elapsed = time.perf_counter() - t0
    errs = [abs(r["gflops"] / r["reported"] - 1) for r in rows]
    ratio = rows[0]["gflops"] / rows[-1]["gflops"]
    ok = max(errs) <= 0.15 and abs(ratio / 9.8 - 1) <= 0.20 and elapsed < 1
    got = " / ".join(f"{r['gflops']:.2f}" for r in rows)
    assert acceptance("1", ok, f"GFLOPs {got} vs 71.4 / 24.8 / 10.1 / 7.3 (max err {max(errs):.2%}), "
                               f"224:64 ratio {ratio:.2f} vs 9.8, {elapsed * 1e3:.1f} ms")


def test_criterion_2_token_counts(acceptance):
    a, b = cost.token_count(224, 224, 16), cost.token_count(64, 64, 16)
    assert acceptance("2", (a, b) == (196, 16), f"token_count(224,224,16)={a}, token_count(64,64,16)={b}")


def test_criterion_3_scaling_exponents(acceptance):
    sizes = [448, 224, 112]  # r = 1, 2, 4 (224/4 is not a multiple of p=16)
    att = cost.scaling_exponent(VIT_L16, sizes, "attention_only")
    lin = cost.scaling_exponent(VIT_L16, sizes, "linear_only")
    tot = cost.scaling_exponent(VIT_L16, sizes, "total")
    ok = abs(att - 4) <= 1e-6 and abs(lin - 2) <= 1e-6 and 2 < tot < 4
    assert acceptance("3", ok, f"exponents attention={att:.9f} linear={lin:.9f} total={tot:.4f} "
                               f"over sizes {sizes}")


# -- 4: full-model gradient check -------------------------------------------------

def test_criterion_4_full_model_gradients(acceptance):
    t0 = time.perf_counter()
    corpus = D.make_dataset(6, n_eval=2, n_classify=2)
    model = DualEncoder(DESK_IMAGE, DESK_TEXT, image_size=8, seed=11)
    imgs = D.resize_to(corpus.train.images, 8, 4)
    toks, lens = corpus.train.tokens, corpus.train.lengths
    T.backward(model_loss(model, imgs, toks, lens))
    grads = {k: p.grad.copy() for k, p in model.params.items()}

    def loss():
        with T.no_grad():
            return model_loss(model, imgs, toks, lens).item()

    h = 1e-5
    rng = np.random.default_rng(0)
    worst, worst_name, n_checks = 0.0, "", 0
    for name, p in sorted(model.params.items()):
        g = grads[name]
        # directional derivative along a random unit direction covers every entry
        u = rng.normal(size=p.shape)
        u /= np.linalg.norm(u)
        base = p.data.copy()
        p.data = base + h * u
        plus = loss()
        p.data = base - h * u
        minus = loss()
        p.data = base
        checks = [(float((g * u).sum()), (plus - minus) / (2 * h))]
        # plus the largest-gradient entry and a few random entries
        flat = [int(np.argmax(np.abs(g)))] + list(rng.integers(0, p.data.size, size=3))
        for i in flat:
            idx = np.unravel_index(i, p.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            plus = loss()
            p.data[idx] = old - h
            minus = loss()
            p.data[idx] = old
            checks.append((float(g[idx]), (plus - minus) / (2 * h)))
        for analytic, numeric in checks:
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            n_checks += 1
            if err > worst:
                worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    assert acceptance("4", ok, f"{len(grads)} parameter tensors, {n_checks} finite-difference checks "
                               f"(h=1e-5, float64), worst rel err {worst:.2e} ({worst_name}), "
                               f"{elapsed:.1f} s")


# -- 5: loss identities ------------------------------------------------------------

def test_criterion_5_loss_identities(acceptance):
    B = 8
    uniform = info_nce(np.ones((B, 4)) / 2, np.ones((B, 4)) / 2, tau=0.07).item()
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 4))
    single = info_nce(v, v, tau=0.5).item()
    two = info_nce(np.eye(2), np.eye(2), tau=1.0).item()
    errs = (abs(uniform - math.log(B)), abs(single), abs(two - math.log(1 + math.exp(-1))))
    assert acceptance("5", max(errs) <= 1e-10,
                      f"uniform B=8 -> {uniform:.15f} (ln 8 = {math.log(8):.15f}), B=1 -> {single:.1e}, "
                      f"B=2 diagonal -> {two:.15f}; max deviation {max(errs):.1e}")


# -- 6: positional-embedding transfer ----------------------------------------------

def test_criterion_6_resolution_transfer(acceptance):
    rng = np.random.default_rng(0)
    w = rng.normal(size=(16, 8))
    same = resample_grid(w, (4, 4), (4, 4)).tobytes() == w.tobytes()

    corners = rng.normal(size=(4, 3))
    out = resample_grid(corners, (2, 2), (4, 4)).reshape(4, 4, 3)
    c = corners.reshape(2, 2, 3)
    t = np.arange(4) / 3
    oracle = ((1 - t)[:, None, None, None] * ((1 - t)[None, :, None, None] * c[0, 0] + t[None, :, None, None] * c[0, 1])
              + t[:, None, None, None] * ((1 - t)[None, :, None, None] * c[1, 0] + t[None, :, None, None] * c[1, 1]))
    oracle = oracle.reshape(4, 4, 3)
    bilinear_err = float(np.abs(out - oracle).max())

    model = DualEncoder(image_size=8, seed=5)
    before = {k: p.data.tobytes() for k, p in model.params.items()}
    transfer_resolution(model, 8, 32)
    untouched = all(p.data.tobytes() == before[k] for k, p in model.params.items() if k != "image/pos")
    ok = same and bilinear_err <= 1e-12 and untouched and model.params["image/pos"].shape[0] == 64
    assert acceptance("6", ok, f"same-size bit-identical={same}, 2x2->4x4 max err {bilinear_err:.1e}, "
                               f"8->32 non-position parameters byte-identical={untouched}")


# -- 7, 8: end-to-end training sweep ----------------------------------------------

@pytest.fixture(scope="module")
def sweep():
    corpus = D.make_dataset(2048, n_eval=256, n_classify=256)
    results, t0 = {}, time.perf_counter()
    for seed in SEEDS:
        for preset in ("reclip", "baseline", "mask"):
            sched = build_schedule(preset, seed=seed, **E2E)
            res = Trainer(sched, corpus).run()
            results[preset, seed] = {"phase_end": res.phase_end, "flops": res.flops}
            end = res.phase_end[-1]
            print(f"{preset:8s} seed={seed} r1={end['r1_mean']:.2f} zs={end['zs_acc']:.2f} "
                  f"({time.perf_counter() - t0:.0f} s elapsed)", flush=True)
    results["elapsed"] = time.perf_counter() - t0
    results["cost"] = {p: cost.schedule_cost(build_schedule(p, **E2E), DESK_IMAGE, DESK_TEXT)
                       for p in ("reclip", "baseline", "mask")}
    return results


@pytest.mark.slow
def test_criterion_7a_finetune_improves_retrieval(sweep, acceptance):
    pre = [sweep["reclip", s]["phase_end"][0]["r1_mean"] for s in SEEDS]
    post = [sweep["reclip", s]["phase_end"][-1]["r1_mean"] for s in SEEDS]
    zs_pre = [sweep["reclip", s]["phase_end"][0]["zs_acc"] for s in SEEDS]
    zs_post = [sweep["reclip", s]["phase_end"][-1]["zs_acc"] for s in SEEDS]
    ok = statistics.median(post) >= statistics.median(pre)
    detail = (f"RECLIP median R@1 before finetune (8px) {statistics.median(pre):.2f} -> after (32px) "
              f"{statistics.median(post):.2f}; per seed {[round(x, 2) for x in pre]} -> "
              f"{[round(x, 2) for x in post]}; zero-shot acc median {statistics.median(zs_pre):.2f} -> "
              f"{statistics.median(zs_post):.2f}")
    assert acceptance("7a", ok, detail)


@pytest.mark.slow
def test_criterion_7b_quality_at_lower_cost(sweep, acceptance):
    reclip = statistics.median(sweep["reclip", s]["phase_end"][-1]["r1_mean"] for s in SEEDS)
    base = statistics.median(sweep["baseline", s]["phase_end"][-1]["r1_mean"] for s in SEEDS)
    saving = sweep["cost"]["baseline"] / sweep["cost"]["reclip"]
    ok = reclip >= 0.8 * base and saving >= 3
    assert acceptance("7b", ok, f"RECLIP median R@1 {reclip:.2f} = {reclip / base:.1%} of baseline {base:.2f}; "
                                f"schedule_cost baseline/RECLIP = {saving:.2f}x; sweep wall time "
                                f"{sweep['elapsed'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_resize_vs_mask(sweep, acceptance):
    resize = [sweep["reclip", s]["phase_end"][-1]["zs_acc"] for s in SEEDS]
    mask = [sweep["mask", s]["phase_end"][-1]["zs_acc"] for s in SEEDS]
    rows = cli.compare_rows(
        [{"mode": "resize", "size": 8, "seed": s, "preset": "reclip", "r1_i2t": 0.0, "r1_t2i": 0.0,
          "zs_acc": r, "flops": 0.0} for s, r in zip(SEEDS, resize)]
        + [{"mode": "mask", "size": 8, "seed": s, "preset": "mask", "r1_i2t": 0.0, "r1_t2i": 0.0,
            "zs_acc": m, "flops": 0.0} for s, m in zip(SEEDS, mask)])
    for r in rows:
        print(f"  {r['mode']:6s} size={r['size']} seed={r['seed']} zs_acc={r['zs_acc']:.2f}")
    med_r, med_m = statistics.median(resize), statistics.median(mask)
    loses_everywhere = all(r < m for r, m in zip(resize, mask))
    matched = sweep["cost"]["reclip"] == sweep["cost"]["mask"]
    detail = (f"size 8 (4 tokens), compute-matched={matched}: median zero-shot acc resize {med_r:.2f} vs "
              f"mask {med_m:.2f}; per seed resize {resize} mask {mask}")
    acceptance("8", med_r >= med_m and matched, detail)
    # hard failure only when resizing loses at every seed
    assert matched and not loses_everywhere


# -- 9: determinism ----------------------------------------------------------------

def test_criterion_9_determinism(tmp_path, acceptance):
    data_dir = tmp_path / "data"
    assert cli.main(["data-gen", "--n", "64", "--n-eval", "32", "--n-classify", "32",
                     "--out", str(data_dir)]) == 0
    flags = ["--set", "batch_size=16", "--set", "main_steps=12", "--set", "finetune_steps=4",
             "--set", "main_warmup=2", "--set", "finetune_warmup=1", "--set", "eval_every=4",
             "--set", "n_train=64"]
    names = ("metrics.csv", "phase_end.csv", "eval.csv", "phase0_main.ckpt", "phase1_finetune.ckpt",
             "final.ckpt")
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", *flags, "--seed", "7", "--data", str(data_dir), "--out", str(out),
                         "--quiet", "--no-plots"]) == 0
        assert cli.main(["eval", "--checkpoint", str(out / "final.ckpt"), "--data", str(data_dir),
                         "--out", str(out / "eval.csv")]) == 0
        blobs.append({n: (out / n).read_bytes() for n in names})
    same = [n for n in names if blobs[0][n] == blobs[1][n]]
    assert acceptance("9", len(same) == len(names),
                      f"{len(same)}/{len(names)} artifacts byte-identical across two seeded "
                      f"train+eval runs ({', '.join(names)})")
