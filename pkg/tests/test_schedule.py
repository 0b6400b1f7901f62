import math

import numpy as np
import pytest

from c2fclip import data as D
from c2fclip import schedule as S
from c2fclip.encoders import DualEncoder, EncoderConfig
from c2fclip.optim import AdamW
from c2fclip.schedule import Phase, ScheduleConfig, ScheduleError, Trainer, build_schedule, lr_at

TINY_IMAGE = EncoderConfig(n_layers=1, n_heads=2, width=16, patch_size=4, max_seq_len=64, embed_dim=8)
TINY_TEXT = EncoderConfig(n_layers=1, n_heads=2, width=16, max_seq_len=16, embed_dim=8,
                          vocab_size=D.VOCAB_SIZE)


@pytest.fixture(scope="module")
def corpus():
    return D.make_dataset(32, n_eval=16, n_classify=16)


def test_lr_warmup_and_decay():
    ph = Phase("p", 8, 4, 10, 1.0, 2)
    assert [lr_at(s, ph) for s in range(10)] == [0.0, 0.5, 1.0, 7 / 8, 6 / 8, 5 / 8, 4 / 8, 3 / 8, 2 / 8, 1 / 8]
    with pytest.raises(ScheduleError):
        lr_at(10, ph)


def test_lr_without_warmup_starts_at_peak():
    ph = Phase("p", 8, 4, 4, 2.0, 0)
    assert lr_at(0, ph) == 2.0 and lr_at(3, ph) == 0.5


@pytest.mark.parametrize("kwargs, message", [
    (dict(image_size=10), "multiple of patch"),
    (dict(steps=5, warmup_steps=5), "warmup"),
    (dict(mode="crop"), "mode"),
    (dict(keep_ratio=0.0), "keep_ratio"),
])
def test_phase_validation(kwargs, message):
    base = dict(name="p", image_size=8, batch_size=4, steps=10, peak_lr=1e-3, warmup_steps=2)
    with pytest.raises(ScheduleError, match=message):
        Phase(**{**base, **kwargs}).validate(4)


def test_unknown_preset_and_setting():
    with pytest.raises(ScheduleError, match="valid presets"):
        build_schedule("nope")
    with pytest.raises(ScheduleError, match="unknown schedule settings"):
        build_schedule("reclip", main_stepz=3)


def test_reclip_preset_shape():
    s = build_schedule("reclip")
    main, ft = s.phases
    assert (main.image_size, ft.image_size) == (8, 32)
    assert main.batch_size == ft.batch_size
    assert ft.peak_lr < main.peak_lr
    assert main.steps / ft.steps == 10
    assert s.transfers() == 1


def test_every_preset_keeps_constant_batch_except_multigrid():
    for name in S.PRESETS:
        sizes = {ph.batch_size for ph in build_schedule(name).phases}
        assert (len(sizes) == 1) == (name != "multigrid"), name


def test_multigrid_stages():
    s = build_schedule("multigrid")
    steps = [ph.steps for ph in s.phases]
    assert len(set(steps)) == 1
    sizes = [ph.image_size for ph in s.phases]
    batches = [ph.batch_size for ph in s.phases]
    assert sizes == sorted(sizes) and sizes[-1] == 32
    assert batches == sorted(batches, reverse=True)


def test_baseline_matches_total_steps():
    r, b = build_schedule("reclip"), build_schedule("baseline")
    assert sum(ph.steps for ph in r.phases) == sum(ph.steps for ph in b.phases)
    assert all(ph.image_size == 32 for ph in b.phases)


def test_mask_presets_match_sequence_lengths():
    assert build_schedule("mask").phases[0].keep_ratio == pytest.approx(1 / 16)
    assert build_schedule("mask-16").phases[0].keep_ratio == pytest.approx(1 / 4)


def test_transfer_keeps_other_parameters_byte_identical():
    model = DualEncoder(image_size=8, seed=0)
    before = {k: v.data.tobytes() for k, v in model.params.items()}
    S.transfer_resolution(model, 8, 32)
    assert model.params["image/pos"].shape == (64, model.image_cfg.width)
    for k, v in model.params.items():
        if k != "image/pos":
            assert v.data.tobytes() == before[k], k


def test_transfer_resets_only_position_moments(corpus):
    model = DualEncoder(TINY_IMAGE, TINY_TEXT, image_size=8, seed=0)
    opt = AdamW()
    from c2fclip import tensor as T
    from c2fclip.contrastive import model_loss
    imgs = D.resize_to(corpus.train.images[:4], 8, 4)
    T.backward(model_loss(model, imgs, corpus.train.tokens[:4], corpus.train.lengths[:4]))
    opt.step(model.params, 1e-3)
    S.transfer_resolution(model, 8, 16, opt)
    assert "image/pos" not in opt.state and "image/patch/w" in opt.state


def test_transfer_rejects_wrong_source_size():
    with pytest.raises(ScheduleError):
        S.transfer_resolution(DualEncoder(image_size=8, seed=0), 16, 32)


def _tiny_schedule(seed=0):
    return ScheduleConfig([Phase("main", 8, 8, 5, 1e-3, 1), Phase("finetune", 32, 8, 3, 1e-4, 1)],
                          seed=seed, eval_every=2, preset="tiny")


def test_run_emits_expected_rows(corpus, tmp_path):
    res = Trainer(_tiny_schedule(), corpus, TINY_IMAGE, TINY_TEXT).run(tmp_path)
    assert len(res.metrics) == math.ceil(5 / 2) + math.ceil(3 / 2)
    assert [r["phase"] for r in res.phase_end] == ["main", "finetune"]
    assert res.model.image_size == 32
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(S.METRIC_COLUMNS) and len(lines) == 1 + len(res.metrics)
    for name in ("phase0_main.ckpt", "phase1_finetune.ckpt", "final.ckpt", "phase_end.csv", "timing.csv"):
        assert (tmp_path / name).exists()
    flops = [r["flops_cum"] for r in res.metrics]
    assert flops == sorted(flops)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("size", [8, 32])
def test_first_loss_near_log_batch(corpus, seed, size):
    s = ScheduleConfig([Phase("main", size, 32, 1, 1e-3, 0)], seed=seed)
    res = Trainer(s, corpus).run()
    assert abs(res.metrics[0]["loss"] - math.log(32)) < 0.2 * math.log(32)


def test_runs_are_byte_reproducible(corpus, tmp_path):
    for d in ("a", "b"):
        Trainer(_tiny_schedule(seed=3), corpus, TINY_IMAGE, TINY_TEXT).run(tmp_path / d)
    for name in ("metrics.csv", "phase_end.csv", "final.ckpt", "phase0_main.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_mask_mode_trains_at_full_resolution(corpus):
    s = ScheduleConfig([Phase("main", 32, 8, 2, 1e-3, 1, mode="mask", keep_ratio=0.25)], eval_every=5)
    res = Trainer(s, corpus, TINY_IMAGE, TINY_TEXT).run()
    assert res.model.image_size == 32 and np.isfinite(res.metrics[0]["loss"])


def test_trainer_rejects_batch_larger_than_corpus(corpus):
    s = ScheduleConfig([Phase("main", 8, 64, 2, 1e-3, 1)])
    with pytest.raises(D.ConfigurationError):
        Trainer(s, corpus, TINY_IMAGE, TINY_TEXT)


def test_same_size_transfer_keeps_loss_bit_exact(corpus):
    from c2fclip import tensor as T
    from c2fclip.contrastive import model_loss
    model = DualEncoder(TINY_IMAGE, TINY_TEXT, image_size=8, seed=0)
    imgs = D.resize_to(corpus.train.images[:8], 8, 4)
    args = (imgs, corpus.train.tokens[:8], corpus.train.lengths[:8])
    with T.no_grad():
        before = model_loss(model, *args).item()
        S.transfer_resolution(model, 8, 8)
        after = model_loss(model, *args).item()
    assert before == after
