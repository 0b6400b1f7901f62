import numpy as np
import pytest

from c2fclip import cost
from c2fclip.encoders import DESK_IMAGE, DESK_TEXT, TEXT_REFERENCE, VIT_L16, DualEncoder, EncoderConfig
from c2fclip.schedule import Phase, ScheduleConfig, build_schedule


@pytest.mark.parametrize("h, w, p, n", [(224, 224, 16, 196), (64, 64, 16, 16), (32, 32, 4, 64), (8, 16, 4, 8)])
def test_token_count(h, w, p, n):
    assert cost.token_count(h, w, p) == n


def test_token_count_rejects_indivisible():
    with pytest.raises(ValueError):
        cost.token_count(30, 30, 4)


def test_hand_counted_tiny_layer():
    cfg = EncoderConfig(n_layers=1, n_heads=1, width=2, mlp_ratio=1, patch_size=1, embed_dim=1, channels=1)
    rep = cost.forward_flops(cfg, 3, flops_per_mac=1)
    # n=3, w=2, m=2: projections 4*3*2*2, attention 2*3*3*2, mlp 2*3*2*2
    assert (rep.attention_projection, rep.attention_quadratic, rep.mlp) == (48, 36, 24)
    assert rep.elementwise == 2 * 3 * 2 + 3 * 2 + 1 * 9 + 2 * 3 * 2
    assert rep.embed == 3 * 1 * 1 * 2 and rep.head == 3 * 2 + 2 * 1


def test_table2_gflops_within_two_percent():
    for row in cost.table2():
        assert abs(row["rel_err"]) < 0.02, row
    rows = cost.table2()
    assert rows[0]["gflops"] / rows[-1]["gflops"] > 9


def test_scaling_exponents():
    sizes = [448, 224, 112]
    assert abs(cost.scaling_exponent(VIT_L16, sizes, "attention_only") - 4.0) < 1e-9
    assert abs(cost.scaling_exponent(VIT_L16, sizes, "linear_only") - 2.0) < 1e-9
    assert 2.0 < cost.scaling_exponent(VIT_L16, sizes, "total") < 4.0
    with pytest.raises(ValueError):
        cost.scaling_exponent(VIT_L16, [224])


def test_quadratic_term_dominates_long_sequences():
    rep = cost.forward_flops(VIT_L16, 10_000)
    assert rep.attention_quadratic / rep.total > 0.5
    short = cost.forward_flops(VIT_L16, 16)
    assert short.attention_quadratic / short.total < 0.05


def test_monotone_in_sequence_length():
    totals = [cost.forward_flops(DESK_IMAGE, n).total for n in range(1, 80)]
    assert np.all(np.diff(totals) > 0)


def test_step_flops_linear_in_batch_and_three_forwards():
    ph = Phase("p", 16, 10, 5, 1e-3, 1)
    per_ex = cost.dual_forward_flops(DESK_IMAGE, DESK_TEXT, 16, DESK_TEXT.max_seq_len)
    assert cost.step_flops(ph, DESK_IMAGE, DESK_TEXT) == 3 * 10 * per_ex
    assert cost.step_flops(ph.replace(batch_size=20), DESK_IMAGE, DESK_TEXT) == 2 * cost.step_flops(
        ph, DESK_IMAGE, DESK_TEXT)


def test_schedule_cost_sums_phases():
    s = ScheduleConfig([Phase("a", 8, 4, 3, 1e-3, 1), Phase("b", 32, 4, 2, 1e-4, 1)])
    expected = sum(ph.steps * cost.step_flops(ph, DESK_IMAGE, DESK_TEXT) for ph in s.phases)
    assert cost.schedule_cost(s, DESK_IMAGE, DESK_TEXT) == expected


def test_masked_phase_costs_like_resized_phase():
    resize = build_schedule("reclip").phases[0]
    mask = build_schedule("mask").phases[0]
    assert cost.step_flops(resize, DESK_IMAGE, DESK_TEXT) == cost.step_flops(mask, DESK_IMAGE, DESK_TEXT)


def test_reclip_cheaper_than_baseline():
    r = cost.schedule_cost(build_schedule("reclip"), DESK_IMAGE, DESK_TEXT)
    b = cost.schedule_cost(build_schedule("baseline"), DESK_IMAGE, DESK_TEXT)
    assert b / r > 3


def test_measured_step_time_reports_spread():
    model = DualEncoder(image_size=8, seed=0)
    t = cost.measured_step_time(model, 8, n_trials=3, batch_size=4)
    assert t["image_size"] == 8 and t["median_s"] > 0
    assert t["q1_s"] <= t["median_s"] <= t["q3_s"] and len(t["times_s"]) == 3


def test_text_reference_config_is_valid():
    assert TEXT_REFERENCE.width % TEXT_REFERENCE.n_heads == 0
