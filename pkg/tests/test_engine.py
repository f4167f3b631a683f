import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcut.encoder import EncoderConfig, build_encoder, generate_trace
from flowcut.engine import (
    PruneConfig,
    ScheduleError,
    baseline_single_layer,
    combine_scores,
    cumulative_update,
    event_layers,
    global_attention,
    multi_criteria_score,
    prune_count,
    round_half_away,
    run_schedule,
    select_keep,
    single_layer_config,
)
from flowcut.tensor import LayerTrace, average_heads

from conftest import random_trace


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, 0.49, 2.0)] == [1, 2, 3, -1, 0, 2]


# --- global attention -------------------------------------------------------


def test_cls_row_renormalised_over_patches():
    attn = np.zeros((1, 5, 5), dtype=np.float32)
    attn[0, 0, 1:] = 0.25
    attn[0, 1:] = 0.2
    np.testing.assert_allclose(global_attention(LayerTrace(attn=attn), True), [0.25] * 4)


def test_no_cls_zero_q_uniform():
    z = np.zeros((2, 6, 3), dtype=np.float32)
    k = np.random.default_rng(0).standard_normal((2, 6, 3)).astype(np.float32)
    np.testing.assert_allclose(global_attention(LayerTrace(q=z, k=k, v=z), False), np.full(6, 1 / 6))


def test_two_head_cls_matches_straight_line_oracle(rng):
    tr = random_trace(rng, layers=1, heads=2, rows=2, cols=2)
    a = tr.layers[0].attn.astype(np.float64)
    avg = [(a[0, 0, j] + a[1, 0, j]) / 2 for j in range(5)]
    patch = avg[1:]
    expected = [x / sum(patch) for x in patch]
    np.testing.assert_allclose(global_attention(tr.layers[0], True), expected, atol=1e-12)


def test_no_cls_matches_mean_query_oracle(rng):
    tr = random_trace(rng, layers=1, heads=2, rows=2, cols=3, has_cls=False)
    lt = tr.layers[0]
    rows = []
    for h in range(2):
        qg = lt.q[h].astype(np.float64).mean(axis=0)
        logits = lt.k[h].astype(np.float64) @ qg / np.sqrt(lt.q.shape[-1])
        e = np.exp(logits - logits.max())
        rows.append(e / e.sum())
    np.testing.assert_allclose(global_attention(lt, False), np.mean(rows, axis=0), atol=1e-12)


def test_masked_subset_equals_recomputed_softmax(rng):
    # per head, renormalising a sliced softmax equals the softmax over the subset
    tr = random_trace(rng, layers=1, heads=1, rows=3, cols=3)
    lt = tr.layers[0]
    tokens = np.array([0, 2, 5, 7])
    sub = LayerTrace(q=lt.q[:, tokens], k=lt.k[:, tokens])
    np.testing.assert_allclose(global_attention(lt, True, tokens), global_attention(sub, True), atol=1e-6)


def test_missing_tensors():
    with pytest.raises(ValueError):
        global_attention(LayerTrace(attn=np.eye(3, dtype=np.float32)[None]), False)


# --- prune count ------------------------------------------------------------


def test_prune_count_examples():
    assert prune_count(576, 64, 4, 0.0) == 256
    assert prune_count(100, 64, 1, 0.5) == 27
    assert prune_count(300, 64, 3, 1.0) == 0


@settings(max_examples=200)
@given(st.integers(1, 600), st.integers(0, 600), st.integers(1, 20), st.floats(0, 1), st.floats(0, 1))
def test_prune_count_monotone_and_clamped(n, t, l, r1, r2):
    t = min(t, n)
    lo, hi = sorted((r1, r2))
    assert prune_count(n, t, l, hi) <= prune_count(n, t, l, lo)
    assert 0 <= prune_count(n, t, l, lo) <= n - t
    assert prune_count(n, t, l, 1.0) == 0


# --- scoring ----------------------------------------------------------------


def test_combine_hand_example():
    np.testing.assert_allclose(combine_scores([0.6, 0.4], [0.5, 0.5], [2, 1]), [2.2, 0.9])


def test_attention_only_toggle(rng):
    a = rng.random(5)
    a /= a.sum()
    _, _, _, s = multi_criteria_score(a, rng.standard_normal((5, 4)), rng.standard_normal(4), multi_criteria=False)
    assert np.array_equal(s, a)


def test_equal_criteria_constant_score():
    v = np.ones((4, 3))
    _, i_s, i_d, s = multi_criteria_score(np.full(4, 0.25), v, np.ones(3))
    np.testing.assert_allclose(i_s, 0.25)
    np.testing.assert_allclose(s, s[0])


def test_similarity_is_scaled_softmax(rng):
    v, vg = rng.standard_normal((6, 8)), rng.standard_normal(8)
    _, i_s, i_d, _ = multi_criteria_score(np.full(6, 1 / 6), v, vg)
    logits = v @ vg / np.sqrt(8)
    np.testing.assert_allclose(i_s, np.exp(logits) / np.exp(logits).sum(), atol=1e-12)
    np.testing.assert_allclose(i_d, np.abs(v).sum(axis=1))


def test_zero_sum_guard():
    with pytest.raises(ValueError):
        combine_scores([0, 0], [0.5, 0.5], [1, 1])


# --- cumulative tracking ----------------------------------------------------


def test_cumulative_examples():
    np.testing.assert_allclose(cumulative_update([1.0, 0.5], [0.0, 1.0]), [0.5, 0.75])
    np.testing.assert_array_equal(cumulative_update(None, [3.0, 4.0]), [3.0, 4.0])
    np.testing.assert_array_equal(cumulative_update([9.0, 9.0], [3.0, 4.0], cumulative=False), [3.0, 4.0])
    with pytest.raises(ValueError):
        cumulative_update([1.0], [1.0, 2.0])


def test_cumulative_unrolled_weights(rng):
    layers = [rng.random(5) for _ in range(7)]
    s = None
    for x in layers:
        s = cumulative_update(s, x)
    l = len(layers) - 1
    weights = [0.5**l] + [0.5 ** (l - k + 1) for k in range(1, l + 1)]
    np.testing.assert_allclose(s, sum(w * x for w, x in zip(weights, layers)), atol=1e-12)


# --- selection --------------------------------------------------------------


def test_select_keep_examples():
    kept, dropped = select_keep([1, 1, 0], 1)
    assert kept.tolist() == [0] and dropped.tolist() == [1, 2]
    kept, dropped = select_keep([3, 1, 2], 3)
    assert kept.tolist() == [0, 1, 2] and dropped.tolist() == []
    with pytest.raises(ValueError):
        select_keep([1, 2], 3)


def _sort_oracle(scores, keep):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:keep]), sorted(order[keep:])


def test_select_keep_random_vectors_every_keep(rng):
    s = rng.random(12).tolist()
    for keep in range(13):
        kept, dropped = select_keep(s, keep)
        assert (kept.tolist(), dropped.tolist()) == _sort_oracle(s, keep)


@settings(max_examples=100)
@given(st.lists(st.sampled_from([0.0, 0.5, 1.0, 2.0]), min_size=1, max_size=12), st.floats(0.01, 100), st.data())
def test_select_keep_scale_invariant(scores, c, data):
    keep = data.draw(st.integers(0, len(scores)))
    k1, _ = select_keep(scores, keep)
    k2, _ = select_keep([c * x for x in scores], keep)
    assert k1.tolist() == k2.tolist() == _sort_oracle(scores, keep)[0]


# --- schedule ---------------------------------------------------------------


def test_event_layers_default_interval():
    assert event_layers(PruneConfig(target=4), 12) == [[1, 3, 5, 7, 9, 10]]
    assert event_layers(PruneConfig(target=4, interval=3), 12) == [[2, 5, 8, 10]]
    assert event_layers(PruneConfig(target=4, interval=12), 12) == [[10]]
    assert event_layers(PruneConfig(target=4, single_event=True), 12) == [[10]]
    two = PruneConfig(target=4, stages=(("penultimate", 8), ("post", 4)))
    assert event_layers(two, 12) == [[1, 3, 5, 7, 9, 10], [11]]


def test_live_default_encoder_reaches_target():
    report = run_schedule(build_encoder(EncoderConfig()), PruneConfig(target=16))
    assert len(report.final_kept) == 16
    assert report.mode == "live" and report.approximation is None
    assert report.decisions[-1].layer == 10


def test_remaining_events_counted_inclusively(golden_trace):
    report = run_schedule(golden_trace, PruneConfig(target=8))
    assert [d.remaining for d in report.decisions] == [4, 3, 2, 1]
    for d in report.decisions[:-1]:
        assert d.P == len(d.dropped)
        assert d.P == prune_count(d.tokens_before, 8, d.remaining, d.r_H)
    assert len(report.decisions[-1].kept) == 8


def test_dropped_are_lowest_cumulative(golden_trace):
    report = run_schedule(golden_trace, PruneConfig(target=8))
    for d in report.decisions:
        scores = dict(zip(d.active_before, d.S_cum))
        if d.dropped and d.kept:
            assert max(scores[i] for i in d.dropped) <= min(scores[i] for i in d.kept)
        assert len(d.kept) + len(d.dropped) == d.tokens_before


def test_single_event_all_off_equals_baseline(golden_trace):
    report = run_schedule(golden_trace, single_layer_config(10))
    assert len(report.decisions) == 1
    assert report.final_kept == baseline_single_layer(golden_trace, golden_trace.num_layers - 2, 10)


def test_baseline_uniform_keeps_first(rng):
    n = 9
    attn = np.full((1, n + 1, n + 1), 1 / (n + 1), dtype=np.float32)
    tr = random_trace(rng, layers=2, heads=1, rows=3, cols=3)
    for lt in tr.layers:
        lt.attn = attn.copy()
    assert baseline_single_layer(tr, 0, 4) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        baseline_single_layer(tr, 5, 4)


def test_baseline_matches_sort_oracle(rng):
    tr = random_trace(rng, layers=2, rows=2, cols=4, has_cls=True)
    a = average_heads(tr.layers[1].attn)[0, 1:]
    a = (a / a.sum()).tolist()
    assert baseline_single_layer(tr, 1, 3) == _sort_oracle(a, 3)[0]


def test_two_stage_reaches_target(golden_trace):
    cfg = PruneConfig(target=6, stages=(("penultimate", 12), ("post", 6)))
    report = run_schedule(golden_trace, cfg)
    assert len(report.final_kept) == 6
    stage_ends = [d for d in report.decisions if d.remaining == 1]
    assert [len(d.kept) for d in stage_ends] == [12, 6]
    assert stage_ends[-1].layer == golden_trace.num_layers - 1


def test_fixed_quota_split(golden_trace):
    cfg = PruneConfig(target=8, adaptive_count=False)
    report = run_schedule(golden_trace, cfg)
    # 36 -> 8 over 4 events: round(28/4) = 7 each
    assert [len(d.dropped) for d in report.decisions] == [7, 7, 7, 7]


def test_fixed_quota_remainder_to_last(golden_trace):
    report = run_schedule(golden_trace, PruneConfig(target=9, adaptive_count=False))
    # 27 over 4 events: round(6.75) = 7, 7, 7, remainder 6
    assert [len(d.dropped) for d in report.decisions] == [7, 7, 7, 6]


def test_trace_mode_masks_dropped_tokens(golden_trace):
    report = run_schedule(golden_trace, PruneConfig(target=8))
    first = report.decisions[0]
    later = report.decisions[1]
    assert set(later.active_before) == set(first.kept)
    assert abs(sum(later.I_a) - 1.0) < 1e-9
    assert report.approximation and "trace mode" in report.approximation


def test_no_cls_trace_runs(rng):
    tr = random_trace(rng, layers=6, rows=4, cols=4, has_cls=False)
    report = run_schedule(tr, PruneConfig(target=5))
    assert len(report.final_kept) == 5


def test_attention_only_trace_requires_qkv_for_multicriteria(rng):
    tr = random_trace(rng, layers=4, qkv=False)
    with pytest.raises(ValueError, match="QKV"):
        run_schedule(tr, PruneConfig(target=3))
    report = run_schedule(tr, PruneConfig(target=3, multi_criteria=False))
    assert len(report.final_kept) == 3


@pytest.mark.parametrize(
    "cfg",
    [
        PruneConfig(target=0),
        PruneConfig(target=40),
        PruneConfig(target=4, interval=0),
        PruneConfig(target=4, weight_history=0.7, weight_current=0.7),
        PruneConfig(target=4, stages=(("penultimate", 4), ("post", 8))),
        PruneConfig(target=4, stages=((20, 4),)),
        PruneConfig(target=4, stages=(("post", 8), ("penultimate", 4))),
        PruneConfig(target=4, mode="live"),
    ],
)
def test_infeasible_configs(golden_trace, cfg):
    with pytest.raises(ScheduleError):
        run_schedule(golden_trace, cfg)


def test_target_equal_to_patch_count_is_noop(golden_trace):
    report = run_schedule(golden_trace, PruneConfig(target=36))
    assert report.decisions == [] and len(report.final_kept) == 36


@pytest.mark.parametrize("flags", list(itertools.product([False, True], repeat=3)))
def test_all_toggle_combinations(golden_trace, flags):
    adaptive, cumulative, multi = flags
    cfg = PruneConfig(target=7, adaptive_count=adaptive, cumulative=cumulative, multi_criteria=multi)
    report = run_schedule(golden_trace, cfg)
    counts = report.token_counts
    assert len(report.final_kept) == 7
    assert all(b <= a for a, b in zip(counts, counts[1:]))


@settings(max_examples=30, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(2, 5),
    st.integers(2, 5),
    st.integers(1, 4),
    st.booleans(),
    st.data(),
)
def test_report_invariants(seed, rows, cols, n, has_cls, data):
    rng = np.random.default_rng(seed)
    tr = random_trace(rng, layers=data.draw(st.integers(2, 9)), rows=rows, cols=cols, has_cls=has_cls)
    t = data.draw(st.integers(1, rows * cols - 1))
    report = run_schedule(tr, PruneConfig(target=t, interval=n))
    assert len(report.final_kept) == t
    seen_dropped = set()
    for d in report.decisions:
        assert not seen_dropped.intersection(d.kept)
        seen_dropped.update(d.dropped)
    counts = report.token_counts
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_report_json_and_csv(golden_trace):
    import json

    report = run_schedule(golden_trace, PruneConfig(target=8))
    doc = json.loads(report.to_json())
    assert doc["final_count"] == 8 and "scores" not in doc["events"][0]
    doc = json.loads(report.to_json(scores=True))
    assert len(doc["events"][0]["scores"]["S_cum"]) == 36
    lines = report.decisions_csv().splitlines()
    assert lines[0] == "layer,stage,tokens_before,H,r_H,L,P,dropped,kept"
    assert len(lines) == 1 + len(report.decisions)


def test_live_and_trace_agree_without_pruning():
    cfg = EncoderConfig(layers=5, grid_rows=4, grid_cols=4, weight_range=0.5)
    live = run_schedule(build_encoder(cfg), PruneConfig(target=16))
    trace = run_schedule(generate_trace(cfg), PruneConfig(target=16))
    assert [r.H for r in live.layers] == [r.H for r in trace.layers]
