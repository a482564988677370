import math

import numpy as np
import pytest
from pydantic import ValidationError

from ttadet.bench import SceneSpec, generate_dataset
from ttadet.detector import PARAM_ORDER
from ttadet.engine import CSV_COLUMNS, PRESETS, TtaConfig, init_state, process_batch, run_stream, with_preset
from ttadet.errors import DimMismatch
from ttadet.selftrain import PseudoLabelConfig
from ttadet.source import SourceStats, fit_source_stats
from ttadet.stats import GaussianStats

from test_detector import small_params

SPEC = SceneSpec(image_size=8, num_classes=2, size_min=2, size_max=4, objects_max=2, seed=5)
FAST = TtaConfig(lr=1e-2, lambda_al_f=1.0, lambda_al_a=0.1, jitter=0.01, steps_per_batch=2, batch_size=4)


@pytest.fixture(scope="module")
def setup():
    params = small_params(21, scale=0.5)
    stats = fit_source_stats(params, [s for s, _ in generate_dataset(SPEC, 64)])
    stream = generate_dataset(SPEC.model_copy(update={"seed": 6}), 22)
    return params, stats, stream


def records_equal(a, b):
    return all(x.detections == y.detections and x.row() == y.row() for x, y in zip(a, b))


def test_init_state_starts_from_source(setup):
    params, stats, _ = setup
    state = init_state(params, stats, FAST)
    assert state.student.equal(params) and state.teacher.equal(params)
    assert state.target_global is stats.global_stats and state.batch_counter == 0


def test_init_state_rejects_wrong_dims(setup):
    params, stats, _ = setup
    bad = SourceStats(GaussianStats(np.zeros(3), np.eye(3)), stats.foreground_stats)
    with pytest.raises(DimMismatch):
        init_state(params, bad, FAST)
    bad = SourceStats(stats.global_stats, GaussianStats(np.zeros(3), np.eye(3)))
    with pytest.raises(DimMismatch):
        init_state(params, bad, FAST)


def test_rate_overflow_is_rejected():
    with pytest.raises(ValidationError):
        TtaConfig(gamma=1 / 8, batch_size=8)


def test_unknown_preset():
    with pytest.raises(ValueError):
        with_preset(FAST, "everything")


def test_presets_cover_the_ablation_rows():
    assert set(PRESETS) == {"direct-test", "st", "align", "st+global", "stfar"}
    assert not with_preset(FAST, "direct-test").adapts


def test_run_is_deterministic(setup):
    params, stats, stream = setup
    a = run_stream(params, stats, stream, FAST, seed=3)
    b = run_stream(params, stats, stream, FAST, seed=3)
    assert a.to_csv() == b.to_csv()
    assert a.final_state.student.equal(b.final_state.student)


def test_adaptation_changes_the_backbone_only(setup):
    params, stats, stream = setup
    log = run_stream(params, stats, stream, FAST, seed=0)
    assert log.summary()["updates"] > 0
    changed = {n for n in PARAM_ORDER if not np.array_equal(log.final_state.student[n], params[n])}
    assert changed == {"conv1_w", "conv1_b", "conv2_w", "conv2_b"}


def test_zero_weights_leave_params_untouched(setup):
    params, stats, stream = setup
    cfg = FAST.model_copy(update=dict(lambda_st_cls=0.0, lambda_st_reg=0.0, lambda_al_f=0.0, lambda_al_a=0.0))
    log = run_stream(params, stats, stream, cfg, seed=1)
    assert log.final_state.student.equal(params)
    assert log.summary()["updates"] == 0


def test_no_alignment_and_no_pseudo_labels_is_direct_test(setup):
    params, stats, stream = setup
    cfg = with_preset(FAST, "st")
    log = run_stream(params, stats, stream, cfg, seed=2, pseudo_cfg=PseudoLabelConfig(tau=1 - 1e-12))
    direct = run_stream(params, stats, stream, with_preset(FAST, "direct-test"), seed=2)
    assert all(r.n_pseudo == 0 for r in log.records)
    assert log.final_state.student.equal(params)
    assert [r.detections for r in log.records] == [r.detections for r in direct.records]


def test_truncation_leaves_earlier_records_unchanged(setup):
    params, stats, stream = setup
    full = run_stream(params, stats, stream, FAST, seed=4)
    for t in (1, 3):
        cut = run_stream(params, stats, stream[:t * FAST.batch_size], FAST, seed=4)
        assert len(cut.records) == t
        assert records_equal(cut.records, full.records[:t])


def test_csv_has_one_row_per_batch(setup):
    params, stats, stream = setup
    log = run_stream(params, stats, stream, FAST, seed=0)
    lines = log.to_csv().splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    assert len(lines) - 1 == math.ceil(len(stream) / FAST.batch_size)
    assert [int(line.split(",")[0]) for line in lines[1:]] == list(range(len(lines) - 1))


def test_final_map_is_last_cumulative_value(setup):
    params, stats, stream = setup
    log = run_stream(params, stats, stream, FAST, seed=0)
    assert log.final_map == log.curve()[-1][1]
    assert log.summary()["batches"] == len(log.records)


def test_stats_advance_once_per_batch(setup):
    # the first inner step sees the same student either way, so the stats after one batch agree
    params, stats, stream = setup
    batch = [s for s, _ in stream[:4]]
    states = []
    for steps in (1, 3):
        cfg = FAST.model_copy(update={"steps_per_batch": steps})
        _, state, _ = process_batch(init_state(params, stats, cfg), batch, stats, cfg, seed=0)
        states.append(state)
    a, b = states
    np.testing.assert_array_equal(a.target_global.mean, b.target_global.mean)
    np.testing.assert_array_equal(a.target_global.cov, b.target_global.cov)
    assert not a.student.equal(b.student)


def test_predictions_come_before_the_update(setup):
    params, stats, stream = setup
    batch = [s for s, _ in stream[:4]]
    direct_dets, _, _ = process_batch(init_state(params, stats, FAST), batch, stats, with_preset(FAST, "direct-test"))
    dets, state, record = process_batch(init_state(params, stats, FAST), batch, stats, FAST)
    assert dets == direct_dets
    assert record.updated and not state.student.equal(params)


def test_empty_stream_is_rejected(setup):
    params, stats, _ = setup
    with pytest.raises(ValueError):
        run_stream(params, stats, [], FAST, seed=0)
