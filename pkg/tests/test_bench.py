"""Synthetic data, task splitting, metrics arithmetic, pipeline parity,
and checkpoint/resume determinism."""

import json

import numpy as np
import pytest

from petcl.bench import (
    Dataset,
    MetricsReport,
    PetSpec,
    SplitSpec,
    TaskData,
    TaskStream,
    aggregate_reports,
    eval_incremental,
    forgetting,
    make_synthetic_dataset,
    prepare_backbone,
    run_dual_expert,
    run_naive_pet_baseline,
    run_seqft_baseline,
    split_tasks,
    subset_by_classes,
    task_accuracy,
)
from petcl.continual import AblationFlags, TrainConfig
from petcl.model import BackboneConfig, build_backbone

TINY = BackboneConfig(depth=2, model_dim=16, heads=2, mlp_ratio=2,
                      input_tokens=4, patch_dim=4, seed=5)


def tiny_dataset(num_classes=4, seed=0):
    return make_synthetic_dataset(num_classes, per_class_train=6,
                                  per_class_test=4, seed=seed, tokens=4,
                                  patch_dim=4, mean_scale=0.8, noise_std=0.5)


def tiny_stream(num_classes=4, tasks=2, seed=0, order_seed=0):
    return split_tasks(tiny_dataset(num_classes, seed),
                       SplitSpec(tasks, num_classes // tasks, order_seed))


def frozen_backbone():
    bb = build_backbone(TINY)
    bb.freeze()
    return bb


def quick_cfg(**kw):
    base = dict(epochs=2, freeze_epochs=1, lr=3e-3, batch_size=8, seed=11)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# synthetic data


def test_dataset_is_deterministic_per_seed():
    a = tiny_dataset(seed=3)
    b = tiny_dataset(seed=3)
    c = tiny_dataset(seed=4)
    assert np.array_equal(a.train_x, b.train_x)
    assert np.array_equal(a.test_x, b.test_x)
    assert not np.array_equal(a.train_x, c.train_x)


def test_dataset_shapes_and_labels():
    ds = make_synthetic_dataset(3, 5, 2, seed=0, tokens=4, patch_dim=2)
    assert ds.train_x.shape == (15, 4, 2)
    assert ds.test_x.shape == (6, 4, 2)
    assert sorted(set(ds.train_y)) == [0, 1, 2]
    assert np.bincount(ds.train_y).tolist() == [5, 5, 5]


def test_dataset_validations():
    with pytest.raises(ValueError, match="two classes"):
        make_synthetic_dataset(1, 5, 2, seed=0)
    with pytest.raises(ValueError, match="positive"):
        make_synthetic_dataset(3, 0, 2, seed=0)


def test_linear_probe_on_random_features_lands_in_band():
    """Desk-default separability: a linear probe on features from an
    untrained backbone must land well above chance but clearly below
    perfect, so the continual protocol is what decides the outcome."""
    from sklearn.linear_model import LogisticRegression

    from petcl.model import forward_features

    ds = make_synthetic_dataset(20, 50, 20, seed=1)
    bb = build_backbone(BackboneConfig())

    def feats(x):
        return np.concatenate([forward_features(bb, x[i:i + 256]).data
                               for i in range(0, len(x), 256)])

    raw = LogisticRegression(max_iter=2000).fit(
        ds.train_x.reshape(len(ds.train_x), -1), ds.train_y)
    assert raw.score(ds.test_x.reshape(len(ds.test_x), -1), ds.test_y) > 0.15

    probe = LogisticRegression(max_iter=3000).fit(feats(ds.train_x), ds.train_y)
    acc = probe.score(feats(ds.test_x), ds.test_y)
    assert 0.60 <= acc <= 0.90


def test_subset_reindexes_densely():
    ds = tiny_dataset(num_classes=6)
    sub = subset_by_classes(ds, [4, 1])
    assert sub.num_classes == 2
    assert sorted(set(sub.train_y)) == [0, 1]
    # class 4 maps to 0, class 1 maps to 1, data rows preserved
    orig_rows = ds.train_x[ds.train_y == 4]
    assert np.array_equal(sub.train_x[sub.train_y == 0], orig_rows)


# ---------------------------------------------------------------------------
# task splits


def test_split_partitions_all_classes_exactly_once():
    ds = tiny_dataset(num_classes=8)
    stream = split_tasks(ds, SplitSpec(4, 2, class_order_seed=1))
    seen = [c for t in stream.tasks for c in t.source_classes]
    assert sorted(seen) == list(range(8))
    assert stream.class_order == seen


def test_split_remaps_labels_to_arrival_order():
    ds = tiny_dataset(num_classes=8)
    stream = split_tasks(ds, SplitSpec(4, 2, class_order_seed=1))
    for i, task in enumerate(stream.tasks):
        lo, hi = task.class_range
        assert (lo, hi) == (2 * i, 2 * i + 2)
        assert set(task.train_y) == set(range(lo, hi))
        assert set(task.test_y) == set(range(lo, hi))
        # dense label tracks the original class through the permutation
        for dense, source in zip(range(lo, hi), task.source_classes,
                                 strict=True):
            rows = task.train_x[task.train_y == dense]
            assert np.array_equal(rows, ds.train_x[ds.train_y == source])


def test_split_requires_exact_partition():
    ds = tiny_dataset(num_classes=6)
    with pytest.raises(ValueError, match="partition"):
        split_tasks(ds, SplitSpec(4, 2))


def test_split_orders_differ_across_seeds():
    ds = tiny_dataset(num_classes=8)
    a = split_tasks(ds, SplitSpec(4, 2, class_order_seed=0))
    b = split_tasks(ds, SplitSpec(4, 2, class_order_seed=1))
    assert a.class_order != b.class_order
    assert a.class_order == split_tasks(ds, SplitSpec(4, 2, 0)).class_order


# ---------------------------------------------------------------------------
# metrics


def _fake_task(n, accuracy, label):
    """Test rows whose first feature encodes the prediction the fake
    predictor will emit; exactly ``accuracy`` of them match ``label``."""
    right = int(round(n * accuracy))
    preds = np.full(n, label, dtype=np.int64)
    preds[right:] = label + 1
    x = preds.reshape(n, 1, 1).astype(np.float64)
    y = np.full(n, label, dtype=np.int64)
    return TaskData(x[:0], y[:0], x, y, (label, label + 1), [label])


def _fake_predict(x):
    return x[:, 0, 0].astype(np.int64)


def test_eval_incremental_hand_case():
    t1 = _fake_task(100, 1.0, 0)
    t2 = _fake_task(300, 0.5, 1)
    stream = TaskStream([t1, t2], SplitSpec(2, 1, 0), [0, 1])
    pooled, row = eval_incremental(_fake_predict, stream, 2, "pooled")
    task_mean, row2 = eval_incremental(_fake_predict, stream, 2, "task-mean")
    assert row == row2 == [1.0, 0.5]
    assert pooled == pytest.approx(0.625, abs=1e-12)
    assert task_mean == pytest.approx(0.75, abs=1e-12)
    only_first, row1 = eval_incremental(_fake_predict, stream, 1)
    assert only_first == 1.0 and row1 == [1.0]


def test_eval_incremental_validations():
    t1 = _fake_task(10, 1.0, 0)
    stream = TaskStream([t1], SplitSpec(1, 1, 0), [0])
    with pytest.raises(ValueError, match="upto"):
        eval_incremental(_fake_predict, stream, 2)
    with pytest.raises(ValueError, match="variant"):
        eval_incremental(_fake_predict, stream, 1, "macro")


def test_task_accuracy_on_fake_task():
    assert task_accuracy(_fake_predict, _fake_task(40, 0.25, 2)) == 0.25


def test_forgetting_hand_matrix():
    matrix = [[0.9], [0.8, 0.7], [0.6, 0.5, 0.95]]
    # task 0 peaked at 0.9 and ends at 0.6; task 1 peaked at 0.7, ends at 0.5
    assert forgetting(matrix) == pytest.approx((0.3 + 0.2) / 2, abs=1e-12)
    assert forgetting([[1.0]]) == 0.0


def test_forgetting_ignores_pre_learning_scores():
    # low early columns (before the task was learned) never count as "peak"
    matrix = [[0.9, 0.05], [0.7, 0.8]]
    assert forgetting(matrix) == pytest.approx(0.2, abs=1e-12)


# ---------------------------------------------------------------------------
# reports


def _quick_report(order_seed=0, label="dual"):
    stream = tiny_stream(order_seed=order_seed)
    return run_dual_expert(frozen_backbone(), stream, PetSpec("adapter", 2),
                           quick_cfg(), seeds={"class_order": order_seed},
                           label=label)


def test_report_round_trips_through_json():
    report = _quick_report()
    clone = MetricsReport.from_dict(json.loads(report.to_json()))
    assert clone.to_json() == report.to_json()
    assert clone.final_a == report.a_pooled[-1]


def test_report_json_is_deterministic():
    assert _quick_report().to_json() == _quick_report().to_json()


def test_report_csv_lists_final_row():
    report = _quick_report()
    lines = report.to_csv().strip().split("\n")
    assert lines[0] == "task,accuracy,variant"
    assert len(lines) == 1 + 2 * report.num_tasks


def test_aggregate_reports_stats():
    reports = [_quick_report(order_seed=s) for s in (0, 1)]
    agg = aggregate_reports(reports)
    assert agg["runs"] == 2
    finals = [r.a_pooled[-1] for r in reports]
    assert agg["final_a_pooled"]["mean"] == pytest.approx(np.mean(finals))
    assert agg["final_a_pooled"]["std"] == pytest.approx(np.std(finals))


def test_aggregate_rejects_mixed_splits():
    a = _quick_report()
    b = _quick_report()
    b.num_tasks = 3
    with pytest.raises(ValueError, match="incompatible"):
        aggregate_reports([a, b])
    with pytest.raises(ValueError, match="no reports"):
        aggregate_reports([])


# ---------------------------------------------------------------------------
# pipelines


def test_naive_baseline_equals_dual_with_everything_off():
    stream = tiny_stream()
    flags = AblationFlags(learning=False, accumulation=False, ensemble=False)
    dual = run_dual_expert(frozen_backbone(), stream, PetSpec("adapter", 2),
                           quick_cfg(), flags)
    naive = run_naive_pet_baseline(frozen_backbone(), stream,
                                   PetSpec("adapter", 2), quick_cfg())
    assert naive.pipeline == "naive"
    assert naive.acc_matrix == dual.acc_matrix
    assert naive.a_pooled == dual.a_pooled
    assert naive.flags == dual.flags


def test_dual_pipeline_report_shape():
    report = _quick_report()
    assert report.pipeline == "dual"
    assert len(report.acc_matrix) == 2
    assert [len(row) for row in report.acc_matrix] == [1, 2]
    assert len(report.a_pooled) == len(report.a_task_mean) == 2
    assert report.flags["learning"] and report.flags["ensemble"]
    assert 0.0 <= report.final_a <= 1.0


def test_prefix_flags_forced_off_without_learning():
    stream = tiny_stream()
    spec = PetSpec("prefix", 2, prefix_compensate=True, prefix_scales=True)
    flags = AblationFlags(learning=False)
    report = run_dual_expert(frozen_backbone(), stream, spec, quick_cfg(), flags)
    assert report.flags["prefix_compensate"] is False
    assert report.flags["prefix_scales"] is False
    kept = run_dual_expert(frozen_backbone(), stream, spec, quick_cfg())
    assert kept.flags["prefix_compensate"] is True


def test_seqft_baseline_runs_and_reports():
    stream = tiny_stream()
    report = run_seqft_baseline(frozen_backbone(), stream, quick_cfg())
    assert report.pipeline == "seqft"
    assert report.pet_kind is None
    assert len(report.acc_matrix) == 2


def test_seqft_leaves_original_backbone_untouched():
    from petcl.model import backbone_checksum

    bb = frozen_backbone()
    before = backbone_checksum(bb)
    run_seqft_baseline(bb, tiny_stream(), quick_cfg())
    assert backbone_checksum(bb) == before


# ---------------------------------------------------------------------------
# checkpoint / resume


def test_resume_matches_straight_through(tmp_path):
    stream = tiny_stream()
    straight = run_dual_expert(frozen_backbone(), stream, PetSpec("adapter", 2),
                               quick_cfg(), label="run")

    ckpt = str(tmp_path / "ckpt")
    first_leg = TaskStream(stream.tasks[:1], stream.spec, stream.class_order)
    run_dual_expert(frozen_backbone(), first_leg, PetSpec("adapter", 2),
                    quick_cfg(), label="run", checkpoint_dir=ckpt)
    resumed = run_dual_expert(frozen_backbone(), stream, PetSpec("adapter", 2),
                              quick_cfg(), label="run", checkpoint_dir=ckpt,
                              resume=True)
    assert resumed.to_json() == straight.to_json()


def test_resume_with_no_checkpoint_starts_fresh(tmp_path):
    stream = tiny_stream()
    report = run_dual_expert(frozen_backbone(), stream, PetSpec("adapter", 2),
                             quick_cfg(), label="run",
                             checkpoint_dir=str(tmp_path / "none"), resume=True)
    straight = run_dual_expert(frozen_backbone(), stream, PetSpec("adapter", 2),
                               quick_cfg(), label="run")
    assert report.to_json() == straight.to_json()


def test_checkpoint_resume_skips_finished_work(tmp_path):
    stream = tiny_stream()
    ckpt = str(tmp_path / "ckpt")
    run_dual_expert(frozen_backbone(), stream, PetSpec("adapter", 2),
                    quick_cfg(), checkpoint_dir=ckpt)
    # a fully finished run resumes into a no-op with the same metrics
    resumed = run_dual_expert(frozen_backbone(), stream, PetSpec("adapter", 2),
                              quick_cfg(), checkpoint_dir=ckpt, resume=True)
    fresh = run_dual_expert(frozen_backbone(), stream, PetSpec("adapter", 2),
                            quick_cfg())
    assert resumed.acc_matrix == fresh.acc_matrix


# ---------------------------------------------------------------------------
# experiment setup


def test_prepare_backbone_freezes_and_reserves_classes():
    ds_cfg = dict(per_class_train=6, per_class_test=4, mean_scale=0.8,
                  noise_std=0.5, pretrain_epochs=2, pretrain_lr=3e-3,
                  pretrain_batch=8)
    backbone, cl_ds, probe_acc = prepare_backbone(
        TINY, data_seed=0, pretext_classes=2, cl_classes=4, **ds_cfg)
    assert backbone.frozen
    assert cl_ds.num_classes == 4
    assert sorted(set(cl_ds.train_y)) == [0, 1, 2, 3]
    assert 0.0 <= probe_acc <= 1.0
