"""Class-incremental benchmark: synthetic data, task splits, metrics,
and the three pipelines (dual-expert, naive module tuning, sequential
full fine-tuning).

Incremental accuracy after task i is reported two ways: pooled over all
test samples seen so far, and as the unweighted mean of per-task
accuracies.  Forgetting is the mean over finished tasks of (best
accuracy ever observed on that task) minus (final accuracy on it).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import (
    atomic_write_text,
    load_head,
    load_petset,
    save_backbone,
    save_head,
    save_params,
    save_petset,
)
from .continual import (
    AblationFlags,
    LearnerState,
    TrainConfig,
    masked_local_ce,
    predict,
    train_task,
)
from .model import (
    Backbone,
    BackboneConfig,
    ClassifierHead,
    build_backbone,
    forward_features,
    grow_head,
    head_forward,
    pretrain_backbone,
)
from .optim import Adam
from .pet import build_pet_set

REPORT_SCHEMA = "petcl-report-v1"
EVAL_CHUNK = 256


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    tokens: int
    patch_dim: int


def make_synthetic_dataset(num_classes: int, per_class_train: int,
                           per_class_test: int, seed: int,
                           tokens: int = 16, patch_dim: int = 8,
                           mean_scale: float = 1.25,
                           noise_std: float = 1.0) -> Dataset:
    """Class-conditional Gaussian token grids.

    Each class gets a fixed mean pattern of shape (tokens, patch_dim);
    samples add isotropic noise.  ``mean_scale`` controls separability
    (small enough that a linear probe stays well below perfect).
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if per_class_train < 1 or per_class_test < 1:
        raise ValueError("per-class sample counts must be positive")
    gen = T.seeded_generator(seed, "synthetic")
    means = gen.normal(0.0, mean_scale, size=(num_classes, tokens, patch_dim))
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(num_classes):
        train_x.append(means[c] + gen.normal(0.0, noise_std,
                                             size=(per_class_train, tokens, patch_dim)))
        train_y.append(np.full(per_class_train, c, dtype=np.int64))
        test_x.append(means[c] + gen.normal(0.0, noise_std,
                                            size=(per_class_test, tokens, patch_dim)))
        test_y.append(np.full(per_class_test, c, dtype=np.int64))
    return Dataset(np.concatenate(train_x), np.concatenate(train_y),
                   np.concatenate(test_x), np.concatenate(test_y),
                   num_classes, tokens, patch_dim)


def subset_by_classes(ds: Dataset, classes) -> Dataset:
    """New dataset holding only the listed classes, labels re-indexed densely."""
    classes = [int(c) for c in classes]
    remap = {c: i for i, c in enumerate(classes)}
    tr = np.isin(ds.train_y, classes)
    te = np.isin(ds.test_y, classes)
    return Dataset(ds.train_x[tr],
                   np.array([remap[int(c)] for c in ds.train_y[tr]], dtype=np.int64),
                   ds.test_x[te],
                   np.array([remap[int(c)] for c in ds.test_y[te]], dtype=np.int64),
                   len(classes), ds.tokens, ds.patch_dim)


# ---------------------------------------------------------------------------
# task splits


@dataclass
class SplitSpec:
    num_tasks: int = 5
    classes_per_task: int = 4
    class_order_seed: int = 0


@dataclass
class TaskData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_range: tuple[int, int]
    source_classes: list[int]    # original class ids, in arrival order


@dataclass
class TaskStream:
    tasks: list[TaskData]
    spec: SplitSpec
    class_order: list[int]


def split_tasks(ds: Dataset, spec: SplitSpec) -> TaskStream:
    """Partition classes into equally sized tasks in a seeded order.

    Labels are remapped to arrival order, so task i covers the dense
    range [i * classes_per_task, (i + 1) * classes_per_task).
    """
    if spec.num_tasks < 1 or spec.classes_per_task < 1:
        raise ValueError("task counts must be positive")
    if spec.num_tasks * spec.classes_per_task != ds.num_classes:
        raise ValueError(
            f"{spec.num_tasks} tasks x {spec.classes_per_task} classes "
            f"does not partition {ds.num_classes} classes")
    order = T.seeded_generator(spec.class_order_seed, "classorder") \
        .permutation(ds.num_classes)
    new_label = np.empty(ds.num_classes, dtype=np.int64)
    new_label[order] = np.arange(ds.num_classes)
    tasks = []
    for i in range(spec.num_tasks):
        lo = i * spec.classes_per_task
        hi = lo + spec.classes_per_task
        classes = order[lo:hi]
        tr = np.isin(ds.train_y, classes)
        te = np.isin(ds.test_y, classes)
        tasks.append(TaskData(ds.train_x[tr], new_label[ds.train_y[tr]],
                              ds.test_x[te], new_label[ds.test_y[te]],
                              (lo, hi), [int(c) for c in classes]))
    return TaskStream(tasks, spec, [int(c) for c in order])


# ---------------------------------------------------------------------------
# metrics


def _chunked_predict(predict_fn, x: np.ndarray) -> np.ndarray:
    preds = [predict_fn(x[lo:lo + EVAL_CHUNK]) for lo in range(0, len(x), EVAL_CHUNK)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def task_accuracy(predict_fn, task: TaskData) -> float:
    return float((_chunked_predict(predict_fn, task.test_x) == task.test_y).mean())


def eval_incremental(predict_fn, stream: TaskStream, upto: int,
                     variant: str = "pooled") -> tuple[float, list[float]]:
    """Accuracy after learning tasks 1..upto over their pooled test sets.

    Returns the headline accuracy for ``variant`` ("pooled" weights by
    sample count, "task-mean" averages per-task accuracies) plus the
    per-task accuracy row.
    """
    if not 1 <= upto <= len(stream.tasks):
        raise ValueError(f"upto must lie in [1, {len(stream.tasks)}]")
    if variant not in ("pooled", "task-mean"):
        raise ValueError(f"unknown accuracy variant {variant!r}")
    row = []
    correct = 0
    total = 0
    for task in stream.tasks[:upto]:
        preds = _chunked_predict(predict_fn, task.test_x)
        row.append(float((preds == task.test_y).mean()))
        correct += int((preds == task.test_y).sum())
        total += len(task.test_y)
    headline = correct / total if variant == "pooled" else float(np.mean(row))
    return headline, row


def forgetting(acc_matrix: list[list[float]]) -> float:
    """Mean over finished tasks of (peak accuracy - final accuracy)."""
    n = len(acc_matrix)
    if n < 2:
        return 0.0
    drops = []
    for j in range(n - 1):
        peak = max(acc_matrix[i][j] for i in range(j, n))
        drops.append(peak - acc_matrix[n - 1][j])
    return float(np.mean(drops))


@dataclass
class MetricsReport:
    label: str
    pipeline: str                       # "dual" | "naive" | "seqft"
    pet_kind: str | None
    pet_size: int | None
    flags: dict
    seeds: dict
    num_tasks: int
    classes_per_task: int
    acc_matrix: list[list[float]]
    a_pooled: list[float]
    a_task_mean: list[float]
    forgetting: float
    variant: str = "pooled"             # headline accuracy variant
    schema: str = REPORT_SCHEMA

    @property
    def final_a(self) -> float:
        series = self.a_pooled if self.variant == "pooled" else self.a_task_mean
        return series[-1]

    @property
    def avg_a(self) -> float:
        series = self.a_pooled if self.variant == "pooled" else self.a_task_mean
        return float(np.mean(series))

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "label": self.label,
            "pipeline": self.pipeline,
            "pet_kind": self.pet_kind,
            "pet_size": self.pet_size,
            "flags": self.flags,
            "seeds": self.seeds,
            "num_tasks": self.num_tasks,
            "classes_per_task": self.classes_per_task,
            "acc_matrix": self.acc_matrix,
            "a_pooled": self.a_pooled,
            "a_task_mean": self.a_task_mean,
            "final_a_pooled": self.a_pooled[-1],
            "final_a_task_mean": self.a_task_mean[-1],
            "avg_a_pooled": float(np.mean(self.a_pooled)),
            "avg_a_task_mean": float(np.mean(self.a_task_mean)),
            "forgetting": self.forgetting,
            "variant": self.variant,
        }

    def to_json(self) -> str:
        """Canonical serialisation: sorted keys, fixed indent, repr floats."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["task,accuracy,variant"]
        for i, a in enumerate(self.a_pooled, start=1):
            lines.append(f"{i},{a!r},pooled")
        for i, a in enumerate(self.a_task_mean, start=1):
            lines.append(f"{i},{a!r},task-mean")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_dict(d: dict) -> "MetricsReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return MetricsReport(
            label=d["label"], pipeline=d["pipeline"], pet_kind=d["pet_kind"],
            pet_size=d["pet_size"], flags=d["flags"], seeds=d["seeds"],
            num_tasks=d["num_tasks"], classes_per_task=d["classes_per_task"],
            acc_matrix=d["acc_matrix"], a_pooled=d["a_pooled"],
            a_task_mean=d["a_task_mean"], forgetting=d["forgetting"],
            variant=d["variant"])

    @staticmethod
    def load(path: str) -> "MetricsReport":
        with open(path, "r", encoding="utf-8") as fh:
            return MetricsReport.from_dict(json.load(fh))


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Mean and standard deviation across repeated runs (e.g. class orders)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if (r.num_tasks, r.classes_per_task) != (first.num_tasks, first.classes_per_task):
            raise ValueError("reports use incompatible task splits")
    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std())}
    return {
        "label": first.label,
        "runs": len(reports),
        "final_a_pooled": stats([r.a_pooled[-1] for r in reports]),
        "final_a_task_mean": stats([r.a_task_mean[-1] for r in reports]),
        "avg_a_pooled": stats([float(np.mean(r.a_pooled)) for r in reports]),
        "avg_a_task_mean": stats([float(np.mean(r.a_task_mean)) for r in reports]),
        "forgetting": stats([r.forgetting for r in reports]),
    }


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class PetSpec:
    kind: str = "adapter"
    size: int = 10
    blocks: list[int] | None = None
    adapter_mode: str = "parallel"
    activation: str = "gelu"
    prefix_compensate: bool = True
    prefix_scales: bool = True
    lambda_requires_grad: bool = False


def _resolved_prefix_flags(spec: PetSpec, flags: AblationFlags) -> tuple[bool, bool]:
    # the learning switch also controls prefix calibration
    if not flags.learning:
        return False, False
    return spec.prefix_compensate, spec.prefix_scales


def _report(label, pipeline, pet_kind, pet_size, flags, seeds, stream,
            acc_matrix, a_pooled, a_task_mean) -> MetricsReport:
    return MetricsReport(
        label=label, pipeline=pipeline, pet_kind=pet_kind, pet_size=pet_size,
        flags=flags, seeds=dict(seeds), num_tasks=stream.spec.num_tasks,
        classes_per_task=stream.spec.classes_per_task,
        acc_matrix=acc_matrix, a_pooled=a_pooled, a_task_mean=a_task_mean,
        forgetting=forgetting(acc_matrix))


def run_dual_expert(backbone: Backbone, stream: TaskStream, pet_spec: PetSpec,
                    cfg: TrainConfig, flags: AblationFlags | None = None,
                    seeds: dict | None = None, label: str = "dual",
                    checkpoint_dir: str | None = None,
                    resume: bool = False) -> MetricsReport:
    """Online/offline expert pipeline over a task stream.

    With ``checkpoint_dir`` the learner state is saved after every task;
    ``resume=True`` picks up after the last completed task.
    """
    flags = flags or AblationFlags()
    seeds = seeds or {}
    comp, scales = _resolved_prefix_flags(pet_spec, flags)
    state = None
    acc_matrix: list[list[float]] = []
    a_pooled: list[float] = []
    a_task_mean: list[float] = []
    if resume and checkpoint_dir:
        loaded = load_state(checkpoint_dir)
        if loaded is not None:
            state, saved = loaded
            acc_matrix = saved["acc_matrix"]
            a_pooled = saved["a_pooled"]
            a_task_mean = saved["a_task_mean"]
    if state is None:
        gen = T.seeded_generator(cfg.seed, "pet-init")
        pets = build_pet_set(pet_spec.kind, pet_spec.size, backbone.cfg, gen,
                             blocks=pet_spec.blocks,
                             adapter_mode=pet_spec.adapter_mode,
                             activation=pet_spec.activation,
                             prefix_compensate=comp, prefix_scales=scales,
                             lambda_requires_grad=pet_spec.lambda_requires_grad)
        state = LearnerState(backbone, pets, ClassifierHead(backbone.cfg.model_dim))

    mode = flags.infer_mode()
    for i in range(state.task_index, len(stream.tasks)):
        task = stream.tasks[i]
        train_task(state, task.train_x, task.train_y, task.class_range, cfg, flags)
        use = mode if state.pet_offline is not None else "online"
        pooled, row = eval_incremental(lambda x: predict(state, x, use),
                                       stream, i + 1, "pooled")
        acc_matrix.append(row)
        a_pooled.append(pooled)
        a_task_mean.append(float(np.mean(row)))
        if checkpoint_dir:
            save_state(checkpoint_dir, state,
                       {"acc_matrix": acc_matrix, "a_pooled": a_pooled,
                        "a_task_mean": a_task_mean})
    pet_flags = {"learning": flags.learning, "accumulation": flags.accumulation,
                 "ensemble": flags.ensemble,
                 "prefix_compensate": comp, "prefix_scales": scales}
    return _report(label, "dual", pet_spec.kind, pet_spec.size, pet_flags, seeds,
                   stream, acc_matrix, a_pooled, a_task_mean)


def run_naive_pet_baseline(backbone: Backbone, stream: TaskStream,
                           pet_spec: PetSpec, cfg: TrainConfig,
                           seeds: dict | None = None,
                           label: str = "naive") -> MetricsReport:
    """Same code path as the dual pipeline with all three features off."""
    off = AblationFlags(learning=False, accumulation=False, ensemble=False)
    report = run_dual_expert(backbone, stream, pet_spec, cfg, off, seeds, label)
    report.pipeline = "naive"
    return report


def run_seqft_baseline(backbone: Backbone, stream: TaskStream, cfg: TrainConfig,
                       seeds: dict | None = None,
                       label: str = "seqft") -> MetricsReport:
    """Sequential full fine-tuning: the whole backbone chases each task."""
    cfg.validate()
    model = backbone.copy(trainable=True)
    head = ClassifierHead(model.cfg.model_dim)
    acc_matrix: list[list[float]] = []
    a_pooled: list[float] = []
    a_task_mean: list[float] = []

    def predict_fn(x):
        return np.argmax(head_forward(head, forward_features(model, x)).data, axis=1)

    for i, task in enumerate(stream.tasks):
        gen = T.seeded_generator(cfg.seed, "task", i)
        lo, hi = task.class_range
        grow_head(head, hi - lo, gen)
        opt = Adam([p for _, p in model.named_params()] + head.trainable_params(),
                   lr=cfg.lr)
        x = np.asarray(task.train_x, dtype=np.float64)
        y = np.asarray(task.train_y)
        for _ in range(cfg.epochs):
            order = gen.permutation(len(x))
            for s in range(0, len(x), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                opt.zero_grad()
                feats = forward_features(model, x[idx])
                loss = masked_local_ce(head_forward(head, feats), y[idx],
                                       task.class_range)
                loss.backward()
                opt.step()
        pooled, row = eval_incremental(predict_fn, stream, i + 1, "pooled")
        acc_matrix.append(row)
        a_pooled.append(pooled)
        a_task_mean.append(float(np.mean(row)))
    return _report(label, "seqft", None, None, {}, seeds or {}, stream,
                   acc_matrix, a_pooled, a_task_mean)


# ---------------------------------------------------------------------------
# learner-state checkpointing


def save_state(directory: str, state, progress: dict) -> None:
    """Task-boundary snapshot; each file lands atomically."""
    os.makedirs(directory, exist_ok=True)
    bb_path = os.path.join(directory, "backbone.ckpt")
    if not os.path.exists(bb_path):
        save_backbone(bb_path, state.backbone)
    save_head(os.path.join(directory, "head.ckpt"), state.head)
    save_petset(os.path.join(directory, "pet_online.ckpt"), state.pet_online)
    off_path = os.path.join(directory, "pet_offline.ckpt")
    if state.pet_offline is not None:
        save_petset(off_path, state.pet_offline)
    manifest = {"task_index": state.task_index,
                "has_offline": state.pet_offline is not None, **progress}
    atomic_write_text(os.path.join(directory, "state.json"),
                      json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_state(directory: str):
    """Reload a saved learner; returns (state, manifest) or None if absent."""
    from .checkpoint import load_backbone  # local import to keep the top tidy

    manifest_path = os.path.join(directory, "state.json")
    if not os.path.exists(manifest_path):
        return None
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    backbone = load_backbone(os.path.join(directory, "backbone.ckpt"))
    head = load_head(os.path.join(directory, "head.ckpt"))
    pet_online = load_petset(os.path.join(directory, "pet_online.ckpt"))
    pet_online.set_requires_grad(True)
    pet_offline = None
    if manifest["has_offline"]:
        pet_offline = load_petset(os.path.join(directory, "pet_offline.ckpt"))
    state = LearnerState(backbone, pet_online, head, pet_offline,
                         manifest["task_index"])
    return state, manifest


# ---------------------------------------------------------------------------
# end-to-end experiment setup


def prepare_backbone(bb_cfg: BackboneConfig, data_seed: int,
                     pretext_classes: int, cl_classes: int,
                     per_class_train: int, per_class_test: int,
                     mean_scale: float, noise_std: float,
                     pretrain_epochs: int, pretrain_lr: float,
                     pretrain_batch: int) -> tuple[Backbone, Dataset, float]:
    """Build data, pretrain on the pretext classes, freeze.

    One synthetic universe holds pretext and continual classes; the
    first ``pretext_classes`` ids are reserved for pretraining and the
    rest feed the incremental split.  Returns the frozen backbone, the
    continual-learning subset, and the pretext held-out accuracy.
    """
    total = pretext_classes + cl_classes
    universe = make_synthetic_dataset(total, per_class_train, per_class_test,
                                      data_seed, bb_cfg.input_tokens,
                                      bb_cfg.patch_dim, mean_scale, noise_std)
    pretext_ids = list(range(pretext_classes))
    cl_ids = list(range(pretext_classes, total))
    pretext = subset_by_classes(universe, pretext_ids)
    cl_data = subset_by_classes(universe, cl_ids)
    backbone = build_backbone(bb_cfg)
    acc = pretrain_backbone(backbone, pretext.train_x, pretext.train_y,
                            pretext_classes, pretrain_epochs, pretrain_lr,
                            pretrain_batch, bb_cfg.seed,
                            pretext.test_x, pretext.test_y,
                            reserved_classes=cl_ids)
    return backbone, cl_data, acc
