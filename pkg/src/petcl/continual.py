"""Task-by-task training with online/offline experts.

One online module set learns each task under a class-local masked loss;
after the first task it is cloned into an offline set that every later
optimizer step nudges via an exponential moving average.  Inference
ensembles both experts by taking the elementwise max of their softmax
outputs.  The backbone and the head columns of finished tasks never
change.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import Backbone, ClassifierHead, grow_head, head_forward, forward_features
from .optim import Adam
from .pet import PETSet
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 12
    freeze_epochs: int = 3     # module set frozen this long on tasks after the first
    lr: float = 1.5e-3
    batch_size: int = 16
    ema_alpha: float = 0.9999
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 <= self.freeze_epochs < self.epochs:
            raise ValueError("freeze_epochs must satisfy 0 <= freeze_epochs < epochs")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must lie strictly between 0 and 1")


@dataclass
class AblationFlags:
    """Independent switches for the three protocol features."""
    learning: bool = True       # freeze phase + calibrated prefix attention
    accumulation: bool = True   # per-step EMA into the offline modules
    ensemble: bool = True       # two-expert max-softmax inference

    def infer_mode(self) -> str:
        if self.ensemble:
            return "ensemble"
        return "offline" if self.accumulation else "online"


@dataclass
class LearnerState:
    backbone: Backbone
    pet_online: PETSet
    head: ClassifierHead
    pet_offline: PETSet | None = None
    task_index: int = 0         # completed tasks


def masked_local_ce(logits: Tensor, targets, class_range: tuple[int, int]) -> Tensor:
    """Cross-entropy over the current task's columns only.

    Columns outside ``class_range`` are filled with a large negative
    constant before the softmax, so they receive exactly zero
    probability and exactly zero gradient.  With a range spanning every
    column this reduces to plain cross-entropy.
    """
    lo, hi = class_range
    c = logits.shape[1]
    if not (0 <= lo < hi <= c):
        raise ValueError(f"class range [{lo}, {hi}) outside {c} columns")
    t = np.asarray(targets)
    if t.size and (t.min() < lo or t.max() >= hi):
        raise ValueError(f"targets fall outside the current task range [{lo}, {hi})")
    mask = np.ones(c, dtype=bool)
    mask[lo:hi] = False
    return T.cross_entropy(T.masked_fill(logits, mask), t)


def ema_update(offline: PETSet, online: PETSet, alpha: float) -> None:
    """offline <- alpha * offline + (1 - alpha) * online, parameterwise."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    if offline.layout() != online.layout():
        raise ValueError("module sets do not pair up (layout mismatch)")
    for (_, po), (_, pn) in zip(offline.named_params(), online.named_params()):
        po.data = alpha * po.data + (1.0 - alpha) * pn.data


def train_task(state: LearnerState, train_x, train_y, class_range: tuple[int, int],
               cfg: TrainConfig, flags: AblationFlags | None = None,
               step_callback=None) -> list[float]:
    """Learn one task; returns the per-step loss trace.

    Grows the head for the task's classes, trains the online modules and
    the new head block under the masked local loss (the online modules
    stay frozen for the first ``freeze_epochs`` epochs on every task
    after the first), and EMA-updates the offline modules after every
    optimizer step once they exist.  Completing the first task clones
    the online modules into the offline set.

    ``step_callback(state, task_idx, epoch, loss_value, logits)`` runs
    after every backward pass and before the optimizer step, with the
    batch's logits tensor still carrying its gradients.
    """
    flags = flags or AblationFlags()
    cfg.validate()
    if not state.backbone.frozen:
        raise RuntimeError("backbone must be pretrained and frozen first")
    lo, hi = class_range
    if lo != state.head.num_classes:
        raise ValueError(
            f"tasks must arrive in order: head covers {state.head.num_classes} "
            f"classes but the task starts at {lo}")
    task_idx = state.task_index
    gen = T.seeded_generator(cfg.seed, "task", task_idx)
    grow_head(state.head, hi - lo, gen)

    opt = Adam(state.pet_online.trainable_params() + state.head.trainable_params(),
               lr=cfg.lr)
    use_freeze = flags.learning and task_idx >= 1 and cfg.freeze_epochs > 0
    ema_on = flags.accumulation and state.pet_offline is not None

    x = np.asarray(train_x, dtype=np.float64)
    y = np.asarray(train_y)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        frozen = use_freeze and epoch < cfg.freeze_epochs
        state.pet_online.set_requires_grad(not frozen)
        order = gen.permutation(len(x))
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            feats = forward_features(state.backbone, x[idx], state.pet_online)
            logits = head_forward(state.head, feats)
            loss = masked_local_ce(logits, y[idx], class_range)
            loss.backward()
            if step_callback is not None:
                step_callback(state, task_idx, epoch, loss.item(), logits)
            opt.step()
            if ema_on:
                ema_update(state.pet_offline, state.pet_online, cfg.ema_alpha)
            trace.append(loss.item())
    state.pet_online.set_requires_grad(True)

    state.task_index += 1
    if state.task_index == 1 and (flags.accumulation or flags.ensemble):
        state.pet_offline = state.pet_online.clone(trainable=False)
    return trace


# ---------------------------------------------------------------------------
# inference


def _expert_probs(state: LearnerState, x, pets) -> np.ndarray:
    feats = forward_features(state.backbone, x, pets)
    return T.softmax(head_forward(state.head, feats), axis=-1).data


def combine_expert_probs(p_on: np.ndarray, p_off: np.ndarray | None) -> np.ndarray:
    """Ensemble score table: the elementwise max over expert probabilities."""
    return p_on if p_off is None else np.maximum(p_on, p_off)


def ensemble_predict(state: LearnerState, x):
    """Class picks plus both experts' probability tables.

    The ensemble score is the elementwise max over experts; the argmax
    takes the lowest class index on ties.  With no offline expert yet,
    the online expert decides alone.
    """
    p_on = _expert_probs(state, x, state.pet_online)
    p_off = _expert_probs(state, x, state.pet_offline) \
        if state.pet_offline is not None else None
    return np.argmax(combine_expert_probs(p_on, p_off), axis=1), p_on, p_off


def predict_online(state: LearnerState, x) -> np.ndarray:
    return np.argmax(_expert_probs(state, x, state.pet_online), axis=1)


def predict_offline(state: LearnerState, x) -> np.ndarray:
    if state.pet_offline is None:
        raise RuntimeError("no offline modules exist before the first task completes")
    return np.argmax(_expert_probs(state, x, state.pet_offline), axis=1)


def predict(state: LearnerState, x, mode: str = "ensemble") -> np.ndarray:
    if mode == "ensemble":
        return ensemble_predict(state, x)[0]
    if mode == "online":
        return predict_online(state, x)
    if mode == "offline":
        return predict_offline(state, x)
    raise ValueError(f"unknown inference mode {mode!r}")
