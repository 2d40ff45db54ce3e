"""Training loop: warm-start on the full data, periodic adversarial
coreset selection, weighted SGD on the selected subset in between.

Modes: 'full' (no selection), 'coreset', 'half_half' (coreset members
adversarial + the rest clean), 'fat_baseline' (one-step sign attack with
random init on the full data).
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import attacks, coreset, data, evaluation, models, objectives
from .attacks import AttackSpec
from .coreset import SelectionConfig
from .objectives import Objective

MODES = ("full", "coreset", "half_half", "fat_baseline")


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    objective: Objective
    epochs: int
    lr: float = 0.1
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    weight_decay: float = 0.0
    momentum: float = 0.9
    batch_size: int = 128
    mode: str = "full"
    kappa: float = 0.5                 # warm-start coefficient
    period: int = 8                    # selection period T, in epochs
    selection: SelectionConfig | None = None
    seed: int = 0
    eval_every: int = 5                # robust-eval cadence; 0 disables
    eval_attack: AttackSpec | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 <= self.kappa <= 1:
            raise ValueError("kappa must be in [0, 1]")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if any(m2 <= m1 for m1, m2 in zip(self.milestones, self.milestones[1:])) \
                or any(m >= self.epochs for m in self.milestones):
            raise ValueError("milestones must be strictly increasing and < epochs")
        if self.mode in ("coreset", "half_half") and self.selection is None:
            raise ValueError(f"mode {self.mode} needs a SelectionConfig")


@dataclass
class EpochRecord:
    epoch: int
    phase: str                         # 'warm' | 'selection' | 'subset'
    clean_acc: float
    robust_acc: float | None
    seconds: float
    matching_error: float | None
    active_samples: int
    lr: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)

    @staticmethod
    def from_json(line: str) -> "EpochRecord":
        return EpochRecord(**json.loads(line))


def warm_threshold(kappa: float, epochs: int, fraction: float) -> int:
    """Number of warm-start epochs: round(kappa * epochs * fraction)."""
    return int(round(kappa * epochs * fraction))


def lr_at(config: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in config.milestones if epoch > m)
    return config.lr * config.lr_decay ** passed


def _seed_for(base: int, tag: str, *parts: int) -> list[int]:
    return [base, sum(ord(c) for c in tag)] + [int(p) for p in parts]


def _training_objective(config: TrainConfig) -> Objective:
    if config.mode != "fat_baseline":
        return config.objective
    base = config.objective.attack
    if base is None:
        raise TrainingError("fat_baseline needs an attack spec for epsilon")
    fgsm = AttackSpec(norm="linf", epsilon=base.epsilon,
                      step_size=1.25 * base.epsilon, iters=1,
                      restarts=1, random_init=True, loss_kind="ce_label")
    return Objective(kind="adversarial", attack=fgsm)


def train(dataset: data.DatasetHandle, state: models.ModelState,
          config: TrainConfig, out_dir: str | None = None,
          eval_dataset: data.DatasetHandle | None = None):
    """Run the configured training; returns (final state, epoch records).

    When out_dir is given, metrics (one JSON line per epoch), the
    selection trace and periodic checkpoints are written there. Epoch
    wall times cover training and selection work only, never evaluation.
    """
    obj = _training_objective(config)
    n = len(dataset)
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    theta = state.theta.copy()
    state = models.ModelState(spec=state.spec, theta=theta, seed=state.seed)
    velocity = np.zeros_like(theta)

    selecting = config.mode in ("coreset", "half_half") and config.selection is not None
    fraction = config.selection.fraction if selecting else 1.0
    t_warm = warm_threshold(config.kappa, config.epochs, fraction) if selecting else 0
    # degenerate coreset: selecting everything is full training
    if selecting and fraction >= 1.0:
        selecting = False

    active_idx = np.arange(n)
    active_w = np.ones(n)
    adv_mask = np.ones(n, dtype=bool)
    first_selection: int | None = None

    records: list[EpochRecord] = []
    metrics_fh = trace_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        trace_fh = open(os.path.join(out_dir, "select_trace.jsonl"), "w")
    try:
        for epoch in range(1, config.epochs + 1):
            tic = time.perf_counter()
            lr = lr_at(config, epoch)
            phase = "warm" if epoch <= t_warm or not selecting else "subset"
            match_err = None
            if selecting and epoch > t_warm:
                if first_selection is None:
                    first_selection = epoch
                if (epoch - first_selection) % config.period == 0:
                    phase = "selection"
                    try:
                        core, match_err = coreset.run_selection(
                            dataset, state, config.objective, config.selection,
                            seed=_seed_for(config.seed, "select", epoch))
                    except (coreset.DegenerateSelectionError, attacks.AttackError) as exc:
                        raise TrainingError(f"selection failed: {exc}", epoch) from exc
                    if trace_fh is not None:
                        trace_fh.write(coreset.trace_record(
                            epoch, config.selection.solver, len(core.unit_ids),
                            match_err, core) + "\n")
                    if config.mode == "half_half":
                        active_idx = np.arange(n)
                        active_w = np.ones(n)
                        w = core.sample_weights
                        if config.selection.normalize_weights and w.sum() > 0:
                            # equal per-sample footing between the adversarial
                            # half (weights gamma) and the clean rest (weight 1)
                            w = w * (len(core.sample_indices) / w.sum())
                        active_w[core.sample_indices] = w
                        adv_mask = np.zeros(n, dtype=bool)
                        adv_mask[core.sample_indices] = True
                    else:
                        active_idx = core.sample_indices
                        active_w = core.sample_weights
                        adv_mask = np.ones(len(active_idx), dtype=bool)

            _run_epoch(dataset, state, velocity, config, obj, lr,
                       active_idx, active_w, adv_mask, epoch)

            seconds = time.perf_counter() - tic
            clean = evaluation.clean_accuracy(state, eval_ds)
            robust = None
            if config.eval_attack is not None and config.eval_every > 0 and (
                    epoch % config.eval_every == 0 or epoch == config.epochs):
                robust = evaluation.robust_accuracy(
                    state, eval_ds, config.eval_attack,
                    seed=_seed_for(config.seed, "eval", epoch))
            rec = EpochRecord(epoch=epoch, phase=phase, clean_acc=clean,
                              robust_acc=robust, seconds=seconds,
                              matching_error=match_err,
                              active_samples=len(active_idx), lr=lr)
            records.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(rec.to_json() + "\n")
                metrics_fh.flush()
            if out_dir is not None and config.checkpoint_every > 0 and \
                    epoch % config.checkpoint_every == 0:
                models.save_checkpoint(
                    state, os.path.join(out_dir, f"checkpoint_{epoch:04d}.ckpt"))
        if out_dir is not None:
            models.save_checkpoint(state, os.path.join(out_dir, "checkpoint_final.ckpt"))
    finally:
        for fh in (metrics_fh, trace_fh):
            if fh is not None:
                fh.close()
    return state, records


def _run_epoch(dataset, state, velocity, config, obj, lr,
               active_idx, active_w, adv_mask, epoch):
    order_seed = _seed_for(config.seed, "batches", epoch)
    for b_idx, pos in enumerate(
            data.batches(len(active_idx), config.batch_size, order_seed)):
        batch = active_idx[pos]
        w = active_w[pos]
        adv = adv_mask[pos]
        X = dataset.inputs[batch]
        y = dataset.labels[batch]
        wsum = w.sum()
        if wsum <= 0:
            continue
        wn = w / wsum
        grad = np.zeros_like(state.theta)
        atk_seed = _seed_for(config.seed, "attack", epoch, b_idx)
        if obj.kind != "vanilla" and adv.any():
            X_adv = objectives.attack_points(obj, state, X[adv], y[adv], atk_seed)
            grad += objectives.batch_theta_grad(
                obj, state, X[adv], y[adv], wn[adv], atk_seed, X_adv)
        else:
            if adv.any():
                grad += objectives.batch_theta_grad(
                    obj, state, X[adv], y[adv], wn[adv], atk_seed)
        clean = ~adv
        if clean.any():
            vanilla = Objective(kind="vanilla")
            grad += objectives.batch_theta_grad(
                vanilla, state, X[clean], y[clean], wn[clean], atk_seed)
        if not np.all(np.isfinite(grad)):
            raise TrainingError("non-finite gradient", epoch)
        step = grad + config.weight_decay * state.theta
        velocity *= config.momentum
        velocity += step
        state.theta -= lr * velocity
        if not np.all(np.isfinite(state.theta)):
            raise TrainingError("non-finite parameters after update", epoch)


def train_half_half(dataset, state, config: TrainConfig, **kw):
    """Convenience wrapper pinning mode='half_half'."""
    if config.mode != "half_half":
        config = replace(config, mode="half_half")
    return train(dataset, state, config, **kw)
