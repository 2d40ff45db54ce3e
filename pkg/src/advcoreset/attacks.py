"""Inner-maximization solvers: FGSM, linf/l2 PGD, and the soft-label
variant used by the consistency term of trade-off training.

All attacks are pure functions of (frozen model, inputs, spec, seed) and
operate on batches; a single sample (d,) is handled transparently. Inputs
live in the [0,1] box, and every iterate stays inside both the norm ball
and the box.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .tensor import DTYPE

# When enabled (tests), assert feasibility of every PGD iterate.
CHECK_FEASIBLE = False
_FEAS_TOL = 1e-9


class AttackError(RuntimeError):
    """All restarts of an attack were abandoned (non-finite losses)."""


@dataclass(frozen=True)
class AttackSpec:
    norm: str                 # 'linf' | 'l2'
    epsilon: float
    step_size: float
    iters: int = 1
    restarts: int = 1
    random_init: bool = False
    loss_kind: str = "ce_label"   # 'ce_label' | 'ce_soft'

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iters < 1 or self.restarts < 1:
            raise ValueError("iters and restarts must be >= 1")
        if self.loss_kind not in ("ce_label", "ce_soft"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")

    def replace(self, **kw) -> "AttackSpec":
        from dataclasses import replace
        return replace(self, **kw)


def project(point: np.ndarray, center: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Project rows onto the epsilon-ball around center, then the [0,1] box.

    A feasible point comes back unchanged (box clipping never moves a
    point that already satisfies both constraints).
    """
    point = np.asarray(point, dtype=DTYPE)
    center = np.asarray(center, dtype=DTYPE)
    if point.shape != center.shape:
        raise ValueError("point and center shapes differ")
    if norm == "linf":
        out = np.clip(point, center - epsilon, center + epsilon)
    else:
        delta = point - center
        dist = np.linalg.norm(np.atleast_2d(delta), axis=1)
        scale = np.ones_like(dist)
        over = dist > epsilon
        scale[over] = epsilon / dist[over]
        if point.ndim == 1:
            out = center + delta * scale[0]
        else:
            out = center + delta * scale[:, None]
    return np.clip(out, 0.0, 1.0)


def random_init(x: np.ndarray, norm: str, epsilon: float, seed) -> np.ndarray:
    """Uniform draw inside the epsilon-ball around x, clipped to [0,1]."""
    x = np.asarray(x, dtype=DTYPE)
    if epsilon == 0.0:
        return x.copy()
    rng = np.random.default_rng(seed)
    flat = np.atleast_2d(x)
    if norm == "linf":
        pert = rng.uniform(-epsilon, epsilon, size=flat.shape)
    else:
        direction = rng.standard_normal(flat.shape)
        norms = np.linalg.norm(direction, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        radius = rng.uniform(0.0, 1.0, size=(flat.shape[0], 1)) * epsilon
        pert = direction / norms * radius
    out = np.clip(flat + pert, 0.0, 1.0)
    return out[0] if x.ndim == 1 else out


def _loss_and_grad(state, x, target, loss_kind, target_probs=None):
    """Per-sample loss vector and input gradient of the summed loss."""
    logits, tape = models.forward(state, x)
    if loss_kind == "ce_label":
        losses = models.ce_loss_batch(logits, target)
        upstream = models.softmax(logits) - models.onehot(target, logits.shape[1])
    else:
        losses = -(target_probs * models.log_softmax(logits)).sum(axis=-1)
        upstream = models.softmax(logits) - target_probs
    gx = tape.run_backward(upstream)[1]
    return losses, gx


def _ascent_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(grad)
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    out = np.zeros_like(grad)
    nz = norms[:, 0] > 0.0
    out[nz] = grad[nz] / norms[nz]
    return out


def attack(state, x, target, spec: AttackSpec, seed, return_restarts: bool = False):
    """Best adversarial point per sample under spec.

    target: integer labels for ce_label, or logit rows for ce_soft.
    Within each restart the iterate with the highest finite loss is kept
    (the start point included when random_init is off); across restarts
    the highest-loss candidate wins, ties going to the lowest restart
    index. With return_restarts, the per-restart candidates are returned
    as an (restarts, n, d) array instead.
    """
    x_arr = np.asarray(x, dtype=DTYPE)
    single = x_arr.ndim == 1
    X = np.atleast_2d(x_arr)
    n = X.shape[0]

    if spec.loss_kind == "ce_label":
        target_arr = np.atleast_1d(np.asarray(target))
        target_probs = None
    else:
        target_arr = None
        target_probs = models.softmax(np.atleast_2d(np.asarray(target, dtype=DTYPE)))

    best_x = np.full_like(X, np.nan)
    best_loss = np.full(n, -np.inf)
    valid = np.zeros(n, dtype=bool)
    per_restart = []

    for r in range(spec.restarts):
        if spec.random_init:
            cur = random_init(X, spec.norm, spec.epsilon, seed=[_mix(seed), r])
            cur = project(cur, X, spec.norm, spec.epsilon)
        else:
            cur = X.copy()
        r_loss, grad = _eval(state, cur, target_arr, spec, target_probs, need_grad=True)
        r_best_x = cur.copy()
        r_best_loss = np.where(np.isfinite(r_loss), r_loss, -np.inf)
        for it in range(spec.iters):
            step = spec.step_size * _ascent_direction(grad, spec.norm)
            cur = project(cur + step, X, spec.norm, spec.epsilon)
            if CHECK_FEASIBLE:
                _assert_feasible(cur, X, spec)
            l, grad = _eval(state, cur, target_arr, spec, target_probs,
                            need_grad=it < spec.iters - 1)
            improved = np.isfinite(l) & (l > r_best_loss)
            r_best_loss[improved] = l[improved]
            r_best_x[improved] = cur[improved]
        per_restart.append(r_best_x)
        take = np.isfinite(r_best_loss) & (r_best_loss > best_loss)
        best_x[take] = r_best_x[take]
        best_loss[take] = r_best_loss[take]
        valid |= np.isfinite(r_best_loss)

    if not valid.all():
        raise AttackError("attack abandoned: non-finite loss in every restart")
    if return_restarts:
        return np.stack(per_restart)
    return best_x[0] if single else best_x


def _eval(state, cur, target_arr, spec, target_probs, need_grad):
    try:
        if need_grad:
            return _loss_and_grad(state, cur, target_arr, spec.loss_kind, target_probs)
        z = models.logits(state, cur)
    except FloatingPointError:
        # non-finite forward pass: report -inf so the restart is abandoned
        bad = np.full(np.atleast_2d(cur).shape[0], -np.inf)
        return bad, (np.zeros_like(np.atleast_2d(cur)) if need_grad else None)
    if spec.loss_kind == "ce_label":
        return models.ce_loss_batch(z, target_arr), None
    return -(target_probs * models.log_softmax(z)).sum(axis=-1), None


def _assert_feasible(cur, X, spec):
    assert cur.min() >= -_FEAS_TOL and cur.max() <= 1.0 + _FEAS_TOL, "box violated"
    if spec.norm == "linf":
        assert np.abs(cur - X).max() <= spec.epsilon + _FEAS_TOL, "linf ball violated"
    else:
        assert np.linalg.norm(cur - X, axis=1).max() <= spec.epsilon + _FEAS_TOL, "l2 ball violated"


def _mix(seed) -> int:
    """Fold arbitrary seed material into a stable integer."""
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    acc = 0
    for part in seed:
        acc = (acc * 1000003 + int(part)) % (2**63)
    return acc
