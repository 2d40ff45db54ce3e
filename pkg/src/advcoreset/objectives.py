"""Per-sample training functionals and their parameter gradients.

Three kinds: plain cross-entropy, adversarial (CE at the attacked point,
differentiated with the attack point frozen), and trade-off training
whose gradient is the three-term sum with a freeze kernel blocking
backpropagation through one branch at a time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attacks, models
from .attacks import AttackSpec
from .tensor import DTYPE


@dataclass(frozen=True)
class Objective:
    kind: str                      # 'vanilla' | 'adversarial' | 'trades'
    attack: AttackSpec | None = None
    lambda_inv: float = 0.0        # trade-off weight 1/lambda, trades only

    def __post_init__(self):
        if self.kind not in ("vanilla", "adversarial", "trades"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind == "adversarial" and self.attack is None:
            raise ValueError("adversarial objective needs an attack spec")
        if self.kind == "trades":
            if self.attack is None:
                raise ValueError("trades objective needs an attack spec")
            if self.lambda_inv < 0:
                raise ValueError("lambda_inv must be >= 0")


def attack_points(obj: Objective, state, X, y, seed) -> np.ndarray | None:
    """Run the objective's inner attack on a batch; None for vanilla."""
    if obj.kind == "vanilla":
        return None
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    if obj.kind == "adversarial":
        spec = obj.attack.replace(loss_kind="ce_label")
        return attacks.attack(state, X, np.atleast_1d(y), spec, seed)
    clean_logits = models.logits(state, X)
    spec = obj.attack.replace(loss_kind="ce_soft")
    return attacks.attack(state, X, clean_logits, spec, seed)


def phi(obj: Objective, state, x, y, seed, x_adv=None):
    """(loss value, attack point or None) for one sample."""
    x = np.asarray(x, dtype=DTYPE)
    if obj.kind == "vanilla":
        return models.ce_loss(models.logits(state, x), int(y)), None
    if x_adv is None:
        x_adv = attack_points(obj, state, x[None, :], [int(y)], seed)[0]
    z_adv = models.logits(state, x_adv)
    if obj.kind == "adversarial":
        return models.ce_loss(z_adv, int(y)), x_adv
    z = models.logits(state, x)
    loss = models.ce_loss(z, int(y)) + obj.lambda_inv * models.ce_soft_loss(z_adv, z)
    return loss, x_adv


def _soft_target_upstream(z: np.ndarray, z_frozen: np.ndarray) -> np.ndarray:
    """d/dz of -sum(softmax(z) * log_softmax(z_frozen)), rows."""
    p = models.softmax(z)
    lw = models.log_softmax(z_frozen)
    inner = (p * lw).sum(axis=-1, keepdims=True)
    return -(p * (lw - inner))


def batch_theta_grad(obj: Objective, state, X, y, weights, seed, X_adv=None) -> np.ndarray:
    """Flat parameter gradient of sum_i weights[i] * phi_i.

    Attack points are recomputed from seed unless passed in; they are
    always treated as constants during differentiation.
    """
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    y = np.atleast_1d(np.asarray(y))
    w = np.atleast_1d(np.asarray(weights, dtype=DTYPE))
    if obj.kind == "vanilla":
        z, tape = models.forward(state, X)
        upstream = w[:, None] * (models.softmax(z) - models.onehot(y, z.shape[1]))
        return tape.run_backward(upstream)[0]
    if X_adv is None:
        X_adv = attack_points(obj, state, X, y, seed)
    if obj.kind == "adversarial":
        z_adv, tape = models.forward(state, X_adv)
        upstream = w[:, None] * (models.softmax(z_adv) - models.onehot(y, z_adv.shape[1]))
        return tape.run_backward(upstream)[0]
    # trades: three freeze-kernel terms, two tapes
    z_clean, tape_clean = models.forward(state, X)
    z_adv, tape_adv = models.forward(state, X_adv)
    k = z_clean.shape[1]
    u_label = models.softmax(z_clean) - models.onehot(y, k)
    u_consistency = models.softmax(z_adv) - models.softmax(z_clean)
    u_clean_branch = _soft_target_upstream(z_clean, z_adv)
    g_clean = tape_clean.run_backward(
        w[:, None] * (u_label + obj.lambda_inv * u_clean_branch))[0]
    g_adv = tape_adv.run_backward(w[:, None] * obj.lambda_inv * u_consistency)[0]
    return g_clean + g_adv


def phi_grad(obj: Objective, state, x, y, seed, x_adv=None) -> np.ndarray:
    """Flat parameter gradient of phi for one sample."""
    x = np.asarray(x, dtype=DTYPE)
    X_adv = None if x_adv is None else np.atleast_2d(np.asarray(x_adv, dtype=DTYPE))
    return batch_theta_grad(obj, state, x[None, :], [int(y)], [1.0], seed, X_adv)


def batch_last_layer_rows(obj: Objective, state, X, y, seed, X_adv=None) -> np.ndarray:
    """Per-sample final-linear-layer gradient blocks, one row each.

    Uses only forward passes (penultimate features and logits); no full
    backward. Rows match the trailing block of the flat gradient exactly.
    """
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    y = np.atleast_1d(np.asarray(y))
    k = state.spec.classes
    if obj.kind == "vanilla":
        h = models.penultimate(state, X)
        z = _head_logits(state, h)
        u = models.softmax(z) - models.onehot(y, k)
        return _rows(h, u)
    if X_adv is None:
        X_adv = attack_points(obj, state, X, y, seed)
    h_adv = models.penultimate(state, X_adv)
    z_adv = _head_logits(state, h_adv)
    if obj.kind == "adversarial":
        u = models.softmax(z_adv) - models.onehot(y, k)
        return _rows(h_adv, u)
    h_clean = models.penultimate(state, X)
    z_clean = _head_logits(state, h_clean)
    u_label = models.softmax(z_clean) - models.onehot(y, k)
    u_consistency = models.softmax(z_adv) - models.softmax(z_clean)
    u_clean_branch = _soft_target_upstream(z_clean, z_adv)
    return (_rows(h_clean, u_label + obj.lambda_inv * u_clean_branch)
            + _rows(h_adv, obj.lambda_inv * u_consistency))


def last_layer_grad(obj: Objective, state, x, y, seed, x_adv=None) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    X_adv = None if x_adv is None else np.atleast_2d(np.asarray(x_adv, dtype=DTYPE))
    return batch_last_layer_rows(obj, state, x[None, :], [int(y)], seed, X_adv)[0]


def _head_logits(state, h: np.ndarray) -> np.ndarray:
    """Final linear layer applied to precomputed penultimate features."""
    fan_in, fan_out = state.spec.layer_dims()[-1][1]
    block = state.theta[state.spec.last_layer_slice()]
    w = block[:fan_in * fan_out].reshape(fan_in, fan_out)
    b = block[fan_in * fan_out:]
    return h @ w + b


def _rows(h: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Flattened [outer(h_i, u_i), u_i] per sample (weight block then bias)."""
    outer = np.einsum("ni,nk->nik", h, u).reshape(h.shape[0], -1)
    return np.concatenate([outer, u], axis=1)
