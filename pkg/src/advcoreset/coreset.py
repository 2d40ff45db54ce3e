"""Weighted subset selection from per-unit gradient features.

Pipeline: attack + last-layer gradient per sample, summed per unit
(mini-batch), then a greedy solver (facility-location greedy, orthogonal
matching pursuit, or uniform random) picks units and weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import attacks, objectives
from .attacks import AttackSpec
from .tensor import DTYPE


class DegenerateSelectionError(RuntimeError):
    """Feature matrix carries no signal (all-zero rows)."""


@dataclass
class GradientFeatureMatrix:
    rows: np.ndarray                  # (units, dim)
    unit_map: list[np.ndarray]        # unit -> member sample indices

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=DTYPE)
        if self.rows.ndim != 2:
            raise ValueError("feature rows must be 2-D")
        if self.rows.shape[0] != len(self.unit_map):
            raise ValueError("unit_map length disagrees with row count")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("non-finite gradient features")

    @property
    def units(self) -> int:
        return self.rows.shape[0]


@dataclass
class Coreset:
    unit_ids: np.ndarray              # selected units
    gamma: np.ndarray                 # positive weight per selected unit
    sample_indices: np.ndarray        # union of selected units' members
    sample_weights: np.ndarray        # unit weight broadcast to members

    def __post_init__(self):
        self.unit_ids = np.asarray(self.unit_ids, dtype=np.int64)
        self.gamma = np.asarray(self.gamma, dtype=DTYPE)
        if self.unit_ids.shape != self.gamma.shape:
            raise ValueError("unit_ids and gamma lengths differ")
        if np.any(self.gamma <= 0):
            raise ValueError("all gamma must be > 0")


@dataclass(frozen=True)
class SelectionConfig:
    solver: str = "gradmatch"         # 'craig' | 'gradmatch' | 'random'
    fraction: float = 0.5
    unit_batch_size: int = 1
    selection_attack: AttackSpec | None = None
    normalize_weights: bool = True
    residual_tol: float = 1e-8
    ridge: float = 0.0                # optional l2 regularizer in the OMP refit

    def __post_init__(self):
        if self.solver not in ("craig", "gradmatch", "random"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        if self.unit_batch_size < 1:
            raise ValueError("unit_batch_size must be >= 1")


def _expand(unit_ids, gamma, unit_map) -> Coreset:
    samples, weights = [], []
    for uid, g in zip(unit_ids, gamma):
        members = unit_map[uid]
        samples.append(members)
        weights.append(np.full(len(members), g, dtype=DTYPE))
    return Coreset(
        unit_ids=np.asarray(unit_ids), gamma=np.asarray(gamma),
        sample_indices=np.concatenate(samples) if samples else np.zeros(0, dtype=np.int64),
        sample_weights=np.concatenate(weights) if weights else np.zeros(0, dtype=DTYPE),
    )


def extract_features(dataset, state, objective: objectives.Objective,
                     config: SelectionConfig, seed) -> GradientFeatureMatrix:
    """Per-unit sums of last-layer gradients under the selection attack.

    Units are contiguous chunks of a seeded permutation of the samples
    (unit_batch_size=1 reduces to plain per-sample selection).
    """
    obj = objective
    if config.selection_attack is not None and objective.kind != "vanilla":
        obj = objectives.Objective(kind=objective.kind,
                                   attack=config.selection_attack,
                                   lambda_inv=objective.lambda_inv)
    n = len(dataset)
    rng = np.random.default_rng([attacks._mix(seed), 0x5e1ec7])
    perm = rng.permutation(n) if config.unit_batch_size > 1 else np.arange(n)
    unit_map = [perm[s:s + config.unit_batch_size]
                for s in range(0, n, config.unit_batch_size)]
    try:
        rows_per_sample = objectives.batch_last_layer_rows(
            obj, state, dataset.inputs, dataset.labels, seed)
    except attacks.AttackError:
        rows_per_sample = objectives.batch_last_layer_rows(
            obj, state, dataset.inputs, dataset.labels, [attacks._mix(seed), 1])
    rows = np.stack([rows_per_sample[members].sum(axis=0) for members in unit_map])
    return GradientFeatureMatrix(rows=rows, unit_map=unit_map)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def solve_craig(features: GradientFeatureMatrix, k_units: int) -> Coreset:
    """Budgeted facility-location greedy on pairwise gradient distances.

    F(S) = sum_i (d_max - min_{j in S} d_ij) with d_ij the euclidean
    distance between feature rows; gamma_j counts the units whose nearest
    selected row is j (ties to the lowest selected unit id).
    """
    if k_units < 1:
        raise ValueError("k_units must be >= 1")
    g = features.rows
    m = features.units
    k_units = min(k_units, m)
    sq = (g * g).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (g @ g.T), 0.0)
    dist = np.sqrt(d2)
    np.fill_diagonal(dist, 0.0)
    d_max = dist.max()
    selected: list[int] = []
    cur_min = np.full(m, d_max)
    for _ in range(k_units):
        gains = np.maximum(cur_min[:, None] - dist, 0.0).sum(axis=0)
        gains[selected] = -np.inf
        j = int(np.argmax(gains))          # argmax ties -> lowest index
        selected.append(j)
        cur_min = np.minimum(cur_min, dist[:, j])
    sel = np.array(sorted(selected))
    assign = sel[np.argmin(dist[:, sel], axis=1)]   # ties -> lowest selected id
    gamma = np.array([(assign == j).sum() for j in sel], dtype=DTYPE)
    keep = gamma > 0
    return _expand(sel[keep], gamma[keep], features.unit_map)


def _nn_lstsq(A: np.ndarray, b: np.ndarray, ridge: float) -> np.ndarray:
    """Least squares with negative coefficients clamped to zero via
    iterative refit on the positive support."""
    cols = list(range(A.shape[1]))
    coef = np.zeros(A.shape[1])
    while cols:
        sub = A[:, cols]
        # normal equations are much cheaper than lstsq's SVD here and the
        # gram matrix is tiny; fall back to lstsq when it is singular
        gram = sub.T @ sub + ridge * np.eye(len(cols))
        try:
            sol = np.linalg.solve(gram, sub.T @ b)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(sub, b, rcond=None)
        if np.all(sol >= 0):
            coef[:] = 0.0
            coef[cols] = sol
            return coef
        cols = [c for c, v in zip(cols, sol) if v > 0]
    return np.zeros(A.shape[1])


def solve_gradmatch(features: GradientFeatureMatrix, k_units: int,
                    residual_tol: float = 1e-8, ridge: float = 0.0) -> Coreset:
    """Orthogonal matching pursuit against the summed gradient target."""
    if k_units < 1:
        raise ValueError("k_units must be >= 1")
    g = features.rows
    m = features.units
    k_units = min(k_units, m)
    if not np.any(np.abs(g) > 0):
        raise DegenerateSelectionError("all-zero gradient features")
    b_full = g.sum(axis=0)
    residual = b_full.copy()
    selected: list[int] = []
    coef = np.zeros(0)
    for _ in range(k_units):
        if np.linalg.norm(residual) <= residual_tol:
            break
        scores = np.abs(g @ residual)
        scores[selected] = -np.inf
        j = int(np.argmax(scores))
        selected.append(j)
        coef = np.append(coef, 0.0)
        trial = _nn_lstsq(g[selected].T, b_full, ridge)
        trial_residual = b_full - trial @ g[selected]
        # clamp-and-refit can regress; keep the previous fit in that case
        # (the new column then carries zero weight and is dropped below)
        if np.linalg.norm(trial_residual) <= np.linalg.norm(residual):
            coef = trial
            residual = trial_residual
    sel = np.asarray(selected, dtype=np.int64)
    keep = coef > 0
    if not np.any(keep):
        raise DegenerateSelectionError("matching pursuit found no positive weights")
    return _expand(sel[keep], coef[keep], features.unit_map)


def solve_random(features_or_count, k_units: int, seed) -> Coreset:
    """Uniform sample of units without replacement, all gamma = 1."""
    if isinstance(features_or_count, GradientFeatureMatrix):
        m = features_or_count.units
        unit_map = features_or_count.unit_map
    else:
        m = int(features_or_count)
        unit_map = [np.array([i]) for i in range(m)]
    if k_units < 1:
        raise ValueError("k_units must be >= 1")
    k_units = min(k_units, m)
    rng = np.random.default_rng(seed)
    sel = np.sort(rng.choice(m, size=k_units, replace=False))
    return _expand(sel, np.ones(k_units), unit_map)


def matching_error(features: GradientFeatureMatrix, coreset: Coreset) -> float:
    """l2 norm of (full gradient sum - weighted coreset gradient sum)."""
    b_full = features.rows.sum(axis=0)
    approx = coreset.gamma @ features.rows[coreset.unit_ids]
    return float(np.linalg.norm(b_full - approx))


def run_selection(dataset, state, objective, config: SelectionConfig, seed):
    """Full round: features -> solver -> (coreset, error). Weights are
    optionally rescaled so the expanded per-sample weights sum to n."""
    features = extract_features(dataset, state, objective, config, seed)
    k_units = max(1, int(round(config.fraction * features.units)))
    if config.solver == "craig":
        core = solve_craig(features, k_units)
    elif config.solver == "gradmatch":
        core = solve_gradmatch(features, k_units, config.residual_tol, config.ridge)
    else:
        core = solve_random(features, k_units, seed=[attacks._mix(seed), 0xa11d])
    err = matching_error(features, core)
    if config.normalize_weights:
        total = core.sample_weights.sum()
        if total > 0:
            scale = len(dataset) / total
            core = Coreset(unit_ids=core.unit_ids, gamma=core.gamma * scale,
                           sample_indices=core.sample_indices,
                           sample_weights=core.sample_weights * scale)
    return core, err


def trace_record(epoch: int, solver: str, k_units: int, error: float,
                 core: Coreset) -> str:
    """One line of the selection trace (line-delimited JSON)."""
    return json.dumps({
        "epoch": epoch,
        "solver": solver,
        "k": k_units,
        "matching_error": error,
        "unit_ids": core.unit_ids.tolist(),
        "gamma": core.gamma.tolist(),
    })
