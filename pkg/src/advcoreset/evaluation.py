"""Clean/robust accuracy measurement and run comparison tables."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import attacks, models
from .attacks import AttackSpec


@dataclass
class EvalReport:
    clean_acc: float
    robust_acc: dict[str, float]       # attack description -> accuracy
    attack_specs: dict[str, dict]
    seconds: float
    seed: int
    anomalies: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        return EvalReport(**json.loads(text))


def clean_accuracy(state, dataset) -> float:
    """argmax(logits) vs labels; ties go to the lowest class index."""
    z = models.logits(state, dataset.inputs)
    pred = z.argmax(axis=1)           # numpy argmax takes the first maximum
    return float((pred == dataset.labels).mean())


def robust_accuracy(state, dataset, attack_spec: AttackSpec, seed) -> float:
    """Fraction of samples correctly classified at every restart's
    adversarial point (worst case over restarts)."""
    if attack_spec.epsilon == 0.0:
        return clean_accuracy(state, dataset)
    candidates = attacks.attack(state, dataset.inputs, dataset.labels,
                                attack_spec, seed, return_restarts=True)
    robust = np.ones(len(dataset), dtype=bool)
    for r in range(candidates.shape[0]):
        pred = models.logits(state, candidates[r]).argmax(axis=1)
        robust &= pred == dataset.labels
    return float(robust.mean())


def robustness_curve(state, dataset, eps_values, base_spec: AttackSpec, seed):
    """Robust accuracy swept over attack radii (step size scaled along)."""
    curve = []
    for eps in eps_values:
        spec = base_spec.replace(
            epsilon=float(eps),
            step_size=base_spec.step_size * (eps / base_spec.epsilon)
            if base_spec.epsilon > 0 else base_spec.step_size)
        curve.append((float(eps), robust_accuracy(state, dataset, spec, seed)))
    return curve


def evaluate(state, dataset, attack_spec: AttackSpec, seed) -> EvalReport:
    import time
    tic = time.perf_counter()
    clean = clean_accuracy(state, dataset)
    key = f"{attack_spec.norm}-eps{attack_spec.epsilon:g}-" \
          f"pgd{attack_spec.iters}x{attack_spec.restarts}"
    racc = robust_accuracy(state, dataset, attack_spec, seed)
    report = EvalReport(
        clean_acc=clean, robust_acc={key: racc},
        attack_specs={key: attack_spec.__dict__ | {}},
        seconds=time.perf_counter() - tic, seed=attacks._mix(seed))
    if racc > clean + 0.02:
        report.anomalies.append(
            f"robust accuracy {racc:.4f} exceeds clean {clean:.4f} + slack")
    return report


# ---------------------------------------------------------------------------
# Run comparison (metrics files are line-delimited EpochRecord JSON)
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = {"epoch", "clean_acc", "robust_acc", "seconds"}


def _load_metrics(path: str) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if not _REQUIRED_FIELDS <= rec.keys():
                    raise ValueError(f"{path}: metrics schema mismatch")
                records.append(rec)
    if not records:
        raise ValueError(f"{path}: empty metrics file")
    return records


def compare_runs(*metrics_files: str):
    """Final accuracy, total time, and speed-up of each run vs the first.

    Returns (rows, text table); rows are plain dicts suitable for JSON.
    """
    if len(metrics_files) < 2:
        raise ValueError("need at least two metrics files to compare")
    rows = []
    base_time = base_clean = base_robust = None
    for path in metrics_files:
        recs = _load_metrics(path)
        total = sum(r["seconds"] for r in recs)
        final = recs[-1]
        robust = next((r["robust_acc"] for r in reversed(recs)
                       if r["robust_acc"] is not None), None)
        if base_time is None:
            base_time, base_clean, base_robust = total, final["clean_acc"], robust
        rows.append({
            "file": path,
            "final_clean_acc": final["clean_acc"],
            "final_robust_acc": robust,
            "total_seconds": total,
            "speedup": base_time / total if total > 0 else float("inf"),
            "clean_delta": final["clean_acc"] - base_clean,
            "robust_delta": (robust - base_robust)
            if robust is not None and base_robust is not None else None,
        })
    header = f"{'run':<40} {'clean':>7} {'robust':>7} {'time(s)':>9} " \
             f"{'speedup':>8} {'d.clean':>8} {'d.robust':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        robust = "-" if r["final_robust_acc"] is None else f"{r['final_robust_acc']:.4f}"
        drobust = "-" if r["robust_delta"] is None else f"{r['robust_delta']:+.4f}"
        lines.append(
            f"{r['file'][-40:]:<40} {r['final_clean_acc']:>7.4f} {robust:>7} "
            f"{r['total_seconds']:>9.2f} {r['speedup']:>8.2f} "
            f"{r['clean_delta']:>+8.4f} {drobust:>9}")
    return rows, "\n".join(lines)
