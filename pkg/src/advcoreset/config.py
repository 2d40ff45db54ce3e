"""Run configuration: dotted-key text files plus command-line overrides.

Format: one `section.key = value` per line; '#' starts a comment.
Unknown keys are rejected. The resolved configuration is frozen into
each run directory so a run can be replayed exactly.
"""
from __future__ import annotations

import os
from .attacks import AttackSpec
from .coreset import SelectionConfig
from .objectives import Objective
from .training import TrainConfig

OUTPUT_ROOT_ENV = "ADVCORESET_RUNS"


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


# key -> (parser, default-as-string). Values are kept as strings until
# resolution so the frozen config is a faithful replayable artifact.
KNOWN_KEYS: dict[str, tuple] = {
    "run.seed": (int, "0"),
    "run.out": (str, "run"),
    "dataset.uri": (str, "blobs:n=2000,k=4,d=20,spread=0.25,seed=0"),
    "dataset.eval_uri": (str, ""),
    "model.arch": (str, "mlp"),
    "model.hidden": (_parse_ints, "64,64"),
    "model.image_shape": (_parse_ints, ""),
    "model.conv_channels": (_parse_ints, "8,16"),
    "model.fc_width": (int, "64"),
    "objective.kind": (str, "adversarial"),
    "objective.lambda_inv": (float, "0.1667"),
    "attack.norm": (str, "linf"),
    "attack.epsilon": (float, "0.1"),
    "attack.step_size": (float, "0.025"),
    "attack.iters": (int, "10"),
    "attack.restarts": (int, "1"),
    "attack.random_init": (_parse_bool, "true"),
    "train.mode": (str, "full"),
    "train.epochs": (int, "40"),
    "train.lr": (float, "0.1"),
    "train.milestones": (_parse_ints, "30,36"),
    "train.lr_decay": (float, "0.1"),
    "train.weight_decay": (float, "0.0005"),
    "train.momentum": (float, "0.9"),
    "train.batch_size": (int, "128"),
    "train.kappa": (float, "0.5"),
    "train.period": (int, "8"),
    "train.checkpoint_every": (int, "0"),
    "selection.solver": (str, "gradmatch"),
    "selection.fraction": (float, "0.5"),
    "selection.unit_batch_size": (int, "20"),
    "selection.attack_iters": (int, "1"),
    "selection.normalize_weights": (_parse_bool, "true"),
    "selection.residual_tol": (float, "1e-8"),
    "selection.ridge": (float, "0.0"),
    "eval.every": (int, "0"),
    "eval.iters": (int, "50"),
    "eval.restarts": (int, "10"),
    "eval.step_size": (float, "0.0"),   # 0 -> epsilon / 8
    "eval.epsilon": (float, "-1"),      # <0 -> training epsilon
}


def parse_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = val.strip()
    return values


def apply_overrides(values: dict[str, str], overrides: list[str]) -> dict[str, str]:
    """Overrides are '--section.key=value' tokens mirroring file keys."""
    for token in overrides:
        if not token.startswith("--") or "=" not in token:
            raise ConfigError(f"bad override {token!r}, expected --section.key=value")
        key, _, val = token[2:].partition("=")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = val
    return values


def resolve(values: dict[str, str]) -> dict[str, object]:
    """Fill defaults and parse every value; raises ConfigError with the
    offending key name."""
    out: dict[str, object] = {}
    merged = {key: default for key, (_, default) in KNOWN_KEYS.items()}
    merged.update(values)
    for key, raw in merged.items():
        parser = KNOWN_KEYS[key][0]
        try:
            out[key] = parser(raw) if raw != "" else None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from None
    return out


def freeze(values: dict[str, str], path: str) -> None:
    """Write the fully resolved config (defaults included) as plain text."""
    merged = {key: default for key, (_, default) in KNOWN_KEYS.items()}
    merged.update(values)
    with open(path, "w") as fh:
        for key in sorted(merged):
            fh.write(f"{key} = {merged[key]}\n")


def build_attack(cfg: dict, loss_kind: str = "ce_label") -> AttackSpec:
    return AttackSpec(norm=cfg["attack.norm"], epsilon=cfg["attack.epsilon"],
                      step_size=cfg["attack.step_size"], iters=cfg["attack.iters"],
                      restarts=cfg["attack.restarts"],
                      random_init=cfg["attack.random_init"], loss_kind=loss_kind)


def build_objective(cfg: dict) -> Objective:
    kind = cfg["objective.kind"]
    if kind == "vanilla":
        return Objective(kind="vanilla")
    return Objective(kind=kind, attack=build_attack(cfg),
                     lambda_inv=cfg["objective.lambda_inv"] if kind == "trades" else 0.0)


def build_eval_attack(cfg: dict) -> AttackSpec:
    eps = cfg["eval.epsilon"]
    if eps is None or eps < 0:
        eps = cfg["attack.epsilon"]
    step = cfg["eval.step_size"]
    if not step:
        step = eps / 8.0
    return AttackSpec(norm=cfg["attack.norm"], epsilon=eps, step_size=step,
                      iters=cfg["eval.iters"], restarts=cfg["eval.restarts"],
                      random_init=True, loss_kind="ce_label")


def build_selection(cfg: dict) -> SelectionConfig:
    sel_attack = build_attack(cfg).replace(iters=cfg["selection.attack_iters"])
    return SelectionConfig(
        solver=cfg["selection.solver"], fraction=cfg["selection.fraction"],
        unit_batch_size=cfg["selection.unit_batch_size"],
        selection_attack=sel_attack,
        normalize_weights=cfg["selection.normalize_weights"],
        residual_tol=cfg["selection.residual_tol"], ridge=cfg["selection.ridge"])


def build_train_config(cfg: dict) -> TrainConfig:
    mode = cfg["train.mode"]
    selection = build_selection(cfg) if mode in ("coreset", "half_half") else None
    return TrainConfig(
        objective=build_objective(cfg), epochs=cfg["train.epochs"],
        lr=cfg["train.lr"], milestones=tuple(cfg["train.milestones"] or ()),
        lr_decay=cfg["train.lr_decay"], weight_decay=cfg["train.weight_decay"],
        momentum=cfg["train.momentum"], batch_size=cfg["train.batch_size"],
        mode=mode, kappa=cfg["train.kappa"], period=cfg["train.period"],
        selection=selection, seed=cfg["run.seed"], eval_every=cfg["eval.every"],
        eval_attack=build_eval_attack(cfg) if cfg["eval.every"] else None,
        checkpoint_every=cfg["train.checkpoint_every"])


def build_model_spec(cfg: dict, dataset):
    from .models import ModelSpec
    kwargs = dict(arch=cfg["model.arch"], input_dim=dataset.inputs.shape[1],
                  classes=dataset.classes, hidden=tuple(cfg["model.hidden"] or ()))
    if cfg["model.arch"] == "cnn-small":
        shape = cfg["model.image_shape"] or dataset.image_shape
        if shape is None:
            raise ConfigError("model.image_shape required for cnn-small")
        kwargs.update(image_shape=tuple(shape),
                      conv_channels=tuple(cfg["model.conv_channels"]),
                      fc_width=cfg["model.fc_width"])
    return ModelSpec(**kwargs)


def output_dir(cfg: dict) -> str:
    out = cfg["run.out"]
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(out):
        return os.path.join(root, out)
    return out
