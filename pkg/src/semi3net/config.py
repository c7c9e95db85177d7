"""Plain-text run configuration: one ``key = value`` per line, ``#`` comments.

Every field of the training, backbone, loss-weight and synthetic-data
settings has a key; unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .data import SyntheticSpec
from .losses import LossWeights
from .params import STRATEGIES
from .trainer import TrainConfig


class ConfigFileError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _stages(text: str) -> tuple[tuple[int, int], ...]:
    """``"1x8, 1x16"`` -> ``((1, 8), (1, 16))``."""
    out = []
    for chunk in text.replace(" ", "").split(","):
        if not chunk:
            continue
        count, _, width = chunk.partition("x")
        out.append((int(count), int(width)))
    return tuple(out)


def _fmt_stages(stages) -> str:
    return ", ".join(f"{c}x{w}" for c, w in stages)


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(embed_dim=32))
    weights: LossWeights = field(default_factory=LossWeights)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    share_plan: str = "semi3"
    use_co_attention: bool = True
    reduction: int = 4
    log_path: str = ""


# key -> (section, attribute, parser, formatter)
_KEYS = {
    "lr": ("train", "lr", float, repr),
    "pretrain_lr": ("train", "pretrain_lr", _opt_float, repr),
    "momentum": ("train", "momentum", float, repr),
    "weight_decay": ("train", "weight_decay", float, repr),
    "batch_size": ("train", "batch_size", int, str),
    "pretrain_epochs": ("train", "pretrain_epochs", int, str),
    "joint_epochs": ("train", "joint_epochs", int, str),
    "seed": ("train", "seed", int, str),
    "checkpoint_every": ("train", "checkpoint_every", int, str),
    "in_channels": ("backbone", "in_channels", int, str),
    "stages": ("backbone", "stages", _stages, _fmt_stages),
    "fc_dims": ("backbone", "fc_dims", _int_list, lambda v: ", ".join(map(str, v))),
    "embed_dim": ("backbone", "embed_dim", int, str),
    "num_classes": ("backbone", "num_classes", int, str),
    "input_size": ("backbone", "input_size", int, str),
    "alpha": ("weights", "alpha", float, repr),
    "beta": ("weights", "beta", float, repr),
    "gamma": ("weights", "gamma", float, repr),
    "m1": ("weights", "m1", float, repr),
    "m2": ("weights", "m2", float, repr),
    "num_categories": ("data", "num_categories", int, str),
    "per_category": ("data", "per_category", int, str),
    "image_size": ("data", "image_size", int, str),
    "noise_level": ("data", "noise_level", float, repr),
    "jitter_level": ("data", "jitter_level", float, repr),
    "data_seed": ("data", "seed", int, str),
    "share_plan": (None, "share_plan", str, str),
    "use_co_attention": (None, "use_co_attention", _bool, lambda v: "true" if v else "false"),
    "reduction": (None, "reduction", int, str),
    "log_path": (None, "log_path", str, str),
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    updates: dict[str | None, dict[str, object]] = {}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{lineno}"
        if not sep:
            raise ConfigFileError(f"{where}: expected 'key = value'")
        if key not in _KEYS:
            raise ConfigFileError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigFileError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        section, attr, parse, _ = _KEYS[key]
        try:
            updates.setdefault(section, {})[attr] = parse(value)
        except ValueError as exc:
            raise ConfigFileError(f"{where}: bad value for {key}: {exc}") from exc

    cfg = RunConfig()
    try:
        for section in ("train", "backbone", "weights", "data"):
            if section in updates:
                setattr(cfg, section, replace(getattr(cfg, section), **updates[section]))
        for attr, value in updates.get(None, {}).items():
            setattr(cfg, attr, value)
    except ValueError as exc:
        raise ConfigFileError(f"{source}: {exc}") from exc
    if "num_classes" not in seen:
        cfg.backbone = replace(cfg.backbone, num_classes=cfg.data.num_categories)
    if "input_size" not in seen:
        cfg.backbone = replace(cfg.backbone, input_size=cfg.data.image_size)
    if cfg.share_plan not in STRATEGIES:
        raise ConfigFileError(f"{source}: share_plan must be one of {STRATEGIES}")
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, (section, attr, _, fmt) in _KEYS.items():
        holder = cfg if section is None else getattr(cfg, section)
        value = getattr(holder, attr)
        lines.append(f"{key} = {'none' if value is None else fmt(value)}")
    return "\n".join(lines) + "\n"


def known_keys() -> list[str]:
    return list(_KEYS)


__all__ = ["ConfigFileError", "RunConfig", "format_config", "known_keys", "load_config", "parse_config"]

# keep dataclass field lists and key table in sync
assert {f.name for f in fields(TrainConfig)} <= {a for s, a, *_ in _KEYS.values() if s == "train"}
