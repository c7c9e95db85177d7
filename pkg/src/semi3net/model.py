"""Three-branch network: sketch, image and edgemap paths with tied weights."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (AttentionModule, apply_co_attention, apply_self_attention,
                        build_attention)
from .backbone import ROLES, BackboneConfig, Branch, build_branch, forward_embedding, forward_feature_map
from .losses import LossWeights
from .params import (STRATEGIES, CheckpointFormatError, ParameterStore, SharePlan, assert_tied,
                     decode, encode, restore_groups, write_bytes_atomic)
from .tensor import Tensor


@dataclass
class TripleOutput:
    f_S: Tensor
    f_I: Tensor
    f_E: Tensor
    logits_S: Tensor
    logits_I: Tensor
    logits_E: Tensor


@dataclass
class Semi3Model:
    config: BackboneConfig
    store: ParameterStore
    branches: dict[str, Branch]
    attention: dict[str, AttentionModule]
    plan: SharePlan
    use_co_attention: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def tied(self) -> bool:
        return bool(self.store.groups)

    def tie(self) -> None:
        self.store.tie(self.plan)

    def check_tied(self):
        return assert_tied(self.store, self.plan)

    # -- forward paths -----------------------------------------------------

    def embed_sketch(self, S: Tensor) -> tuple[Tensor, Tensor]:
        feat = forward_feature_map(self.branches["sketch"], S)
        if self.use_co_attention:
            feat = apply_self_attention(self.attention["sketch"], feat)
        return forward_embedding(self.branches["sketch"], feat)

    def embed_pair(self, I: Tensor, E: Tensor) -> tuple[tuple[Tensor, Tensor], tuple[Tensor, Tensor]]:
        """Image and edgemap paths, coupled through the co-mask when enabled."""
        if I.shape != E.shape:
            raise T.DimensionError(f"image {I.shape} and edgemap {E.shape} batches differ")
        fi = forward_feature_map(self.branches["image"], I)
        fe = forward_feature_map(self.branches["edgemap"], E)
        if self.use_co_attention:
            fi, fe = apply_co_attention(self.attention["image"], self.attention["edgemap"], fi, fe)
        return forward_embedding(self.branches["image"], fi), forward_embedding(self.branches["edgemap"], fe)


def build_model(config: BackboneConfig, strategy: str = "semi3", *, seed: int = 0,
                reduction: int = 4, use_co_attention: bool = True,
                weights: LossWeights | None = None) -> Semi3Model:
    """Register all parameters (untied). Call :meth:`Semi3Model.tie` to apply the plan."""
    store = ParameterStore(seed)
    branches = {role: build_branch(config, role, store) for role in ROLES}
    channels = config.feature_shape()[0]
    attention = {role: build_attention(store, f"{role}.attn", channels, reduction)
                 for role in ("image", "edgemap", "sketch")}
    return Semi3Model(config, store, branches, attention, SharePlan.from_strategy(strategy),
                      use_co_attention, weights or LossWeights())


def forward_triple(model: Semi3Model, S: Tensor, I: Tensor, E: Tensor) -> TripleOutput:
    if not (S.shape == I.shape == E.shape):
        raise T.DimensionError(f"triple shapes differ: S{S.shape} I{I.shape} E{E.shape}")
    f_s, z_s = model.embed_sketch(S)
    (f_i, z_i), (f_e, z_e) = model.embed_pair(I, E)
    return TripleOutput(f_s, f_i, f_e, z_s, z_i, z_e)


def forward_single(model: Semi3Model, role: str, x: Tensor) -> tuple[Tensor, Tensor]:
    """One branch with attention bypassed (pretraining path)."""
    if role not in model.branches:
        raise ValueError(f"unknown branch role {role!r}")
    branch = model.branches[role]
    return forward_embedding(branch, forward_feature_map(branch, x))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Semi3Model, path) -> None:
    write_bytes_atomic(path, encode(model.store))


_CONV_RE = re.compile(r"^sketch\.conv(\d+)_(\d+)\.weight$")
_FC_RE = re.compile(r"^sketch\.fc(\d+)\.weight$")


def _infer_config(arrays: dict[str, np.ndarray]) -> tuple[BackboneConfig, int]:
    try:
        convs = sorted((int(m[1]), int(m[2]), arrays[m[0]].shape)
                       for m in map(_CONV_RE.match, arrays) if m)
        stages: dict[int, list] = {}
        for s, _, shape in convs:
            stages.setdefault(s, []).append(shape[0])
        stage_list = tuple((len(stages[s]), stages[s][-1]) for s in sorted(stages))
        in_channels = convs[0][2][1]
        fcs = sorted((int(m[1]), arrays[m[0]].shape) for m in map(_FC_RE.match, arrays) if m)
        fc_dims = tuple(shape[0] for _, shape in fcs)
        embed = arrays["sketch.embed.weight"].shape
        cls_ = arrays["sketch.cls.weight"].shape
        flat = fcs[0][1][1] if fcs else embed[1]
        c_last = stage_list[-1][1]
        side = int(round((flat / c_last) ** 0.5))
        if c_last * side * side != flat:
            raise CheckpointFormatError(f"flattened width {flat} is not {c_last}*h*h")
        hidden = arrays["sketch.attn.fc1.weight"].shape[0]
    except (KeyError, IndexError) as exc:
        raise CheckpointFormatError(f"checkpoint lacks an expected parameter: {exc}") from exc
    cfg = BackboneConfig(in_channels=in_channels, stages=stage_list, fc_dims=fc_dims,
                         embed_dim=embed[0], num_classes=cls_[0],
                         input_size=side * 2 ** len(stage_list))
    return cfg, c_last // hidden


def _infer_strategy(names, table) -> str | None:
    if not table:
        return None
    got = {}
    for name, gid in table:
        got.setdefault(gid, set()).add(name)
    for strategy in STRATEGIES:
        plan = SharePlan.from_strategy(strategy)
        want = {gid: {n for s in sets for n in s} for gid, sets in plan.group_members(names).items()}
        if want == got:
            return strategy
    raise CheckpointFormatError("group table matches no known sharing strategy")


def load_checkpoint(path, *, use_co_attention: bool = True, weights: LossWeights | None = None,
                    strategy: str | None = None, input_size: int | None = None) -> Semi3Model:
    """Rebuild a model from a checkpoint; architecture is read off the parameter shapes."""
    arrays, table = decode(Path(path).read_bytes())
    cfg, reduction = _infer_config(arrays)
    if input_size is not None:
        cfg = replace(cfg, input_size=input_size)
        if cfg.flat_dim() != (arrays.get("sketch.fc1.weight", arrays["sketch.embed.weight"]).shape[1]):
            raise CheckpointFormatError(f"input size {input_size} inconsistent with checkpoint")
    stored = _infer_strategy(list(arrays), table)
    model = build_model(cfg, stored or strategy or "semi3", reduction=reduction,
                        use_co_attention=use_co_attention, weights=weights)
    if set(model.store.entries) != set(arrays):
        missing = sorted(set(model.store.entries) - set(arrays))
        extra = sorted(set(arrays) - set(model.store.entries))
        raise CheckpointFormatError(f"parameter set mismatch: missing {missing[:3]} extra {extra[:3]}")
    for name, t in model.store.entries.items():
        if arrays[name].shape != t.shape:
            raise CheckpointFormatError(f"{name}: shape {arrays[name].shape} != expected {t.shape}")
        t.data = arrays[name].copy()
    restore_groups(model.store, table)
    return model
