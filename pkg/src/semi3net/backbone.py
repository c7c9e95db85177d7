"""VGG-style feature-mapping branch and embedding head.

A branch is a stack of 3x3/pad-1 convolutions with ReLU, each stage closed by
a 2x2/stride-2 max-pool, followed by a fully connected head: hidden FC layers
with ReLU, a linear embedding layer, L2 normalisation, and a classifier that
reads the pre-normalisation embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import tensor as T
from .params import ParameterStore
from .tensor import Tensor

ROLES = ("sketch", "image", "edgemap")

VGG19_STAGES = ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    stages: tuple[tuple[int, int], ...] = ((1, 8), (1, 16))
    fc_dims: tuple[int, ...] = (64,)
    embed_dim: int = 256
    num_classes: int = 8
    input_size: int = 16

    @classmethod
    def vgg19(cls, num_classes: int = 125) -> "BackboneConfig":
        return cls(in_channels=3, stages=VGG19_STAGES, fc_dims=(4096, 4096),
                   embed_dim=256, num_classes=num_classes, input_size=224)

    def feature_shape(self) -> tuple[int, int, int]:
        """``(C, h, w)`` after the last pool; raises if the map collapses."""
        if not self.stages:
            raise ConfigError("at least one stage is required")
        size = self.input_size
        for i, (count, width) in enumerate(self.stages):
            if count < 1 or width < 1:
                raise ConfigError(f"stage {i}: conv count and width must be positive")
            if size < 2:
                raise ConfigError(f"spatial size {size} collapses before pool of stage {i}")
            size //= 2
        return self.stages[-1][1], size, size

    def flat_dim(self) -> int:
        c, h, w = self.feature_shape()
        return c * h * w


@dataclass
class Branch:
    """Parameter handles for one role; the tensors live in the store."""

    role: str
    config: BackboneConfig
    store: ParameterStore
    conv_names: list[tuple[str, str]] = field(default_factory=list)
    fc_names: list[tuple[str, str]] = field(default_factory=list)
    embed_names: tuple[str, str] = ("", "")
    cls_names: tuple[str, str] = ("", "")

    @property
    def prefix(self) -> str:
        return self.role

    def param_names(self) -> list[str]:
        names = [n for pair in self.conv_names + self.fc_names for n in pair]
        return names + list(self.embed_names) + list(self.cls_names)

    def _p(self, name: str) -> Tensor:
        # looked up on every call so that tying after construction is honoured
        return self.store[name]


def _he(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


def build_branch(config: BackboneConfig, role: str, store: ParameterStore) -> Branch:
    """Register every conv/FC/embedding/classifier parameter for ``role``."""
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    flat = config.flat_dim()
    b = Branch(role, config, store)
    cin = config.in_channels
    for s, (count, width) in enumerate(config.stages, start=1):
        for k in range(1, count + 1):
            base = f"{role}.conv{s}_{k}"
            store.register(f"{base}.weight", (width, cin, 3, 3), "gaussian", _he(cin * 9))
            store.register(f"{base}.bias", (width,), "zeros")
            b.conv_names.append((f"{base}.weight", f"{base}.bias"))
            cin = width
    d = flat
    for j, width in enumerate(config.fc_dims, start=1):
        base = f"{role}.fc{j}"
        store.register(f"{base}.weight", (width, d), "gaussian", _he(d))
        store.register(f"{base}.bias", (width,), "zeros")
        b.fc_names.append((f"{base}.weight", f"{base}.bias"))
        d = width
    store.register(f"{role}.embed.weight", (config.embed_dim, d), "gaussian", math.sqrt(1.0 / d))
    store.register(f"{role}.embed.bias", (config.embed_dim,), "zeros")
    b.embed_names = (f"{role}.embed.weight", f"{role}.embed.bias")
    store.register(f"{role}.cls.weight", (config.num_classes, config.embed_dim), "gaussian",
                   math.sqrt(1.0 / config.embed_dim))
    store.register(f"{role}.cls.bias", (config.num_classes,), "zeros")
    b.cls_names = (f"{role}.cls.weight", f"{role}.cls.bias")
    return b


def forward_feature_map(branch: Branch, x: Tensor) -> Tensor:
    """Run the conv/pool stages; returns the output of the last pool."""
    cfg = branch.config
    expect = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise T.DimensionError(f"{branch.role} branch expects [N,{expect}], got {x.shape}")
    names = iter(branch.conv_names)
    h = x
    for count, _ in cfg.stages:
        for _ in range(count):
            wn, bn = next(names)
            h = T.relu(T.conv2d(h, branch._p(wn), branch._p(bn), stride=1, pad=1))
        h = T.maxpool2d(h, 2, 2)
    return h


def forward_embedding(branch: Branch, feat: Tensor) -> tuple[Tensor, Tensor]:
    """Head: ``(unit embedding [N,D], logits [N,K])``."""
    cfg = branch.config
    if feat.ndim != 4 or feat.shape[1:] != cfg.feature_shape():
        raise T.DimensionError(
            f"{branch.role} head expects [N,{cfg.feature_shape()}], got {feat.shape}")
    h = T.reshape(feat, (feat.shape[0], -1))
    for wn, bn in branch.fc_names:
        h = T.relu(T.linear(h, branch._p(wn), branch._p(bn)))
    pre = T.linear(h, branch._p(branch.embed_names[0]), branch._p(branch.embed_names[1]))
    logits = T.linear(pre, branch._p(branch.cls_names[0]), branch._p(branch.cls_names[1]))
    return T.l2_normalize(pre), logits
