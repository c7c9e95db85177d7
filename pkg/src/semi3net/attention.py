"""Channel attention masks and the image/edgemap co-mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParameterStore
from .tensor import Tensor


@dataclass
class AttentionModule:
    """Squeeze-excitation style mask: GAP -> FC -> ReLU -> FC -> sigmoid."""

    prefix: str
    channels: int
    reduction: int
    store: ParameterStore

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction

    @property
    def W1(self) -> Tensor:
        return self.store[f"{self.prefix}.fc1.weight"]

    @property
    def b1(self) -> Tensor:
        return self.store[f"{self.prefix}.fc1.bias"]

    @property
    def W2(self) -> Tensor:
        return self.store[f"{self.prefix}.fc2.weight"]

    @property
    def b2(self) -> Tensor:
        return self.store[f"{self.prefix}.fc2.bias"]

    def param_names(self) -> list[str]:
        return [f"{self.prefix}.{layer}.{kind}" for layer in ("fc1", "fc2") for kind in ("weight", "bias")]


# Output-layer bias at construction: sigmoid(2) ~ 0.88, so a fresh co-mask
# starts near 0.78 instead of 0.25 and barely rescales pretrained features.
MASK_BIAS_INIT = 2.0

_MASK_FLOOR = float(np.finfo(np.float64).tiny)


def build_attention(store: ParameterStore, prefix: str, channels: int, reduction: int = 4,
                    mask_bias: float = MASK_BIAS_INIT) -> AttentionModule:
    if reduction < 1 or channels % reduction:
        raise ValueError(f"channels={channels} not divisible by reduction={reduction}")
    hidden = channels // reduction
    store.register(f"{prefix}.fc1.weight", (hidden, channels), "gaussian", math.sqrt(2.0 / channels))
    store.register(f"{prefix}.fc1.bias", (hidden,), "zeros")
    store.register(f"{prefix}.fc2.weight", (channels, hidden), "gaussian", math.sqrt(1.0 / hidden))
    store.register(f"{prefix}.fc2.bias", (channels,), "zeros").data += mask_bias
    return AttentionModule(prefix, channels, reduction, store)


def attention_mask(module: AttentionModule, x: Tensor) -> Tensor:
    """Per-channel mask in (0, 1) for a feature map ``x[N,C,h,w]``."""
    if x.ndim != 4 or x.shape[1] != module.channels:
        raise T.DimensionError(f"attention {module.prefix} expects {module.channels} channels, got {x.shape}")
    squeezed = T.global_avg_pool(x)
    hidden = T.relu(T.linear(squeezed, module.W1, module.b1))
    return T.sigmoid(T.linear(hidden, module.W2, module.b2))


def co_mask(m_image: Tensor, m_edge: Tensor) -> Tensor:
    """Element-wise product of the two branch masks."""
    if m_image.shape != m_edge.shape:
        raise T.DimensionError(f"co_mask: {m_image.shape} vs {m_edge.shape}")
    # two masks at the sigmoid floor would underflow to exactly 0
    return T.clamp_min(T.elementwise_mul(m_image, m_edge), _MASK_FLOOR)


def apply_co_attention(attn_image: AttentionModule, attn_edge: AttentionModule,
                       x_image: Tensor, x_edge: Tensor) -> tuple[Tensor, Tensor]:
    """Rescale both feature maps by the same co-mask."""
    if x_image.shape != x_edge.shape:
        raise T.DimensionError(f"co-attention inputs differ: {x_image.shape} vs {x_edge.shape}")
    m = co_mask(attention_mask(attn_image, x_image), attention_mask(attn_edge, x_edge))
    return T.channel_scale(x_image, m), T.channel_scale(x_edge, m)


def apply_self_attention(attn: AttentionModule, x: Tensor) -> Tensor:
    return T.channel_scale(x, attention_mask(attn, x))
