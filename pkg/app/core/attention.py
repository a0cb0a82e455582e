"""
Channel-then-spatial attention used to refine the stage-1 feature maps
"""
from dataclasses import dataclass
from typing import Dict

import numpy as np

from app.core.errors import ShapeError
from app.core.functional import (
    activation,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    global_avg_pool,
    global_max_pool,
)
from app.core.tensor import Variable, as_variable, parameter


SPATIAL_KERNEL = 7


@dataclass
class AttentionModule:
    """
    Shared two-layer MLP (C -> C/r -> C, as 1x1 convolutions over pooled
    vectors) and a 7x7 convolution over [channel-mean, channel-max].
    """
    fc1_weight: Variable
    fc1_bias: Variable
    fc2_weight: Variable
    fc2_bias: Variable
    spatial_weight: Variable
    spatial_bias: Variable

    @property
    def channels(self) -> int:
        return self.fc1_weight.shape[1]

    @property
    def reduction(self) -> int:
        return self.channels // self.fc1_weight.shape[0]

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        channels: int,
        reduction: int = 4,
        init_std: float = 0.02,
        dtype=np.float64,
    ) -> "AttentionModule":
        if reduction < 1 or channels % reduction != 0:
            raise ShapeError(f"attention: reduction ratio r={reduction} does not divide channels C={channels}")
        hidden = channels // reduction
        k = SPATIAL_KERNEL
        return cls(
            fc1_weight=parameter(rng.normal(0.0, init_std, (hidden, channels, 1, 1)).astype(dtype)),
            fc1_bias=parameter(np.zeros(hidden, dtype=dtype)),
            fc2_weight=parameter(rng.normal(0.0, init_std, (channels, hidden, 1, 1)).astype(dtype)),
            fc2_bias=parameter(np.zeros(channels, dtype=dtype)),
            spatial_weight=parameter(rng.normal(0.0, init_std, (1, 2, k, k)).astype(dtype)),
            spatial_bias=parameter(np.zeros(1, dtype=dtype)),
        )

    @classmethod
    def zeros(cls, channels: int, reduction: int = 4) -> "AttentionModule":
        """All parameters zero: both gates are exactly 0.5"""
        module = cls.create(np.random.default_rng(0), channels, reduction)
        for p in module.named_parameters().values():
            p.value = np.zeros_like(p.value)
        return module

    def named_parameters(self, prefix: str = "") -> Dict[str, Variable]:
        return {
            f"{prefix}fc1.weight": self.fc1_weight,
            f"{prefix}fc1.bias": self.fc1_bias,
            f"{prefix}fc2.weight": self.fc2_weight,
            f"{prefix}fc2.bias": self.fc2_bias,
            f"{prefix}spatial.weight": self.spatial_weight,
            f"{prefix}spatial.bias": self.spatial_bias,
        }

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


def _shared_mlp(m: AttentionModule, pooled: Variable) -> Variable:
    hidden = activation("relu", conv2d(pooled, m.fc1_weight, m.fc1_bias))
    return conv2d(hidden, m.fc2_weight, m.fc2_bias)


def channel_attention(m: AttentionModule, features) -> Variable:
    """Mc = sigmoid(MLP(avg-pool(F)) + MLP(max-pool(F))), shaped (N, C, 1, 1)"""
    features = as_variable(features)
    if features.ndim != 4 or features.shape[1] != m.channels:
        raise ShapeError(f"channel_attention: expected C={m.channels} channels, got shape {features.shape}")
    logits = _shared_mlp(m, global_avg_pool(features)) + _shared_mlp(m, global_max_pool(features))
    return activation("sigmoid", logits)


def spatial_attention(m: AttentionModule, features) -> Variable:
    """Ms = sigmoid(conv7x7([mean_c(F), max_c(F)])), shaped (N, 1, H, W)"""
    features = as_variable(features)
    pooled = concat_channels([channel_mean(features), channel_max(features)])
    pad = SPATIAL_KERNEL // 2
    return activation("sigmoid", conv2d(pooled, m.spatial_weight, m.spatial_bias, padding=pad))


def attention_refine(m: AttentionModule, features) -> Variable:
    """F1 = Mc(F) * F; F' = Ms(F1) * F1. Channel gate first, then spatial gate"""
    features = as_variable(features)
    refined = channel_attention(m, features) * features
    return spatial_attention(m, refined) * refined
