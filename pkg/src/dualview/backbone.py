"""Staged convolutional encoder producing multi-level feature maps.

Four stages, each opening with a 3x3 stride-2 convolution that halves the
spatial resolution, followed by ReLU; extra blocks within a stage run at
stride 1 with an identity residual (channel counts match there). There is
deliberately no normalization inside the encoder; style statistics are
handled exclusively by the enhancement module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Conv


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    input_channels: int = 1
    input_size: int = 128

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ValueError("backbone needs exactly 4 stages")
        if self.input_size % 16 != 0:
            raise ValueError("input_size must be divisible by 16 (4 halvings)")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")

    @property
    def stage_sizes(self):
        return tuple(self.input_size // 2 ** (i + 1) for i in range(4))


@dataclass
class BackboneParams:
    config: BackboneConfig
    stages: list = field(default_factory=list)   # list[list[Conv]]

    @classmethod
    def create(cls, config: BackboneConfig, rng: np.random.Generator, dtype):
        stages = []
        in_c = config.input_channels
        for out_c in config.stage_channels:
            blocks = []
            for bi in range(config.blocks_per_stage):
                blocks.append(Conv.create(rng, out_c, in_c if bi == 0 else out_c, 3, 3, dtype))
            stages.append(blocks)
            in_c = out_c
        return cls(config=config, stages=stages)

    def named(self, prefix):
        for si, blocks in enumerate(self.stages):
            for bi, conv in enumerate(blocks):
                yield from conv.named(f"{prefix}.stage{si}.block{bi}.conv")

    def count(self) -> int:
        return sum(t.size for _, t in self.named("x"))


def stage_forward(x: Tensor, params: BackboneParams, stage: int) -> Tensor:
    """One stage: stride-2 conv + ReLU, then stride-1 residual blocks."""
    for bi, conv in enumerate(params.stages[stage]):
        y = conv.apply(x, stride=2 if bi == 0 else 1, padding=1)
        if bi > 0:
            y = ad.add(y, x)       # identity residual, shapes match at stride 1
        x = ad.relu(y)
    return x


def backbone_forward(image: Tensor, params: BackboneParams) -> list:
    """Run all 4 stages; returns the per-stage feature maps."""
    cfg = params.config
    if image.ndim != 4 or image.shape[1] != cfg.input_channels:
        raise ShapeError(f"expected (B, {cfg.input_channels}, S, S) input, got {image.shape}")
    if image.shape[2] != image.shape[3]:
        raise ShapeError(f"non-square input {image.shape}")
    outs = []
    x = image
    for si in range(4):
        x = stage_forward(x, params, si)
        outs.append(x)
    return outs


@dataclass
class TwoStream:
    """Paired view-specific encoders with disjoint parameters."""

    cc: BackboneParams
    mlo: BackboneParams

    def named(self):
        yield from self.cc.named("cc")
        yield from self.mlo.named("mlo")


def make_two_stream(params_cc: BackboneParams, params_mlo: BackboneParams) -> TwoStream:
    if params_cc.config != params_mlo.config:
        raise ValueError("two-stream branches must share one backbone config")
    return TwoStream(cc=params_cc, mlo=params_mlo)
