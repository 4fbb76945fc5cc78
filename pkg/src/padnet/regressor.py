"""Fusion of images and rivalry maps, then residual-network score regression."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import DimensionError, UsageError
from .layers import GDN, BasicBlock
from .rivalry import RivalryBundle
from .tensor_core import (
    BatchNorm2d,
    Conv2d,
    Linear,
    Module,
    Tensor,
    as_tensor,
    concat,
    global_max_pool2d,
    max_pool2d,
    mse_loss,
)

BACKBONES = {
    "resnet18": (2, 2, 2, 2),
    "resnet34": (3, 4, 6, 3),
}
STAGE_WIDTHS = (64, 128, 256, 512)
BACKBONE_STRIDE = 32
FUSION_CHANNELS = 10


class Fusion(Module):
    """1x1 convolution from the 10 stacked maps to 3 channels, then GDN."""

    def __init__(self, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(3)
        self.conv9 = Conv2d(FUSION_CHANNELS, 3, 1, 1, 0, rng=rng)
        self.gdn9 = GDN(3)

    def forward(self, stacked: Tensor) -> Tensor:
        return self.gdn9(self.conv9(stacked))


def stack_inputs(I_l, I_r, bundle: RivalryBundle) -> Tensor:
    """Concatenate (P_nl, L_nl, I_l, P_nr, L_nr, I_r) along channels."""
    I_l, I_r = as_tensor(I_l), as_tensor(I_r)
    parts = [bundle.P_nl, bundle.L_nl, I_l, bundle.P_nr, bundle.L_nr, I_r]
    spatial = {p.shape[-2:] for p in parts}
    if len(spatial) != 1:
        raise DimensionError(f"fusion inputs disagree spatially: {sorted(spatial)}")
    return concat(parts, axis=1)


def fuse(I_l, I_r, bundle: RivalryBundle, fusion: Fusion) -> Tensor:
    return fusion(stack_inputs(I_l, I_r, bundle))


class Stem(Module):
    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(3, 64, 7, 2, 3, bias=False, rng=rng, gain=np.sqrt(2.0))
        self.bn = BatchNorm2d(64)

    def forward(self, x: Tensor) -> Tensor:
        return max_pool2d(self.bn(self.conv(x)).relu(), 3, 2, 1)


class Stage(Module):
    def __init__(self, cin: int, cout: int, blocks: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.blocks = []
        for i in range(blocks):
            block = BasicBlock(cin if i == 0 else cout, cout, stride if i == 0 else 1, rng=rng)
            setattr(self, str(i), block)
            self.blocks.append(block)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Regressor(Module):
    """Residual backbone without its classifier, global max-pool, scalar head.

    Consumes any 3-channel N x 3 x H x W input with H, W divisible by 32 and
    returns N scores.
    """

    def __init__(self, rng: Optional[np.random.Generator] = None, backbone: str = "resnet18"):
        super().__init__()
        if backbone not in BACKBONES:
            raise UsageError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        rng = rng if rng is not None else np.random.default_rng(4)
        self.backbone = backbone
        self.stem = Stem(rng)
        cin = 64
        for idx, (width, blocks) in enumerate(zip(STAGE_WIDTHS, BACKBONES[backbone]), start=1):
            setattr(self, f"layer{idx}", Stage(cin, width, blocks, 1 if idx == 1 else 2, rng))
            cin = width
        self.fc = Linear(STAGE_WIDTHS[-1], 1, rng=rng)

    def features(self, x: Tensor) -> Tensor:
        """Pre-pool feature map, 512 x H/32 x W/32 per sample."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"regressor expects N x 3 x H x W, got {x.shape}")
        h, w = x.shape[-2:]
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise DimensionError(f"regressor input {h}x{w} is not a multiple of {BACKBONE_STRIDE}")
        x = self.stem(x)
        for idx in range(1, 5):
            x = getattr(self, f"layer{idx}")(x)
        return x

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        pooled = global_max_pool2d(self.features(x))
        return self.fc(pooled).reshape(x.shape[0])


def regress_quality(fused, regressor: Regressor) -> Tensor:
    x = as_tensor(fused)
    if x.ndim == 3:
        return regressor(x.reshape(1, *x.shape)).reshape(())
    return regressor(x)


def score_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error between predicted and subjective scores over a batch."""
    return mse_loss(pred, as_tensor(target, dtype=pred.dtype))
