"""Per-view likelihood and prior maps, normalised across the two views."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError
from .layers import softplus
from .tensor_core import Conv2d, Module, Tensor, as_tensor, upsample_bilinear

EPS = 1e-8


@dataclass
class RivalryBundle:
    """Error, prior and cross-view normalised maps for one batch of stereo pairs.

    Every map is N x 1 x H x W. The normalised pairs sum to one elementwise.
    """

    E_l: Tensor
    E_r: Tensor
    P_l: Tensor
    P_r: Tensor
    P_nl: Tensor
    P_nr: Tensor
    L_nl: Tensor
    L_nr: Tensor

    def maps(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def swapped(self) -> "RivalryBundle":
        return RivalryBundle(self.E_r, self.E_l, self.P_r, self.P_l,
                             self.P_nr, self.P_nl, self.L_nr, self.L_nl)


def residual_error_map(image, recon) -> Tensor:
    """Channel-averaged squared reconstruction error.

    Accepts C x H x W or N x C x H x W and keeps a singleton channel axis.
    """
    image, recon = as_tensor(image), as_tensor(recon)
    if image.shape != recon.shape:
        raise DimensionError(f"image {image.shape} and reconstruction {recon.shape} differ")
    axis = image.ndim - 3
    return (image - recon).square().mean(axis=axis, keepdims=True)


class PriorGenerator(Module):
    """Softplus, 1x1 conv to one channel, softplus, bilinear upsample, square."""

    def __init__(self, latent: int = 192, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(2)
        self.conv5 = Conv2d(latent, 1, 1, 1, 0, rng=rng)

    def forward(self, features: Tensor, out_size: Sequence[int]) -> Tensor:
        return prior_map(features, self, out_size)


def prior_map(features: Tensor, gen: PriorGenerator, out_size: Sequence[int]) -> Tensor:
    if features.ndim != 4:
        raise DimensionError(f"prior_map expects N x C x h x w features, got {features.shape}")
    coarse = softplus(gen.conv5(softplus(features)))
    return upsample_bilinear(coarse, out_size).square()


def _split(a: Tensor, b: Tensor) -> tuple:
    if a.shape != b.shape:
        raise DimensionError(f"view maps differ in shape: {a.shape} vs {b.shape}")
    # Half of EPS in each numerator keeps the pair summing to one and sends
    # 0/0 to the symmetric 0.5 / 0.5 split.
    denom = a + b + EPS
    return (a + EPS / 2) / denom, (b + EPS / 2) / denom


def normalize_priors(P_l, P_r) -> tuple:
    """(P_l / (P_l + P_r), P_r / (P_l + P_r)) with an epsilon guard."""
    return _split(as_tensor(P_l), as_tensor(P_r))


def normalize_likelihoods(E_l, E_r) -> tuple:
    """Cross-assigned error ratios: the left likelihood is the right view's share of error."""
    L_nr, L_nl = _split(as_tensor(E_l), as_tensor(E_r))
    return L_nl, L_nr


def build_bundle(I_l: Tensor, I_r: Tensor, recon_l: Tensor, recon_r: Tensor,
                 P_l: Tensor, P_r: Tensor) -> RivalryBundle:
    E_l, E_r = residual_error_map(I_l, recon_l), residual_error_map(I_r, recon_r)
    P_nl, P_nr = normalize_priors(P_l, P_r)
    L_nl, L_nr = normalize_likelihoods(E_l, E_r)
    return RivalryBundle(E_l, E_r, P_l, P_r, P_nl, P_nr, L_nl, L_nr)
