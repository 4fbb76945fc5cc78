"""The full stereo quality network and its weight groups."""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .autoencoder import Autoencoder, Decoder, Encoder
from .errors import DimensionError
from .regressor import Fusion, Regressor, stack_inputs
from .rivalry import PriorGenerator, RivalryBundle, build_bundle
from .tensor_core import Module, Tensor, as_tensor

# Dotted-name prefixes of the three weight groups.
GROUP_PREFIXES = {
    "w1": ("enc.", "dec."),
    "w2": ("reg.",),
    "w3": ("pri.", "fus."),
}


class PADNet(Module):
    """Siamese auto-encoder, rivalry maps, fusion and quality regressor.

    ``forward(left, right)`` takes two N x 3 x H x W batches (H, W multiples
    of 32) and returns ``(scores, bundle)`` with one score per pair.
    """

    def __init__(self, rng: Optional[np.random.Generator] = None, backbone: str = "resnet18",
                 autoencoder: Optional[Autoencoder] = None, regressor: Optional[Regressor] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        ae = autoencoder if autoencoder is not None else Autoencoder(rng)
        self.enc: Encoder = ae.enc
        self.dec: Decoder = ae.dec
        self.pri = PriorGenerator(rng=rng)
        self.fus = Fusion(rng=rng)
        self.reg = regressor if regressor is not None else Regressor(rng, backbone)

    @property
    def autoencoder(self) -> Autoencoder:
        return Autoencoder(enc=self.enc, dec=self.dec)

    def group(self, name: str) -> list:
        prefixes = GROUP_PREFIXES[name]
        return [p for n, p in self.named_parameters() if n.startswith(prefixes)]

    def view(self, image: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Features, reconstruction and prior map for one view."""
        features = self.enc(image)
        recon = self.dec(features)
        prior = self.pri(features, image.shape[-2:])
        return features, recon, prior

    def rivalry(self, left, right) -> RivalryBundle:
        left, right = _as_batch(left), _as_batch(right)
        if left.shape != right.shape:
            raise DimensionError(f"left {left.shape} and right {right.shape} views differ")
        _, recon_l, prior_l = self.view(left)
        _, recon_r, prior_r = self.view(right)
        return build_bundle(left, right, recon_l, recon_r, prior_l, prior_r)

    def forward(self, left, right) -> Tuple[Tensor, RivalryBundle]:
        left, right = _as_batch(left), _as_batch(right)
        bundle = self.rivalry(left, right)
        fused = self.fus(stack_inputs(left, right, bundle))
        return self.reg(fused), bundle


def _as_batch(x) -> Tensor:
    t = as_tensor(x)
    if t.ndim == 3:
        t = t.reshape(1, *t.shape)
    if t.ndim != 4 or t.shape[1] != 3:
        raise DimensionError(f"expected 3-channel images, got shape {t.shape}")
    return t
