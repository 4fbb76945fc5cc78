"""Siamese encoder-decoder: four strided 5x5 convolutions down, four up."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import DimensionError
from .layers import GDN
from .tensor_core import Conv2d, ConvTranspose2d, Module, Tensor, as_tensor, mse_loss

KERNEL, STRIDE, PAD = 5, 2, 2
# Each transposed conv doubles the extent exactly: (H-1)*2 - 4 + 5 + 1 = 2H.
OUTPUT_PADDING = 1
TOTAL_STRIDE = 16


def _batched(x) -> tuple:
    t = as_tensor(x)
    if t.ndim == 3:
        return t.reshape(1, *t.shape), True
    if t.ndim != 4:
        raise DimensionError(f"expected C x H x W or N x C x H x W, got {t.shape}")
    return t, False


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return t.reshape(*t.shape[1:]) if squeeze else t


class Encoder(Module):
    def __init__(self, rng: Optional[np.random.Generator] = None, channels: int = 128, latent: int = 192):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv1 = Conv2d(3, channels, KERNEL, STRIDE, PAD, rng=rng)
        self.gdn1 = GDN(channels)
        self.conv2 = Conv2d(channels, channels, KERNEL, STRIDE, PAD, rng=rng)
        self.gdn2 = GDN(channels)
        self.conv3 = Conv2d(channels, channels, KERNEL, STRIDE, PAD, rng=rng)
        self.gdn3 = GDN(channels)
        self.conv4 = Conv2d(channels, latent, KERNEL, STRIDE, PAD, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
            raise DimensionError(f"image extent {h}x{w} is not a multiple of {TOTAL_STRIDE}")
        x = self.gdn1(self.conv1(x))
        x = self.gdn2(self.conv2(x))
        x = self.gdn3(self.conv3(x))
        return self.conv4(x)


class Decoder(Module):
    def __init__(self, rng: Optional[np.random.Generator] = None, channels: int = 128, latent: int = 192):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(1)
        args = (KERNEL, STRIDE, PAD, OUTPUT_PADDING)
        self.unconv1 = ConvTranspose2d(latent, channels, *args, rng=rng)
        self.igdn1 = GDN(channels, inverse=True)
        self.unconv2 = ConvTranspose2d(channels, channels, *args, rng=rng)
        self.igdn2 = GDN(channels, inverse=True)
        self.unconv3 = ConvTranspose2d(channels, channels, *args, rng=rng)
        self.igdn3 = GDN(channels, inverse=True)
        self.unconv4 = ConvTranspose2d(channels, 3, *args, rng=rng)
        self.latent = latent

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.latent:
            raise DimensionError(f"decoder expects {self.latent} feature channels, got {z.shape[1]}")
        z = self.igdn1(self.unconv1(z))
        z = self.igdn2(self.unconv2(z))
        z = self.igdn3(self.unconv3(z))
        return self.unconv4(z)


class Autoencoder(Module):
    """Shared-weight encoder-decoder applied to each view independently.

    Parameters are exposed as ``enc.*`` and ``dec.*`` so a state dict can be
    merged directly into a full :class:`~padnet.network.PADNet`.
    """

    def __init__(self, rng: Optional[np.random.Generator] = None, enc: Optional[Encoder] = None,
                 dec: Optional[Decoder] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.enc = enc if enc is not None else Encoder(rng)
        self.dec = dec if dec is not None else Decoder(rng)

    def encode(self, image) -> Tensor:
        x, squeeze = _batched(image)
        return _unbatch(self.enc(x), squeeze)

    def decode(self, features) -> Tensor:
        z, squeeze = _batched(features)
        return _unbatch(self.dec(z), squeeze)

    def forward(self, image) -> Tensor:
        x, squeeze = _batched(image)
        return _unbatch(self.dec(self.enc(x)), squeeze)


def reconstruction_loss(batch_in, batch_out) -> Tensor:
    """Mean squared reconstruction error over every pixel, channel and image."""
    return mse_loss(as_tensor(batch_out), as_tensor(batch_in))


def export_reconstruction(recon: Tensor) -> np.ndarray:
    """Decoder output clipped to the displayable unit range."""
    return np.clip(recon.data, 0.0, 1.0)
