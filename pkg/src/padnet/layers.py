"""Divisive normalisation, softplus and the residual basic block."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import DimensionError, UsageError
from .tensor_core import BatchNorm2d, Conv2d, Module, Parameter, Tensor, conv2d
from .tensor_core.tensor import check_finite

BETA_MIN = 1e-6


def _gdn_norm(x: Tensor, beta: Tensor, gamma: Tensor) -> Tensor:
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise DimensionError(f"GDN parameters for {beta.shape[0]} channels applied to {c}")
    check_finite(x.data, "GDN input")
    # pool_i = beta_i + sum_j gamma_ij * x_j^2, a 1x1 convolution of x^2
    return conv2d(x.square(), gamma.reshape(c, c, 1, 1), beta).sqrt()


def gdn(x: Tensor, beta: Tensor, gamma: Tensor) -> Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2) at every pixel."""
    return x / _gdn_norm(x, beta, gamma)


def igdn(y: Tensor, beta: Tensor, gamma: Tensor) -> Tensor:
    """x_i = y_i * sqrt(beta_i + sum_j gamma_ij y_j^2).

    One-shot multiplicative inverse; the pool is taken over the layer's own
    input because the encoder-side activations do not exist in the decoder.
    """
    return y * _gdn_norm(y, beta, gamma)


class GDN(Module):
    """Learned divisive normalisation (``inverse=True`` gives IGDN).

    beta starts at 1 and gamma at ``0.1 * I``; both are projected back to
    their feasible sets (beta >= 1e-6, gamma >= 0) after each Adam update.
    """

    def __init__(self, channels: int, inverse: bool = False, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta = Parameter(np.ones(channels), lower=BETA_MIN)
        self.gamma = Parameter(gamma_init * np.eye(channels), lower=0.0)

    def forward(self, x: Tensor) -> Tensor:
        fn = igdn if self.inverse else gdn
        return fn(x, self.beta, self.gamma)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) without overflow; the derivative is the logistic sigmoid."""
    a = x.data
    out = np.logaddexp(0.0, a).astype(a.dtype, copy=False)
    sig = np.exp(-np.logaddexp(0.0, -a)).astype(a.dtype, copy=False)
    return Tensor.from_op(out, (x,), lambda g: (g * sig,))


class BasicBlock(Module):
    """Two 3x3 conv + batch-norm stages with an identity or 1x1 projected shortcut."""

    def __init__(self, cin: int, cout: int, stride: int = 1, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if stride not in (1, 2):
            raise UsageError(f"basic block stride must be 1 or 2, got {stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        relu_gain = np.sqrt(2.0)
        self.stride = stride
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, bias=False, rng=rng, gain=relu_gain)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, bias=False, rng=rng, gain=relu_gain)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.down_conv = Conv2d(cin, cout, 1, stride, 0, bias=False, rng=rng)
            self.down_bn = BatchNorm2d(cout)
        else:
            self.down_conv = None

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn1(self.conv1(x)).relu()
        out = self.bn2(self.conv2(out))
        shortcut = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        if shortcut.shape != out.shape:
            raise DimensionError(f"residual shapes disagree: {shortcut.shape} vs {out.shape}")
        return (out + shortcut).relu()
