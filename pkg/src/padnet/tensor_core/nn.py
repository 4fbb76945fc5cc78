"""Parameter containers and the stock layers built on the functional ops."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from ..errors import DimensionError, UsageError
from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``lower`` is an optional elementwise floor that the optimizer re-imposes
    after every update (projected gradient descent).
    """

    def __init__(self, data, lower: Optional[float] = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.lower = lower

    def project(self) -> None:
        if self.lower is not None:
            np.maximum(self.data, self.lower, out=self.data)


class Module:
    """Minimal module tree with ordered parameters, buffers and children."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value) -> None:
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        """Copies of every parameter and buffer keyed by dotted name."""
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.named_parameters(prefix):
            state[name] = p.data.copy()
        for name, b in self.named_buffers(prefix):
            state[name] = b.copy()
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "", strict: bool = False) -> list:
        """Copy matching entries of ``state`` into this module in place.

        Only keys starting with ``prefix`` are considered. Every target is
        shape-checked before anything is written, so a failed load leaves the
        module untouched. Returns the list of names that were loaded.
        """
        targets: Dict[str, np.ndarray] = {n: p.data for n, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        plan = []
        for name, value in state.items():
            if not name.startswith(prefix):
                continue
            if name not in targets:
                if strict:
                    raise UsageError(f"unexpected tensor {name!r}")
                continue
            if tuple(np.shape(value)) != targets[name].shape:
                raise DimensionError(f"{name}: stored shape {np.shape(value)} != {targets[name].shape}")
            plan.append(name)
        if strict:
            missing = [n for n in targets if n.startswith(prefix) and n not in state]
            if missing:
                raise UsageError(f"missing tensors: {missing[:5]}")
        for name in plan:
            targets[name][...] = state[name]
        return plan


def uniform_init(shape, fan_in: float, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Fan-in scaled uniform draw with variance ``gain**2 / fan_in``."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, rng: Optional[np.random.Generator] = None, gain: float = 1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = Parameter(uniform_init((cout, cin, kernel, kernel), cin * kernel * kernel, rng, gain))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0,
                 output_padding: int = 0, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, gain: float = 1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        fan_in = cin * kernel * kernel / (stride * stride)
        self.weight = Parameter(uniform_init((cin, cout, kernel, kernel), fan_in, rng, gain))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: Optional[np.random.Generator] = None, gain: float = 1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(uniform_init((fout, fin), fin, rng, gain))
        self.bias = Parameter(np.zeros(fout))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        dt = get_default_dtype()
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)
