"""Parameter containers on top of the autodiff functional layer."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .autodiff import BatchNormState, Tensor
from .autodiff import functional as F
from .autodiff.init import fan_in_uniform
from .errors import ConfigurationError


class Module:
    """Minimal module: attributes that are Tensors (requires_grad) or Modules are tracked."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        missing = (set(params) | buffers) - set(state)
        unexpected = set(state) - set(params) - buffers
        if strict and (missing or unexpected):
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if name in state:
                if state[name].shape != p.shape:
                    raise ConfigurationError(f"{name}: shape {state[name].shape} != {p.shape}")
                p.data[...] = state[name]
        for m_name, module in self._named_modules():
            if isinstance(module, BatchNorm2d):
                for key in ("running_mean", "running_var"):
                    full = f"{m_name}{key}"
                    if full in state:
                        setattr(module.state, key, np.array(state[full], dtype=np.float64))

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value._named_modules(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{name}.{i}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 1, stride: int = 1, bias: bool = True):
        self.stride = stride
        self.pad = (k - 1) // 2
        self.exact = stride == 1
        self.weight = Tensor(fan_in_uniform(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad, exact=self.exact)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState(channels)

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.state.running_mean
        yield prefix + "running_var", self.state.running_var

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.state, self.training)


class ConvBNReLU(Module):
    """3x3 (or 1x1) conv without bias, batch norm, optional relu."""

    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, act: bool = True):
        self.conv = Conv2d(rng, cin, cout, k, stride, bias=False)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return F.relu(y) if self.act else y
