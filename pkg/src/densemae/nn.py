"""Module/Parameter layer on top of the autograd engine.

Modules register Parameters and child Modules through attribute
assignment, in assignment order. That order is the serialization order:
state_entries() walks each module's own parameters, then its buffers,
then its children depth first, which is what the checkpoint manifest
records.

Weight init draws from an explicit numpy Generator passed to each layer,
so building the same architecture from the same seed is bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype):
        """Convert parameters and float buffers in place; drops gradients."""
        dtype = np.dtype(dtype)
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name, buf in list(m._buffers.items()):
                if np.issubdtype(buf.dtype, np.floating):
                    m.register_buffer(name, buf.astype(dtype))
        return self

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_entries(self):
        """Ordered (name, array) pairs: all parameters, then all buffers."""
        out = [(name, p.data) for name, p in self.named_parameters()]
        out += [(name, b) for name, b in self.named_buffers()]
        return out

    def load_state_entries(self, entries: dict):
        """Load arrays saved by state_entries; names and shapes must match."""
        for name, p in self.named_parameters():
            if name not in entries:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(entries[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
            p.grad = None
        # walk modules so buffers can be replaced object-for-object
        self._load_buffers(entries, "")

    def _load_buffers(self, entries, prefix):
        for name, buf in list(self._buffers.items()):
            full = prefix + name
            if full not in entries:
                raise KeyError(f"missing buffer {full!r} in state")
            arr = np.asarray(entries[full])
            if arr.shape != buf.shape:
                raise ValueError(f"shape mismatch for {full!r}: {arr.shape} vs {buf.shape}")
            self.register_buffer(name, arr.copy())
        for cname, child in self._children.items():
            child._load_buffers(entries, prefix + cname + ".")


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        for i, m in enumerate(mods):
            setattr(self, f"m{i}", m)
        self._order = [f"m{i}" for i in range(len(mods))]

    def forward(self, x):
        for name in self._order:
            x = getattr(self, name)(x)
        return x


class Conv2d(Module):
    """Conv layer; padding defaults to the shape-preserving amount for the
    given kernel/dilation (stride still shrinks the output)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, groups: int = 1,
                 bias: bool = True, padding=None):
        super().__init__()
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.padding = dilation * (k - 1) // 2 if padding is None else int(padding)
        fan_in = (c_in // groups) * k * k
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = Parameter(rng.normal(0.0, std, size=(c_out, c_in // groups, k, k)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, dilation=self.dilation, groups=self.groups)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        return F.group_norm(x, self.gamma, self.beta, self.groups, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.register_buffer("num_batches", np.zeros(1, dtype=np.int64))

    def forward(self, x):
        if self.training:
            out = F.batch_norm(x, self.gamma, self.beta, self.running_mean,
                               self.running_var, training=True,
                               momentum=self.momentum, eps=self.eps)
            self.num_batches[0] += 1
            return out
        if self.num_batches[0] == 0:
            raise RuntimeError(
                "BatchNorm2d used in eval mode before any training-mode batch; "
                "running statistics are still at their init values")
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training=False,
                            momentum=self.momentum, eps=self.eps)


class GELU(Module):
    def forward(self, x):
        return F.gelu(x)


class SiLU(Module):
    def forward(self, x):
        return F.silu(x)
