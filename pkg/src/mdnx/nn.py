"""Neural network building blocks on top of the autodiff tensor core.

Modules register parameters and submodules through attribute assignment, so
`named_parameters()` yields dotted hierarchy paths like
``depth.stage1.blocks.0.conv.weight``. Those paths are the checkpoint keys.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        """Update a registered buffer in place of the registry entry."""
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield (f"{prefix}{name}", self._buffers[name])
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix=f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield (prefix.rstrip("."), self)
        for name, m in self._modules.items():
            yield from m.named_modules(prefix=f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, flag: bool = True) -> "Module":
        object.__setattr__(self, "training", flag)
        for m in self._modules.values():
            m.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p in self.named_parameters()}
        buffer_owners: dict[str, tuple[Module, str]] = {}
        for mod_name, mod in self.named_modules():
            for b in mod._buffers:
                key = f"{mod_name}.{b}" if mod_name else b
                buffer_owners[key] = (mod, b)
        missing = (set(own) | set(buffer_owners)) - set(state)
        unexpected = set(state) - (set(own) | set(buffer_owners))
        if missing or unexpected:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise ShapeMismatch(name, p.data.shape, state[name].shape)
            p.data = np.array(state[name], dtype=ad.DTYPE)
            p.zero_grad()
        for name, (mod, b) in buffer_owners.items():
            mod._set_buffer(b, np.array(state[name], dtype=ad.DTYPE))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ShapeMismatch(KeyError):
    def __init__(self, name, expected, got):
        super().__init__(f"parameter {name}: expected shape {expected}, got {got}")


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(xavier_uniform(rng, (in_dim, out_dim), in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.in_dim)) if x.ndim != 2 else x
        y = ad.matmul(flat, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        if x.ndim != 2:
            y = y.reshape(lead + (self.out_dim,))
        return y


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        super().__init__()
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.kernel = kernel
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, stride=self.stride, dilation=self.dilation, padding=self.padding)
        if self.bias is not None:
            y = ad.add(y, self.bias.reshape((1, -1, 1, 1)))
        return y


class BatchNorm2d(Module):
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes by batch statistics and updates the running
    estimates with the given momentum; eval mode normalizes by the running
    estimates. Variance uses the biased (population) estimator in both paths.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.gamma.size:
            raise ConfigError(f"batch_norm expects [N,{self.gamma.size},H,W], got {x.shape}")
        if self.training:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ad.tmean(ad.power(ad.add(x, ad.mul(mean, -1.0)), 2.0), axis=(0, 2, 3), keepdims=True)
            self._set_buffer(
                "running_mean",
                (1 - self.momentum) * self.running_mean + self.momentum * mean.data.reshape(-1),
            )
            self._set_buffer(
                "running_var",
                (1 - self.momentum) * self.running_var + self.momentum * var.data.reshape(-1),
            )
        else:
            mean = Tensor(self.running_mean.reshape(1, -1, 1, 1))
            var = Tensor(self.running_var.reshape(1, -1, 1, 1))
        xhat = ad.div(ad.add(x, ad.mul(mean, -1.0)), ad.sqrt(ad.add(var, self.eps)))
        return ad.add(ad.mul(xhat, self.gamma.reshape((1, -1, 1, 1))), self.beta.reshape((1, -1, 1, 1)))


class LayerNorm(Module):
    """Normalization over the last dimension."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        mean = x.mean(axis=-1, keepdims=True)
        centered = ad.add(x, ad.mul(mean, -1.0))
        var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
        xhat = ad.div(centered, ad.sqrt(ad.add(var, self.eps)))
        return ad.add(ad.mul(xhat, self.gamma), self.beta)


class Embedding(Module):
    """Learnable lookup table; rows gathered by integer index."""

    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, 1.0, size=(count, dim)))

    def forward(self, idx: np.ndarray) -> Tensor:
        return ad.take(self.weight, np.asarray(idx, dtype=np.int64), axis=0)


class MLP(Module):
    """Stack of linear layers with GELU between them."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int, rng: np.random.Generator):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = ModuleList([Linear(dims[i], dims[i + 1], rng) for i in range(layers)])

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ad.gelu(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention over tokens with concatenated heads.

    Softmax temperature is 1/sqrt(d_head). Inputs are [N, T, C]; query and
    key inputs may already carry positional terms.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor, n: int, t: int) -> Tensor:
        return x.reshape((n, t, self.heads, self.head_dim)).transpose((0, 2, 1, 3))

    def forward(self, q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
        n, tq, _ = q.shape
        tk = k.shape[1]
        qh = self._split(self.wq(q), n, tq)
        kh = self._split(self.wk(k), n, tk)
        vh = self._split(self.wv(v), n, tk)
        logits = ad.mul(ad.matmul(qh, kh.transpose((0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        weights = ad.softmax(logits, axis=-1)
        out = ad.matmul(weights, vh)
        out = out.transpose((0, 2, 1, 3)).reshape((n, tq, self.dim))
        out = self.wo(out)
        if return_weights:
            return out, weights
        return out


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        self.items = ModuleList(modules)

    def forward(self, x):
        for m in self.items:
            x = m(x)
        return x


class ConvBNAct(Module):
    """conv -> batch norm -> activation; the strided workhorse of the backbone."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        padding: Optional[int] = None,
        act: str = "gelu",
    ):
        super().__init__()
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride=stride, dilation=dilation, padding=padding, bias=False)
        self.bn = BatchNorm2d(out_ch)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        if self.act == "gelu":
            return ad.gelu(y)
        if self.act == "silu":
            return ad.silu(y)
        if self.act == "none":
            return y
        raise ConfigError(f"unknown activation {self.act!r}")


def flatten_tokens(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, H*W, C] token layout."""
    n, c, h, w = x.shape
    return x.reshape((n, c, h * w)).transpose((0, 2, 1))


def unflatten_tokens(x: Tensor, h: int, w: int) -> Tensor:
    """[N, H*W, C] -> [N, C, H, W]."""
    n, _, c = x.shape
    return x.transpose((0, 2, 1)).reshape((n, c, h, w))


def grid_sincos_2d(h: int, w: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2D sin/cos positional table of shape [H*W, dim].

    Half the channels encode the row coordinate and half the column, both
    normalized to [0, 1] and scaled by 2*pi.
    """
    if dim % 2:
        raise ConfigError(f"2D positional encoding needs an even dim, got {dim}")
    half = dim // 2
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys = (ys.reshape(-1) + 0.5) / h
    xs = (xs.reshape(-1) + 0.5) / w
    return np.concatenate([sincos_block(ys, half, temperature), sincos_block(xs, half, temperature)], axis=-1)


def sincos_block(values: np.ndarray, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos features for scalar inputs: [..., dim].

    values are scaled by 2*pi; frequency j uses period temperature^(2*(j//2)/dim).
    Even channels carry sin, odd channels cos.
    """
    j = np.arange(dim)
    freq = temperature ** (2.0 * (j // 2) / dim)
    angle = (np.asarray(values, dtype=ad.DTYPE)[..., None] * 2.0 * math.pi) / freq
    out = np.empty(angle.shape, dtype=ad.DTYPE)
    out[..., 0::2] = np.sin(angle[..., 0::2])
    out[..., 1::2] = np.cos(angle[..., 1::2])
    return out
