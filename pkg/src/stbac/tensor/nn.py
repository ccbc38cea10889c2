"""Layers built on the autograd tensors: linear, layer norm, dropout, MLP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

__all__ = ["Dropout", "LayerNorm", "Linear", "MLP", "MlpConfig", "Module", "layer_norm", "mlp_forward"]


class Module:
    """Container of named parameters and sub-modules.

    Attribute assignment order fixes parameter order, which in turn fixes the
    checkpoint byte layout.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> Module:
        for value in self._modules():
            value.train(mode)
        self.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def _modules(self) -> Iterator[Module]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(glorot_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance (no affine part)."""
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / ag.sqrt(var + eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.eps) * self.gain + self.shift


class Dropout(Module):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def mask(self, shape: tuple[int, ...]) -> np.ndarray:
        keep = self.rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("dropout in train mode needs a random stream")
        return x * self.mask(x.shape)


_ACTIVATIONS = {"relu": ag.relu, "gelu": ag.gelu}


@dataclass
class MlpConfig:
    input_dim: int
    output_dim: int
    hidden_dims: list[int] = field(default_factory=lambda: [128, 128])
    activation: str = "relu"
    dropout_rate: float = 0.0
    use_layer_norm: bool = False

    def __post_init__(self):
        dims = [self.input_dim, self.output_dim, *self.hidden_dims]
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all MLP dimensions must be >= 1, got {dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose relu or gelu")
        self.hidden_dims = [int(d) for d in self.hidden_dims]


class MLP(Module):
    """Linear -> [LayerNorm] -> activation -> dropout, repeated; linear output layer."""

    def __init__(self, cfg: MlpConfig, rng: np.random.Generator, dropout_rng: np.random.Generator | None = None):
        self.cfg = cfg
        dims = [cfg.input_dim, *cfg.hidden_dims, cfg.output_dim]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.norms = [LayerNorm(d) for d in cfg.hidden_dims] if cfg.use_layer_norm else []
        self.dropout = Dropout(cfg.dropout_rate, dropout_rng)
        self._act = _ACTIVATIONS[cfg.activation]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"MLP expects last dimension {self.cfg.input_dim}, got {x.shape[-1]}")
        h = ag.as_tensor(x)
        for i, layer in enumerate(self.layers[:-1]):
            h = layer(h)
            if self.norms:
                h = self.norms[i](h)
            h = self.dropout(self._act(h))
        return self.layers[-1](h)


def mlp_forward(mlp: MLP, x, train_mode: bool = False) -> Tensor:
    mlp.train(train_mode)
    return mlp(ag.as_tensor(x))
