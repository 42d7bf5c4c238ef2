"""Small neural-network layers over the tensor engine.

Tokens live in rows: a sequence is (token_count, channels). Parameters are
registered by attribute walking, giving every tensor a dotted, model-unique
name for checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, UsageError


class Module:
    """Base class; children and parameters are found via attribute order."""

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                value.name = prefix + attr
                yield value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{prefix}{attr}.{i}"
                        yield item

    def parameters(self):
        return list(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.named_parameters()}

    def load_state_dict(self, state):
        params = {p.name: p for p in self.named_parameters()}
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise UsageError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            incoming = np.asarray(state[name], dtype=np.float64)
            if incoming.shape != p.data.shape:
                raise UsageError(
                    f"shape mismatch for {name}: "
                    f"checkpoint {incoming.shape}, model {p.data.shape}"
                )
            p.data = incoming.copy()


def init_uniform(rng, shape, fan_in):
    """Uniform in [−√(1/fan_in), √(1/fan_in)]."""
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng):
        self.weight = Parameter(init_uniform(rng, (in_dim, out_dim), in_dim))
        self.bias = Parameter(init_uniform(rng, (out_dim,), in_dim))

    def __call__(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.shift)


class MLP(Module):
    """Stack of Linear layers with ReLU between them (and optionally after)."""

    def __init__(self, dims, rng, final_relu=False):
        if len(dims) < 2:
            raise ConfigError("MLP needs at least one layer")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.final_relu = final_relu

    def __call__(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_relu:
                x = ad.relu(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries may differ from keys/values."""

    def __init__(self, dim, heads, rng):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x, n):
        # (n, dim) -> (heads, n, head_dim)
        return x.reshape((n, self.heads, self.head_dim)).transpose((1, 0, 2))

    def __call__(self, query, key, value):
        nq = query.shape[0]
        nk = key.shape[0]
        q = self._split(self.q_proj(query), nq)
        k = self._split(self.k_proj(key), nk)
        v = self._split(self.v_proj(value), nk)
        logits = (q @ k.transpose((0, 2, 1))) * (1.0 / np.sqrt(self.head_dim))
        attn = ad.softmax(logits, axis=-1)
        mixed = (attn @ v).transpose((1, 0, 2)).reshape((nq, self.heads * self.head_dim))
        return self.out_proj(mixed)
