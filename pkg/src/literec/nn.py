"""Small transformer building blocks on top of :mod:`literec.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

NEG_INF = -1e9


class Module:
    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = Parameter(_normal(rng, (n, d)))

    def forward(self, index) -> Tensor:
        return T.take_rows(self.weight, index)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(d, np.float32))
        self.beta = Parameter(np.zeros(d, np.float32))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout_apply(x, self.rate, self.rng, self.training)


def key_padding_bias(key_mask: np.ndarray, dtype) -> np.ndarray:
    """(B, Tk) boolean mask -> (B, 1, 1, Tk) additive bias."""
    bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, NEG_INF).astype(dtype)
    return bias[:, None, None, :]


def causal_bias(t: int, dtype) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def project_kv(self, context: Tensor) -> tuple[Tensor, Tensor]:
        """Per-head keys and values for ``context``; reusable across decode steps."""
        return self._split(self.k(context)), self._split(self.v(context))

    def forward(self, x: Tensor, context: Tensor | None = None, key_mask=None, causal: bool = False, kv=None) -> Tensor:
        b, tq, d = x.shape
        q = self._split(self.q(x))
        if kv is None:
            k, v = self.project_kv(x if context is None else context)
        else:
            k, v = kv
        tk = k.shape[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // self.heads))
        bias = np.zeros((1, 1, tq, tk), dtype=x.dtype)
        if key_mask is not None:
            bias = bias + key_padding_bias(key_mask, x.dtype)
        if causal:
            bias = bias + causal_bias(tq, x.dtype)
        weights = T.softmax_rows(scores + bias)
        self.last_weights = weights.data
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self.o(out)

    def step(self, x: Tensor, past: tuple[Tensor, Tensor] | None) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        """Causal self-attention for one new position per row, reusing the
        keys and values of earlier positions. Returns the output and the
        extended key/value cache."""
        k, v = self.project_kv(x)
        if past is not None:
            k, v = T.concat([past[0], k], axis=2), T.concat([past[1], v], axis=2)
        return self.forward(x, kv=(k, v)), (k, v)


class FeedForward(Module):
    def __init__(self, d: int, ff: int, rng: np.random.Generator):
        self.up = Linear(d, ff, rng)
        self.down = Linear(ff, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d: int, heads: int, ff: int, dropout: float, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, ff, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor, key_mask=None) -> Tensor:
        x = x + self.drop(self.attn(self.ln1(x), key_mask=key_mask))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderLayer(Module):
    """Pre-norm causal self-attention, cross-attention and feed-forward."""

    def __init__(self, d: int, heads: int, ff: int, dropout: float, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(d, ff, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor, memory: Tensor | None, memory_mask, self_mask=None, cross_kv=None) -> Tensor:
        x = x + self.drop(self.self_attn(self.ln1(x), key_mask=self_mask, causal=True))
        x = x + self.drop(self.cross_attn(self.ln2(x), context=memory, key_mask=memory_mask, kv=cross_kv))
        return x + self.drop(self.ff(self.ln3(x)))

    def step(self, x: Tensor, memory_mask, cross_kv, past=None):
        """One decoding position per row; ``past`` holds earlier self-attention keys/values."""
        h, present = self.self_attn.step(self.ln1(x), past)
        x = x + self.drop(h)
        x = x + self.drop(self.cross_attn(self.ln2(x), key_mask=memory_mask, kv=cross_kv))
        return x + self.drop(self.ff(self.ln3(x))), present


class EncoderStack(Module):
    def __init__(self, layers: int, d: int, heads: int, ff: int, dropout: float, rng: np.random.Generator):
        self.layers = [EncoderLayer(d, heads, ff, dropout, rng) for _ in range(layers)]
        self.final_ln = LayerNorm(d)

    def forward(self, x: Tensor, key_mask=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, key_mask=key_mask)
        return self.final_ln(x)
