"""Finite-difference gradient checks for every differentiable op and model.

Each case builds a float64 scalar loss. Non-scalar outputs are reduced with a
fixed random weighting, since a plain sum would hide errors in ops whose rows
sum to a constant (softmax). Shared by the unit tests and the acceptance run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from literec import tensor as T
from literec.generative import GenConfig, Seq2Seq, TokenRecommender
from literec.item_encoder import ItemEncoderConfig, ItemTokens
from literec.model import LiteRec
from literec.nn import DecoderLayer, EncoderLayer, Linear, MultiHeadAttention
from literec.rec_encoder import RecEncoderConfig
from literec.tensor import Tensor

from oracles import gradient_errors

F64 = np.float64
LOOSE, TIGHT = 1e-3, 1e-4


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]
    tol: float = LOOSE
    max_coords: int | None = None


def _t(rng, *shape, low=None, high=None) -> Tensor:
    data = rng.uniform(low, high, shape) if low is not None else rng.normal(size=shape)
    return Tensor(data.astype(F64))


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: (y * w).sum()


def _elementwise(op, shape_a, shape_b, positive_b=False):
    def build(rng):
        a = _t(rng, *shape_a)
        b = _t(rng, *shape_b, low=0.5, high=2.0) if positive_b else _t(rng, *shape_b)
        reduce = _weighted(op(a, b), rng)
        return (lambda: reduce(op(a, b))), {"a": a, "b": b}
    return build


def _unary(op, *shape):
    def build(rng):
        x = _t(rng, *shape)
        reduce = _weighted(op(x), rng)
        return (lambda: reduce(op(x))), {"x": x}
    return build


def _matmul(shape_a, shape_b):
    return _elementwise(T.matmul, shape_a, shape_b)


def _layer_norm(rng):
    x, g, b = _t(rng, 2, 3, 5), _t(rng, 5, low=0.5, high=1.5), _t(rng, 5)
    reduce = _weighted(T.layer_norm(x, g, b), rng)
    return (lambda: reduce(T.layer_norm(x, g, b))), {"x": x, "gamma": g, "beta": b}


def _mean_pool(rng):
    x = _t(rng, 3, 4, 5)
    mask = np.array([[1, 1, 0, 0], [0, 1, 1, 1], [1, 0, 1, 0]], dtype=bool)
    reduce = _weighted(T.mean_pool_masked(x, mask), rng)
    return (lambda: reduce(T.mean_pool_masked(x, mask))), {"x": x}


def _cross_entropy(rng):
    logits = _t(rng, 5, 7)
    targets = rng.integers(0, 7, 5)
    return (lambda: T.cross_entropy_logits(logits, targets)), {"logits": logits}


def _take_rows(rng):
    table = _t(rng, 6, 3)
    index = np.array([[0, 2, 2], [5, 2, 0]])  # repeats must accumulate
    reduce = _weighted(T.take_rows(table, index), rng)
    return (lambda: reduce(T.take_rows(table, index))), {"table": table}


def _concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 4)
    reduce = _weighted(T.concat([a, b], axis=1), rng)
    return (lambda: reduce(T.concat([a, b], axis=1))), {"a": a, "b": b}


def _dropout(rng):
    x = _t(rng, 4, 6)
    reduce = _weighted(x, rng)
    return (lambda: reduce(T.dropout_apply(x, 0.3, 11, training=True))), {"x": x}


def _randomize(module, rng) -> dict[str, Tensor]:
    """Float64 copy of the module with weights large enough to be non-trivial."""
    module.astype(F64)
    params = dict(module.named_parameters())
    for name, p in params.items():
        if name.endswith("gamma"):
            p.data = rng.uniform(0.5, 1.5, p.shape)
        else:
            p.data = rng.normal(0.0, 0.5, p.shape)
    module.eval()
    return params


def _linear(rng):
    layer = Linear(4, 3, rng)
    params = _randomize(layer, rng)
    x = _t(rng, 2, 5, 4)
    params["x"] = x
    reduce = _weighted(layer(x), rng)
    return (lambda: reduce(layer(x))), params


def _attention(causal: bool, cross: bool):
    def build(rng):
        attn = MultiHeadAttention(8, 2, rng)
        params = _randomize(attn, rng)
        x, ctx = _t(rng, 2, 4, 8), _t(rng, 2, 3, 8)
        key_mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool) if cross else np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
        params.update(x=x, ctx=ctx) if cross else params.update(x=x)

        def run():
            return attn(x, context=ctx if cross else None, key_mask=key_mask, causal=causal)

        reduce = _weighted(run(), rng)
        return (lambda: reduce(run())), params
    return build


def _cached_cross_attention(rng):
    """Keys and values projected once and passed back in, as beam search does."""
    attn = MultiHeadAttention(8, 2, rng)
    params = _randomize(attn, rng)
    x, ctx = _t(rng, 2, 3, 8), _t(rng, 2, 4, 8)
    params.update(x=x, ctx=ctx)

    def run():
        return attn(x, key_mask=np.ones((2, 4), bool), kv=attn.project_kv(ctx))

    reduce = _weighted(run(), rng)
    return (lambda: reduce(run())), params


def _encoder_layer(rng):
    layer = EncoderLayer(8, 2, 16, 0.0, rng)
    params = _randomize(layer, rng)
    x = _t(rng, 2, 4, 8)
    params["x"] = x
    mask = np.array([[0, 1, 1, 1], [1, 1, 1, 1]], dtype=bool)
    reduce = _weighted(layer(x, key_mask=mask), rng)
    return (lambda: reduce(layer(x, key_mask=mask))), params


def _decoder_layer(rng):
    layer = DecoderLayer(8, 2, 16, 0.0, rng)
    params = _randomize(layer, rng)
    x, mem = _t(rng, 2, 3, 8), _t(rng, 2, 4, 8)
    params.update(x=x, memory=mem)
    mem_mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
    reduce = _weighted(layer(x, mem, mem_mask), rng)
    return (lambda: reduce(layer(x, mem, mem_mask))), params


def tiny_lite(rng, num_items: int = 7, vocab: int = 12) -> LiteRec:
    item_cfg = ItemEncoderConfig(layers=1, heads=2, model_dim=8, ff_dim=16, max_item_text_len=6, dropout=0.0)
    rec_cfg = RecEncoderConfig(layers=1, heads=2, model_dim=8, ff_dim=16, max_seq_len=5, dropout=0.0)
    ids = rng.integers(4, vocab, (num_items, 6))
    lengths = rng.integers(1, 7, num_items)
    mask = np.arange(6)[None, :] < lengths[:, None]
    ids[~mask] = 0
    return LiteRec(item_cfg, rec_cfg, num_items, vocab, ItemTokens(ids, mask), seed=int(rng.integers(1 << 30)))


def _lite_model(rng):
    model = tiny_lite(rng)
    params = _randomize(model, rng)
    pad = model.pad_index
    inputs = np.array([[pad, pad, 1, 3, 3], [0, 2, 4, 5, 6], [pad, pad, pad, pad, 2]])
    mask = inputs != pad
    targets = np.array([4, 1, 6])
    return (lambda: T.cross_entropy_logits(model(inputs, mask), targets)), params


def _seq2seq_model(rng):
    cfg = GenConfig(vocab_size=10, layers=1, heads=2, model_dim=8, ff_dim=16, max_input_len=6, max_target_len=3, dropout=0.0)
    model = Seq2Seq(cfg, seed=int(rng.integers(1 << 30)))
    params = _randomize(model, rng)
    ids = np.array([[0, 0, 5, 6, 7, 4], [4, 5, 6, 7, 8, 9]])
    mask = ids != 0
    target = np.array([[4, 9], [6, 0]])  # second target is one token then padding
    return (lambda: model.loss(ids, mask, target)), params


def _token_model(rng):
    cfg = GenConfig(vocab_size=10, layers=1, heads=2, model_dim=8, ff_dim=16, max_input_len=6, dropout=0.0)
    model = TokenRecommender(10, 5, cfg, 6, seed=int(rng.integers(1 << 30)))
    params = _randomize(model, rng)
    ids = np.array([[0, 0, 5, 6, 7, 4], [4, 5, 6, 7, 8, 9]])
    mask = ids != 0
    return (lambda: T.cross_entropy_logits(model(ids, mask), np.array([3, 0]))), params


CASES = [
    GradCase("add", _elementwise(T.add, (3, 4), (4,))),
    GradCase("sub", _elementwise(T.sub, (2, 3, 4), (3, 1))),
    GradCase("mul", _elementwise(T.mul, (2, 3, 4), (1, 4))),
    GradCase("div", _elementwise(T.div, (3, 4), (3, 4), positive_b=True)),
    GradCase("gelu", _unary(T.gelu, 3, 5)),
    GradCase("dropout", _dropout),
    GradCase("reshape", _unary(lambda x: T.reshape(x, (4, 3, 2)), 2, 3, 4)),
    GradCase("transpose", _unary(lambda x: T.transpose(x, (2, 0, 1)), 2, 3, 4)),
    GradCase("concat", _concat),
    GradCase("take_rows", _take_rows),
    GradCase("sum_all", _unary(lambda x: T.tsum(x) * x.sum(axis=0), 3, 4)),
    GradCase("sum_axis_keepdims", _unary(lambda x: T.tsum(x, axis=1, keepdims=True), 2, 3, 4)),
    GradCase("mean_axes", _unary(lambda x: T.tmean(x, axis=(0, 2)), 2, 3, 4)),
    GradCase("matmul_2d", _matmul((3, 4), (4, 5)), TIGHT),
    GradCase("matmul_batched", _matmul((2, 3, 4), (2, 4, 5)), TIGHT),
    GradCase("matmul_weight", _matmul((2, 3, 4), (4, 5)), TIGHT),
    GradCase("matmul_broadcast", _matmul((2, 1, 3, 4), (3, 4, 2)), TIGHT),
    GradCase("softmax", _unary(T.softmax_rows, 3, 6), TIGHT),
    GradCase("log_softmax", _unary(T.log_softmax_rows, 3, 6), TIGHT),
    GradCase("layer_norm", _layer_norm),
    GradCase("mean_pool", _mean_pool, TIGHT),
    GradCase("cross_entropy", _cross_entropy),
    GradCase("linear", _linear),
    GradCase("self_attention", _attention(causal=False, cross=False)),
    GradCase("causal_attention", _attention(causal=True, cross=False)),
    GradCase("cross_attention", _attention(causal=False, cross=True)),
    GradCase("cached_cross_attention", _cached_cross_attention),
    GradCase("encoder_layer", _encoder_layer),
    GradCase("decoder_layer", _decoder_layer),
    GradCase("lite_model", _lite_model, max_coords=6),
    GradCase("seq2seq_model", _seq2seq_model, max_coords=6),
    GradCase("token_model", _token_model, max_coords=6),
]


def run_case(case: GradCase, seed: int = 0) -> float:
    """Worst relative error over the case's inputs."""
    rng = np.random.default_rng(seed)
    loss_fn, params = case.build(rng)
    return max(gradient_errors(loss_fn, params, max_coords=case.max_coords, seed=seed).values())


def run_suite(seed: int = 0) -> dict[str, tuple[float, float]]:
    """case name -> (error, tolerance)."""
    return {c.name: (run_case(c, seed), c.tol) for c in CASES}
