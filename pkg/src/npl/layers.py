"""Differentiable building blocks shared by every model kind.

All functions take a ``ParamStore`` plus a name prefix, so parameter
layout stays flat and serializable.  Arrays follow a trailing-feature
convention: any number of leading batch/set dimensions, features last.
Linear weights and biases initialize uniform in +-sqrt(1/fan_in); a
nonzero bias keeps ReLU pre-activations off exact zero even when an
empty-set pooling feeds an all-zero input.  LSTM biases start at zero
except the forget gate, which starts at one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from npl import autodiff as ad
from npl.autodiff import Node, ParamStore

LOG_TWO_PI = math.log(2.0 * math.pi)
VAR_FLOOR = 1e-4

ATTENTION_KINDS = ("dot-product", "laplace", "multihead")


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = math.sqrt(1.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_linear(store: ParamStore, prefix: str, d_in: int, d_out: int, rng) -> None:
    store.add(f"{prefix}.w", uniform_init(rng, d_in, (d_in, d_out)))
    store.add(f"{prefix}.b", uniform_init(rng, d_in, (d_out,)))


def linear(store: ParamStore, prefix: str, x: Node) -> Node:
    out = ad.matmul(x, store.leaf(f"{prefix}.w"))
    bias = ad.broadcast_to(store.leaf(f"{prefix}.b"), out.shape)
    return ad.add(out, bias)


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, hidden layers ReLU, output linear."""

    widths: tuple

    def __post_init__(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"MlpSpec widths must be positive, got {self.widths}")


def init_mlp(store: ParamStore, prefix: str, d_in: int, spec: MlpSpec, rng) -> None:
    fan = d_in
    for i, width in enumerate(spec.widths):
        init_linear(store, f"{prefix}.l{i}", fan, width, rng)
        fan = width


def mlp_forward(store: ParamStore, prefix: str, x: Node, spec: MlpSpec) -> Node:
    h = x
    last = len(spec.widths) - 1
    for i in range(len(spec.widths)):
        h = linear(store, f"{prefix}.l{i}", h)
        if i < last:
            h = ad.relu(h)
    return h


def stored_mlp_spec(store: ParamStore, prefix: str) -> MlpSpec:
    """Recover the MlpSpec of a previously initialized stack."""
    widths = []
    while f"{prefix}.l{len(widths)}.w" in store:
        widths.append(store.get(f"{prefix}.l{len(widths)}.w").shape[1])
    return MlpSpec(tuple(widths))


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass
class LstmState:
    h: Node
    c: Node


def init_lstm(store: ParamStore, prefix: str, d_in: int, d_hidden: int, rng) -> None:
    store.add(f"{prefix}.wx", uniform_init(rng, d_in, (d_in, 4 * d_hidden)))
    store.add(f"{prefix}.wh", uniform_init(rng, d_hidden, (d_hidden, 4 * d_hidden)))
    bias = np.zeros(4 * d_hidden)
    bias[d_hidden:2 * d_hidden] = 1.0  # forget gate open at the start
    store.add(f"{prefix}.b", bias)


def lstm_zero_state(d_hidden: int, leading=()) -> LstmState:
    shape = tuple(leading) + (d_hidden,)
    return LstmState(ad.constant(np.zeros(shape)), ad.constant(np.zeros(shape)))


def lstm_step(store: ParamStore, prefix: str, x: Node, state: LstmState) -> LstmState:
    """One step of a standard LSTM cell; gate order i, f, g, o."""
    pre = ad.matmul(x, store.leaf(f"{prefix}.wx"))
    pre = ad.add(pre, ad.matmul(state.h, store.leaf(f"{prefix}.wh")))
    pre = ad.add(pre, ad.broadcast_to(store.leaf(f"{prefix}.b"), pre.shape))
    hdim = pre.shape[-1] // 4
    i = ad.sigmoid(ad.narrow(pre, -1, 0, hdim))
    f = ad.sigmoid(ad.narrow(pre, -1, hdim, hdim))
    g = ad.tanh(ad.narrow(pre, -1, 2 * hdim, hdim))
    o = ad.sigmoid(ad.narrow(pre, -1, 3 * hdim, hdim))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return LstmState(h, c)


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class AttentionKind:
    """Attention flavor: dot-product, laplace, or multihead(n_heads)."""

    kind: str = "multihead"
    n_heads: int = 4

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.kind == "multihead" and self.n_heads < 1:
            raise ValueError("multihead attention needs n_heads >= 1")


def init_attention(store: ParamStore, prefix: str, d_k: int, d_v: int, kind: AttentionKind, rng) -> None:
    """Multihead projection weights; dot-product and laplace are parameter free.

    The projection width equals d_v, so reads keep the value width and
    n_heads must divide d_v.
    """
    if kind.kind != "multihead":
        return
    if d_v % kind.n_heads != 0:
        raise ValueError(f"n_heads={kind.n_heads} must divide projection dim {d_v}")
    store.add(f"{prefix}.wq", uniform_init(rng, d_k, (d_k, d_v)))
    store.add(f"{prefix}.wk", uniform_init(rng, d_k, (d_k, d_v)))
    store.add(f"{prefix}.wv", uniform_init(rng, d_v, (d_v, d_v)))
    store.add(f"{prefix}.wo", uniform_init(rng, d_v, (d_v, d_v)))


def _split_heads(x: Node, n_heads: int) -> Node:
    # (..., P, p) -> (..., H, P, p/H)
    shape = x.shape
    per = shape[-1] // n_heads
    x = ad.reshape(x, shape[:-1] + (n_heads, per))
    axes = tuple(range(len(shape) - 2)) + (len(shape) - 1, len(shape) - 2, len(shape))
    return ad.transpose(x, axes)


def _merge_heads(x: Node) -> Node:
    # (..., H, Q, p/H) -> (..., Q, H * p/H)
    shape = x.shape
    nd = len(shape)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = ad.transpose(x, axes)
    s = x.shape
    return ad.reshape(x, s[:-2] + (s[-2] * s[-1],))


def attend_batch(store, prefix: str, keys: Node, values: Node, queries: Node, kind: AttentionKind):
    """Attention over a set of key-value pairs.

    keys: (..., P, d_k); values: (..., P, d_v); queries: (..., Q, d_k).
    Returns (reads (..., Q, d_v), weights (..., Q, P)).  Multihead weights
    are averaged over heads; they stay nonnegative and sum to one.
    """
    n_pairs = keys.shape[-2]
    if n_pairs == 0:
        raise ValueError("attention over an empty pair set; caller must guard")
    if keys.shape[-2] != values.shape[-2]:
        raise ad.ShapeError(f"attend: {keys.shape[-2]} keys vs {values.shape[-2]} values")
    if keys.shape[-1] != queries.shape[-1]:
        raise ad.ShapeError(f"attend: key width {keys.shape[-1]} vs query width {queries.shape[-1]}")

    if kind.kind == "dot-product":
        kt = ad.transpose(keys, tuple(range(len(keys.shape) - 2)) + (len(keys.shape) - 1, len(keys.shape) - 2))
        scores = ad.scale(ad.matmul(queries, kt), 1.0 / math.sqrt(keys.shape[-1]))
        weights = ad.softmax(scores, axis=-1)
        return ad.matmul(weights, values), weights

    if kind.kind == "laplace":
        q_exp = ad.broadcast_to(
            ad.reshape(queries, queries.shape[:-1] + (1,) + queries.shape[-1:]),
            queries.shape[:-1] + (n_pairs,) + queries.shape[-1:],
        )
        k_exp = ad.broadcast_to(
            ad.reshape(keys, keys.shape[:-2] + (1,) + keys.shape[-2:]),
            keys.shape[:-2] + (queries.shape[-2],) + keys.shape[-2:],
        )
        diff = ad.sub(q_exp, k_exp)
        absdiff = ad.add(ad.relu(diff), ad.relu(ad.neg(diff)))
        scores = ad.neg(ad.sum_reduce(absdiff, axis=-1))
        weights = ad.softmax(scores, axis=-1)
        return ad.matmul(weights, values), weights

    # multihead
    n_heads = kind.n_heads
    q = _split_heads(ad.matmul(queries, store.leaf(f"{prefix}.wq")), n_heads)
    k = _split_heads(ad.matmul(keys, store.leaf(f"{prefix}.wk")), n_heads)
    v = _split_heads(ad.matmul(values, store.leaf(f"{prefix}.wv")), n_heads)
    kt = ad.transpose(k, tuple(range(len(k.shape) - 2)) + (len(k.shape) - 1, len(k.shape) - 2))
    scores = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))
    head_weights = ad.softmax(scores, axis=-1)  # (..., H, Q, P)
    reads = ad.matmul(head_weights, v)  # (..., H, Q, p/H)
    merged = _merge_heads(reads)
    out = ad.matmul(merged, store.leaf(f"{prefix}.wo"))
    return out, ad.mean_reduce(head_weights, axis=-3)


def attend(store, prefix: str, keys: Node, values: Node, query: Node, kind: AttentionKind):
    """Single-query attention: query (d_k,) -> (read (d_v,), weights (P,))."""
    q = ad.reshape(query, (1,) + query.shape)
    read, weights = attend_batch(store, prefix, keys, values, q, kind)
    return ad.reshape(read, read.shape[1:]), ad.reshape(weights, weights.shape[1:])


def self_attend(store, prefix: str, pair_keys: Node, pair_values: Node, queries: Node, kind: AttentionKind):
    """Attention from a set of queries into a pair set; returns reads only."""
    reads, _ = attend_batch(store, prefix, pair_keys, pair_values, queries, kind)
    return reads


# ---------------------------------------------------------------------------
# gaussian heads and divergences


@dataclass
class GaussianBelief:
    """Diagonal gaussian with variance floored at 1e-4."""

    mean: Node
    var: Node


def init_gaussian_head(store: ParamStore, prefix: str, d_in: int, d_out: int, rng) -> None:
    init_linear(store, f"{prefix}.hid", d_in, d_in, rng)
    init_linear(store, f"{prefix}.mean", d_in, d_out, rng)
    init_linear(store, f"{prefix}.var", d_in, d_out, rng)


def gaussian_head(store: ParamStore, prefix: str, r: Node) -> GaussianBelief:
    """Two-layer head: shared ReLU hidden, then linear mean and softplus
    variance with an additive 1e-4 floor."""
    hidden = ad.relu(linear(store, f"{prefix}.hid", r))
    mean = linear(store, f"{prefix}.mean", hidden)
    var = ad.shift(ad.softplus(linear(store, f"{prefix}.var", hidden)), VAR_FLOOR)
    return GaussianBelief(mean, var)


def reparameterize(belief: GaussianBelief, noise: np.ndarray) -> Node:
    """mean + sqrt(var) * noise with externally supplied standard normals."""
    eps = noise if isinstance(noise, Node) else ad.constant(noise)
    return ad.add(belief.mean, ad.mul(ad.sqrt(belief.var), eps))


def kl_diag_gaussian(q: GaussianBelief, p: GaussianBelief) -> Node:
    """KL(q || p) between diagonal gaussians, summed over the trailing axis.

    Closed form per dimension:
    0.5 * (log vp - log vq + (vq + (mq - mp)^2) / vp - 1).
    """
    log_ratio = ad.sub(ad.log(p.var), ad.log(q.var))
    gap = ad.square(ad.sub(q.mean, p.mean))
    ratio = ad.div(ad.add(q.var, gap), p.var)
    per_dim = ad.scale(ad.shift(ad.add(log_ratio, ratio), -1.0), 0.5)
    return ad.sum_reduce(per_dim, axis=-1)


def gaussian_log_likelihood(y, belief: GaussianBelief) -> Node:
    """log N(y; mean, var) summed over the trailing axis."""
    yn = y if isinstance(y, Node) else ad.constant(y)
    gap = ad.square(ad.sub(yn, belief.mean))
    per_dim = ad.add(ad.shift(ad.log(belief.var), LOG_TWO_PI), ad.div(gap, belief.var))
    return ad.scale(ad.sum_reduce(per_dim, axis=-1), -0.5)
