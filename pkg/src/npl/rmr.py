"""Reconstructive imaginary memory.

The memory holds K imaginary key-value cells.  At every sequence step it
is rebuilt in three stages:

1. key generation: a tracker LSTM consumes the previous keys plus an
   order-invariant encoding of the current real context and proposes K
   new key locations;
2. value-flow tracking: one LSTM (weights shared across cells) advances
   each cell's value given its new key and previous value, producing a
   value proposal per cell;
3. interaction: self-attention from the new keys into the union of the
   encoded real context pairs and the proposals, projected back to value
   width, yields the new imaginary values.

Reads then attend from query points into the union of the encoded real
context and the imaginary pairs.  Imaginary keys live in the same
(augmented) input space as real context inputs and imaginary values share
the width of the per-pair context encodings, so the unions are
homogeneous.  Memory size is Theta(K) regardless of how much context the
sequence has produced.

Two reduced variants are supported: ``no_tracking`` drops stage 2 and
lets interaction act on the previous values directly; ``no_interaction``
drops stage 3, feeding the context encoding to the value tracker instead
and projecting its proposals straight to value width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from npl import autodiff as ad
from npl.autodiff import Node, ParamStore
from npl.layers import (
    AttentionKind,
    LstmState,
    MlpSpec,
    attend_batch,
    init_linear,
    init_lstm,
    init_mlp,
    linear,
    lstm_step,
    mlp_forward,
    stored_mlp_spec,
    uniform_init,
)

ABLATIONS = ("none", "no_tracking", "no_interaction")


def _as_node(x):
    return x if isinstance(x, Node) else ad.constant(x)


@dataclass
class ContextSet:
    """An order-invariant set of (input, output) pairs.

    ``inputs``: (..., n, d_in) where d_in includes the task-step channel
    when query augmentation is enabled; ``outputs``: (..., n, d_out).
    """

    inputs: Node
    outputs: Node

    def __post_init__(self):
        self.inputs = _as_node(self.inputs)
        self.outputs = _as_node(self.outputs)
        if self.inputs.shape[:-1] != self.outputs.shape[:-1]:
            raise ad.ShapeError(
                f"context set sizes differ: {self.inputs.shape} vs {self.outputs.shape}")

    @property
    def n(self) -> int:
        return self.inputs.shape[-2]


@dataclass
class ImaginaryMemory:
    """State of the K imaginary cells between steps.

    ``value_trackers`` stacks the per-cell tracker LSTM states along the
    cell axis (all cells share one set of weights); it is None under the
    ``no_tracking`` variant, which keeps no per-cell recurrence.
    """

    keys: Node                      # (..., K, d_key)
    values: Node                    # (..., K, d_val)
    key_tracker: LstmState          # (..., h)
    value_trackers: LstmState | None  # (..., K, h)

    @property
    def K(self) -> int:
        return self.keys.shape[-2]


def init_rmr(store: ParamStore, prefix: str, *, d_key: int, d_val: int, h: int,
             K: int, d_pair: int, ablation: str, rng) -> None:
    """Declare all memory parameters under ``prefix``.

    ``d_pair`` is the width of a raw (input, output) pair fed to the
    context encoder.  Initial keys, values, and tracker hidden states are
    trainable.  Interaction mixes encoded context pairs with proposals,
    so d_val must equal h.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    if K < 1:
        raise ValueError("memory needs K >= 1 cells")
    if d_val != h:
        raise ValueError(f"d_val ({d_val}) must equal h ({h}) for homogeneous unions")
    init_mlp(store, f"{prefix}.enc", d_pair, MlpSpec((h, h, h)), rng)
    init_lstm(store, f"{prefix}.key_lstm", K * d_key + h, h, rng)
    init_linear(store, f"{prefix}.key_proj", h, K * d_key, rng)
    init_linear(store, f"{prefix}.val_proj", h, d_val, rng)
    store.add(f"{prefix}.keys0", rng.uniform(-1.0, 1.0, size=(K, d_key)))
    store.add(f"{prefix}.values0", uniform_init(rng, d_val, (K, d_val)))
    store.add(f"{prefix}.key_h0", np.zeros(h))
    store.add(f"{prefix}.key_c0", np.zeros(h))
    if ablation != "no_tracking":
        d_track = d_key + d_val + (h if ablation == "no_interaction" else 0)
        init_lstm(store, f"{prefix}.val_lstm", d_track, h, rng)
        store.add(f"{prefix}.val_h0", np.zeros((K, h)))
        store.add(f"{prefix}.val_c0", np.zeros((K, h)))


def initial_memory(store: ParamStore, prefix: str, *, ablation: str = "none",
                   leading=()) -> ImaginaryMemory:
    """The trainable start-of-sequence memory, broadcast to ``leading``."""
    leading = tuple(leading)

    def expand(name):
        leaf = store.leaf(f"{prefix}.{name}")
        if not leading:
            return leaf
        return ad.broadcast_to(leaf, leading + leaf.shape)

    trackers = None
    if ablation != "no_tracking":
        trackers = LstmState(expand("val_h0"), expand("val_c0"))
    return ImaginaryMemory(
        keys=expand("keys0"),
        values=expand("values0"),
        key_tracker=LstmState(expand("key_h0"), expand("key_c0")),
        value_trackers=trackers,
    )


def encode_context(store: ParamStore, prefix: str, ctx: ContextSet) -> Node:
    """Order-invariant context encoding: sum of per-pair MLP outputs.

    An empty context encodes to the zero vector.
    """
    pairs = ad.concat([ctx.inputs, ctx.outputs], axis=-1)
    enc = mlp_forward(store, f"{prefix}.enc", pairs, stored_mlp_spec(store, f"{prefix}.enc"))
    return ad.sum_reduce(enc, axis=-2)


def generate_keys(store: ParamStore, prefix: str, mem: ImaginaryMemory, r: Node):
    """Propose K new key locations from the previous keys and the context
    encoding.  Returns (new_keys, new key-tracker state)."""
    K, d_key = mem.keys.shape[-2], mem.keys.shape[-1]
    lead = mem.keys.shape[:-2]
    flat_prev = ad.reshape(mem.keys, lead + (K * d_key,))
    x = ad.concat([flat_prev, r], axis=-1)
    tracker = lstm_step(store, f"{prefix}.key_lstm", x, mem.key_tracker)
    new_keys = ad.reshape(linear(store, f"{prefix}.key_proj", tracker.h), lead + (K, d_key))
    return new_keys, tracker


def track_value_flow(store: ParamStore, prefix: str, new_keys: Node,
                     mem: ImaginaryMemory, extra: Node | None = None):
    """Advance every cell's value tracker one step (shared weights).

    Input per cell is (new key, previous value); ``extra`` appends a
    per-step vector (the context encoding under ``no_interaction``) to
    every cell.  Returns (proposals (..., K, h), new tracker states).
    """
    if mem.value_trackers is None:
        raise ValueError("memory carries no value trackers")
    K = new_keys.shape[-2]
    parts = [new_keys, mem.values]
    if extra is not None:
        lead = new_keys.shape[:-2]
        expanded = ad.broadcast_to(
            ad.reshape(extra, lead + (1,) + extra.shape[len(lead):]),
            lead + (K,) + extra.shape[len(lead):],
        )
        parts.append(expanded)
    x = ad.concat(parts, axis=-1)
    tracker = lstm_step(store, f"{prefix}.val_lstm", x, mem.value_trackers)
    return tracker.h, tracker


def interact(store: ParamStore, prefix: str, attn_prefix: str, kind: AttentionKind,
             new_keys: Node, proposals: Node, real_keys: Node, real_values: Node) -> Node:
    """Self-attention from the new keys into encoded real pairs plus
    proposals, projected to value width."""
    union_keys = ad.concat([real_keys, new_keys], axis=-2)
    union_vals = ad.concat([real_values, proposals], axis=-2)
    att, _ = attend_batch(store, attn_prefix, union_keys, union_vals, new_keys, kind)
    return linear(store, f"{prefix}.val_proj", att)


def rmr_step(store: ParamStore, prefix: str, attn_prefix: str, kind: AttentionKind,
             ctx: ContextSet, mem: ImaginaryMemory, encoded_values: Node,
             ablation: str = "none") -> ImaginaryMemory:
    """One full memory reconstruction.

    ``encoded_values`` are the per-pair encodings of ``ctx`` (width h)
    produced by the caller's deterministic encoder; they serve as the
    attention values for the real pairs during interaction.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    r = encode_context(store, prefix, ctx)
    new_keys, key_tracker = generate_keys(store, prefix, mem, r)
    if ablation == "no_tracking":
        values = interact(store, prefix, attn_prefix, kind,
                          new_keys, mem.values, ctx.inputs, encoded_values)
        trackers = None
    elif ablation == "no_interaction":
        proposals, trackers = track_value_flow(store, prefix, new_keys, mem, extra=r)
        values = linear(store, f"{prefix}.val_proj", proposals)
    else:
        proposals, trackers = track_value_flow(store, prefix, new_keys, mem)
        values = interact(store, prefix, attn_prefix, kind,
                          new_keys, proposals, ctx.inputs, encoded_values)
    return ImaginaryMemory(new_keys, values, key_tracker, trackers)


def read(store: ParamStore, attn_prefix: str, kind: AttentionKind, mem: ImaginaryMemory,
         real_keys: Node, real_values: Node, queries: Node) -> Node:
    """Attend from queries into the union of real and imaginary pairs."""
    ext_keys = ad.concat([real_keys, mem.keys], axis=-2)
    ext_vals = ad.concat([real_values, mem.values], axis=-2)
    reads, _ = attend_batch(store, attn_prefix, ext_keys, ext_vals, queries, kind)
    return reads
