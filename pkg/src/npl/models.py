"""Neural-process model family for sequences of correlated regression tasks.

Five kinds are implemented, distinguished by how they summarize past
context when predicting targets at task-step t:

  np        one latent over the union of every step's context, no recurrence;
            a sum-pooled deterministic path enters the decoder.
  anp       like np, but the decoder attends over the flat context with the
            target query instead of receiving a pooled vector.
  snp       a recurrent state-space latent: an LSTM carries task knowledge
            across steps and a gaussian head on its hidden state gives the
            per-step prior; the decoder sees a per-step pooled path.
  asnp_w    snp plus a decoder read over a FIFO buffer of the K most recent
            real context points (K may be math.inf to keep everything).
  asnp_rmr  snp plus the reconstructive imaginary memory of npl.rmr; the
            decoder reads the union of the current real pairs and the K
            imaginary cells, and the latent prior additionally conditions
            on a pooled summary of the imaginary values.

Training maximizes a sequential evidence lower bound: per step, the
posterior (conditioned on context and targets) proposes z_t, the decoder
scores the targets under z_t, and a KL term penalizes divergence from the
prior (conditioned on context only).  The posterior and prior share one
LSTM cell and one gaussian head; they differ only in the conditioning
vector, so an empty step makes them identical by construction.

All entry points take a leading batch axis.  Within a batch, every
sequence must share the same per-step context/target counts so steps can
be processed as dense arrays; `batch_sequences` enforces this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from npl import autodiff as ad
from npl import rmr
from npl.autodiff import Node, ParamStore
from npl.layers import (
    ATTENTION_KINDS,
    AttentionKind,
    GaussianBelief,
    LstmState,
    MlpSpec,
    attend_batch,
    gaussian_head,
    gaussian_log_likelihood,
    init_attention,
    init_gaussian_head,
    init_lstm,
    init_mlp,
    kl_diag_gaussian,
    lstm_step,
    lstm_zero_state,
    mlp_forward,
    reparameterize,
)
from npl.rmr import ABLATIONS, ContextSet

KINDS = ("np", "anp", "snp", "asnp_w", "asnp_rmr")
RECURRENT_KINDS = ("snp", "asnp_w", "asnp_rmr")
ATTENTIVE_KINDS = ("anp", "asnp_w", "asnp_rmr")


@dataclass(frozen=True)
class ModelConfig:
    """Immutable description of one model instance.

    K is the imaginary-memory size (asnp_rmr) or the context-buffer size
    (asnp_w, where math.inf disables eviction); it must be 0 for kinds
    without a memory.  task_step_encoding appends a normalized step value
    to every input; None picks the kind's default (on except for snp).
    """

    kind: str
    d_x: int = 1
    d_y: int = 1
    h: int = 32
    z_dim: int = 16
    K: float = 0
    attention: AttentionKind = AttentionKind("multihead", 4)
    task_step_encoding: bool | None = None
    ablation: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        for name in ("d_x", "d_y", "h", "z_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kind == "asnp_rmr":
            if not (isinstance(self.K, int) and self.K >= 1):
                raise ValueError("asnp_rmr needs an integer memory size K >= 1")
        elif self.kind == "asnp_w":
            if not (self.K == math.inf or (isinstance(self.K, int) and self.K >= 1)):
                raise ValueError("asnp_w needs a window size K >= 1 (or math.inf)")
        elif self.K != 0:
            raise ValueError(f"kind {self.kind!r} takes no memory size; leave K=0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.ablation != "none" and self.kind != "asnp_rmr":
            raise ValueError("ablations apply only to asnp_rmr")
        if self.kind in ATTENTIVE_KINDS and self.attention.kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.attention.kind!r}")
        if self.task_step_encoding is None:
            object.__setattr__(self, "task_step_encoding", self.kind != "snp")
        # Pooled / buffered points from different steps are indistinguishable
        # without the step value, so these kinds cannot run without it.
        if self.kind in ("anp", "asnp_w") and not self.task_step_encoding:
            raise ValueError(f"{self.kind} requires task_step_encoding")

    @property
    def d_in(self) -> int:
        """Width of (possibly step-augmented) model inputs."""
        return self.d_x + (1 if self.task_step_encoding else 0)

    @property
    def recurrent(self) -> bool:
        return self.kind in RECURRENT_KINDS

    @property
    def attentive(self) -> bool:
        return self.kind in ATTENTIVE_KINDS


@dataclass
class RssmState:
    """Recurrent latent state: LSTM carry, current belief, and z sample."""

    deterministic: LstmState
    belief: GaussianBelief | None
    sample: Node


@dataclass
class StepPrediction:
    """Per-step rollout output.

    belief covers that step's targets, shape (..., m_t, d_y).  recon is the
    mean over targets of the log-likelihood (...,), and kl the latent KL (...,);
    both are present only on posterior (training) rollouts, and kl only at
    steps that draw a latent (every step for recurrent kinds, the first
    step for np/anp which use a single sequence-level latent).
    """

    belief: GaussianBelief
    recon: Node | None = None
    kl: Node | None = None


@dataclass
class StepBatch:
    """One task-step for a batch of sequences, as dense arrays."""

    cx: np.ndarray  # (B, n_t, d_x)
    cy: np.ndarray  # (B, n_t, d_y)
    tx: np.ndarray  # (B, m_t, d_x)
    ty: np.ndarray  # (B, m_t, d_y)


@dataclass
class SequenceBatch:
    steps: list[StepBatch] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def B(self) -> int:
        return self.steps[0].cx.shape[0]


def batch_sequences(seqs) -> SequenceBatch:
    """Stack sequences that share a per-step count pattern.

    Accepts any objects with a .steps list whose entries expose cx/cy/tx/ty
    arrays of shape (n_t, d) / (m_t, d).  Sequences with differing lengths
    or per-step counts cannot share a dense batch and are rejected.
    """
    if not seqs:
        raise ValueError("empty sequence batch")
    T = len(seqs[0].steps)
    for s in seqs:
        if len(s.steps) != T:
            raise ad.ShapeError(f"sequence lengths differ: {len(s.steps)} vs {T}")
    out = []
    for t in range(T):
        ref = seqs[0].steps[t]
        for s in seqs:
            st = s.steps[t]
            if st.cx.shape != ref.cx.shape or st.tx.shape != ref.tx.shape:
                raise ad.ShapeError(
                    f"step {t + 1}: count pattern differs across the batch "
                    f"({st.cx.shape[0]}/{st.tx.shape[0]} vs {ref.cx.shape[0]}/{ref.tx.shape[0]})"
                )
        out.append(StepBatch(
            cx=np.stack([np.asarray(s.steps[t].cx, dtype=float) for s in seqs]),
            cy=np.stack([np.asarray(s.steps[t].cy, dtype=float) for s in seqs]),
            tx=np.stack([np.asarray(s.steps[t].tx, dtype=float) for s in seqs]),
            ty=np.stack([np.asarray(s.steps[t].ty, dtype=float) for s in seqs]),
        ))
    return SequenceBatch(out)


def augment_query(x: np.ndarray, t: int, T: int) -> np.ndarray:
    """Append the normalized task-step value e = 0.25 + 0.5 (t / T).

    t is 1-based; the encoding spans (0.25, 0.75] so it is never confused
    with the zero padding of an absent feature.
    """
    if not 1 <= t <= T:
        raise ValueError(f"task-step {t} outside [1, {T}]")
    x = np.asarray(x, dtype=float)
    e = np.full(x.shape[:-1] + (1,), 0.25 + 0.5 * (t / T))
    return np.concatenate([x, e], axis=-1)


# ---------------------------------------------------------------------------
# parameters


def _lat_spec(config: ModelConfig) -> MlpSpec:
    return MlpSpec((config.h,) * 3)


def _det_spec(config: ModelConfig) -> MlpSpec:
    return MlpSpec((config.h,) * 6)


def _dec_spec(config: ModelConfig) -> MlpSpec:
    return MlpSpec((config.h,) * 2)


def init_params(config: ModelConfig, rng: np.random.Generator,
                store: ParamStore | None = None) -> ParamStore:
    """Declare every parameter of the configured kind.

    Layout: lat.pair (per-point latent-path encoder), det.pair (per-point
    deterministic-path encoder), dec.mlp/dec.head (decoder); lat.head for
    non-recurrent kinds, rssm.cell/rssm.head for recurrent ones; attn for
    attentive kinds; mem.* for asnp_rmr.  Only declared parameters exist,
    so each kind's structure is visible in the store itself.
    """
    store = store if store is not None else ParamStore()
    d_pair = config.d_in + config.d_y
    init_mlp(store, "lat.pair", d_pair, _lat_spec(config), rng)
    if config.recurrent:
        d_cond = config.z_dim + config.h + (config.h if config.kind == "asnp_rmr" else 0)
        init_lstm(store, "rssm.cell", d_cond, config.h, rng)
        init_gaussian_head(store, "rssm.head", config.h, config.z_dim, rng)
    else:
        init_gaussian_head(store, "lat.head", config.h, config.z_dim, rng)
    init_mlp(store, "det.pair", d_pair, _det_spec(config), rng)
    if config.attentive:
        init_attention(store, "attn", config.d_in, config.h, config.attention, rng)
    if config.kind == "asnp_rmr":
        rmr.init_rmr(store, "mem", d_key=config.d_in, d_val=config.h, h=config.h,
                     K=config.K, d_pair=d_pair, ablation=config.ablation, rng=rng)
    init_mlp(store, "dec.mlp", config.d_in + config.z_dim + config.h, _dec_spec(config), rng)
    init_gaussian_head(store, "dec.head", config.h, config.d_y, rng)
    return store


# ---------------------------------------------------------------------------
# encoders and latent steps


def _pool_pairs(store: ParamStore, prefix: str, spec: MlpSpec, ctx: ContextSet) -> Node:
    """Sum-pooled per-pair encoding; an empty set pools to zeros."""
    pairs = ad.concat([ctx.inputs, ctx.outputs], axis=-1)
    return ad.sum_reduce(mlp_forward(store, prefix, pairs, spec), axis=-2)


def _pair_values(store: ParamStore, config: ModelConfig, ctx: ContextSet) -> Node:
    """Per-pair deterministic encodings (..., n, h): attention values."""
    pairs = ad.concat([ctx.inputs, ctx.outputs], axis=-1)
    return mlp_forward(store, "det.pair", pairs, _det_spec(config))


def latent_encoder(store: ParamStore, config: ModelConfig, ctx: ContextSet) -> GaussianBelief:
    """Order-invariant belief over the task representation (np/anp path)."""
    if config.recurrent:
        raise ValueError(f"latent_encoder is the non-recurrent path; kind {config.kind!r} "
                         "draws its latent from the recurrent state")
    pooled = _pool_pairs(store, "lat.pair", _lat_spec(config), ctx)
    return gaussian_head(store, "lat.head", pooled)


def initial_rssm_state(config: ModelConfig, leading=()) -> RssmState:
    return RssmState(
        deterministic=lstm_zero_state(config.h, leading),
        belief=None,
        sample=ad.constant(np.zeros(leading + (config.z_dim,))),
    )


def _rssm_belief(store: ParamStore, config: ModelConfig, prev: RssmState,
                 cond: Node, mem_summary: Node | None):
    """Advance the shared cell on one conditioning vector; head the hidden."""
    if config.kind == "asnp_rmr":
        if mem_summary is None:
            raise ValueError("asnp_rmr conditioning needs the imaginary-value summary")
        inputs = ad.concat([prev.sample, cond, mem_summary], axis=-1)
    else:
        if mem_summary is not None:
            raise ValueError(f"kind {config.kind!r} has no imaginary memory to summarize")
        inputs = ad.concat([prev.sample, cond], axis=-1)
    state = lstm_step(store, "rssm.cell", inputs, prev.deterministic)
    return gaussian_head(store, "rssm.head", state.h), state


def prior_step(store: ParamStore, config: ModelConfig, prev: RssmState, ctx: ContextSet,
               mem_summary: Node | None = None, noise: np.ndarray | None = None) -> RssmState:
    """One generative latent step conditioned on context alone."""
    if not config.recurrent:
        raise ValueError(f"kind {config.kind!r} has no recurrent latent path")
    cond = _pool_pairs(store, "lat.pair", _lat_spec(config), ctx)
    belief, det = _rssm_belief(store, config, prev, cond, mem_summary)
    noise = np.zeros(belief.mean.shape) if noise is None else noise
    return RssmState(det, belief, reparameterize(belief, noise))


def posterior_step(store: ParamStore, config: ModelConfig, prev: RssmState,
                   ctx: ContextSet, tgt: ContextSet,
                   mem_summary: Node | None = None,
                   noise: np.ndarray | None = None) -> RssmState:
    """One inference latent step conditioned on context and targets.

    Shares the cell and head with prior_step; conditioning pools over the
    union C ∪ D (sum-pooling makes that the sum of the two encodings), so
    with both sets empty the posterior reproduces the prior exactly.
    """
    if not config.recurrent:
        raise ValueError(f"kind {config.kind!r} has no recurrent latent path")
    if tgt is None:
        raise ValueError("posterior_step needs the step's targets")
    spec = _lat_spec(config)
    cond = ad.add(_pool_pairs(store, "lat.pair", spec, ctx),
                  _pool_pairs(store, "lat.pair", spec, tgt))
    belief, det = _rssm_belief(store, config, prev, cond, mem_summary)
    noise = np.zeros(belief.mean.shape) if noise is None else noise
    return RssmState(det, belief, reparameterize(belief, noise))


def decode(store: ParamStore, config: ModelConfig, x: Node, z: Node,
           read: Node | None = None, pooled: Node | None = None) -> GaussianBelief:
    """Belief over target outputs given queries x (..., m, d_in) and latent z.

    Attentive kinds pass a per-query read (..., m, h); np and snp pass the
    pooled deterministic vector (..., h) shared by all queries.  Passing
    the wrong one for the kind is an error so the taxonomy stays honest.
    """
    if config.attentive:
        if read is None or pooled is not None:
            raise ValueError(f"kind {config.kind!r} decodes from an attention read")
        det = read
    else:
        if pooled is None or read is not None:
            raise ValueError(f"kind {config.kind!r} decodes from the pooled path")
        det = ad.broadcast_to(ad.reshape(pooled, pooled.shape[:-1] + (1,) + pooled.shape[-1:]),
                              pooled.shape[:-1] + (x.shape[-2],) + pooled.shape[-1:])
    m = x.shape[-2]
    z_b = ad.broadcast_to(ad.reshape(z, z.shape[:-1] + (1,) + z.shape[-1:]),
                          z.shape[:-1] + (m,) + z.shape[-1:])
    hidden = mlp_forward(store, "dec.mlp", ad.concat([x, z_b, det], axis=-1), _dec_spec(config))
    return gaussian_head(store, "dec.head", hidden)


# ---------------------------------------------------------------------------
# rollouts


def _zero_read(shape) -> Node:
    return ad.constant(np.zeros(shape))


def _mean_loglik(ty: np.ndarray, belief: GaussianBelief) -> Node:
    """Mean over targets of per-point log-likelihood, (B,). Empty steps -> 0."""
    if ty.shape[-2] == 0:
        return ad.constant(np.zeros(ty.shape[:-2]))
    return ad.mean_reduce(gaussian_log_likelihood(ad.constant(ty), belief), axis=-1)


def _augmented(config: ModelConfig, x: np.ndarray, t: int, T: int) -> np.ndarray:
    return augment_query(x, t, T) if config.task_step_encoding else np.asarray(x, dtype=float)


def _flat_rollout(store, config, batch: SequenceBatch, mode, rng) -> list[StepPrediction]:
    """np/anp: every step's context merges into one task-less context set."""
    T, B = batch.T, batch.B
    cx = np.concatenate([_augmented(config, s.cx, t + 1, T) for t, s in enumerate(batch.steps)], axis=1)
    cy = np.concatenate([s.cy for s in batch.steps], axis=1)
    flat_ctx = ContextSet(cx, cy)
    prior = latent_encoder(store, config, flat_ctx)
    if mode == "posterior":
        tx = np.concatenate([_augmented(config, s.tx, t + 1, T) for t, s in enumerate(batch.steps)], axis=1)
        ty = np.concatenate([s.ty for s in batch.steps], axis=1)
        spec = _lat_spec(config)
        pooled = ad.add(_pool_pairs(store, "lat.pair", spec, flat_ctx),
                        _pool_pairs(store, "lat.pair", spec, ContextSet(tx, ty)))
        belief = gaussian_head(store, "lat.head", pooled)
        kl = kl_diag_gaussian(belief, prior)
    else:
        belief, kl = prior, None
    z = reparameterize(belief, rng.standard_normal(belief.mean.shape))

    if config.kind == "anp":
        values = _pair_values(store, config, flat_ctx)
    else:
        pooled_det = _pool_pairs(store, "det.pair", _det_spec(config), flat_ctx)

    preds = []
    for t, step in enumerate(batch.steps, start=1):
        atx = ad.constant(_augmented(config, step.tx, t, T))
        if config.kind == "anp":
            if flat_ctx.n == 0:
                read = _zero_read((B, step.tx.shape[1], config.h))
            else:
                read, _ = attend_batch(store, "attn", ad.constant(cx), values, atx,
                                       config.attention)
            out = decode(store, config, atx, z, read=read)
        else:
            out = decode(store, config, atx, z, pooled=pooled_det)
        recon = _mean_loglik(step.ty, out) if mode == "posterior" else None
        preds.append(StepPrediction(out, recon, kl if (t == 1 and kl is not None) else None))
    return preds


def _recurrent_rollout(store, config, batch: SequenceBatch, mode, rng) -> list[StepPrediction]:
    T, B = batch.T, batch.B
    state = initial_rssm_state(config, leading=(B,))
    mem = rmr.initial_memory(store, "mem", ablation=config.ablation,
                             leading=(B,)) if config.kind == "asnp_rmr" else None
    win_keys: Node | None = None  # asnp_w FIFO buffer of encoded points
    win_vals: Node | None = None
    preds = []
    for t, step in enumerate(batch.steps, start=1):
        acx = _augmented(config, step.cx, t, T)
        atx = ad.constant(_augmented(config, step.tx, t, T))
        ctx = ContextSet(acx, step.cy)

        mem_summary = None
        read = None
        pooled_det = None
        if config.kind == "asnp_rmr":
            pair_vals = _pair_values(store, config, ctx)
            mem = rmr.rmr_step(store, "mem", "attn", config.attention, ctx, mem,
                               pair_vals, config.ablation)
            mem_summary = ad.mean_reduce(mem.values, axis=-2)
            read = rmr.read(store, "attn", config.attention, mem, ctx.inputs,
                            pair_vals, atx)
        elif config.kind == "asnp_w":
            if ctx.n > 0:
                pair_vals = _pair_values(store, config, ctx)
                win_keys = ctx.inputs if win_keys is None else ad.concat([win_keys, ctx.inputs], axis=-2)
                win_vals = pair_vals if win_vals is None else ad.concat([win_vals, pair_vals], axis=-2)
                held = win_keys.shape[-2]
                if held > config.K:  # evict oldest points beyond the window
                    keep = int(config.K)
                    win_keys = ad.narrow(win_keys, axis=-2, start=held - keep, length=keep)
                    win_vals = ad.narrow(win_vals, axis=-2, start=held - keep, length=keep)
            if win_keys is None:
                read = _zero_read((B, step.tx.shape[1], config.h))
            else:
                read, _ = attend_batch(store, "attn", win_keys, win_vals, atx, config.attention)
        else:
            pooled_det = _pool_pairs(store, "det.pair", _det_spec(config), ctx)

        noise = rng.standard_normal((B, config.z_dim))
        if mode == "posterior":
            tgt = ContextSet(atx.value, step.ty)
            spec = _lat_spec(config)
            cond_c = _pool_pairs(store, "lat.pair", spec, ctx)
            cond_cd = ad.add(cond_c, _pool_pairs(store, "lat.pair", spec, tgt))
            prior_belief, _ = _rssm_belief(store, config, state, cond_c, mem_summary)
            post_belief, det = _rssm_belief(store, config, state, cond_cd, mem_summary)
            kl = kl_diag_gaussian(post_belief, prior_belief)
            state = RssmState(det, post_belief, reparameterize(post_belief, noise))
        else:
            state = prior_step(store, config, state, ctx, mem_summary, noise)
            kl = None

        if config.attentive:
            out = decode(store, config, atx, state.sample, read=read)
        else:
            out = decode(store, config, atx, state.sample, pooled=pooled_det)
        recon = _mean_loglik(step.ty, out) if mode == "posterior" else None
        preds.append(StepPrediction(out, recon, kl))
    return preds


def rollout(store: ParamStore, config: ModelConfig, batch: SequenceBatch,
            mode: str = "prior", rng: np.random.Generator | None = None) -> list[StepPrediction]:
    """Run the model over a batch of sequences, one StepPrediction per step.

    mode "prior" conditions latents on contexts only (evaluation); mode
    "posterior" also conditions on targets and fills in the per-step ELBO
    components.  rng supplies the reparameterization noise; pass a source
    whose standard_normal returns zeros for a deterministic mean rollout.
    """
    if mode not in ("prior", "posterior"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if batch.T < 1:
        raise ValueError("empty sequence")
    if rng is None:
        rng = np.random.default_rng(0)
    if config.recurrent:
        return _recurrent_rollout(store, config, batch, mode, rng)
    return _flat_rollout(store, config, batch, mode, rng)


def elbo(store: ParamStore, config: ModelConfig, batch: SequenceBatch,
         rng: np.random.Generator):
    """Negative sequential ELBO and its per-step components.

    Returns (loss Node, recon list, kl list); loss = -(sum_t recon_t -
    sum_t kl_t) averaged over the batch, with recon_t itself a mean over
    that step's targets.  Latents follow a single-sample posterior rollout.
    A non-finite term aborts with the offending step index.
    """
    preds = rollout(store, config, batch, mode="posterior", rng=rng)
    recons, kls = [], []
    total = None
    for t, p in enumerate(preds, start=1):
        term = p.recon
        if p.kl is not None:
            term = ad.sub(term, p.kl)
        if not np.all(np.isfinite(term.value)):
            raise FloatingPointError(f"non-finite ELBO term at task-step {t}")
        total = term if total is None else ad.add(total, term)
        recons.append(float(np.mean(p.recon.value)))
        kls.append(0.0 if p.kl is None else float(np.mean(p.kl.value)))
    loss = ad.neg(ad.mean_reduce(total))
    return loss, recons, kls


def target_nll(store: ParamStore, config: ModelConfig, seq, n_samples: int,
               rng: np.random.Generator) -> list[float]:
    """Per-step negative log-likelihood of targets under the prior rollout.

    The sequence is replicated n_samples times into one batch so each
    replica consumes independent latent noise; per step the score is
    -(1/S) sum_s mean-over-targets log-likelihood.  Runs without taping.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    batch = batch_sequences([seq] * n_samples)
    with ad.no_grad():
        preds = rollout(store, config, batch, mode="prior", rng=rng)
        out = []
        for t, (p, step) in enumerate(zip(preds, batch.steps), start=1):
            if step.ty.shape[-2] == 0:
                out.append(0.0)
                continue
            ll = _mean_loglik(step.ty, p.belief)
            out.append(float(-np.mean(ll.value)))
    return out
