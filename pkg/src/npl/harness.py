"""Training loop, evaluation, ablation runs, and plot-data export.

Training generates fresh task sequences every step (the infinite-task
protocol), so the only state is the parameter store and the optimizer
moments.  Every run is a pure function of its config: metrics files
from two same-seed runs differ only in the wall-clock column.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import taskgen as tg
from .layers import AttentionKind
from .models import ModelConfig, batch_sequences, elbo, init_params, target_nll

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
GRAD_CLIP = 10.0
ABLATION_VARIANTS = ("no_tracking", "no_interaction")


class AdamState:
    """Adaptive moment estimation over a ParamStore, updating in place."""

    def __init__(self, store: ad.ParamStore, learning_rate: float = 1e-4,
                 betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.store = store
        self.lr = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(store.get(n)) for n in store.names()}
        self.v = {n: np.zeros_like(store.get(n)) for n in store.names()}

    def step(self, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in self.store.names():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            self.store.get(name)[...] -= self.lr * update


def clip_gradients(grads: dict, max_norm: float = GRAD_CLIP) -> float:
    """Scale all gradients in place so the global norm is at most
    ``max_norm``.  Returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    regime: tg.RegimeSpec
    batch_size: int = 16
    learning_rate: float = 1e-4
    steps: int = 5000
    seed: int = 0
    checkpoint_path: Path = Path("model.ckpt")
    metrics_path: Path = Path("metrics.csv")
    eval_every: int = 500

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        dim = "1d" if self.model.d_x == 1 else "2d"
        if self.regime.dim != dim:
            raise ValueError(
                f"model with d_x={self.model.d_x} expects a {dim} regime, "
                f"got {self.regime.name!r} ({self.regime.dim})")
        object.__setattr__(self, "checkpoint_path", Path(self.checkpoint_path))
        object.__setattr__(self, "metrics_path", Path(self.metrics_path))


_MODEL_KEYS = ("kind", "d_x", "d_y", "h", "z_dim", "K", "attention",
               "task_step_encoding", "ablation")
_TRAIN_KEYS = ("regime", "batch_size", "learning_rate", "steps", "seed",
               "checkpoint", "metrics", "eval_every")


def _parse_kv(text: str) -> dict:
    pairs = {}
    for i, raw in enumerate(text.split("\n"), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {i}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ValueError(f"line {i}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _typed(kind, key, value):
    try:
        return kind(value)
    except ValueError:
        raise ValueError(f"{key} must be {kind.__name__}, got {value!r}") from None


def _parse_attention(value: str) -> AttentionKind:
    name, _, heads = value.partition(":")
    if heads:
        return AttentionKind(name, _typed(int, "attention heads", heads))
    return AttentionKind(name)


def _parse_window(value: str) -> float:
    if value == "inf":
        return math.inf
    return _typed(int, "K", value)


def _model_from_pairs(pairs: dict) -> ModelConfig:
    if "kind" not in pairs:
        raise ValueError("config must set kind")
    kw = {"kind": pairs["kind"]}
    for key in ("d_x", "d_y", "h", "z_dim"):
        if key in pairs:
            kw[key] = _typed(int, key, pairs[key])
    if "K" in pairs:
        kw["K"] = _parse_window(pairs["K"])
    if "attention" in pairs:
        kw["attention"] = _parse_attention(pairs["attention"])
    if "task_step_encoding" in pairs:
        flag = pairs["task_step_encoding"].lower()
        if flag not in ("true", "false"):
            raise ValueError(
                f"task_step_encoding must be true or false, got {flag!r}")
        kw["task_step_encoding"] = flag == "true"
    if "ablation" in pairs:
        kw["ablation"] = pairs["ablation"]
    return ModelConfig(**kw)


def parse_train_config(text: str, base_dir) -> TrainConfig:
    """Parse a key=value config (``#`` comments allowed).

    Relative checkpoint/metrics paths resolve against ``base_dir`` so a
    config file's outputs land next to it.  Unknown keys are an error.
    """
    pairs = _parse_kv(text)
    unknown = sorted(set(pairs) - set(_MODEL_KEYS) - set(_TRAIN_KEYS))
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    model = _model_from_pairs(pairs)
    dim = "1d" if model.d_x == 1 else "2d"
    regime = tg.regime_for(pairs.get("regime", "sparse_context_desk"), dim)
    base = Path(base_dir)
    return TrainConfig(
        model=model,
        regime=regime,
        batch_size=_typed(int, "batch_size", pairs.get("batch_size", "16")),
        learning_rate=_typed(float, "learning_rate",
                             pairs.get("learning_rate", "1e-4")),
        steps=_typed(int, "steps", pairs.get("steps", "5000")),
        seed=_typed(int, "seed", pairs.get("seed", "0")),
        checkpoint_path=base / pairs.get("checkpoint", "model.ckpt"),
        metrics_path=base / pairs.get("metrics", "metrics.csv"),
        eval_every=_typed(int, "eval_every", pairs.get("eval_every", "500")),
    )


def _format_window(value: float) -> str:
    return "inf" if math.isinf(value) else str(int(value))


def save_checkpoint(path, config: ModelConfig, store: ad.ParamStore) -> None:
    """Write a checkpoint atomically: key=value model header, blank line,
    then the binary parameter block."""
    attn = f"{config.attention.kind}:{config.attention.n_heads}"
    header = "\n".join([
        f"kind={config.kind}",
        f"d_x={config.d_x}",
        f"d_y={config.d_y}",
        f"h={config.h}",
        f"z_dim={config.z_dim}",
        f"K={_format_window(config.K)}",
        f"attention={attn}",
        f"task_step_encoding={'true' if config.task_step_encoding else 'false'}",
        f"ablation={config.ablation}",
    ])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header.encode("utf-8") + b"\n\n" + ad.dumps_params(store))
    os.replace(tmp, path)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    sep = data.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: missing checkpoint header separator")
    pairs = _parse_kv(data[:sep].decode("utf-8"))
    unknown = sorted(set(pairs) - set(_MODEL_KEYS))
    if unknown:
        raise ValueError(f"{path}: unknown header key(s): {', '.join(unknown)}")
    config = _model_from_pairs(pairs)
    store = ad.loads_params(data, sep + 2)
    return config, store


def _generate(seed: int, regime: tg.RegimeSpec, pattern=None, sprites=None):
    if regime.dim == "1d":
        return tg.generate_1d_sequence(seed, regime, pattern)
    return tg.generate_2d_sequence(seed, regime, sprites, pattern)


def _draw_seed(rng) -> int:
    return int(rng.integers(0, 2**63))


def _metrics_header(T: int) -> str:
    return "step,wall_clock_s,elbo,kl,recon," + ",".join(
        f"nll_t{t}" for t in range(1, T + 1))


def _fmt(x: float) -> str:
    return repr(float(x))


def train(cfg: TrainConfig) -> ad.ParamStore:
    """Optimize the ELBO on freshly generated batches.

    Writes one metrics row per step and a checkpoint before the loop,
    at every ``eval_every`` interval, and at the end.  A non-finite loss
    aborts with the step index; the last written checkpoint survives.
    The per-row NLL columns probe two held-out sequences with one latent
    sample each, a cheap trend signal rather than a full evaluation.
    """
    regime = cfg.regime
    store = init_params(cfg.model, np.random.default_rng([cfg.seed, 0]))
    opt = AdamState(store, cfg.learning_rate)
    data_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    probe_rng = np.random.default_rng([cfg.seed, 3])
    sprites = tg.make_default_sprites() if regime.dim == "2d" else None
    probes = [_generate(_draw_seed(probe_rng), regime, None, sprites)
              for _ in range(2)]

    save_checkpoint(cfg.checkpoint_path, cfg.model, store)
    start = time.perf_counter()
    with open(cfg.metrics_path, "w", encoding="utf-8") as metrics:
        metrics.write(_metrics_header(regime.T) + "\n")
        for k in range(1, cfg.steps + 1):
            pattern = tg.sample_pattern(data_rng, regime)
            seqs = [_generate(_draw_seed(data_rng), regime, pattern, sprites)
                    for _ in range(cfg.batch_size)]
            batch = batch_sequences(seqs)
            store.zero_grad()
            try:
                loss, recons, kls = elbo(store, cfg.model, batch, noise_rng)
            except FloatingPointError as exc:
                raise RuntimeError(
                    f"training aborted at step {k}: {exc}; last checkpoint "
                    f"kept at {cfg.checkpoint_path}") from exc
            grads = ad.backprop(loss, store)
            norm = clip_gradients(grads, GRAD_CLIP)
            if not math.isfinite(norm):
                raise RuntimeError(
                    f"training aborted at step {k}: non-finite gradient norm; "
                    f"last checkpoint kept at {cfg.checkpoint_path}")
            opt.step(grads)

            probe_nll = np.zeros(regime.T)
            for i, seq in enumerate(probes):
                rng = np.random.default_rng([cfg.seed, 4, k, i])
                probe_nll += target_nll(store, cfg.model, seq, 1, rng)
            probe_nll /= len(probes)

            row = [str(k), _fmt(time.perf_counter() - start),
                   _fmt(-float(loss.value)),
                   _fmt(sum(kls)), _fmt(sum(recons))]
            row.extend(_fmt(v) for v in probe_nll)
            metrics.write(",".join(row) + "\n")
            metrics.flush()

            if k % cfg.eval_every == 0 or k == cfg.steps:
                save_checkpoint(cfg.checkpoint_path, cfg.model, store)
    return store


@dataclass
class EvalResult:
    """Per-task-step mean target-NLL and its standard error."""

    nll: list
    sem: list


def evaluate(checkpoint_path, data_path, n_sequences: int = 200,
             n_samples: int = 10, seed: int = 0) -> EvalResult:
    """Score a checkpoint on a held-out dataset with prior-mode rollouts."""
    config, store = load_checkpoint(checkpoint_path)
    expected_dim = "1d" if config.d_x == 1 else "2d"
    seqs = tg.read_sequences(data_path)[:n_sequences]
    if not seqs:
        raise ValueError(f"{data_path}: no sequences")
    lengths = {len(s.steps) for s in seqs}
    if len(lengths) > 1:
        raise ValueError(f"{data_path}: mixed sequence lengths {sorted(lengths)}")
    for s in seqs:
        if s.dim != expected_dim:
            raise ValueError(
                f"checkpoint expects {expected_dim} data, dataset has {s.dim}")
    curves = np.stack([
        target_nll(store, config, seq, n_samples, np.random.default_rng([seed, i]))
        for i, seq in enumerate(seqs)
    ])
    mean = curves.mean(axis=0)
    if len(seqs) > 1:
        sem = curves.std(axis=0, ddof=1) / math.sqrt(len(seqs))
    else:
        sem = np.zeros_like(mean)
    return EvalResult(nll=[float(v) for v in mean],
                      sem=[float(v) for v in sem])


def ablation_paths(cfg: TrainConfig, variant: str):
    """Checkpoint and metrics paths with the variant tag appended."""

    def tag(p: Path) -> Path:
        return p.with_name(f"{p.stem}_{variant}{p.suffix}")

    return tag(cfg.checkpoint_path), tag(cfg.metrics_path)


def ablate(cfg: TrainConfig, variant: str) -> ad.ParamStore:
    """Train an ablated memory model with the base config's pipeline."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(
            f"unknown ablation variant {variant!r}: choose from "
            f"{ABLATION_VARIANTS}")
    if cfg.model.kind != "asnp_rmr":
        raise ValueError("ablation requires an asnp_rmr base model")
    ckpt, metrics = ablation_paths(cfg, variant)
    cfg = dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, ablation=variant),
        checkpoint_path=ckpt,
        metrics_path=metrics,
    )
    return train(cfg)


_FIXED_COLUMNS = ("step", "wall_clock_s", "elbo", "kl", "recon")


def read_metrics(path):
    """Parse a metrics CSV into (T, rows of floats).

    Errors name the file and 1-based line number.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").strip().split("\n")
    header = lines[0].split(",")
    if tuple(header[:5]) != _FIXED_COLUMNS or len(header) < 6:
        raise ValueError(f"{path}: line 1: unexpected metrics header")
    T = len(header) - 5
    rows = []
    for i, line in enumerate(lines[1:], 2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError(f"{path}: line {i}: expected {len(header)} "
                             f"values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ValueError(f"{path}: line {i}: non-numeric value") from None
    if not rows:
        raise ValueError(f"{path}: no rows")
    return T, rows


def export_plot_data(metrics_paths, out_csv):
    """Build plot-ready tables from one metrics file per model.

    Writes two CSVs and returns their paths: the final per-task-step NLL
    curve of each run (columns aligned on task_step, one per label), and
    a long-form table of mean NLL against wall-clock for every row.
    Labels come from the input file stems.
    """
    out_csv = Path(out_csv)
    labels = [Path(p).stem for p in metrics_paths]
    parsed = [read_metrics(p) for p in metrics_paths]
    lengths = {T for T, _ in parsed}
    if len(lengths) > 1:
        raise ValueError(
            f"inputs disagree on task-step count: {sorted(lengths)}")
    T = lengths.pop()

    lines = ["task_step," + ",".join(labels)]
    finals = [rows[-1] for _, rows in parsed]
    for t in range(T):
        lines.append(",".join([str(t + 1)] + [_fmt(f[5 + t]) for f in finals]))
    out_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")

    wall_csv = out_csv.with_name(out_csv.stem + "_wallclock" + out_csv.suffix)
    wall_lines = ["label,step,wall_clock_s,mean_nll"]
    for label, (_, rows) in zip(labels, parsed):
        for row in rows:
            mean_nll = sum(row[5:]) / T
            wall_lines.append(
                f"{label},{int(row[0])},{_fmt(row[1])},{_fmt(mean_nll)}")
    wall_csv.write_text("\n".join(wall_lines) + "\n", encoding="utf-8")
    return out_csv, wall_csv
