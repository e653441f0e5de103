"""Synthetic task streams for meta-transfer experiments.

Two generators share one sequence shape: dynamic 1D regression against a
Gaussian process whose kernel parameters follow a per-sequence random
walk, and 2D image completion of a sprite gliding across a white canvas
with elastic bounces.  Every sequence is a pure function of its seed, so
datasets are reproducible byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CANVAS = 42
SPRITE_SHAPE = (28, 28)
SPRITE_SPEED = 3.0
SPRITE_NOISE_STD = 0.5
JITTER_LADDER = (1e-6, 1e-5, 1e-4)
PARAM_FLOOR = 0.1
PARAM_NOISE_STD = 0.1
X_RANGE = (-2.0, 2.0)


@dataclass(frozen=True)
class GpParams:
    """Squared-exponential kernel parameters and their per-sequence drift."""

    l: float
    sigma: float
    dl: float = 0.0
    dsigma: float = 0.0


@dataclass(frozen=True)
class RegimeSpec:
    """Counting rules for one task-stream regime.

    ``n_range`` bounds the context count on nonempty steps (inclusive);
    empty steps get n = 0.  Target counts draw uniform from
    [1, m_base - n].  ``prefix_context`` puts all nonempty steps first,
    otherwise they are chosen uniformly at random.
    """

    name: str
    dim: str
    T: int
    n_nonempty: int
    prefix_context: bool
    n_range: tuple
    m_base: int
    init_l: tuple | None = None
    init_sigma: tuple | None = None


_REGIMES = {
    ("sparse_context", "1d"): RegimeSpec(
        "sparse_context", "1d", 50, 45, False, (1, 1), 11, (0.7, 1.2), (1.0, 1.6)),
    ("transfer_prediction", "1d"): RegimeSpec(
        "transfer_prediction", "1d", 20, 10, True, (5, 50), 51, (1.2, 1.9), (1.6, 3.1)),
    ("sparse_context", "2d"): RegimeSpec(
        "sparse_context", "2d", 50, 45, False, (30, 30), 51),
    ("transfer_prediction", "2d"): RegimeSpec(
        "transfer_prediction", "2d", 20, 10, True, (5, 500), 501),
    # Desk-scale variants keep the full-scale proportions at T=10 so
    # comparative runs finish in minutes on one core.
    ("sparse_context_desk", "1d"): RegimeSpec(
        "sparse_context_desk", "1d", 10, 9, False, (1, 1), 11, (0.7, 1.2), (1.0, 1.6)),
    ("transfer_prediction_desk", "1d"): RegimeSpec(
        "transfer_prediction_desk", "1d", 10, 5, True, (5, 15), 16, (1.2, 1.9), (1.6, 3.1)),
}


def regime_names(dim: str) -> list:
    return sorted(n for n, d in _REGIMES if d == dim)


def regime_for(name: str, dim: str) -> RegimeSpec:
    """Look up a regime by name and input dimensionality."""
    if dim not in ("1d", "2d"):
        raise ValueError(f"unknown dim {dim!r}: choose 1d or 2d")
    spec = _REGIMES.get((name, dim))
    if spec is None:
        raise ValueError(
            f"unknown regime {name!r} for {dim}: choose from {regime_names(dim)}")
    return spec


def gp_kernel(x1: float, x2: float, p: GpParams) -> float:
    """Squared-exponential kernel sigma^2 * exp(-(x1-x2)^2 / (2 l^2))."""
    return p.sigma**2 * math.exp(-((x1 - x2) ** 2) / (2.0 * p.l**2))


def _kernel_matrix(a: np.ndarray, b: np.ndarray, p: GpParams) -> np.ndarray:
    d = a[:, None] - b[None, :]
    return p.sigma**2 * np.exp(-(d**2) / (2.0 * p.l**2))


def sample_gp_function(rng, xs: np.ndarray, p: GpParams) -> np.ndarray:
    """Draw one function from the GP prior at the given points.

    The kernel matrix gets diagonal jitter, escalated through
    ``JITTER_LADDER`` when Cholesky fails; a failure at the final rung
    propagates as ``numpy.linalg.LinAlgError``.
    """
    xs = np.asarray(xs, dtype=float)
    k = _kernel_matrix(xs, xs, p)
    eye = np.eye(len(xs))
    chol = None
    for i, jitter in enumerate(JITTER_LADDER):
        try:
            chol = np.linalg.cholesky(k + jitter * eye)
            break
        except np.linalg.LinAlgError:
            if i == len(JITTER_LADDER) - 1:
                raise
    return chol @ rng.standard_normal(len(xs))


def evolve_gp_params(rng, p: GpParams) -> GpParams:
    """One random-walk step: drift plus N(0, 0.1) noise, floored at 0.1."""
    l = max(PARAM_FLOOR, p.l + p.dl + rng.normal(0.0, PARAM_NOISE_STD))
    sigma = max(PARAM_FLOOR, p.sigma + p.dsigma + rng.normal(0.0, PARAM_NOISE_STD))
    return GpParams(l=l, sigma=sigma, dl=p.dl, dsigma=p.dsigma)


@dataclass(frozen=True)
class Pattern:
    """Per-step context/target counts shared by every sequence in a batch."""

    n: tuple
    m: tuple


def sample_pattern(rng, regime: RegimeSpec) -> Pattern:
    """Draw the per-step counts prescribed by the regime."""
    if regime.prefix_context:
        nonempty = set(range(regime.n_nonempty))
    else:
        nonempty = set(rng.choice(regime.T, size=regime.n_nonempty, replace=False))
    lo, hi = regime.n_range
    n, m = [], []
    for t in range(regime.T):
        n_t = int(rng.integers(lo, hi + 1)) if t in nonempty else 0
        n.append(n_t)
        m.append(int(rng.integers(1, regime.m_base - n_t + 1)))
    return Pattern(n=tuple(n), m=tuple(m))


@dataclass
class TaskStep:
    """One task-step: context pairs (cx, cy) and target pairs (tx, ty)."""

    t: int
    cx: np.ndarray
    cy: np.ndarray
    tx: np.ndarray
    ty: np.ndarray


@dataclass
class TaskSequence:
    seed: int
    regime: str
    dim: str
    steps: list
    meta: dict = field(default_factory=dict)


def generate_1d_sequence(seed: int, regime: RegimeSpec,
                         pattern: Pattern | None = None) -> TaskSequence:
    """Generate one dynamic-GP regression sequence.

    Kernel parameters start uniform in the regime's initial ranges, pick
    up per-sequence drifts (length-scale from [-0.03, 0.03], kernel scale
    from [-0.05, 0.05]), and random-walk between task-steps.  Each step
    draws a fresh function at the union of its context and target inputs.
    """
    if regime.dim != "1d":
        raise ValueError(f"regime {regime.name!r} is not 1d")
    rng = np.random.default_rng(seed)
    if pattern is None:
        pattern = sample_pattern(rng, regime)
    p = GpParams(
        l=rng.uniform(*regime.init_l),
        sigma=rng.uniform(*regime.init_sigma),
        dl=rng.uniform(-0.03, 0.03),
        dsigma=rng.uniform(-0.05, 0.05),
    )
    steps, trace = [], []
    for t in range(regime.T):
        if t > 0:
            p = evolve_gp_params(rng, p)
        trace.append([p.l, p.sigma])
        n, m = pattern.n[t], pattern.m[t]
        xs = rng.uniform(*X_RANGE, size=n + m)
        ys = sample_gp_function(rng, xs, p)
        steps.append(TaskStep(
            t=t + 1,
            cx=xs[:n, None].copy(), cy=ys[:n, None].copy(),
            tx=xs[n:, None].copy(), ty=ys[n:, None].copy(),
        ))
    meta = {"dim": "1d", "params": trace, "dl": p.dl, "dsigma": p.dsigma}
    return TaskSequence(seed=seed, regime=regime.name, dim="1d",
                        steps=steps, meta=meta)


@dataclass
class SpriteState:
    """A sprite bitmap plus its continuous position and velocity.

    Position is the top-left corner in (row, col) canvas coordinates;
    valid positions keep the bitmap fully inside the canvas.
    """

    sprite: np.ndarray
    pos: np.ndarray
    vel: np.ndarray


def _sprite_bounds(sprite: np.ndarray) -> np.ndarray:
    if sprite.shape[0] > CANVAS or sprite.shape[1] > CANVAS:
        raise ValueError(
            f"sprite {sprite.shape} exceeds the {CANVAS}x{CANVAS} canvas")
    return np.array([CANVAS - sprite.shape[0], CANVAS - sprite.shape[1]],
                    dtype=float)


def step_sprite(s: SpriteState, rng) -> SpriteState:
    """Advance one step with transition noise and elastic reflection."""
    bounds = _sprite_bounds(s.sprite)
    pos = s.pos + s.vel + rng.normal(0.0, SPRITE_NOISE_STD, 2)
    vel = s.vel.copy()
    for axis in range(2):
        p, bound = pos[axis], bounds[axis]
        while p < 0.0 or p > bound:
            p = -p if p < 0.0 else 2.0 * bound - p
            vel[axis] = -vel[axis]
        pos[axis] = p
    return SpriteState(sprite=s.sprite, pos=pos, vel=vel)


def render_canvas(s: SpriteState) -> np.ndarray:
    """Paste the sprite onto a white canvas at its rounded position."""
    canvas = np.ones((CANVAS, CANVAS))
    r = int(np.rint(s.pos[0]))
    c = int(np.rint(s.pos[1]))
    h, w = s.sprite.shape
    canvas[r:r + h, c:c + w] = s.sprite
    return canvas


def make_default_sprites() -> list:
    """Sixteen procedural grayscale glyphs, ink 0.0 on white 1.0.

    Bundling synthetic bitmaps keeps the 2D pipeline free of external
    data; real images come in through :func:`load_sprite_pgm`.
    """
    h, w = SPRITE_SHAPE
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)

    def ink(mask):
        return 1.0 - np.clip(mask.astype(float), 0.0, 1.0)

    sprites = [
        ink(r < 9),                                       # disk
        ink(abs(r - 8) < 2.5),                            # ring
        ink(np.maximum(abs(dy), abs(dx)) < 8),            # square
        ink(abs(np.maximum(abs(dy), abs(dx)) - 8) < 2),   # square outline
        ink((abs(dx) < 2.5) | (abs(dy) < 2.5)),           # plus
        ink((abs(dy - dx) < 3) | (abs(dy + dx) < 3)),     # saltire
        ink(np.sin(yy * math.pi / 4.0) > 0),              # horizontal bands
        ink(np.sin(xx * math.pi / 4.0) > 0),              # vertical bands
        ink(np.sin((xx + yy) * math.pi / 5.0) > 0),       # diagonal bands
        ink(((yy // 6).astype(int) + (xx // 6).astype(int)) % 2 == 0),
        ink((dy > -8) & (abs(dx) < (dy + 8) * 0.6)),      # triangle
        np.clip(r / 10.0, 0.0, 1.0),                      # radial gradient
        ink((yy % 9 < 3) & (xx % 9 < 3)),                 # dot grid
        ink(((abs(dx + 5) < 2.5) & (dy < 8)) | ((dy > 5) & (dy < 9) & (dx > -8) & (dx < 8))),
        ink(((abs(dy + 6) < 2.5) & (abs(dx) < 9)) | (abs(dx) < 2.5)),
        ink(np.sin(r * math.pi / 3.5) > 0),               # concentric rings
    ]
    return sprites


def load_sprite_pgm(path) -> np.ndarray:
    """Load a binary PGM (P5) sprite, scaled to [0, 1].

    The image must be 8-bit grayscale with exactly 28x28 pixels.
    """
    data = Path(path).read_bytes()
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        return data[start:pos]

    magic = next_token()
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(next_token()) for _ in range(3))
    if maxval > 255:
        raise ValueError(f"{path}: maxval {maxval} is not 8-bit")
    if (height, width) != SPRITE_SHAPE:
        raise ValueError(
            f"{path}: sprite must be {SPRITE_SHAPE[0]}x{SPRITE_SHAPE[1]}, "
            f"got {height}x{width}")
    pos += 1  # single whitespace byte separates header and raster
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise ValueError(f"{path}: truncated raster")
    img = np.frombuffer(raster, dtype=np.uint8).astype(float)
    return img.reshape(height, width) / float(maxval)


def generate_2d_sequence(seed: int, regime: RegimeSpec, sprites,
                         pattern: Pattern | None = None) -> TaskSequence:
    """Generate one moving-sprite completion sequence.

    Queries are canvas pixel coordinates scaled to [0, 1] on each axis;
    outputs are the grayscale intensities under them.  Context and
    target cells are each drawn without replacement, but the two sets
    may overlap.
    """
    if regime.dim != "2d":
        raise ValueError(f"regime {regime.name!r} is not 2d")
    rng = np.random.default_rng(seed)
    if pattern is None:
        pattern = sample_pattern(rng, regime)
    idx = int(rng.integers(0, len(sprites)))
    sprite = np.asarray(sprites[idx], dtype=float)
    bounds = _sprite_bounds(sprite)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    state = SpriteState(
        sprite=sprite,
        pos=rng.uniform([0.0, 0.0], bounds),
        vel=SPRITE_SPEED * np.array([math.sin(angle), math.cos(angle)]),
    )
    scale = float(CANVAS - 1)
    steps, positions = [], []
    for t in range(regime.T):
        if t > 0:
            state = step_sprite(state, rng)
        positions.append([float(state.pos[0]), float(state.pos[1])])
        canvas = render_canvas(state)
        n, m = pattern.n[t], pattern.m[t]

        def draw(count):
            cells = rng.choice(CANVAS * CANVAS, size=count, replace=False)
            rows, cols = np.divmod(cells, CANVAS)
            xy = np.stack([rows / scale, cols / scale], axis=1)
            return xy, canvas[rows, cols][:, None]

        cx, cy = draw(n) if n else (np.zeros((0, 2)), np.zeros((0, 1)))
        tx, ty = draw(m)
        steps.append(TaskStep(t=t + 1, cx=cx, cy=cy, tx=tx, ty=ty))
    meta = {"dim": "2d", "sprite_index": idx, "positions": positions}
    return TaskSequence(seed=seed, regime=regime.name, dim="2d",
                        steps=steps, meta=meta)


def gp_oracle_nll(seq: TaskSequence) -> list:
    """Exact per-step GP predictive NLL under the true parameter trace.

    Conditions only on the same step's context, so it is a reference for
    models that cannot transfer information across steps.  Returns the
    mean per-target marginal NLL for each step.
    """
    if "params" not in seq.meta:
        raise ValueError("sequence lacks a params trace")
    jitter = JITTER_LADDER[0]
    out = []
    for t, step in enumerate(seq.steps):
        l, sigma = seq.meta["params"][t]
        p = GpParams(l=float(l), sigma=float(sigma))
        tx, ty = step.tx[:, 0], step.ty[:, 0]
        if step.cx.shape[0] == 0:
            mean = np.zeros_like(tx)
            var = np.full_like(tx, p.sigma**2 + jitter)
        else:
            cx, cy = step.cx[:, 0], step.cy[:, 0]
            kcc = _kernel_matrix(cx, cx, p) + jitter * np.eye(len(cx))
            ktc = _kernel_matrix(tx, cx, p)
            alpha = np.linalg.solve(kcc, cy)
            mean = ktc @ alpha
            var = (p.sigma**2 + jitter
                   - np.sum(ktc * np.linalg.solve(kcc, ktc.T).T, axis=1))
        nll = 0.5 * (math.log(2.0 * math.pi) + np.log(var)
                     + (ty - mean) ** 2 / var)
        out.append(float(nll.mean()))
    return out


def _step_to_json(s: TaskStep) -> dict:
    return {"t": s.t, "cx": s.cx.tolist(), "cy": s.cy.tolist(),
            "tx": s.tx.tolist(), "ty": s.ty.tolist()}


def _step_from_json(row: dict) -> TaskStep:
    # Target counts are always >= 1, so tx/ty fix the query/output widths
    # that empty context lists cannot carry.
    tx = np.asarray(row["tx"], dtype=float)
    ty = np.asarray(row["ty"], dtype=float)
    d_x, d_y = tx.shape[1], ty.shape[1]

    def arr(key, width):
        vals = row[key]
        if not vals:
            return np.zeros((0, width))
        return np.asarray(vals, dtype=float)

    return TaskStep(t=int(row["t"]), cx=arr("cx", d_x), cy=arr("cy", d_y),
                    tx=tx, ty=ty)


def write_sequences(path, seqs) -> None:
    """Write sequences as UTF-8 JSON-lines, one sequence per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            row = {
                "seed": seq.seed,
                "regime": seq.regime,
                "steps": [_step_to_json(s) for s in seq.steps],
                "meta": {**seq.meta, "dim": seq.dim},
            }
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_sequences(path) -> list:
    """Read a JSON-lines dataset written by :func:`write_sequences`."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {i}: invalid JSON") from exc
            meta = row.get("meta", {})
            out.append(TaskSequence(
                seed=row.get("seed"),
                regime=row.get("regime", ""),
                dim=meta.get("dim", "1d"),
                steps=[_step_from_json(s) for s in row.get("steps", [])],
                meta=meta,
            ))
    return out
