"""Reference multi-scale deformable attention: forward, backward, gradient check.

This is the oracle the optimized kernels are measured against. It follows
the grid-sample formulation directly (one vectorized gather per level and
bilinear corner) and favors clarity over speed.

Sampling convention (align_corners=False, zero padding)::

    w_im = x * W - 0.5        h_im = y * H - 0.5
    w0 = floor(w_im)          h0 = floor(h_im)
    lw = w_im - w0            lh = h_im - h0

    sample = (1-lh)(1-lw) v[h0, w0] + (1-lh) lw v[h0, w0+1]
           + lh (1-lw) v[h0+1, w0] + lh lw v[h0+1, w0+1]

Corners outside the map read as zero and receive no gradient.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse

from .errors import InputError, ShapeError
from .tensor import (
    Dtype,
    FeaturePyramid,
    Layout,
    LevelSpec,
    SamplingTensors,
    level_specs,
    make_pyramid,
    random_sampling,
    to_channel_last,
)

# Queries processed per vectorized block; bounds peak memory at large sizes.
QUERY_BLOCK = 8192


class Mode(enum.Enum):
    INFERENCE = "inference"
    TRAIN = "train"


@dataclass(frozen=True)
class MsdaConfig:
    batch: int
    queries: int
    heads: int
    channels: int
    levels: tuple[LevelSpec, ...]
    points: int
    mode: Mode = Mode.INFERENCE
    saved_dtype: Dtype = Dtype.F32

    def __post_init__(self):
        for name in ("batch", "queries", "heads", "channels", "points"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.levels) == 0:
            raise InputError("at least one level is required")
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "saved_dtype", Dtype.parse(self.saved_dtype))

    @classmethod
    def build(cls, batch, queries, heads, channels, level_shapes, points,
              mode=Mode.INFERENCE, saved_dtype=Dtype.F32) -> "MsdaConfig":
        return cls(batch, queries, heads, channels, level_specs(level_shapes), points, Mode(mode), saved_dtype)

    @property
    def embed_dim(self) -> int:
        return self.heads * self.channels

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def level_shapes(self) -> list[tuple[int, int]]:
        return [(lv.height, lv.width) for lv in self.levels]

    @property
    def sampling_shape(self) -> tuple[int, ...]:
        return (self.batch, self.queries, self.heads, self.num_levels, self.points)

    @property
    def train(self) -> bool:
        return self.mode is Mode.TRAIN

    def with_mode(self, mode) -> "MsdaConfig":
        return MsdaConfig(self.batch, self.queries, self.heads, self.channels, self.levels,
                          self.points, Mode(mode), self.saved_dtype)


def paper_config(mode=Mode.INFERENCE, batch: int = 1) -> MsdaConfig:
    """Five Swin-style levels of a 1024x1024 image, 8 heads x 32 channels, 4 points."""
    shapes = [(256, 256), (128, 128), (64, 64), (32, 32), (16, 16)]
    queries = sum(h * w for h, w in shapes)
    return MsdaConfig.build(batch, queries, 8, 32, shapes, 4, mode)


@dataclass
class SavedForward:
    """Per-point bilinear samples, shape ``(B, Q, heads, levels, points, channels)``."""

    sampled: np.ndarray


@dataclass
class MsdaGrads:
    grad_value: np.ndarray
    grad_locations: np.ndarray
    grad_weights: np.ndarray


def check_inputs(p: FeaturePyramid, s: SamplingTensors, cfg: MsdaConfig,
                 grad_output: Optional[np.ndarray] = None) -> None:
    """Raise ``ShapeError`` naming the first axis that disagrees with ``cfg``."""
    pairs = [("batch", p.batch, cfg.batch), ("heads", p.heads, cfg.heads),
             ("channels", p.channels, cfg.channels), ("levels", len(p.levels), cfg.num_levels)]
    for axis, got, want in pairs:
        if got != want:
            raise ShapeError(f"value pyramid {axis} is {got}, config expects {want}", axis=axis)
    if tuple(p.levels) != tuple(cfg.levels):
        raise ShapeError(f"pyramid level shapes {p.level_shapes} differ from config {cfg.level_shapes}",
                         axis="levels")
    names = ("batch", "queries", "heads", "levels", "points")
    for axis, got, want in zip(names, s.weights.shape, cfg.sampling_shape):
        if got != want:
            raise ShapeError(f"sampling {axis} extent is {got}, config expects {want}", axis=axis)
    if grad_output is not None:
        want = (cfg.batch, cfg.queries, cfg.embed_dim)
        if tuple(grad_output.shape) != want:
            raise ShapeError(f"grad_output has shape {grad_output.shape}, expected {want}", axis="grad_output")
        if not np.all(np.isfinite(grad_output)):
            raise InputError("grad_output must be finite")


def bilinear_sample(level_data, loc: Sequence[float]) -> float:
    """Bilinearly sample one ``H x W`` single-channel map at normalized ``(x, y)``."""
    data = np.asarray(level_data, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"level_data must be 2-D, got shape {data.shape}")
    x, y = float(loc[0]), float(loc[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InputError(f"non-finite sampling location {loc!r}")
    height, width = data.shape
    w_im = x * width - 0.5
    h_im = y * height - 0.5
    w0, h0 = math.floor(w_im), math.floor(h_im)
    lw, lh = w_im - w0, h_im - h0
    total = 0.0
    for dr, dc, cw in ((0, 0, (1 - lh) * (1 - lw)), (0, 1, (1 - lh) * lw),
                       (1, 0, lh * (1 - lw)), (1, 1, lh * lw)):
        r, c = h0 + dr, w0 + dc
        if 0 <= r < height and 0 <= c < width:
            total += cw * data[r, c]
    return float(total)


def _corners(loc: np.ndarray, height: int, width: int, dt):
    """Corner geometry for locations ``(..., 2)``.

    Returns ``lw, lh`` and a list of ``(flat_index, corner_weight, valid)``
    in the order (h0,w0), (h0,w0+1), (h0+1,w0), (h0+1,w0+1). Invalid corners
    carry a clipped index and zero weight.
    """
    x = loc[..., 0].astype(dt)
    y = loc[..., 1].astype(dt)
    w_im = x * dt(width) - dt(0.5)
    h_im = y * dt(height) - dt(0.5)
    w0 = np.floor(w_im)
    h0 = np.floor(h_im)
    lw = w_im - w0
    lh = h_im - h0
    w0 = w0.astype(np.int64)
    h0 = h0.astype(np.int64)
    one = dt(1)
    out = []
    for dr, dc, cw in ((0, 0, (one - lh) * (one - lw)), (0, 1, (one - lh) * lw),
                       (1, 0, lh * (one - lw)), (1, 1, lh * lw)):
        r, c = h0 + dr, w0 + dc
        valid = (r >= 0) & (r < height) & (c >= 0) & (c < width)
        idx = np.clip(r, 0, height - 1) * width + np.clip(c, 0, width - 1)
        out.append((idx, np.where(valid, cw, dt(0)), valid))
    return lw, lh, out


def _rows(idx: np.ndarray, pixels: int) -> np.ndarray:
    """Row of ``value_level.reshape(B * HW * heads, C)`` for corner ``idx`` ``(B, q, heads, P)``."""
    B, _, Hh, _ = idx.shape
    b = np.arange(B)[:, None, None, None]
    h = np.arange(Hh)[None, None, :, None]
    return (b * pixels + idx) * Hh + h


def _blocks(queries: int):
    for q0 in range(0, queries, QUERY_BLOCK):
        yield slice(q0, min(queries, q0 + QUERY_BLOCK))


def forward_arrays(value: np.ndarray, levels: Sequence[LevelSpec], loc: np.ndarray, weights: np.ndarray,
                   train: bool = False, dtype=np.float32):
    """Array-level forward on a channel-last value ``(B, pixels, heads, C)``.

    Returns ``(output (B, Q, heads*C), sampled or None)`` computed in ``dtype``.
    """
    dt = np.dtype(dtype).type
    B, _, Hh, C = value.shape
    Q = loc.shape[1]
    L, P = loc.shape[3], loc.shape[4]
    out = np.zeros((B, Q, Hh, C), dtype=dt)
    sampled_all = np.empty((B, Q, Hh, L, P, C), dtype=dt) if train else None
    for l, lv in enumerate(levels):
        v_rows = value[:, lv.offset:lv.offset + lv.pixels].astype(dt).reshape(-1, C)
        for qs in _blocks(Q):
            _, _, corners = _corners(loc[:, qs, :, l], lv.height, lv.width, dt)
            sampled = None
            for idx, cw, _ in corners:
                term = v_rows.take(_rows(idx, lv.pixels), axis=0) * cw[..., None]
                sampled = term if sampled is None else sampled + term
            out[:, qs] += (weights[:, qs, :, l, :, None].astype(dt) * sampled).sum(axis=3)
            if train:
                sampled_all[:, qs, :, l] = sampled
    return out.reshape(B, Q, Hh * C), sampled_all


def backward_arrays(value: np.ndarray, levels: Sequence[LevelSpec], loc: np.ndarray, weights: np.ndarray,
                    grad_output: np.ndarray, dtype=np.float32):
    """Array-level backward; returns ``(grad_value, grad_locations, grad_weights)``.

    The forward is linear in the value, ``out = S @ value`` for a sparse
    sampling matrix ``S``, so the value gradient is ``S.T @ grad_output``,
    assembled per level and query block.
    """
    dt = np.dtype(dtype).type
    B, _, Hh, C = value.shape
    Q = loc.shape[1]
    g_all = grad_output.reshape(B, Q, Hh, C).astype(dt)
    grad_value = np.zeros(value.shape, dtype=dt)
    grad_loc = np.zeros(loc.shape, dtype=dt)
    grad_w = np.zeros(weights.shape, dtype=dt)
    one = dt(1)
    for l, lv in enumerate(levels):
        v_rows = value[:, lv.offset:lv.offset + lv.pixels].astype(dt).reshape(-1, C)
        gv_rows = np.zeros_like(v_rows)
        for qs in _blocks(Q):
            lw, lh, corners = _corners(loc[:, qs, :, l], lv.height, lv.width, dt)
            g = g_all[:, qs, :, None, :]
            attn = weights[:, qs, :, l].astype(dt)
            sampled = 0
            dots = []
            for idx, cw, valid in corners:
                vals = v_rows.take(_rows(idx, lv.pixels), axis=0)
                sampled = sampled + vals * cw[..., None]
                dots.append(np.where(valid, (vals * g).sum(axis=-1), dt(0)))
            grad_w[:, qs, :, l] = (sampled * g).sum(axis=-1)
            d00, d01, d10, d11 = dots
            d_wim = (one - lh) * (d01 - d00) + lh * (d11 - d10)
            d_him = (one - lw) * (d10 - d00) + lw * (d11 - d01)
            grad_loc[:, qs, :, l, :, 0] = attn * d_wim * dt(lv.width)
            grad_loc[:, qs, :, l, :, 1] = attn * d_him * dt(lv.height)

            nq = qs.stop - qs.start
            src = np.broadcast_to(np.arange(B * nq * Hh).reshape(B, nq, Hh, 1), attn.shape)
            dst, col, val = [], [], []
            for idx, cw, valid in corners:
                dst.append(_rows(idx, lv.pixels)[valid])
                col.append(src[valid])
                val.append((attn * cw)[valid])
            S = sparse.csr_matrix((np.concatenate(val), (np.concatenate(dst), np.concatenate(col))),
                                  shape=(gv_rows.shape[0], B * nq * Hh), dtype=dt)
            gv_rows += S @ g_all[:, qs].reshape(-1, C)
        grad_value[:, lv.offset:lv.offset + lv.pixels] = gv_rows.reshape(B, lv.pixels, Hh, C)
    return grad_value, grad_loc, grad_w


def _as_channel_last(p: FeaturePyramid) -> FeaturePyramid:
    return p if p.layout is Layout.CHANNEL_LAST else to_channel_last(p)


def msda_forward_ref(p: FeaturePyramid, s: SamplingTensors, cfg: MsdaConfig):
    """Reference forward. Returns ``(output, saved)``; ``saved`` is None in inference mode.

    Output has shape ``(batch, queries, heads * channels)`` with head-major
    flattening, in the pyramid's storage dtype.
    """
    p = _as_channel_last(p)
    check_inputs(p, s, cfg)
    out, sampled = forward_arrays(p.storage, p.levels, s.locations, s.weights, train=cfg.train)
    saved = SavedForward(sampled.astype(cfg.saved_dtype.np, copy=False)) if cfg.train else None
    return out.astype(p.dtype.np, copy=False), saved


def msda_backward_ref(p: FeaturePyramid, s: SamplingTensors, cfg: MsdaConfig,
                      grad_output: np.ndarray) -> MsdaGrads:
    """Reference backward; all gradients are float32 with their primal's shape."""
    p = _as_channel_last(p)
    grad_output = np.asarray(grad_output)
    check_inputs(p, s, cfg, grad_output)
    gv, gl, gw = backward_arrays(p.storage, p.levels, s.locations, s.weights, grad_output)
    return MsdaGrads(gv, gl, gw)


# -- gradient check --------------------------------------------------------

SMALL_SHAPES = [(5, 7), (3, 3)]


def small_config(mode=Mode.INFERENCE) -> MsdaConfig:
    return MsdaConfig.build(1, 4, 2, 4, SMALL_SHAPES, 3, mode)


def jitter_off_lattice(loc: np.ndarray, levels: Sequence[LevelSpec], margin: float = 0.05) -> np.ndarray:
    """Nudge locations so every ``w_im`` / ``h_im`` sits at least ``margin`` px from an integer."""
    loc = np.array(loc, dtype=np.float64)
    for l, lv in enumerate(levels):
        for axis, extent in ((0, lv.width), (1, lv.height)):
            pix = loc[:, :, :, l, :, axis] * extent - 0.5
            frac = pix - np.floor(pix)
            frac = np.clip(frac, margin, 1 - margin)
            loc[:, :, :, l, :, axis] = (np.floor(pix) + frac + 0.5) / extent
    return loc.astype(np.float32)


@dataclass
class TensorCheck:
    name: str
    max_abs: float
    max_rel: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    seed: int
    checks: list[TensorCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_name(self, name: str) -> TensorCheck:
        return next(c for c in self.checks if c.name == name)


def _compare(name, analytic, numeric, rel_tol, abs_floor) -> TensorCheck:
    analytic = np.asarray(analytic, dtype=np.float64)
    err = np.abs(analytic - numeric)
    mag = np.abs(numeric)
    score = err / np.maximum(rel_tol * mag, abs_floor)
    worst = np.unravel_index(int(np.argmax(score)), score.shape)
    rel = np.where(mag > abs_floor, err / np.maximum(mag, abs_floor), 0.0)
    return TensorCheck(name, float(err.max()), float(rel.max()),
                       tuple(int(i) for i in worst), bool(score.max() <= 1.0))


def _central_difference(loss: Callable[[], float], arr: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss()
        flat[i] = orig - step
        down = loss()
        flat[i] = orig
        grad.flat[i] = (up - down) / (2 * step)
    return grad


def grad_check(cfg: Optional[MsdaConfig] = None, seed: int = 0, step: float = 1e-3,
               rel_tol: float = 1e-3, abs_floor: float = 1e-5,
               backward: Optional[Callable] = None) -> GradCheckReport:
    """Compare a backward implementation against central finite differences.

    The finite differences are taken through the reference forward evaluated
    in float64 on the same (float32) instance; the analytic gradients come
    from ``backward(p, s, cfg, grad_output)`` (the reference by default).
    An element passes when ``|a - n| <= max(rel_tol * |n|, abs_floor)``.
    """
    if not (math.isfinite(step) and step > 0):
        raise InputError(f"finite-difference step must be positive, got {step}")
    cfg = cfg or small_config()
    backward = backward or msda_backward_ref
    p = make_pyramid(cfg.batch, cfg.heads, cfg.channels, cfg.level_shapes, fill="random", seed=seed)
    raw = random_sampling(cfg.batch, cfg.queries, cfg.heads, cfg.num_levels, cfg.points, seed=seed + 1,
                          spread=0.1)
    s = SamplingTensors(jitter_off_lattice(raw.locations, cfg.levels), raw.weights)
    g = np.random.default_rng(seed + 2).uniform(-1, 1, (cfg.batch, cfg.queries, cfg.embed_dim)).astype(np.float32)

    grads = backward(p, s, cfg.with_mode(Mode.INFERENCE), g)

    value = p.storage.astype(np.float64)
    loc = s.locations.astype(np.float64)
    w = s.weights.astype(np.float64)
    g64 = g.astype(np.float64)

    def loss() -> float:
        out, _ = forward_arrays(value, cfg.levels, loc, w, dtype=np.float64)
        return float(np.sum(out * g64))

    report = GradCheckReport(seed)
    for name, arr, analytic in (("grad_value", value, grads.grad_value),
                                ("grad_locations", loc, grads.grad_locations),
                                ("grad_weights", w, grads.grad_weights)):
        numeric = _central_difference(loss, arr, step)
        report.checks.append(_compare(name, analytic, numeric, rel_tol, abs_floor))
    return report
