"""Shared builders and an independent scalar oracle."""

import math

import numpy as np

from msdakit.reference import MsdaConfig
from msdakit.tensor import SamplingTensors, from_array, make_pyramid, random_sampling


def scalar_bilinear(img, x, y):
    """Plain-Python bilinear sample with zero padding (align_corners=False)."""
    H, W = len(img), len(img[0])
    w_im = x * W - 0.5
    h_im = y * H - 0.5
    w0 = math.floor(w_im)
    h0 = math.floor(h_im)
    lw = w_im - w0
    lh = h_im - h0
    total = 0.0
    for dy, wy in ((0, 1 - lh), (1, lh)):
        for dx, wx in ((0, 1 - lw), (1, lw)):
            yy, xx = h0 + dy, w0 + dx
            if 0 <= yy < H and 0 <= xx < W:
                total += wy * wx * img[yy][xx]
    return total


def triple_loop_forward(value, shapes, loc, weights):
    """output[b,q,h*C+c] by explicit loops over every index."""
    B, _, Hh, C = value.shape
    _, Q, _, L, P, _ = loc.shape
    out = np.zeros((B, Q, Hh * C))
    offsets = np.cumsum([0] + [h * w for h, w in shapes])
    for b in range(B):
        for q in range(Q):
            for h in range(Hh):
                for c in range(C):
                    acc = 0.0
                    for l, (H, W) in enumerate(shapes):
                        plane = value[b, offsets[l]:offsets[l + 1], h, c].astype(np.float64).reshape(H, W)
                        img = plane.tolist()
                        for p in range(P):
                            x, y = float(loc[b, q, h, l, p, 0]), float(loc[b, q, h, l, p, 1])
                            acc += float(weights[b, q, h, l, p]) * scalar_bilinear(img, x, y)
                    out[b, q, h * C + c] = acc
    return out


def instance(b, q, h, c, shapes, p, seed=0, spread=0.2, mode="inference", dtype="f32"):
    cfg = MsdaConfig.build(b, q, h, c, shapes, p, mode)
    pyr = make_pyramid(b, h, c, shapes, dtype, "random", seed)
    s = random_sampling(b, q, h, len(shapes), p, seed=seed + 1, spread=spread)
    g = np.random.default_rng(seed + 2).uniform(-1, 1, (b, q, h * c)).astype(np.float32)
    return cfg, pyr, s, g


def one_point(value_2x2, x, y, w=1.0):
    """1x1x1 pyramid with one 2x2 level and a single sampling point."""
    v = np.asarray(value_2x2, np.float32).reshape(1, 4, 1, 1)
    p = from_array(v, [(2, 2)])
    loc = np.array([x, y], np.float32).reshape(1, 1, 1, 1, 1, 2)
    s = SamplingTensors(loc, np.full((1, 1, 1, 1, 1), w, np.float32))
    cfg = MsdaConfig.build(1, 1, 1, 1, [(2, 2)], 1)
    return cfg, p, s


def rel(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


# acceptance lines collected during the session and echoed in the terminal summary
ACCEPTANCE: list[str] = []


def record(number, title: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return line
