"""Variance/residual maps, their threshold overlap, and waterfilling power allocation.

Binarization convention used throughout: a normalized value v is "high" when
v >= threshold and "low" otherwise, so ties go high.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .codec import CodecModel, encode, sample_message
from .corpus import Corpus


@dataclass
class PixelMap:
    values: np.ndarray   # (H, W, C), normalized to [0, 1] per channel
    vmin: np.ndarray     # (C,) raw minimum per channel
    vmax: np.ndarray     # (C,) raw maximum per channel

    @property
    def shape(self):
        return self.values.shape


def normalize(field) -> PixelMap:
    """Per-channel min-max normalization; a constant channel maps to all zeros."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim == 2:
        field = field[:, :, None]
    if field.ndim != 3:
        raise ValueError(f"expected an (H, W, C) field, got shape {field.shape}")
    lo = field.min(axis=(0, 1))
    hi = field.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    values = np.where(span > 0, (field - lo) / safe, 0.0)
    return PixelMap(values, lo, hi)


def _batch(images) -> np.ndarray:
    if isinstance(images, Corpus):
        images = images.images
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"expected a (N, H, W, C) batch, got shape {images.shape}")
    return images


def variance_map(images) -> PixelMap:
    """Unbiased per-pixel, per-channel variance across the batch, normalized."""
    images = _batch(images)
    if len(images) < 2:
        raise ValueError("variance_map needs at least 2 images")
    return normalize(images.var(axis=0, ddof=1))


def raw_residual(covers, stegos) -> np.ndarray:
    covers, stegos = _batch(covers), _batch(stegos)
    if covers.shape != stegos.shape:
        raise ValueError(f"cover/stego shapes differ: {covers.shape} vs {stegos.shape}")
    return np.abs(stegos - covers).mean(axis=0)


def residual_map_from(covers, stegos) -> PixelMap:
    """Batch mean of |s - x| per pixel and channel, normalized."""
    return normalize(raw_residual(covers, stegos))


def encode_batch(images, codec: CodecModel, message_seed, batch_size: int = 32):
    """Stego images for ``images`` with fresh per-image messages drawn from ``message_seed``."""
    images = _batch(images)
    n, h, w, _ = images.shape
    msgs = sample_message(h, w, codec.config.payload, message_seed, batch=n)
    stegos = np.empty_like(images)
    for b in range(0, n, batch_size):
        stegos[b:b + batch_size] = encode(images[b:b + batch_size], msgs[b:b + batch_size], codec).stego.value
    return stegos, msgs


def residual_map(images, codec: CodecModel, message_seed) -> PixelMap:
    stegos, _ = encode_batch(images, codec, message_seed)
    return residual_map_from(images, stegos)


def _values(m) -> np.ndarray:
    v = m.values if isinstance(m, PixelMap) else np.asarray(m, dtype=np.float64)
    return v[:, :, None] if v.ndim == 2 else v


def binarize(m, threshold: float = 0.5) -> np.ndarray:
    return _values(m) >= threshold


@dataclass
class OverlapResult:
    fraction: float               # |high & low| / |high| pooled over channels; NaN if undefined
    chance: float                 # |low| / total positions
    per_channel: List[float]
    per_channel_chance: List[float]
    n_high: int
    n_low: int

    @property
    def defined(self) -> bool:
        return not math.isnan(self.fraction)


def overlap_fraction(variance, residual, threshold: float = 0.5) -> OverlapResult:
    """Share of high-residual positions that fall in low-variance positions."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    v, r = _values(variance), _values(residual)
    if v.shape != r.shape:
        raise ValueError(f"map shapes differ: {v.shape} vs {r.shape}")
    high = r >= threshold
    low = ~(v >= threshold)
    both = high & low

    def ratio(a, b):
        return float(a) / float(b) if b else math.nan

    per = [ratio(both[..., c].sum(), high[..., c].sum()) for c in range(v.shape[2])]
    per_chance = [float(low[..., c].mean()) for c in range(v.shape[2])]
    return OverlapResult(ratio(both.sum(), high.sum()), float(low.mean()), per, per_chance,
                         int(high.sum()), int(low.sum()))


def low_variance_count(variance, threshold: float = 0.5) -> int:
    return int((~binarize(variance, threshold)).sum())


# ---------------------------------------------------------------------------
# waterfilling
# ---------------------------------------------------------------------------

@dataclass
class WaterfillResult:
    gamma2: np.ndarray       # power per element
    nu: float                # water level
    dual: float              # 1 / (nu ln 2)
    total_power: float
    capacity: float          # bits, sum log2(1 + gamma2 / sigma2)
    iterations: int


def capacity(sigma2, gamma2) -> float:
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    return float(np.sum(np.log2(1.0 + np.asarray(gamma2, dtype=np.float64) / sigma2)))


def waterfill(sigma2, power: float, rtol: float = 1e-12, max_iter: int = 400) -> WaterfillResult:
    """Optimal power split gamma_i^2 = (nu - sigma_i^2)^+ with sum gamma^2 = power.

    The water level is found by bisection on g(nu) = sum (nu - sigma^2)^+ - P
    over [min sigma^2, min sigma^2 + P] until |g| <= rtol * P.
    """
    s = np.asarray(sigma2, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("waterfill: empty noise vector")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ValueError("waterfill: every noise variance must be positive and finite")
    if not (power > 0 and math.isfinite(power)):
        raise ValueError("waterfill: power budget must be positive and finite")

    def g(nu):
        return np.maximum(nu - s, 0.0).sum() - power

    lo, hi = float(s.min()), float(s.min() + power)
    nu = 0.5 * (lo + hi)
    it = 0
    for it in range(1, max_iter + 1):
        nu = 0.5 * (lo + hi)
        val = g(nu)
        if abs(val) <= rtol * power:
            break
        if val > 0:
            hi = nu
        else:
            lo = nu
        if hi - lo <= 4 * np.finfo(float).eps * max(abs(hi), 1.0):
            break
    # the bracket has pinned the active set; solve it exactly to remove bisection residue
    active = s < nu
    if active.any():
        exact = (power + s[active].sum()) / active.sum()
        if np.array_equal(s < exact, active) or abs(g(exact)) <= abs(g(nu)):
            nu = exact
    gamma2 = np.maximum(nu - s, 0.0).reshape(np.shape(sigma2))
    return WaterfillResult(gamma2, float(nu), 1.0 / (nu * math.log(2.0)), float(gamma2.sum()),
                           capacity(np.reshape(s, np.shape(sigma2)), gamma2), it)


def waterfill_map(raw_variance, power: float, floor: float = 1e-12) -> PixelMap:
    """Normalized waterfilling allocation over pixels given raw per-pixel variances."""
    raw = np.asarray(raw_variance, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    res = waterfill(np.maximum(raw, floor), power)
    return normalize(res.gamma2)


def encoder_power(covers, stegos) -> float:
    """Total expected embedding power: sum over positions of batch-mean (s - x)^2."""
    covers, stegos = _batch(covers), _batch(stegos)
    return float(((stegos - covers) ** 2).mean(axis=0).sum())


def write_waterfill_csv(path, sigma2, result: WaterfillResult) -> None:
    s = np.asarray(sigma2, dtype=np.float64).ravel()
    g = np.asarray(result.gamma2).ravel()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "sigma2", "gamma2", "nu", "capacity"])
        for i, (a, b) in enumerate(zip(s, g)):
            w.writerow([i, f"{a:.12g}", f"{b:.12g}", f"{result.nu:.12g}", f"{result.capacity:.12g}"])


# ---------------------------------------------------------------------------
# quantized agreement
# ---------------------------------------------------------------------------

def quantized_similarity(a, b, threshold: float = 0.5) -> np.ndarray:
    """Per-channel percentage of positions where the binarized maps agree."""
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"map shapes differ: {va.shape} vs {vb.shape}")
    agree = (va >= threshold) == (vb >= threshold)
    return 100.0 * agree.mean(axis=(0, 1))


def shuffled_similarity(a, b, seed, threshold: float = 0.5, repeats: int = 20) -> np.ndarray:
    """Control: mean similarity of ``a`` against spatially shuffled copies of ``b``."""
    va, vb = _values(a), _values(b)
    rng = np.random.default_rng(seed)
    h, w, c = vb.shape
    out = np.zeros(c)
    for _ in range(repeats):
        perm = np.stack([rng.permutation(h * w) for _ in range(c)], axis=1)
        shuffled = np.take_along_axis(vb.reshape(h * w, c), perm, axis=0).reshape(h, w, c)
        out += quantized_similarity(va, shuffled, threshold)
    return out / repeats
