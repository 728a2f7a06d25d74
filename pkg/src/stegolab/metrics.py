"""Recovery error, image quality and image complexity measurements."""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SOBEL_THRESHOLD = 0.25
COLOR_BITS = 5
DEFLATE_LEVEL = 9

LUMA = np.array([0.299, 0.587, 0.114])


def error_rate(m, m_hat_hard) -> float:
    """Fraction of differing bits."""
    m = np.asarray(m)
    m_hat_hard = np.asarray(m_hat_hard)
    if m.shape != m_hat_hard.shape:
        raise ValueError(f"error_rate: shapes differ {m.shape} vs {m_hat_hard.shape}")
    return float(np.mean(m != m_hat_hard))


def psnr(x, s) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` when identical."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x.shape != s.shape:
        raise ValueError(f"psnr: shapes differ {x.shape} vs {s.shape}")
    mse = np.mean((x - s) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def to_gray(image) -> np.ndarray:
    """(H, W) luma view of an (H, W), (H, W, 1) or (H, W, 3) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 1:
        return image[:, :, 0]
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ LUMA
    raise ValueError(f"expected a single gray or RGB image, got shape {image.shape}")


def _window_means(a: np.ndarray, k: int) -> np.ndarray:
    # all k x k windows, stride 1, via a summed-area table
    c = np.pad(np.cumsum(np.cumsum(a, 0), 1), ((1, 0), (1, 0)))
    return (c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]) / (k * k)


def ssim(x, s, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all uniform ``window`` x ``window`` windows (stride 1)."""
    gx, gs = to_gray(x), to_gray(s)
    if gx.shape != gs.shape:
        raise ValueError(f"ssim: shapes differ {gx.shape} vs {gs.shape}")
    if min(gx.shape) < window:
        raise ValueError(f"ssim: image {gx.shape} smaller than {window}x{window} window")
    mx, ms = _window_means(gx, window), _window_means(gs, window)
    vx = _window_means(gx * gx, window) - mx * mx
    vs = _window_means(gs * gs, window) - ms * ms
    cov = _window_means(gx * gs, window) - mx * ms
    num = (2 * mx * ms + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx * mx + ms * ms + SSIM_C1) * (vx + vs + SSIM_C2)
    return float(np.mean(num / den))


def _shannon(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def entropy(image) -> float:
    q = np.round(to_gray(image) * 255).astype(np.int64)
    return _shannon(np.bincount(q.ravel(), minlength=256))


def edge_density(image, threshold: float = SOBEL_THRESHOLD) -> float:
    """Fraction of pixels whose Sobel gradient magnitude exceeds ``threshold``."""
    g = np.round(to_gray(image) * 255) / 255
    gx = ndimage.sobel(g, axis=1, mode="nearest")
    gy = ndimage.sobel(g, axis=0, mode="nearest")
    return float(np.mean(np.hypot(gx, gy) > threshold))


def compression_ratio(image) -> float:
    """Raw 8-bit byte count over deflate-compressed byte count."""
    raw = np.round(np.asarray(image, dtype=np.float64) * 255).astype(np.uint8).tobytes()
    return len(raw) / len(zlib.compress(raw, DEFLATE_LEVEL))


def color_diversity(image, bits: int = COLOR_BITS) -> float:
    """Shannon index over colors quantized to ``bits`` bits per channel."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    q = np.round(img * 255).astype(np.int64) >> (8 - bits)
    codes = np.zeros(q.shape[:2], dtype=np.int64)
    for ch in range(q.shape[2]):
        codes = (codes << bits) | q[:, :, ch]
    _, counts = np.unique(codes.ravel(), return_counts=True)
    return _shannon(counts)


@dataclass
class Complexity:
    entropy: float
    edge_density: float
    compression_ratio: float
    color_diversity: float


def complexity_metrics(image) -> Complexity:
    return Complexity(entropy(image), edge_density(image), compression_ratio(image), color_diversity(image))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    image: str
    error_rate: float
    psnr: float
    ssim: float
    entropy: float
    edge_density: float
    compression_ratio: float
    color_diversity: float
    brisque: str = "unavailable"


def metric_report(name: str, cover, stego, m, m_hat_hard) -> MetricReport:
    c = complexity_metrics(cover)
    return MetricReport(name, error_rate(m, m_hat_hard), psnr(cover, stego), ssim(cover, stego),
                        c.entropy, c.edge_density, c.compression_ratio, c.color_diversity)


def _cell(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.10g}"
    return str(v)


def write_metric_reports(path, reports: Sequence[MetricReport]) -> None:
    header = [f.name for f in fields(MetricReport)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in reports:
            row = asdict(r)
            w.writerow([_cell(row[k]) for k in header])


def pearson(a, b) -> float:
    """Pearson r; NaN when either vector has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson: need two 1-D vectors of equal length")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if na == 0 or nb == 0:
        return math.nan
    return float(np.clip((da * db).sum() / (na * nb), -1.0, 1.0))


def correlation_report(metrics: Mapping[str, Sequence[float]], targets: Mapping[str, Sequence[float]],
                       path=None) -> Dict[tuple, float]:
    """Pearson r for every (metric, target) pair, e.g. targets = {error, psnr}.

    Returns {(metric, target): r}; writes a CSV (metric, target, pearson_r, n)
    when ``path`` is given. Undefined coefficients are NaN.
    """
    lengths = {len(v) for v in list(metrics.values()) + list(targets.values())}
    if len(lengths) != 1:
        raise ValueError(f"correlation_report: vectors differ in length {sorted(lengths)}")
    n = lengths.pop()
    if n < 3:
        raise ValueError("correlation_report: need at least 3 samples")
    table = {(mk, tk): pearson(mv, tv) for mk, mv in metrics.items() for tk, tv in targets.items()}
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "target", "pearson_r", "n"])
            for (mk, tk), r in table.items():
                w.writerow([mk, tk, _cell(r), n])
            for tk in targets:
                w.writerow(["brisque", tk, "unavailable", n])
    return table
