"""Lossy channels placed after the encoder, and a small steganalysis detector.

Channel functions take a stego batch Tensor (N, H, W, C) and return the
received Tensor; their gradients are straight-through (JPEG) or pass the
additive noise as a constant (Gaussian).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.fft import dctn, idctn

from . import ops as F
from .ops import Module, he_conv, he_dense
from .storage import load_checkpoint, save_checkpoint
from .tensor import Adam, Tape, Tensor, backward

log = logging.getLogger(__name__)

# canonical luminance table (quality 50)
BASE_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def scaled_table(quality: int) -> np.ndarray:
    """Quantization table for ``quality`` in [1, 100] (integer entries in [1, 255])."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    factor = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((BASE_LUMA_TABLE * factor + 50) / 100), 1, 255)


@dataclass(frozen=True)
class JpegConfig:
    quality: int = 75

    @property
    def table(self) -> np.ndarray:
        return scaled_table(self.quality)

    def to_kv(self):
        return {"quality": self.quality, "table": [int(v) for v in self.table.ravel()]}


def _blocks(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // 8, 8, w // 8, 8, c).transpose(0, 1, 3, 5, 2, 4)


def _unblocks(b: np.ndarray, shape) -> np.ndarray:
    return b.transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def jpeg_compress(x: np.ndarray, config: JpegConfig) -> np.ndarray:
    """Pixel-domain JPEG round trip on a (N, H, W, C) batch in [0, 1].

    Coefficients are measured in 8-bit units (x 255) so the integer table
    applies as in baseline JPEG; each channel uses the luminance table.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise ValueError(f"JPEG needs height and width divisible by 8, got {x.shape[1]}x{x.shape[2]}")
    q = config.table
    coef = dctn(_blocks(x - 0.5) * 255.0, type=2, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / q) * q
    out = idctn(coef, type=2, axes=(-2, -1), norm="ortho") / 255.0
    out = np.clip(_unblocks(out, x.shape) + 0.5, 0.0, 1.0)
    return out[0] if squeeze else out


def jpeg_round_trip(s, config: JpegConfig) -> Tensor:
    """JPEG forward with identity backward."""
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
    return F.straight_through(s, lambda v: jpeg_compress(v, config))


def gaussian_channel(s, beta: float, seed) -> Tensor:
    """clamp01(s + N(0, beta)); noise is a constant under differentiation."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
    if beta == 0:
        return s
    noise = F.gaussian_sample(s.shape, seed, std=math.sqrt(beta))
    return F.clamp01_ste(s + noise)


ChannelFn = Callable[[Tensor, object], Tensor]


def make_channel(kind: str, quality: int = 75, beta: float = 0.0, seed: int = 0) -> Optional[ChannelFn]:
    """Channel hook ``fn(s, key)`` for codec training and cover selection.

    ``key`` varies per batch/epoch so Gaussian noise is redrawn.
    """
    if kind in ("none", "", None):
        return None
    if kind == "jpeg":
        cfg = JpegConfig(quality)
        return lambda s, key: jpeg_round_trip(s, cfg)
    if kind == "gaussian":
        return lambda s, key: gaussian_channel(s, beta, [seed, *np.atleast_1d(key).tolist()])
    raise ValueError(f"unknown channel kind {kind!r}")


# ---------------------------------------------------------------------------
# detector
# ---------------------------------------------------------------------------

KV_KERNEL = np.array([
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
], dtype=np.float64) / 12.0


@dataclass
class DetectorConfig:
    channels: int = 1
    width: int = 8
    lr: float = 2e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def to_kv(self):
        return dict(self.__dict__)

    @classmethod
    def from_kv(cls, kv):
        return cls(**{k: float(v) if k == "lr" else int(float(v))
                      for k, v in kv.items() if k in cls.__dataclass_fields__})


class Detector(Module):
    """Fixed high-pass residual filter, two conv stages, two logits (cover, stego)."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng([config.seed, 505])
        c, w = config.channels, config.width
        hp = np.zeros((5, 5, c, c))
        for ch in range(c):
            hp[:, :, ch, ch] = KV_KERNEL
        self.front = hp
        self.add_param("c1.w", he_conv(rng, 3, c, w) * 10.0)
        self.add_param("c1.b", np.zeros(w))
        self.add_param("c2.w", he_conv(rng, 3, w, 2 * w))
        self.add_param("c2.b", np.zeros(2 * w))
        self.add_param("fc.w", he_dense(rng, 2 * w, 2, gain=1.0))
        self.add_param("fc.b", np.zeros(2))

    def _p(self, name, frozen):
        p = self.params[name]
        return Tensor(p.value) if frozen else p

    def logits(self, s: Tensor, frozen: bool = False) -> Tensor:
        """(N, 2) logits; column 0 = cover, column 1 = stego."""
        p = lambda k: self._p(k, frozen)
        r = F.conv2d(s, Tensor(self.front))
        h = F.tanh(F.abs_(F.conv2d(r, p("c1.w"), p("c1.b"))))
        h = F.avgpool2(h)
        h = F.relu(F.conv2d(h, p("c2.w"), p("c2.b")))
        h = F.avgpool2(h)
        n = s.shape[0]
        feat = h.mean(axis=(1, 2))
        return feat.reshape(n, 2 * self.config.width) @ p("fc.w") + p("fc.b")

    def save(self, path) -> None:
        meta = {"kind": "detector"}
        meta.update(self.config.to_kv())
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "Detector":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "detector":
            raise ValueError(f"{path}: not a detector checkpoint")
        model = cls(DetectorConfig.from_kv(meta))
        model.load_state_dict(params)
        return model


def _margin(logits: Tensor) -> Tensor:
    return F.slice_(logits, 1, 2) - F.slice_(logits, 0, 1)


@dataclass
class DetectorLog:
    loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    heldout_accuracy: float = float("nan")


class TrainingDiverged(RuntimeError):
    pass


def detector_accuracy(detector: Detector, covers, stegos) -> float:
    c = np.mean(predict_stego(detector, covers) == 0)
    s = np.mean(predict_stego(detector, stegos) == 1)
    return float(0.5 * (c + s))


def predict_stego(detector: Detector, images, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = []
    for b in range(0, len(images), batch_size):
        lg = detector.logits(Tensor(images[b:b + batch_size]), frozen=True).value
        out.append(lg[:, 1] > lg[:, 0])
    return np.concatenate(out).astype(int) if out else np.zeros(0, dtype=int)


def train_detector(covers, stegos, config: DetectorConfig, heldout_fraction: float = 0.2):
    """Cover-vs-stego classifier trained with logistic loss on balanced batches."""
    covers = np.asarray(covers, dtype=np.float64)
    stegos = np.asarray(stegos, dtype=np.float64)
    if len(covers) == 0 or len(stegos) == 0:
        raise ValueError("train_detector: cover and stego sets must be nonempty")
    if covers.shape[1:] != stegos.shape[1:]:
        raise ValueError(f"train_detector: image dims differ {covers.shape[1:]} vs {stegos.shape[1:]}")
    n = min(len(covers), len(stegos))
    rng = np.random.default_rng([config.seed, 77])
    order = rng.permutation(n)
    n_held = int(round(n * heldout_fraction)) if n >= 5 else 0
    held, train = order[:n_held], order[n_held:]
    model = Detector(config)
    opt = Adam(model.parameters(), lr=config.lr)
    half = max(1, config.batch_size // 2)
    dlog = DetectorLog()
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, epoch, 78]).permutation(train)
        total, correct, count = 0.0, 0, 0
        for b in range(0, len(perm), half):
            idx = perm[b:b + half]
            x = np.concatenate([covers[idx], stegos[idx]])
            y = np.concatenate([np.zeros(len(idx)), np.ones(len(idx))])[:, None]
            with Tape() as tape:
                margin = _margin(model.logits(Tensor(x)))
                loss = F.bce_with_logits(margin, y).mean()
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"detector diverged at epoch {epoch}")
            opt.step(backward(tape, loss))
            total += loss.item() * len(x)
            correct += int(np.sum((margin.value > 0) == (y > 0.5)))
            count += len(x)
        dlog.loss.append(total / max(count, 1))
        dlog.train_accuracy.append(correct / max(count, 1))
        log.info("detector epoch %d: loss=%.4f acc=%.3f", epoch, dlog.loss[-1], dlog.train_accuracy[-1])
    if n_held:
        dlog.heldout_accuracy = detector_accuracy(model, covers[held], stegos[held])
    return model, dlog


def detection_rate(detector: Detector, images) -> float:
    """Percentage of images whose stego logit exceeds the cover logit."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return float("nan")
    return 100.0 * float(np.mean(predict_stego(detector, images)))


def steganalysis_logit_loss(detector: Detector, s: Tensor) -> Tensor:
    """Mean over images of the stego logit where it beats the cover logit, else 0.

    The detector stays frozen: no parameter gradients are produced.
    """
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
    logits = detector.logits(s, frozen=True)
    flagged = (logits.value[:, 1] > logits.value[:, 0]).astype(np.float64)[:, None]
    return (F.slice_(logits, 1, 2) * Tensor(flagged)).mean()


def write_detection_csv(path, rows) -> None:
    """rows: iterable of (payload, scenario, detection_pct, error_pct)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["payload", "scenario", "detection_pct", "error_pct"])
        for payload, scenario, det, err in rows:
            w.writerow([payload, scenario, f"{det:.6g}", f"{err:.6g}"])
