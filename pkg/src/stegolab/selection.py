"""Cover selection: optimize a generator latent so a frozen codec recovers the message better.

Two generators are supported: the diffusion sampler (the latent is x_T, found
by inverting the original cover once) and the GAN (the latent is z). Every
epoch renders a cover from the current latent, embeds the fixed message,
decodes it and takes one Adam step on the latent against the recovery loss.
The iterate with the lowest error is kept.
"""

from __future__ import annotations

import contextlib
import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import ops as F
from .channels import Detector, make_channel, steganalysis_logit_loss
from .codec import CodecModel, decode, encode, hard_decision
from .corpus import save_image
from .diffusion import NoiseSchedule, ddim_invert, reconstruct, to_image_space, to_model_space
from .gan import Generator, sample_latent
from .ops import Module
from .storage import write_kv
from .tensor import Adam, Tape, Tensor, backward

REGULARIZERS = ("none", "total-variation", "l1-to-original")
DEFAULT_LR = {"ddim": 0.03, "gan": 0.01}
DEFAULT_EPOCHS = {"ddim": 50, "gan": 100}
# Noisy channels: iterates are ranked by error averaged over this many fixed
# draws, shared across epochs, so the kept iterate is not just a lucky draw.
SCORE_DRAWS = 8
SCORE_KEY = 2 * 10**6


class SelectionAborted(RuntimeError):
    pass


@dataclass
class SelectionConfig:
    mode: str = "ddim"
    epochs: Optional[int] = None    # None -> mode default
    steps: int = 6                  # backward jumps per epoch (ddim)
    lr: Optional[float] = None      # None -> mode default
    regularizer: str = "none"
    reg_weight: float = 0.0
    channel: str = "none"           # none | jpeg | gaussian
    jpeg_quality: int = 75
    gaussian_beta: float = 0.0
    stegan_weight: float = 0.0
    truncation: float = 0.4
    sigma_convention: str = "squared"
    stochastic: int = 1
    seed: int = 0

    def resolved(self) -> "SelectionConfig":
        out = SelectionConfig(**asdict(self))
        if out.epochs is None:
            out.epochs = DEFAULT_EPOCHS.get(out.mode, 50)
        if out.lr is None:
            out.lr = DEFAULT_LR.get(out.mode, 0.0)
        return out

    def validate(self, diffusion_steps: Optional[int] = None) -> None:
        if self.mode not in ("ddim", "gan"):
            raise ValueError(f"mode must be ddim or gan, got {self.mode!r}")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode == "ddim" and diffusion_steps is not None and not 1 <= self.steps <= diffusion_steps:
            raise ValueError(f"steps must be in [1, {diffusion_steps}]")
        if (self.lr or 0.0) < 0 or self.reg_weight < 0 or self.stegan_weight < 0 or self.gaussian_beta < 0:
            raise ValueError("learning rate and weights must be >= 0")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.channel not in ("none", "jpeg", "gaussian"):
            raise ValueError(f"unknown channel {self.channel!r}")

    def to_kv(self):
        return asdict(self)

    @classmethod
    def from_kv(cls, kv):
        as_int = lambda v: int(float(v))  # noqa: E731
        conv = {f.name: str for f in fields(cls)}
        conv.update(epochs=as_int, steps=as_int, jpeg_quality=as_int, stochastic=as_int, seed=as_int,
                    lr=float, reg_weight=float, gaussian_beta=float, stegan_weight=float, truncation=float)
        return cls(**{k: (None if v in ("", "None") else conv[k](v)) for k, v in kv.items() if k in conv})


@dataclass
class EpochRecord:
    epoch: int
    error_rate: float
    loss: float
    regularizer: float
    seconds: float


@dataclass
class SelectionResult:
    cover: np.ndarray               # x*, the best iterate
    original: np.ndarray            # x0 (ddim) or G(z0) (gan)
    latent: np.ndarray              # latent that produced x*
    trajectory: List[EpochRecord]
    best_epoch: int
    baseline_error: float           # epoch-0 (unoptimized) error
    original_error: float = math.nan  # error of the original cover itself (ddim)
    baseline_cover: Optional[np.ndarray] = None

    @property
    def error(self) -> float:
        return self.trajectory[self.best_epoch].error_rate

    @property
    def seconds_per_epoch(self) -> float:
        return float(np.mean([r.seconds for r in self.trajectory]))


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------

def _as_batch(x: Tensor) -> Tensor:
    return x.reshape(1, *x.shape) if len(x.shape) == 3 else x


def total_variation(x: Tensor) -> Tensor:
    """Per image: mean absolute forward difference over all defined differences; summed over the batch."""
    x = _as_batch(x)
    n, h, w, c = x.shape
    parts, count = [], 0
    if h > 1:
        parts.append(F.abs_(F.slice_(x, 1, h, axis=1) - F.slice_(x, 0, h - 1, axis=1)).sum())
        count += (h - 1) * w * c
    if w > 1:
        parts.append(F.abs_(F.slice_(x, 1, w, axis=2) - F.slice_(x, 0, w - 1, axis=2)).sum())
        count += h * (w - 1) * c
    if not parts:
        return Tensor(0.0)
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return total * (1.0 / count)


def regularizer_loss(kind: str, x_current, x_original) -> Tensor:
    """Scalar penalty summed over the batch: none, total-variation or l1-to-original."""
    x = x_current if isinstance(x_current, Tensor) else Tensor(np.asarray(x_current, dtype=np.float64))
    if kind == "none":
        return Tensor(0.0)
    if kind == "total-variation":
        return total_variation(x)
    if kind == "l1-to-original":
        xb = _as_batch(x)
        ref = np.asarray(x_original, dtype=np.float64).reshape(xb.shape)
        per = F.abs_(xb - Tensor(ref)).mean(axis=(1, 2, 3))
        return per.sum()
    raise ValueError(f"unknown regularizer {kind!r}; expected one of {REGULARIZERS}")


@contextlib.contextmanager
def frozen(*modules: Optional[Module]):
    """Temporarily stop parameter gradients for every given module."""
    saved = []
    for mod in modules:
        if mod is None:
            continue
        for t in mod.parameters():
            saved.append((t, t.requires_grad))
            t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def _check_frozen(grads, modules) -> None:
    ids = {id(t) for mod in modules if mod is not None for t in mod.parameters()}
    if any(id(k) in ids for k in grads):
        raise SelectionAborted("frozen-model violation: a model parameter received a gradient")


# ---------------------------------------------------------------------------
# core loop
# ---------------------------------------------------------------------------

Renderer = Callable[[Tensor, int], Tensor]


def _optimize(latent0: np.ndarray, render: Renderer, msgs: np.ndarray, codec: CodecModel,
              config: SelectionConfig, originals: np.ndarray, detector: Optional[Detector],
              models: Sequence[Optional[Module]]):
    n = len(latent0)
    lat = Tensor(np.array(latent0, dtype=np.float64), requires_grad=True)
    opt = Adam([lat], lr=config.lr) if config.lr > 0 else None
    channel = make_channel(config.channel, config.jpeg_quality, config.gaussian_beta, config.seed)
    records: List[List[EpochRecord]] = [[] for _ in range(n)]
    best_err = np.full(n, np.inf)
    best_img = np.zeros_like(originals)
    best_lat = np.zeros_like(lat.value)
    best_epoch = np.zeros(n, dtype=int)
    first_img = None
    with frozen(codec, detector, *models):
        for e in range(config.epochs):
            t0 = time.perf_counter()
            with Tape() as tape:
                img = render(lat, e)
                stego = encode(img, msgs, codec).stego
                received = channel(stego, e) if channel is not None else stego
                logits = codec.decoder_logits(received, frozen=True)
                per_img = F.bce_with_logits(logits, Tensor(msgs)).mean(axis=(1, 2, 3))
                loss = per_img.sum()
                reg = None
                if config.regularizer != "none":
                    reg = regularizer_loss(config.regularizer, img, originals)
                    loss = loss + reg * config.reg_weight
                if config.stegan_weight > 0 and detector is not None:
                    loss = loss + steganalysis_logit_loss(detector, stego) * (config.stegan_weight * n)
            if not math.isfinite(loss.item()):
                raise SelectionAborted(f"non-finite selection loss at epoch {e}")
            errs = np.mean((logits.value >= 0) != (msgs > 0.5), axis=(1, 2, 3))
            score = errs
            if config.channel == "gaussian" and config.gaussian_beta > 0:
                score = np.mean([_errors_through(stego.value, msgs, codec, channel, (SCORE_KEY, d))
                                 for d in range(SCORE_DRAWS)], axis=0)
            if first_img is None:
                first_img = img.value.copy()
            improved = score < best_err
            best_err[improved] = score[improved]
            best_img[improved] = img.value[improved]
            best_lat[improved] = lat.value[improved]
            best_epoch[improved] = e
            grads = backward(tape, loss, wrt=[lat])
            _check_frozen(grads, [codec, detector, *models])
            g = grads[lat]
            if not np.all(np.isfinite(g)):
                raise SelectionAborted(f"non-finite latent gradient at epoch {e}")
            if opt is not None:
                opt.step({lat: g})
            dt = time.perf_counter() - t0
            reg_val = reg.item() / n if reg is not None else 0.0
            for i in range(n):
                records[i].append(EpochRecord(e, float(errs[i]), float(per_img.value[i]), reg_val, dt / n))
    return best_img, best_lat, records, best_epoch, first_img


def _errors_through(stego, msgs, codec, channel, key) -> np.ndarray:
    received = channel(Tensor(stego), key).value
    return np.mean(hard_decision(decode(received, codec)) != msgs, axis=(1, 2, 3))


def _errors(images, msgs, codec) -> np.ndarray:
    stego = encode(images, msgs, codec).stego.value
    return np.mean(hard_decision(decode(stego, codec)) != msgs, axis=(1, 2, 3))


def select_ddim_batch(covers, msgs, codec: CodecModel, diffusion, schedule: NoiseSchedule,
                      config: SelectionConfig, detector: Optional[Detector] = None,
                      index_offset: int = 0) -> List[SelectionResult]:
    """Select covers for a batch; image i uses seed ``config.seed + index_offset + i``."""
    config = config.resolved()
    config.validate(schedule.steps)
    covers = np.asarray(covers, dtype=np.float64)
    msgs = np.asarray(msgs, dtype=np.float64)
    with frozen(codec, diffusion):
        x_T = ddim_invert(to_model_space(covers), diffusion, schedule)
        orig_err = _errors(covers, msgs, codec)
    seeds = [[config.seed + index_offset + i, 71] for i in range(len(covers))]

    def render(lat: Tensor, epoch: int) -> Tensor:
        x0 = reconstruct(lat, diffusion, schedule, n_steps=config.steps, stochastic=bool(config.stochastic),
                         convention=config.sigma_convention, image_seeds=[s + [epoch] for s in seeds])
        return to_image_space(x0)

    best_img, best_lat, records, best_epoch, first = _optimize(
        x_T, render, msgs, codec, config, covers, detector, [diffusion])
    return [SelectionResult(best_img[i], covers[i], best_lat[i], records[i], int(best_epoch[i]),
                            records[i][0].error_rate, float(orig_err[i]), first[i])
            for i in range(len(covers))]


def select_ddim(x0, m, codec: CodecModel, diffusion, schedule: NoiseSchedule, config: SelectionConfig,
                detector: Optional[Detector] = None) -> SelectionResult:
    return select_ddim_batch(np.asarray(x0)[None], np.asarray(m)[None], codec, diffusion, schedule,
                             config, detector)[0]


def select_gan_batch(msgs, codec: CodecModel, generator: Generator, config: SelectionConfig,
                     detector: Optional[Detector] = None, z0=None, index_offset: int = 0) -> List[SelectionResult]:
    """Optimize one latent per message; z0 defaults to truncated-normal draws seeded per image."""
    config = config.resolved()
    config.validate()
    msgs = np.asarray(msgs, dtype=np.float64)
    d = generator.config.latent_dim
    if z0 is None:
        z0 = np.stack([sample_latent(d, config.truncation, [config.seed + index_offset + i, 72])
                       for i in range(len(msgs))])
    z0 = np.asarray(z0, dtype=np.float64).reshape(len(msgs), d)
    with frozen(generator):
        originals = generator(Tensor(z0), frozen=True).value

    def render(lat: Tensor, epoch: int) -> Tensor:
        return generator(lat, frozen=True)

    best_img, best_lat, records, best_epoch, first = _optimize(
        z0, render, msgs, codec, config, originals, detector, [generator])
    return [SelectionResult(best_img[i], originals[i], best_lat[i], records[i], int(best_epoch[i]),
                            records[i][0].error_rate, math.nan, first[i])
            for i in range(len(msgs))]


def select_gan(m, codec: CodecModel, generator: Generator, config: SelectionConfig,
               detector: Optional[Detector] = None, z0=None) -> SelectionResult:
    z = None if z0 is None else np.asarray(z0)[None]
    return select_gan_batch(np.asarray(m)[None], codec, generator, config, detector, z)[0]


def run_batched(fn, items: int, chunk: int, *arrays, **kwargs) -> List[SelectionResult]:
    """Call a ``select_*_batch`` function over chunks of the leading axis."""
    out: List[SelectionResult] = []
    for b in range(0, items, chunk):
        out.extend(fn(*(a[b:b + chunk] for a in arrays), index_offset=b, **kwargs))
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_selection(result: SelectionResult, directory, stem: str, config: SelectionConfig):
    """Write x0/x* PNGs, trajectory CSV, config sidecar; timings go to a separate CSV.

    Returns (deterministic files, timing file).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    orig = directory / f"{stem}_original.png"
    best = directory / f"{stem}_selected.png"
    save_image(orig, np.clip(result.original, 0, 1))
    save_image(best, np.clip(result.cover, 0, 1))
    traj = directory / f"{stem}_trajectory.csv"
    with open(traj, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "error_rate", "loss", "regularizer"])
        for r in result.trajectory:
            w.writerow([r.epoch, f"{r.error_rate:.10g}", f"{r.loss:.10g}", f"{r.regularizer:.10g}"])
    side = directory / f"{stem}_config.txt"
    meta = config.resolved().to_kv()
    meta.update({"best_epoch": result.best_epoch, "best_error": result.error,
                 "baseline_error": result.baseline_error, "original_error": result.original_error})
    write_kv(side, meta)
    timing = directory / f"{stem}_timing.csv"
    with open(timing, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "seconds"])
        for r in result.trajectory:
            w.writerow([r.epoch, f"{r.seconds:.6f}"])
    return [orig, best, traj, side], timing
