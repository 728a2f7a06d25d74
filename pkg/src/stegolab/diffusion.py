"""Toy DDIM: schedule, noise predictor, deterministic inversion and stochastic sampling.

Diffusion math runs in "model space": images in [0, 1] are mapped to [-1, 1]
by :func:`to_model_space` before inversion, and generated samples are mapped
back with :func:`to_image_space`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Sequence

import numpy as np

from . import ops as F
from .ops import Module, he_conv, he_dense
from .storage import load_checkpoint, save_checkpoint
from .tensor import Adam, Tape, Tensor, backward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray        # index 1..T (index 0 unused, 0.0)
    alphas: np.ndarray       # index 1..T (index 0 is 1.0)
    alpha_bar: np.ndarray    # index 0..T, alpha_bar[0] == 1

    def to_kv(self):
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(steps: int = 40, beta_start: float = 1e-4, beta_end: float = 0.05) -> NoiseSchedule:
    """Linear beta schedule with cumulative products ``alpha_bar``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, steps)])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    return NoiseSchedule(steps, beta_start, beta_end, betas, alphas, alpha_bar)


def sigma_sq_between(ab_t: float, ab_prev: float) -> float:
    """The sampler's sigma_t^2 for a jump between cumulative products ab_t -> ab_prev.

    sqrt(0.5 * (1 - ab_t/ab_prev) * (1 - ab_prev)/(1 - ab_t)), i.e. the
    expression labelled sigma_t^2 taken literally (it carries an outer square root).
    """
    if ab_t >= 1.0:
        return 0.0
    inner = 0.5 * (1.0 - ab_t / ab_prev) * (1.0 - ab_prev) / (1.0 - ab_t)
    return math.sqrt(max(inner, 0.0))


def sigma_sq(t: int, schedule: NoiseSchedule) -> float:
    if not 2 <= t <= schedule.steps:
        raise ValueError(f"sigma_t: t must be in [2, {schedule.steps}], got {t}")
    return sigma_sq_between(schedule.alpha_bar[t], schedule.alpha_bar[t - 1])


def sigma_t(t: int, schedule: NoiseSchedule) -> float:
    """Noise scale sigma_t = sqrt(sigma_t^2)."""
    return math.sqrt(sigma_sq(t, schedule))


# ---------------------------------------------------------------------------
# noise predictor
# ---------------------------------------------------------------------------

@dataclass
class DiffusionConfig:
    channels: int = 1
    width: int = 32
    emb_dim: int = 8
    steps: int = 40
    beta_start: float = 1e-4
    beta_end: float = 0.05
    lr: float = 2e-3
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0

    def to_kv(self):
        return asdict(self)

    @classmethod
    def from_kv(cls, kv):
        kinds = {f.name: f.type for f in fields(cls)}
        return cls(**{k: (float(v) if kinds[k] in (float, "float") else int(float(v)))
                      for k, v in kv.items() if k in kinds})


DILATIONS = (1, 2, 4)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class NoisePredictor(Module):
    """Three dilated 3x3 convs with a time embedding added after the first."""

    def __init__(self, config: DiffusionConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng([config.seed, 202])
        c, w = config.channels, config.width
        self.add_param("c1.w", he_conv(rng, 3, c, w))
        self.add_param("c1.b", np.zeros(w))
        self.add_param("t.w", he_dense(rng, config.emb_dim, w, gain=1.0))
        self.add_param("t.b", np.zeros(w))
        self.add_param("c2.w", he_conv(rng, 3, w, w))
        self.add_param("c2.b", np.zeros(w))
        # zero output layer: the untrained predictor returns 0
        self.add_param("c3.w", np.zeros((3, 3, w, c)))
        self.add_param("c3.b", np.zeros(c))

    def eps(self, x_t: Tensor, t) -> Tensor:
        """Predicted noise for x_t (N, H, W, C) at scalar or per-image timestep t."""
        n = x_t.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        emb = Tensor(time_embedding(t_arr, self.config.emb_dim))
        p = self.params
        te = (emb @ p["t.w"] + p["t.b"]).reshape(n, 1, 1, self.config.width)
        h = F.conv2d(x_t, p["c1.w"], p["c1.b"], dilation=DILATIONS[0]) + te
        h = F.leaky_relu(h)
        h = F.leaky_relu(F.conv2d(h, p["c2.w"], p["c2.b"], dilation=DILATIONS[1]))
        return F.conv2d(h, p["c3.w"], p["c3.b"], dilation=DILATIONS[2])

    def save(self, path) -> None:
        meta = {"kind": "diffusion"}
        meta.update(self.config.to_kv())
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "NoisePredictor":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "diffusion":
            raise ValueError(f"{path}: not a diffusion checkpoint")
        model = cls(DiffusionConfig.from_kv(meta))
        model.load_state_dict(params)
        return model

    def schedule(self) -> NoiseSchedule:
        c = self.config
        return build_schedule(c.steps, c.beta_start, c.beta_end)


def to_model_space(images: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(images, dtype=np.float64) - 1.0


def to_image_space(x: Tensor) -> Tensor:
    """Map model space back to [0, 1] (straight-through clamp)."""
    return F.clamp01_ste(x * 0.5 + 0.5)


def train_noise_predictor(images: np.ndarray, config: DiffusionConfig, progress=None):
    """Epsilon-prediction MSE with uniform t in 1..T. Returns (model, per-epoch losses)."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("train_noise_predictor: empty corpus")
    schedule = build_schedule(config.steps, config.beta_start, config.beta_end)
    model = NoisePredictor(config)
    opt = Adam(model.parameters(), lr=config.lr)
    data = to_model_space(images)
    n = len(data)
    bs = min(config.batch_size, n)
    losses: List[float] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch, 33])
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b in range(0, n - bs + 1, bs):
            x0 = data[order[b:b + bs]]
            t = rng.integers(1, config.steps + 1, size=len(x0))
            eps = rng.standard_normal(x0.shape)
            ab = schedule.alpha_bar[t][:, None, None, None]
            x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
            with Tape() as tape:
                loss = F.mse(model.eps(Tensor(x_t), t), Tensor(eps))
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"noise predictor diverged at epoch {epoch}, batch {b}")
            opt.step(backward(tape, loss))
            total += loss.item()
            count += 1
        losses.append(total / max(count, 1))
        log.info("ddpm epoch %d: loss=%.5f", epoch, losses[-1])
        if progress is not None:
            progress(epoch, losses[-1])
    return model, losses


# ---------------------------------------------------------------------------
# DDIM equations
# ---------------------------------------------------------------------------

def f_theta(x_t: Tensor, t: int, model, schedule: NoiseSchedule, eps: Optional[Tensor] = None) -> Tensor:
    """Predicted clean sample (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)."""
    ab = float(schedule.alpha_bar[t])
    if eps is None:
        eps = model.eps(x_t, t)
    return (x_t - eps * math.sqrt(1.0 - ab)) / math.sqrt(ab)


def ddim_invert(x0, model, schedule: NoiseSchedule, steps: Optional[Sequence[int]] = None) -> np.ndarray:
    """Deterministic forward pass t -> t+1 from a model-space x0 to the latent x_T."""
    x = Tensor(np.asarray(x0, dtype=np.float64))
    seq = list(range(schedule.steps + 1)) if steps is None else list(steps)
    for t, t_next in zip(seq[:-1], seq[1:]):
        e = model.eps(x, t)
        f = f_theta(x, t, model, schedule, eps=e)
        ab_next = float(schedule.alpha_bar[t_next])
        x = f * math.sqrt(ab_next) + e * math.sqrt(1.0 - ab_next)
    return x.value


def ddim_backward_step(x_t: Tensor, t: int, model, schedule: NoiseSchedule, sigma: float = 0.0,
                       seed=None, t_prev: Optional[int] = None, convention: str = "squared",
                       noise: Optional[np.ndarray] = None) -> Tensor:
    """One sampler step x_t -> x_{t_prev} (t_prev defaults to t - 1).

    ``sigma`` is sigma_t; the deterministic terms use sigma^2 inside the square
    root. With convention="squared" the injected noise is sigma^2 * eps; with
    "conventional" it is sigma * eps. eps is drawn from ``seed`` unless a
    unit-normal ``noise`` array is supplied.
    """
    if t_prev is None:
        t_prev = t - 1
    ab_prev = float(schedule.alpha_bar[t_prev])
    var = sigma * sigma
    radicand = 1.0 - ab_prev - var
    if radicand < -1e-12:
        raise ValueError(f"ddim step {t}->{t_prev}: sigma^2={var:.4g} exceeds 1 - alpha_bar_prev")
    radicand = max(radicand, 0.0)
    e = model.eps(x_t, t)
    f = f_theta(x_t, t, model, schedule, eps=e)
    out = f * math.sqrt(ab_prev) + e * math.sqrt(radicand)
    if sigma > 0:
        if convention == "squared":
            coeff = var
        elif convention == "conventional":
            coeff = sigma
        else:
            raise ValueError(f"unknown convention {convention!r}")
        if noise is not None:
            out = out + Tensor(np.asarray(noise, dtype=np.float64) * coeff)
        else:
            out = out + F.gaussian_sample(x_t.shape, seed, std=coeff)
    return out


def strided_timesteps(total: int, count: int) -> List[int]:
    """count+1 increasing timesteps from 0 to total, evenly spread."""
    if not 1 <= count <= total:
        raise ValueError(f"step count must be in [1, {total}], got {count}")
    return [int(v) for v in np.round(np.linspace(0, total, count + 1))]


def capped_sigma(ab_t: float, ab_prev: float) -> float:
    """sigma for a strided jump, capped so the deterministic radicand stays >= 0."""
    var = min(sigma_sq_between(ab_t, ab_prev), 1.0 - ab_prev)
    return math.sqrt(max(var, 0.0))


def _seed_list(seed) -> list:
    return [int(v) for v in np.atleast_1d(seed)]


def per_image_noise(seeds: Sequence, k: int, image_shape) -> np.ndarray:
    """Unit-normal noise for jump ``k``, one independent stream per image seed."""
    return np.stack([np.random.default_rng(_seed_list(s) + [k]).standard_normal(image_shape) for s in seeds])


def reconstruct(x_T, model, schedule: NoiseSchedule, n_steps: Optional[int] = None,
                stochastic: bool = False, seed=0, convention: str = "squared",
                image_seeds: Optional[Sequence] = None) -> Tensor:
    """Run the sampler from x_T down to t=0 over ``n_steps`` strided jumps.

    Differentiable w.r.t. ``x_T`` when it is a grad-requiring Tensor. Per-jump
    noise seeds are derived from ``seed`` and the jump index; with
    ``image_seeds`` every image of the batch gets its own noise stream, so a
    result does not depend on which batch the image was processed in.
    """
    x = x_T if isinstance(x_T, Tensor) else Tensor(np.asarray(x_T, dtype=np.float64))
    if image_seeds is not None and len(image_seeds) != x.shape[0]:
        raise ValueError("reconstruct: need one seed per image")
    seq = strided_timesteps(schedule.steps, n_steps or schedule.steps)
    for k in range(len(seq) - 1, 0, -1):
        t, t_prev = seq[k], seq[k - 1]
        sig = capped_sigma(schedule.alpha_bar[t], schedule.alpha_bar[t_prev]) if stochastic else 0.0
        noise = None
        if sig > 0 and image_seeds is not None:
            noise = per_image_noise(image_seeds, k, x.shape[1:])
        x = ddim_backward_step(x, t, model, schedule, sig, seed=_seed_list(seed) + [k],
                               t_prev=t_prev, convention=convention, noise=noise)
    return x


class ClosedFormDelta:
    """Exact noise predictor for data concentrated on one point ``x_star``."""

    def __init__(self, x_star: np.ndarray, schedule: NoiseSchedule):
        self.x_star = np.asarray(x_star, dtype=np.float64)
        self.schedule = schedule

    def eps(self, x_t: Tensor, t) -> Tensor:
        ab = float(self.schedule.alpha_bar[int(t)])
        if ab >= 1.0:
            return x_t * 0.0
        return (x_t - Tensor(self.x_star) * math.sqrt(ab)) / math.sqrt(1.0 - ab)


class ConstantPredictor:
    """Returns the same noise field regardless of input."""

    def __init__(self, field: np.ndarray):
        self.field = np.asarray(field, dtype=np.float64)

    def eps(self, x_t: Tensor, t) -> Tensor:
        return Tensor(np.broadcast_to(self.field, x_t.shape).copy())
