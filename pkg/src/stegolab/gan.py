"""Small unconditional GAN: truncated latents, generator, discriminator, training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import List

import numpy as np

from . import ops as F
from .ops import Module, he_conv, he_dense
from .storage import load_checkpoint, save_checkpoint
from .tensor import Adam, Tape, Tensor, backward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def sample_latent(dim: int, truncation: float, seed, batch=None) -> np.ndarray:
    """Standard normal entries, each redrawn until it lies in [-truncation, truncation]."""
    if truncation <= 0:
        raise ValueError("truncation must be > 0")
    if dim <= 0:
        raise ValueError("latent dimension must be positive")
    rng = np.random.default_rng(seed)
    shape = (dim,) if batch is None else (batch, dim)
    z = rng.standard_normal(shape)
    bad = np.abs(z) > truncation
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > truncation
    return z


@dataclass
class GanConfig:
    height: int = 32
    width: int = 32
    channels: int = 1
    latent_dim: int = 32
    base: int = 32
    disc_width: int = 16
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def to_kv(self):
        return asdict(self)

    @classmethod
    def from_kv(cls, kv):
        kinds = {f.name: f.type for f in fields(cls)}
        return cls(**{k: (float(v) if kinds[k] in (float, "float") else int(float(v)))
                      for k, v in kv.items() if k in kinds})

    def validate(self):
        if self.height != self.width or self.height < 8 or self.height & (self.height - 1):
            raise ValueError("generator needs a square power-of-two image size >= 8")


class Generator(Module):
    """Dense projection to 4x4, then (upsample, 3x3 conv) stages, sigmoid output."""

    def __init__(self, config: GanConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng([config.seed, 303])
        b = config.base
        self.n_up = int(round(math.log2(config.height // 4)))
        self.add_param("fc.w", he_dense(rng, config.latent_dim, 16 * b, gain=1.0))
        self.add_param("fc.b", np.zeros(16 * b))
        width = b
        for i in range(self.n_up):
            nxt = max(b // (2 ** (i + 1)), 8)
            self.add_param(f"up{i}.w", he_conv(rng, 3, width, nxt))
            self.add_param(f"up{i}.b", np.zeros(nxt))
            width = nxt
        self.add_param("out.w", he_conv(rng, 3, width, config.channels, gain=1.0))
        self.add_param("out.b", np.zeros(config.channels))

    def _p(self, name, frozen):
        p = self.params[name]
        return Tensor(p.value) if frozen else p

    def __call__(self, z, frozen: bool = False) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        single = z.value.ndim == 1
        if single:
            z = z.reshape(1, -1)
        if z.shape[1] != self.config.latent_dim:
            raise ValueError(f"latent length {z.shape[1]} != {self.config.latent_dim}")
        p = lambda k: self._p(k, frozen)
        n = z.shape[0]
        h = F.leaky_relu((z @ p("fc.w") + p("fc.b")).reshape(n, 4, 4, self.config.base))
        for i in range(self.n_up):
            h = F.leaky_relu(F.conv2d(F.upsample2x(h), p(f"up{i}.w"), p(f"up{i}.b")))
        out = F.sigmoid(F.conv2d(h, p("out.w"), p("out.b")))
        return out.reshape(*out.shape[1:]) if single else out


class Discriminator(Module):
    """Conv stack with average pooling and a dense realism logit over the 4x-downsampled map."""

    def __init__(self, config: GanConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng([config.seed, 404])
        w, c = config.disc_width, config.channels
        self.add_param("c1.w", he_conv(rng, 3, c, w))
        self.add_param("c1.b", np.zeros(w))
        self.add_param("c2.w", he_conv(rng, 3, w, w))
        self.add_param("c2.b", np.zeros(w))
        self.add_param("c3.w", he_conv(rng, 3, w, w))
        self.add_param("c3.b", np.zeros(w))
        self.add_param("fc.w", he_dense(rng, w * (config.height // 4) * (config.width // 4), 1, gain=1.0))
        self.add_param("fc.b", np.zeros(1))

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        """(N,) logits."""
        p = (lambda k: Tensor(self.params[k].value)) if frozen else (lambda k: self.params[k])
        h = F.leaky_relu(F.conv2d(x - 0.5, p("c1.w"), p("c1.b")))
        h = F.avgpool2(h)
        h = F.leaky_relu(F.conv2d(h, p("c2.w"), p("c2.b")))
        h = F.avgpool2(h)
        h = F.leaky_relu(F.conv2d(h, p("c3.w"), p("c3.b")))
        feat = h.reshape(x.shape[0], -1)
        return (feat @ p("fc.w") + p("fc.b")).reshape(x.shape[0])


@dataclass
class GanLog:
    d_loss: List[float] = field(default_factory=list)
    g_loss: List[float] = field(default_factory=list)
    d_accuracy: List[float] = field(default_factory=list)   # real vs fixed-noise fakes, end of epoch
    batch_std: List[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,d_loss,g_loss,d_accuracy,batch_std\n")
            for i, row in enumerate(zip(self.d_loss, self.g_loss, self.d_accuracy, self.batch_std)):
                fh.write(f"{i}," + ",".join(f"{v:.8g}" for v in row) + "\n")


def save_gan(path, generator: Generator, discriminator: Discriminator) -> None:
    params = {f"g.{k}": v for k, v in generator.state_dict().items()}
    params.update({f"d.{k}": v for k, v in discriminator.state_dict().items()})
    meta = {"kind": "gan"}
    meta.update(generator.config.to_kv())
    save_checkpoint(path, params, meta)


def load_gan(path):
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "gan":
        raise ValueError(f"{path}: not a GAN checkpoint")
    cfg = GanConfig.from_kv(meta)
    g, d = Generator(cfg), Discriminator(cfg)
    g.load_state_dict({k[2:]: v for k, v in params.items() if k.startswith("g.")})
    d.load_state_dict({k[2:]: v for k, v in params.items() if k.startswith("d.")})
    return g, d


def _disc_accuracy(d: Discriminator, real: np.ndarray, fake: np.ndarray) -> float:
    lr = d(Tensor(real), frozen=True).value
    lf = d(Tensor(fake), frozen=True).value
    return float(0.5 * (np.mean(lr > 0) + np.mean(lf < 0)))


def train_gan(images, config: GanConfig, progress=None):
    """Alternating non-saturating GAN updates. Returns (generator, discriminator, log)."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("train_gan: empty corpus")
    if images.shape[1:] != (config.height, config.width, config.channels):
        raise ValueError(f"train_gan: images {images.shape[1:]} do not match config")
    g, d = Generator(config), Discriminator(config)
    opt_g = Adam(g.parameters(), lr=config.lr_g, beta1=0.5)
    opt_d = Adam(d.parameters(), lr=config.lr_d, beta1=0.5)
    n = len(images)
    bs = min(config.batch_size, n)
    fixed_z = np.random.default_rng([config.seed, 9]).standard_normal((min(64, n), config.latent_dim))
    glog = GanLog()
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch, 55])
        order = rng.permutation(n)
        dl, gl, count = 0.0, 0.0, 0
        for b in range(0, n - bs + 1, bs):
            real = images[order[b:b + bs]]
            z = rng.standard_normal((bs, config.latent_dim))
            fake = g(Tensor(z), frozen=True).value
            with Tape() as tape:
                lr_ = d(Tensor(real))
                lf_ = d(Tensor(fake))
                d_loss = (F.bce_with_logits(lr_, np.ones(bs)).mean()
                          + F.bce_with_logits(lf_, np.zeros(bs)).mean())
            opt_d.step(backward(tape, d_loss))
            z = rng.standard_normal((bs, config.latent_dim))
            with Tape() as tape:
                g_loss = F.bce_with_logits(d(g(Tensor(z)), frozen=True), np.ones(bs)).mean()
            grads = backward(tape, g_loss)
            opt_g.step(grads)
            if not (math.isfinite(d_loss.item()) and math.isfinite(g_loss.item())):
                raise TrainingDiverged(f"GAN diverged at epoch {epoch}")
            dl += d_loss.item()
            gl += g_loss.item()
            count += 1
        fakes = g(Tensor(fixed_z), frozen=True).value
        glog.d_loss.append(dl / max(count, 1))
        glog.g_loss.append(gl / max(count, 1))
        glog.d_accuracy.append(_disc_accuracy(d, images[:len(fixed_z)], fakes))
        glog.batch_std.append(float(fakes.std(axis=0).mean()))
        if glog.batch_std[-1] < 1e-3:
            log.warning("GAN epoch %d: generator batch std %.2e suggests mode collapse", epoch, glog.batch_std[-1])
        log.info("gan epoch %d: d=%.4f g=%.4f acc=%.3f", epoch, glog.d_loss[-1], glog.g_loss[-1], glog.d_accuracy[-1])
        if progress is not None:
            progress(epoch, glog)
    return g, d, glog
