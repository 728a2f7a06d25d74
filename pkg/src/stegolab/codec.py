"""Learned iterative steganographic codec.

The encoder unrolls ``delta_t = delta_{t-1} + eta * g(grad, x, delta_{t-1})``
for ``iterations`` steps, where ``grad`` is the gradient of the per-image
objective (message BCE through the decoder plus weighted MSE) with respect to
``delta``. That gradient is fed to ``g`` as a constant feature map; it is not
itself differentiated (no second-order terms).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops as F
from .ops import Module, he_conv, he_dense
from .storage import load_checkpoint, save_checkpoint
from .tensor import Adam, Tape, Tensor, backward

log = logging.getLogger(__name__)

PROB_EPS = 1e-7

ChannelFn = Callable[[Tensor, int], Tensor]
PenaltyFn = Callable[[Tensor], Tensor]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CodecConfig:
    channels: int = 1
    payload: int = 1
    hidden: int = 1
    g_width: int = 16
    dec_width: int = 32
    critic_width: int = 16
    step_size: float = 1.0
    iterations: int = 3
    decay: float = 0.8
    quality_weight: float = 10.0
    critic_weight: float = 0.0
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if not 0 < self.decay < 1 and self.decay != 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.quality_weight < 0 or self.critic_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.payload not in (1, 2, 3, 4):
            raise ValueError(f"payload must be 1..4 bits per pixel, got {self.payload}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")

    def to_kv(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_kv(cls, kv: Dict[str, str]) -> "CodecConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in kv.items():
            if k in kinds:
                out[k] = float(v) if kinds[k] in (float, "float") else int(float(v))
        return cls(**out)


class CodecModel(Module):
    """Update network g, decoder, and critic parameters in one container."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng([config.seed, 101])
        c, hid, gw, dw, cw = (config.channels, config.hidden, config.g_width,
                              config.dec_width, config.critic_width)
        self.add_param("g1.w", he_conv(rng, 3, 3 * c + hid, gw))
        self.add_param("g1.b", np.zeros(gw))
        self.add_param("g2.w", he_conv(rng, 3, gw, gw))
        self.add_param("g2.b", np.zeros(gw))
        # zero final layer: untrained g is the zero update, so encode starts as identity
        self.add_param("g3.w", np.zeros((3, 3, gw, c + hid)))
        self.add_param("g3.b", np.zeros(c + hid))
        self.add_param("d1.w", he_conv(rng, 3, c, dw))
        self.add_param("d1.b", np.zeros(dw))
        self.add_param("d2.w", he_conv(rng, 3, dw, dw))
        self.add_param("d2.b", np.zeros(dw))
        self.add_param("d3.w", he_conv(rng, 3, dw, config.payload, gain=1.0))
        self.add_param("d3.b", np.zeros(config.payload))
        self.add_param("c1.w", he_conv(rng, 3, c, cw))
        self.add_param("c1.b", np.zeros(cw))
        self.add_param("c2.w", he_conv(rng, 3, cw, cw))
        self.add_param("c2.b", np.zeros(cw))
        self.add_param("c3.w", he_dense(rng, cw, 1, gain=1.0))
        self.add_param("c3.b", np.zeros(1))

    # parameter groups ------------------------------------------------------
    def _group(self, prefix: str) -> List[Tensor]:
        return [t for k, t in self.params.items() if k[0] in prefix]

    def coder_parameters(self) -> List[Tensor]:
        return self._group("gd")

    def critic_parameters(self) -> List[Tensor]:
        return self._group("c")

    def _p(self, name: str, frozen: bool) -> Tensor:
        t = self.params[name]
        return Tensor(t.value) if frozen else t

    # networks ----------------------------------------------------------------
    def decoder_logits(self, s: Tensor, frozen: bool = False) -> Tensor:
        p = lambda n: self._p(n, frozen)  # noqa: E731
        h = F.leaky_relu(F.conv2d(s - 0.5, p("d1.w"), p("d1.b")))
        h = F.leaky_relu(F.conv2d(h, p("d2.w"), p("d2.b")))
        return F.conv2d(h, p("d3.w"), p("d3.b"))

    def critic_score(self, s: Tensor, frozen: bool = False) -> Tensor:
        """Realism logit per image, shape (N,)."""
        p = lambda n: self._p(n, frozen)  # noqa: E731
        h = F.leaky_relu(F.conv2d(s - 0.5, p("c1.w"), p("c1.b")))
        h = F.avgpool2(h)
        h = F.leaky_relu(F.conv2d(h, p("c2.w"), p("c2.b")))
        h = h.mean(axis=(1, 2))
        return (h @ p("c3.w") + p("c3.b")).reshape(-1)

    def update_net(self, feature: Tensor, x: Tensor, delta: Tensor, hidden: Tensor):
        c = self.config.channels
        z = F.concat([feature, x - 0.5, delta, hidden], axis=-1)
        z = F.leaky_relu(F.conv2d(z, self.params["g1.w"], self.params["g1.b"]))
        z = F.leaky_relu(F.conv2d(z, self.params["g2.w"], self.params["g2.b"]))
        z = F.conv2d(z, self.params["g3.w"], self.params["g3.b"])
        step = F.tanh(F.slice_(z, 0, c))
        hidden = F.tanh(F.slice_(z, c, c + self.config.hidden))
        return step, hidden

    # persistence ---------------------------------------------------------------
    def save(self, path) -> None:
        meta = {"kind": "codec"}
        meta.update(self.config.to_kv())
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "CodecModel":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "codec":
            raise ValueError(f"{path}: not a codec checkpoint")
        model = cls(CodecConfig.from_kv(meta))
        model.load_state_dict(params)
        return model


# ---------------------------------------------------------------------------
# messages and losses
# ---------------------------------------------------------------------------

def sample_message(height: int, width: int, payload: int, seed, batch: Optional[int] = None) -> np.ndarray:
    """I.i.d. fair bits of shape (H, W, B), or (batch, H, W, B)."""
    if min(height, width, payload) <= 0 or (batch is not None and batch <= 0):
        raise ValueError("message dimensions must be positive")
    rng = np.random.default_rng(seed)
    shape = (height, width, payload) if batch is None else (batch, height, width, payload)
    return rng.integers(0, 2, size=shape).astype(np.float64)


def loss_components(m: np.ndarray, m_hat: np.ndarray, x: np.ndarray, s: np.ndarray,
                    critic_score: Optional[np.ndarray] = None):
    """(L_acc, L_qua, L_crit) on probabilities, as plain floats."""
    m = np.asarray(m, dtype=np.float64)
    p = np.clip(np.asarray(m_hat, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    if m.shape != p.shape or np.shape(x) != np.shape(s):
        raise ValueError("loss_components: shape mismatch")
    l_acc = float(np.mean(-(m * np.log(p) + (1.0 - m) * np.log(1.0 - p))))
    l_qua = float(np.mean((np.asarray(s) - np.asarray(x)) ** 2))
    l_crit = 0.0
    if critic_score is not None:
        z = np.asarray(critic_score, dtype=np.float64)
        l_crit = float(np.mean(np.logaddexp(0.0, -z)))
    return l_acc, l_qua, l_crit


def step_weights(iterations: int, decay: float) -> np.ndarray:
    """Weight decay**(T - t) for t = 1..T."""
    t = np.arange(1, iterations + 1)
    return decay ** (iterations - t)


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

@dataclass
class EncodeResult:
    stego: Tensor
    intermediates: List[Tensor]
    features: List[np.ndarray] = field(default_factory=list)


def _as_batch(a) -> tuple:
    arr = a.value if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    return arr.ndim == 3, arr


def objective_gradient(model: CodecModel, x: np.ndarray, delta: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Gradient of the summed per-image objective w.r.t. delta, scaled by H*W.

    Computed on a private tape with frozen decoder weights.
    """
    d = Tensor(delta.copy(), requires_grad=True)
    with Tape() as tape:
        s = F.clamp01_ste(Tensor(x) + d)
        logits = model.decoder_logits(s, frozen=True)
        per_bit = F.bce_with_logits(logits, Tensor(m))
        acc = per_bit.mean(axis=(1, 2, 3)).sum()
        qua = (d * d).mean(axis=(1, 2, 3)).sum()
        loss = acc + qua * model.config.quality_weight
    grad = backward(tape, loss, wrt=[d])[d]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("encode: decoder produced non-finite gradients")
    return grad * (x.shape[1] * x.shape[2])


def encode(x, m, model: CodecModel, features: Optional[Sequence[np.ndarray]] = None) -> EncodeResult:
    """Embed message ``m`` into cover ``x``.

    ``x`` may be an array or a Tensor (to differentiate through the encoder),
    shaped (H, W, C) or (N, H, W, C); ``m`` matches with B channels.
    ``features`` replays previously computed objective gradients instead of
    recomputing them, which pins the encoder's stop-gradient inputs.
    """
    cfg = model.config
    single, xv = _as_batch(x)
    x_t = x if isinstance(x, Tensor) else Tensor(xv)
    m = np.asarray(m, dtype=np.float64)
    if single:
        x_t = x_t.reshape((1,) + xv.shape)
        xv = xv[None]
        m = m[None]
    if m.shape[:3] != xv.shape[:3] or m.shape[3] != cfg.payload:
        raise ValueError(f"encode: message shape {m.shape} does not fit image {xv.shape}")
    n, h, w, _ = xv.shape
    delta = Tensor(np.zeros(xv.shape))
    hidden = Tensor(np.zeros((n, h, w, cfg.hidden)))
    intermediates, used = [], []
    for t in range(cfg.iterations):
        if features is not None:
            feat = np.asarray(features[t])
        else:
            feat = objective_gradient(model, x_t.value, delta.value, m)
        used.append(feat)
        step, hidden = model.update_net(Tensor(feat), x_t, delta, hidden)
        delta = delta + step * cfg.step_size
        s_t = F.clamp01_ste(x_t + delta)
        intermediates.append(s_t.reshape(xv.shape[1:]) if single else s_t)
    return EncodeResult(intermediates[-1], intermediates, used)


def decode(s, model: CodecModel) -> np.ndarray:
    """Per-bit probabilities in (0, 1)."""
    single, sv = _as_batch(s)
    logits = model.decoder_logits(Tensor(sv[None] if single else sv), frozen=True).value
    probs = 1.0 / (1.0 + np.exp(-logits))
    probs = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return probs[0] if single else probs


def hard_decision(probs: np.ndarray) -> np.ndarray:
    return (np.asarray(probs) >= 0.5).astype(np.float64)


def accuracy_loss(logits: Tensor, m: np.ndarray, per_image: bool = False) -> Tensor:
    bce = F.bce_with_logits(logits, Tensor(np.asarray(m, dtype=np.float64)))
    return bce.mean(axis=(1, 2, 3)) if per_image else bce.mean()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    l_acc: float
    l_qua: float
    l_crit: float
    error_rate: float


@dataclass
class TrainingLog:
    epochs: List[EpochLog] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "L_acc", "L_qua", "L_crit", "error_rate"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.l_acc:.10g}", f"{e.l_qua:.10g}", f"{e.l_crit:.10g}",
                            f"{e.error_rate:.10g}"])


def train_loss(model: CodecModel, x: np.ndarray, m: np.ndarray, channel: Optional[ChannelFn] = None,
               penalty: Optional[PenaltyFn] = None, channel_seed: int = 0):
    """Weighted sum over all encoder iterations. Returns (loss, parts, final stego)."""
    cfg = model.config
    res = encode(x, m, model)
    weights = step_weights(cfg.iterations, cfg.decay)
    xt = Tensor(x)
    total = None
    parts = {"acc": 0.0, "qua": 0.0, "crit": 0.0}
    for t, (wt, s_t) in enumerate(zip(weights, res.intermediates)):
        received = channel(s_t, channel_seed * 131 + t) if channel is not None else s_t
        l_acc = accuracy_loss(model.decoder_logits(received), m)
        l_qua = F.mse(s_t, xt)
        term = l_acc + l_qua * cfg.quality_weight
        if cfg.critic_weight > 0:
            score = model.critic_score(s_t, frozen=True)
            l_crit = F.bce_with_logits(score, np.ones(score.shape)).mean()
            term = term + l_crit * cfg.critic_weight
            parts["crit"] = l_crit.item()
        if penalty is not None:
            term = term + penalty(s_t)
        term = term * float(wt)
        total = term if total is None else total + term
        parts["acc"], parts["qua"] = l_acc.item(), l_qua.item()
    return total, parts, res.stego


def train_codec(images: np.ndarray, config: CodecConfig, channel: Optional[ChannelFn] = None,
                penalty: Optional[PenaltyFn] = None, model: Optional[CodecModel] = None,
                progress: Optional[Callable[[EpochLog], None]] = None):
    """Train encoder and decoder (and critic when ``critic_weight > 0``).

    ``channel`` is applied to every intermediate stego image before decoding;
    ``penalty`` adds a scalar term per iteration (e.g. a steganalysis logit).
    Fresh messages are drawn for every image at every step. Deterministic in
    ``config.seed``.
    """
    config.validate()
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("train_codec: empty corpus")
    model = model or CodecModel(config)
    opt = Adam(model.coder_parameters(), lr=config.lr)
    critic_opt = Adam(model.critic_parameters(), lr=config.lr) if config.critic_weight > 0 else None
    n, h, w, _ = images.shape
    bs = min(config.batch_size, n)
    logbook = TrainingLog()
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch, 17])
        order = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for b in range(0, n - bs + 1, bs):
            x = images[order[b:b + bs]]
            m = sample_message(h, w, config.payload, [config.seed, epoch, b], batch=len(x))
            with Tape() as tape:
                loss, parts, stego = train_loss(model, x, m, channel, penalty, channel_seed=epoch * 100003 + b)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"codec training diverged at epoch {epoch}")
            grads = backward(tape, loss)
            opt.step(grads)
            if critic_opt is not None:
                with Tape() as ctape:
                    real = model.critic_score(Tensor(x))
                    fake = model.critic_score(Tensor(stego.value))
                    closs = (F.bce_with_logits(real, np.ones(real.shape)).mean()
                             + F.bce_with_logits(fake, np.zeros(fake.shape)).mean())
                critic_opt.step(backward(ctape, closs))
            err = float(np.mean(hard_decision(decode(stego.value, model)) != m))
            sums += (parts["acc"], parts["qua"], parts["crit"], err)
            batches += 1
        entry = EpochLog(epoch, *(sums / max(batches, 1)))
        logbook.epochs.append(entry)
        log.info("codec epoch %d: L_acc=%.4f L_qua=%.5f err=%.4f", epoch, entry.l_acc, entry.l_qua,
                 entry.error_rate)
        if progress is not None:
            progress(entry)
    return model, logbook


@dataclass
class CodecEvaluation:
    error_rate: float
    mean_abs_residual: float
    per_image_error: np.ndarray
    covers: np.ndarray
    stegos: np.ndarray
    messages: np.ndarray


def evaluate_codec(model: CodecModel, images: np.ndarray, seed, channel: Optional[ChannelFn] = None,
                   batch_size: int = 32, pin_message: bool = False) -> CodecEvaluation:
    """Encode a seeded message into every image and measure recovery.

    Each image gets its own message unless ``pin_message`` reuses one for all.
    """
    images = np.asarray(images, dtype=np.float64)
    n, h, w, _ = images.shape
    if pin_message:
        msgs = np.repeat(sample_message(h, w, model.config.payload, seed)[None], n, axis=0)
    else:
        msgs = sample_message(h, w, model.config.payload, seed, batch=n)
    stegos = np.empty_like(images)
    errs = np.empty(n)
    for b in range(0, n, batch_size):
        x = images[b:b + batch_size]
        m = msgs[b:b + batch_size]
        s = encode(x, m, model).stego
        stegos[b:b + batch_size] = s.value
        received = channel(Tensor(s.value), b).value if channel is not None else s.value
        bits = hard_decision(decode(received, model))
        errs[b:b + batch_size] = np.mean(bits != m, axis=(1, 2, 3))
    return CodecEvaluation(float(errs.mean()), float(np.mean(np.abs(stegos - images))), errs,
                           images, stegos, msgs)
