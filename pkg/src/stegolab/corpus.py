"""Synthetic image corpora with a designed per-pixel variance field, and PNG I/O.

Every image of a corpus shares one mean field; images differ only by
independent Gaussian noise whose variance is ``var_low`` inside a region mask
and ``var_high`` outside. Per-pixel variance across the batch is therefore a
known ground truth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
from PIL import Image
from scipy.special import expit

from .storage import read_kv, write_kv

PathLike = Union[str, Path]

ALLOWED_SIZES = (8, 16, 32, 64)


@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 32
    width: int = 32
    channels: int = 1
    n_ellipses: int = 3
    var_low: float = 0.0004
    var_high: float = 0.01
    mask_kind: str = "ellipse"  # ellipse | outside | half
    seed: int = 0

    def validate(self) -> None:
        if self.height not in ALLOWED_SIZES or self.width not in ALLOWED_SIZES:
            raise ValueError(f"image size must be one of {ALLOWED_SIZES}, got {self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if not (0 <= self.var_low < self.var_high) and not (self.var_low == self.var_high == 0):
            raise ValueError(f"need 0 <= var_low < var_high, got {self.var_low}, {self.var_high}")
        if self.n_ellipses < 0:
            raise ValueError("n_ellipses must be >= 0")
        if self.mask_kind not in ("ellipse", "outside", "half"):
            raise ValueError(f"unknown mask_kind {self.mask_kind!r}")

    def to_kv(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_kv(cls, kv: Dict[str, str]) -> "SyntheticSpec":
        kinds = {"height": int, "width": int, "channels": int, "n_ellipses": int,
                 "var_low": float, "var_high": float, "mask_kind": str, "seed": int}
        return cls(**{k: kinds[k](v) for k, v in kv.items() if k in kinds})


@dataclass
class Corpus:
    images: np.ndarray                       # (n, H, W, C) in [0, 1]
    train_idx: np.ndarray
    heldout_idx: np.ndarray
    provenance: Dict[str, object] = field(default_factory=dict)
    mean_field: np.ndarray | None = None     # (H, W, C), synthetic corpora only
    var_field: np.ndarray | None = None      # (H, W, C)
    low_mask: np.ndarray | None = None       # (H, W) bool

    def __len__(self) -> int:
        return len(self.images)

    @property
    def train(self) -> np.ndarray:
        return self.images[self.train_idx]

    @property
    def heldout(self) -> np.ndarray:
        return self.images[self.heldout_idx]


def _soft_ellipse(yy, xx, cy, cx, ry, rx, angle, softness):
    c, s = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    r = np.sqrt(u * u + v * v)
    return expit((1.0 - r) / softness)


def design_fields(spec: SyntheticSpec):
    """Return (mean_field (H,W,C), var_field (H,W,C), low-variance mask (H,W))."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 7919])
    h, w, c = spec.height, spec.width, spec.channels
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w

    mean = np.empty((h, w, c))
    for ch in range(c):
        theta = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5))
        field_ = 0.5 + 0.25 * ramp
        for _ in range(spec.n_ellipses):
            blob = _soft_ellipse(yy, xx, rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                 rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3),
                                 rng.uniform(0, np.pi), 0.08)
            field_ = field_ + rng.choice([-1.0, 1.0]) * rng.uniform(0.08, 0.15) * blob
        mean[:, :, ch] = np.clip(field_, 0.2, 0.8)

    if spec.mask_kind in ("ellipse", "outside"):
        m = _soft_ellipse(yy, xx, rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65),
                          rng.uniform(0.28, 0.36), rng.uniform(0.28, 0.36), rng.uniform(0, np.pi), 1e-3)
        low = m > 0.5 if spec.mask_kind == "ellipse" else m <= 0.5
    else:
        low = xx < 0.5
    frac = low.mean()
    if not (0.1 <= frac <= 0.9):
        raise ValueError(f"degenerate region mask: covers {frac:.1%} of pixels")
    var = np.where(low, spec.var_low, spec.var_high)[:, :, None].repeat(c, axis=2)
    return mean, var, low


def generate_synthetic_corpus(spec: SyntheticSpec, n: int, heldout_fraction: float = 0.25) -> Corpus:
    """Draw ``n`` images ``clamp01(mean + N(0, var_field))``; pure in (spec, n)."""
    if n < 2:
        raise ValueError("n must be at least 2")
    mean, var, low = design_fields(spec)
    rng = np.random.default_rng([spec.seed, n])
    noise = rng.standard_normal((n,) + mean.shape) * np.sqrt(var)
    images = np.clip(mean[None] + noise, 0.0, 1.0)
    n_held = max(1, int(round(n * heldout_fraction)))
    order = rng.permutation(n)
    heldout = np.sort(order[:n_held])
    train = np.sort(order[n_held:])
    prov = dict(spec.to_kv())
    prov.update({"n": n, "heldout_fraction": heldout_fraction, "source": "synthetic"})
    return Corpus(images, train, heldout, prov, mean, var, low)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def load_image(path: PathLike) -> np.ndarray:
    """Load an 8-bit gray or RGB PNG as an (H, W, C) float array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise ValueError(f"{path}: unsupported PNG mode {mode!r} (need 8-bit L or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: unreadable image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)


def save_image(path: PathLike, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"{path}: expected (H, W, 1|3) image, got shape {image.shape}")
    if image.min() < 0 or image.max() > 1 or not np.all(np.isfinite(image)):
        raise ValueError(f"{path}: image values must lie in [0, 1]")
    data = to_bytes(image)
    mode = "L" if data.shape[2] == 1 else "RGB"
    Image.fromarray(data[:, :, 0] if mode == "L" else data, mode=mode).save(Path(path), format="PNG")


def image_io(path: PathLike, mode: str, image: np.ndarray | None = None):
    if mode == "load":
        return load_image(path)
    if mode == "save":
        if image is None:
            raise ValueError("save requires an image")
        save_image(path, image)
        return None
    raise ValueError(f"mode must be 'load' or 'save', got {mode!r}")


def save_heatmap(field_: np.ndarray, path: PathLike) -> None:
    """Write a [0, 1] field as an 8-bit grayscale PNG (v -> round(255 v))."""
    field_ = np.asarray(field_, dtype=np.float64)
    if field_.ndim == 3 and field_.shape[2] == 1:
        field_ = field_[:, :, 0]
    if field_.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {field_.shape}")
    if not np.all(np.isfinite(field_)) or field_.min() < 0 or field_.max() > 1:
        raise ValueError("heatmap values must lie in [0, 1]")
    Image.fromarray(to_bytes(field_), mode="L").save(Path(path), format="PNG")


def save_corpus(corpus: Corpus, directory: PathLike) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, img in enumerate(corpus.images):
        p = directory / f"img_{i:05d}.png"
        save_image(p, img)
        written.append(p)
    prov = dict(corpus.provenance)
    prov["heldout_idx"] = list(map(int, corpus.heldout_idx))
    side = directory / "provenance.txt"
    write_kv(side, prov)
    written.append(side)
    return written


def load_corpus(directory: PathLike) -> Corpus:
    """Load a PNG directory. Provenance sidecar is used when present."""
    directory = Path(directory)
    files = sorted(directory.glob("*.png"))
    if len(files) < 2:
        raise ValueError(f"{directory}: need at least 2 PNG images, found {len(files)}")
    images = np.stack([load_image(p) for p in files])
    if len({im.shape for im in images}) > 1:
        raise ValueError(f"{directory}: images differ in shape")
    side = directory / "provenance.txt"
    prov: Dict[str, object] = {"source": str(directory)}
    held = np.arange(len(files) // 4 or 1)
    mean = var = low = None
    if side.exists():
        kv = read_kv(side)
        prov.update(kv)
        if kv.get("heldout_idx"):
            held = np.array([int(v) for v in kv["heldout_idx"].split(",")])
        if kv.get("source") == "synthetic":
            mean, var, low = design_fields(SyntheticSpec.from_kv(kv))
    train = np.setdiff1d(np.arange(len(files)), held)
    return Corpus(images, train, held, prov, mean, var, low)
