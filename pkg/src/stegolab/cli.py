"""``stegolab`` command line: one subcommand per experiment stage.

    stegolab <subcommand> --config <path> [--seed N] [--out DIR]

Configs are ``key=value`` lines with ``#`` comments. Unknown keys are
rejected. Relative paths inside a config resolve against the output root, so
a pipeline of stages sharing one ``--out`` finds its prerequisites by default
(e.g. ``train-codec`` reads ``gen-data/corpus``). Every stage writes into
``<out>/<subcommand>/`` and leaves a ``manifest.txt`` with the config
snapshot, consumed checkpoints and an FNV-1a digest for every output file.
Wall-clock timings go to ``timing.txt`` which is not digested.

Exit codes: 0 success, 1 configuration error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import analysis as A
from . import metrics as M
from .channels import (Detector, DetectorConfig, detection_rate, make_channel, steganalysis_logit_loss,
                       train_detector, write_detection_csv)
from .codec import CodecConfig, CodecModel, evaluate_codec, sample_message, train_codec
from .corpus import (Corpus, SyntheticSpec, generate_synthetic_corpus, load_corpus, load_image,
                     save_corpus, save_heatmap)
from .diffusion import (DiffusionConfig, NoisePredictor, ddim_invert, reconstruct, to_image_space,
                        to_model_space, train_noise_predictor)
from .gan import GanConfig, load_gan, save_gan, train_gan
from .selection import (SelectionConfig, run_batched, save_selection, select_ddim_batch,
                        select_gan_batch)
from .storage import file_digest, fnv1a64, format_kv, parse_kv, write_kv
from .tensor import Tensor

log = logging.getLogger("stegolab")


class ConfigError(ValueError):
    pass


class MissingPrerequisite(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _spec_keys():
    return {"corpus.height": int, "corpus.width": int, "corpus.channels": int, "corpus.n_ellipses": int,
            "corpus.var_low": float, "corpus.var_high": float, "corpus.mask_kind": str,
            "corpus.n": int, "corpus.heldout_fraction": float}


def _prefixed(prefix: str, cls, skip=("seed", "channels")) -> Dict[str, type]:
    out = {}
    for name, f in cls.__dataclass_fields__.items():
        if name in skip:
            continue
        name_ = f.type if isinstance(f.type, str) else f.type.__name__
        t = {"int": int, "float": float, "str": str}[name_.replace("Optional[", "").rstrip("]")]
        out[f"{prefix}.{name}"] = t
    return out


CODEC_KEYS = _prefixed("codec", CodecConfig)
DDPM_KEYS = _prefixed("ddpm", DiffusionConfig)
GAN_KEYS = _prefixed("gan", GanConfig, skip=("seed", "channels", "height", "width"))
SELECT_KEYS = {**_prefixed("select", SelectionConfig, skip=("seed", "mode")), "select.count": int,
               "select.chunk": int}
DETECTOR_KEYS = _prefixed("detector", DetectorConfig)
CHANNEL_KEYS = {"channel.kind": str, "channel.quality": int, "channel.beta": float}
COMMON = {"seed": int, "out": str}

PATHS = {"corpus_dir": "gen-data/corpus", "codec_path": "train-codec/codec.ckpt",
         "ddpm_path": "train-ddpm/ddpm.ckpt", "gan_path": "train-gan/gan.ckpt",
         "selection_dir": "select-ddim"}


def _paths(*names):
    return {n: str for n in names}


SCHEMAS: Dict[str, Dict[str, type]] = {
    "gen-data": {**COMMON, **_spec_keys()},
    "train-codec": {**COMMON, **_paths("corpus_dir"), **CODEC_KEYS, **CHANNEL_KEYS, "eval.count": int},
    "train-ddpm": {**COMMON, **_paths("corpus_dir"), **DDPM_KEYS, "eval.count": int},
    "train-gan": {**COMMON, **_paths("corpus_dir"), **GAN_KEYS},
    "select-ddim": {**COMMON, **_paths("corpus_dir", "codec_path", "ddpm_path"), **SELECT_KEYS},
    "select-gan": {**COMMON, **_paths("codec_path", "gan_path"), **SELECT_KEYS},
    "analyze": {**COMMON, **_paths("corpus_dir", "codec_path", "selection_dir"), "analysis.threshold": float,
                "analysis.count": int},
    "payload-sweep": {**COMMON, **_paths("corpus_dir", "ddpm_path"), **CODEC_KEYS, **SELECT_KEYS,
                      "sweep.payloads": str},
    "robustness": {**COMMON, **_paths("corpus_dir", "codec_path", "ddpm_path"), **SELECT_KEYS,
                   "robust.channel": str, "robust.levels": str},
    "steganalyze": {**COMMON, **_paths("corpus_dir"), **CODEC_KEYS, **DETECTOR_KEYS,
                    "stegan.payloads": str, "stegan.weight": float, "stegan.surrogate_seed": int,
                    "stegan.count": int},
    "report": {**COMMON, **_paths("corpus_dir", "codec_path"), "report.count": int},
}


@dataclass
class StageConfig:
    subcommand: str
    values: Dict[str, object]
    seed: int
    out_root: Path
    raw: Dict[str, str]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def group(self, prefix: str) -> Dict[str, object]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def path(self, key: str) -> Path:
        p = Path(str(self.values.get(key, PATHS[key])))
        return p if p.is_absolute() else self.out_root / p

    def stage_dir(self) -> Path:
        return self.out_root / self.subcommand


def parse_config(subcommand: str, text: str) -> Dict[str, object]:
    if subcommand not in SCHEMAS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    schema = SCHEMAS[subcommand]
    try:
        raw = parse_kv(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} for {subcommand}")
        try:
            kind = schema[key]
            out[key] = int(float(value)) if kind is int else kind(value)
        except ValueError:
            raise ConfigError(f"key {key!r}: cannot parse {value!r} as {schema[key].__name__}") from None
    return out


def _int_list(text: str, key: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None


def _float_list(text: str, key: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def _build(cls, kwargs, **fixed):
    try:
        obj = cls(**{**kwargs, **fixed})
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


# ---------------------------------------------------------------------------
# reports and manifests
# ---------------------------------------------------------------------------

@dataclass
class Results:
    csvs: Dict[str, Tuple[Sequence[str], List[Sequence[object]]]] = field(default_factory=dict)
    heatmaps: Dict[str, np.ndarray] = field(default_factory=dict)
    summary: List[str] = field(default_factory=list)
    files: List[Path] = field(default_factory=list)        # extra deterministic outputs
    volatile: List[Path] = field(default_factory=list)     # timing files, not digested
    inputs: Dict[str, Path] = field(default_factory=dict)  # consumed checkpoints
    timings: Dict[str, float] = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.10g}"
    return str(v)


def write_report(results: Results, out_dir) -> List[Tuple[str, str]]:
    """Write CSVs, heatmap PNGs and summary.txt; return [(relative path, digest)]."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out_dir}: {exc}") from None
    written: List[Path] = []
    for name, (header, rows) in sorted(results.csvs.items()):
        p = out_dir / f"{name}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        written.append(p)
    for name, hm in sorted(results.heatmaps.items()):
        hm = np.asarray(hm)
        if hm.ndim == 3:
            for c in range(hm.shape[2]):
                suffix = "" if hm.shape[2] == 1 else f"_c{c}"
                p = out_dir / f"{name}{suffix}.png"
                save_heatmap(hm[:, :, c], p)
                written.append(p)
        else:
            p = out_dir / f"{name}.png"
            save_heatmap(hm, p)
            written.append(p)
    summary = out_dir / "summary.txt"
    summary.write_text("\n".join(results.summary) + ("\n" if results.summary else ""))
    written.append(summary)
    all_files = written + [Path(f) for f in results.files]
    return sorted((str(Path(f).relative_to(out_dir)), file_digest(f)) for f in set(all_files))


def write_manifest(stage: StageConfig, results: Results, inventory) -> Path:
    out_dir = stage.stage_dir()
    items: Dict[str, object] = {"subcommand": stage.subcommand, "seed": stage.seed}
    for k, v in sorted(stage.raw.items()):
        items[f"config.{k}"] = v
    for name, p in sorted(results.inputs.items()):
        items[f"input.{name}"] = file_digest(p)
    for rel, dig in inventory:
        items[f"output.{rel}"] = dig
    path = out_dir / "manifest.txt"
    write_kv(path, items)
    timing = out_dir / "timing.txt"
    write_kv(timing, {k: f"{v:.3f}" for k, v in results.timings.items()})
    return path


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _need(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing {what} at {path} (produce it with `stegolab {producer}`)")
    return path


def _corpus(stage: StageConfig, results: Results) -> Corpus:
    d = _need(stage.path("corpus_dir"), "corpus", "gen-data")
    return load_corpus(d)


def _codec(stage: StageConfig, results: Results) -> CodecModel:
    p = _need(stage.path("codec_path"), "codec checkpoint", "train-codec")
    results.inputs["codec"] = p
    return CodecModel.load(p)


def _ddpm(stage: StageConfig, results: Results) -> NoisePredictor:
    p = _need(stage.path("ddpm_path"), "diffusion checkpoint", "train-ddpm")
    results.inputs["ddpm"] = p
    return NoisePredictor.load(p)


def _selection_config(stage: StageConfig, mode: str) -> Tuple[SelectionConfig, int, int]:
    g = stage.group("select")
    count = int(g.pop("count", 64))
    chunk = int(g.pop("chunk", 16))
    cfg = _build(SelectionConfig, g, mode=mode, seed=stage.seed).resolved()
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, count, max(1, chunk)


def _codec_config(stage: StageConfig, channels: int, **over) -> CodecConfig:
    return _build(CodecConfig, {**stage.group("codec"), **over}, channels=channels, seed=stage.seed)


def _cover_stats(covers: np.ndarray, msgs: np.ndarray, codec: CodecModel, channel=None):
    """(errors, psnr, ssim) per cover when embedding ``msgs``."""
    from .codec import decode, encode, hard_decision
    errs, ps, ss = [], [], []
    for b in range(0, len(covers), 32):
        x, m = covers[b:b + 32], msgs[b:b + 32]
        s = encode(x, m, codec).stego
        recv = channel(s, (10**6, b)) if channel is not None else s
        bits = hard_decision(decode(recv.value, codec))
        errs.extend(np.mean(bits != m, axis=(1, 2, 3)))
        ps.extend(M.psnr(xi, si) for xi, si in zip(x, s.value))
        ss.extend(M.ssim(xi, si) for xi, si in zip(x, s.value))
    return np.array(errs), np.array(ps), np.array(ss)


def _finite_mean(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(v.mean()) if len(v) else math.nan


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen_data(stage: StageConfig, results: Results) -> None:
    g = stage.group("corpus")
    n = int(g.pop("n", 512))
    frac = float(g.pop("heldout_fraction", 0.25))
    spec = _build(SyntheticSpec, g, seed=stage.seed)
    try:
        corpus = generate_synthetic_corpus(spec, n, frac)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    results.files += save_corpus(corpus, stage.stage_dir() / "corpus")
    results.heatmaps["variance_field"] = A.normalize(corpus.var_field).values
    results.heatmaps["mean_field"] = corpus.mean_field
    results.summary += [f"images={n}", f"heldout={len(corpus.heldout_idx)}",
                        f"low_variance_fraction={corpus.low_mask.mean():.4f}"]


def _channel_from(stage: StageConfig):
    ch = stage.group("channel")
    return make_channel(ch.get("kind", "none"), int(ch.get("quality", 75)), float(ch.get("beta", 0.0)),
                        stage.seed)


def stage_train_codec(stage: StageConfig, results: Results) -> None:
    corpus = _corpus(stage, results)
    cfg = _codec_config(stage, corpus.images.shape[3])
    channel = _channel_from(stage)
    model, tlog = train_codec(corpus.train, cfg, channel=channel)
    path = stage.stage_dir() / "codec.ckpt"
    model.save(path)
    results.files.append(path)
    results.csvs["training_log"] = (["epoch", "L_acc", "L_qua", "L_crit", "error_rate"],
                                    [(e.epoch, e.l_acc, e.l_qua, e.l_crit, e.error_rate) for e in tlog.epochs])
    held = corpus.heldout[:int(stage.get("eval.count", 128))]
    ev = evaluate_codec(model, held, seed=[stage.seed, 1000], channel=channel)
    results.summary += [f"heldout_error_rate={ev.error_rate:.6f}",
                        f"mean_abs_residual={ev.mean_abs_residual:.6f}"]


def stage_train_ddpm(stage: StageConfig, results: Results) -> None:
    corpus = _corpus(stage, results)
    cfg = _build(DiffusionConfig, stage.group("ddpm"), channels=corpus.images.shape[3], seed=stage.seed)
    model, losses = train_noise_predictor(corpus.train, cfg)
    path = stage.stage_dir() / "ddpm.ckpt"
    model.save(path)
    results.files.append(path)
    results.csvs["loss_curve"] = (["epoch", "loss"], list(enumerate(losses)))
    held = corpus.heldout[:int(stage.get("eval.count", 64))]
    sched = model.schedule()
    rec = to_image_space(reconstruct(ddim_invert(to_model_space(held), model, sched), model, sched)).value
    ps = [M.psnr(a, b) for a, b in zip(held, rec)]
    results.summary += [f"final_loss={losses[-1]:.6f}", f"roundtrip_psnr_db={_finite_mean(ps):.4f}"]


def stage_train_gan(stage: StageConfig, results: Results) -> None:
    corpus = _corpus(stage, results)
    h, w, c = corpus.images.shape[1:]
    cfg = _build(GanConfig, stage.group("gan"), height=h, width=w, channels=c, seed=stage.seed)
    g, d, glog = train_gan(corpus.train, cfg)
    path = stage.stage_dir() / "gan.ckpt"
    save_gan(path, g, d)
    results.files.append(path)
    results.csvs["gan_log"] = (["epoch", "d_loss", "g_loss", "d_accuracy", "batch_std"],
                               [(i, *row) for i, row in enumerate(zip(glog.d_loss, glog.g_loss,
                                                                       glog.d_accuracy, glog.batch_std))])
    z = np.random.default_rng([stage.seed, 3]).standard_normal((256, cfg.latent_dim))
    fake = g(Tensor(z), frozen=True).value
    r = M.pearson(fake.mean(0).ravel(), corpus.train.mean(0).ravel())
    results.heatmaps["generated_mean"] = fake.mean(0)
    results.summary += [f"mean_field_pearson={r:.4f}"]


SELECT_HEADER = ["index", "original_error", "baseline_error", "selected_error", "best_epoch",
                 "baseline_psnr", "selected_psnr"]


def _save_results(stage: StageConfig, results: Results, res_list, cfg, msgs, codec):
    d = stage.stage_dir()
    rows = []
    base = np.stack([r.baseline_cover for r in res_list])
    best = np.stack([r.cover for r in res_list])
    _, p_base, _ = _cover_stats(base, msgs, codec)
    _, p_best, _ = _cover_stats(best, msgs, codec)
    from .corpus import save_image
    for i, r in enumerate(res_list):
        stem = f"img_{i:04d}"
        files, timing = save_selection(r, d / "covers", stem, cfg)
        bpath = d / "covers" / f"{stem}_baseline.png"
        save_image(bpath, np.clip(r.baseline_cover, 0, 1))
        results.files += files + [bpath]
        results.volatile.append(timing)
        rows.append((i, r.original_error, r.baseline_error, r.error, r.best_epoch, p_base[i], p_best[i]))
    results.csvs["selection"] = (SELECT_HEADER, rows)
    be = np.array([r.baseline_error for r in res_list])
    se = np.array([r.error for r in res_list])
    red = (be.mean() - se.mean()) / be.mean() if be.mean() > 0 else 0.0
    for i, r in enumerate(res_list):
        results.summary.append(f"run {i}: baseline_error={r.baseline_error:.6f} best_error={r.error:.6f}")
    results.summary += [f"mean_baseline_error={be.mean():.6f}", f"mean_selected_error={se.mean():.6f}",
                        f"relative_reduction={red:.4f}",
                        f"mean_baseline_psnr={_finite_mean(p_base):.4f}",
                        f"mean_selected_psnr={_finite_mean(p_best):.4f}"]
    results.timings["seconds_per_epoch"] = float(np.mean([r.seconds_per_epoch for r in res_list]))


def stage_select_ddim(stage: StageConfig, results: Results) -> None:
    corpus = _corpus(stage, results)
    codec = _codec(stage, results)
    ddpm = _ddpm(stage, results)
    cfg, count, chunk = _selection_config(stage, "ddim")
    covers = corpus.heldout[:count]
    h, w = covers.shape[1:3]
    msgs = sample_message(h, w, codec.config.payload, [stage.seed, 5], batch=len(covers))
    res = run_batched(select_ddim_batch, len(covers), chunk, covers, msgs, codec=codec, diffusion=ddpm,
                      schedule=ddpm.schedule(), config=cfg)
    _save_results(stage, results, res, cfg, msgs, codec)


def stage_select_gan(stage: StageConfig, results: Results) -> None:
    codec = _codec(stage, results)
    p = _need(stage.path("gan_path"), "GAN checkpoint", "train-gan")
    results.inputs["gan"] = p
    gen, _ = load_gan(p)
    cfg, count, chunk = _selection_config(stage, "gan")
    msgs = sample_message(gen.config.height, gen.config.width, codec.config.payload, [stage.seed, 6],
                          batch=count)
    res = run_batched(select_gan_batch, count, chunk, msgs, codec=codec, generator=gen, config=cfg)
    _save_results(stage, results, res, cfg, msgs, codec)


def _load_selected(directory: Path, kind: str) -> Optional[np.ndarray]:
    files = sorted((directory / "covers").glob(f"img_*_{kind}.png"))
    if not files:
        return None
    return np.stack([load_image(f) for f in files])


def analysis_block(variance_images, covers, codec, seed, threshold=0.5):
    """Variance/residual maps, overlap, waterfilling agreement for one batch of covers."""
    var = A.variance_map(variance_images)
    stegos, _ = A.encode_batch(covers, codec, seed)
    res = A.residual_map_from(covers, stegos)
    ov = A.overlap_fraction(var, res, threshold)
    raw_var = np.asarray(variance_images).var(axis=0, ddof=1)
    power = A.encoder_power(covers, stegos)
    wf = A.waterfill_map(raw_var, power)
    sim = A.quantized_similarity(wf, res, threshold)
    ctrl = A.shuffled_similarity(wf, res, seed=[0, 11], threshold=threshold)
    return var, res, wf, ov, sim, ctrl, power


def stage_analyze(stage: StageConfig, results: Results) -> None:
    corpus = _corpus(stage, results)
    codec = _codec(stage, results)
    thr = float(stage.get("analysis.threshold", 0.5))
    count = int(stage.get("analysis.count", 128))
    covers = corpus.heldout[:count]
    var, res, wf, ov, sim, ctrl, power = analysis_block(corpus.images, covers, codec, [stage.seed, 9], thr)
    results.heatmaps.update({"variance_map": var.values, "residual_map": res.values, "waterfill_map": wf.values})
    rows = [("corpus", ov.fraction, ov.chance, ov.n_high, A.low_variance_count(var, thr))]
    sim_rows = [(c, sim[c], ctrl[c]) for c in range(len(sim))]
    sel_dir = stage.path("selection_dir")
    if sel_dir.exists():
        base = _load_selected(sel_dir, "baseline")
        best = _load_selected(sel_dir, "selected")
        if base is not None and best is not None and len(base) >= 2:
            for name, batch in (("baseline", base), ("selected", best)):
                v2, r2, _, o2, _, _, _ = analysis_block(batch, batch, codec, [stage.seed, 9], thr)
                rows.append((name, o2.fraction, o2.chance, o2.n_high, A.low_variance_count(v2, thr)))
                results.heatmaps[f"variance_map_{name}"] = v2.values
                results.heatmaps[f"residual_map_{name}"] = r2.values
    results.csvs["overlap"] = (["batch", "overlap_fraction", "chance_baseline", "high_residual_count",
                                "low_variance_count"], rows)
    results.csvs["similarity"] = (["channel", "waterfill_vs_residual_pct", "shuffled_control_pct"], sim_rows)
    raw = corpus.images.var(axis=0, ddof=1)
    wres = A.waterfill(np.maximum(raw, 1e-12), power)
    results.csvs["waterfill"] = (["index", "sigma2", "gamma2", "nu", "capacity"],
                                 [(i, s, g, wres.nu, wres.capacity)
                                  for i, (s, g) in enumerate(zip(raw.ravel(), wres.gamma2.ravel()))])
    results.summary += [f"overlap_fraction={ov.fraction:.4f}", f"chance_baseline={ov.chance:.4f}",
                        "similarity_pct=" + ",".join(f"{v:.2f}" for v in sim),
                        "shuffled_control_pct=" + ",".join(f"{v:.2f}" for v in ctrl),
                        f"encoder_power={power:.6g}"]
    for name, frac, chance, nh, nl in rows[1:]:
        results.summary.append(f"{name}: overlap={frac:.4f} low_variance_count={nl}")


SWEEP_HEADER = ["payload", "error_original", "error_optimized", "ssim_original", "ssim_optimized",
                "psnr_original", "psnr_optimized", "brisque_original", "brisque_optimized"]


def stage_payload_sweep(stage: StageConfig, results: Results) -> None:
    corpus = _corpus(stage, results)
    ddpm = _ddpm(stage, results)
    payloads = _int_list(str(stage.get("sweep.payloads", "1,2,3,4")), "sweep.payloads")
    cfg, count, chunk = _selection_config(stage, "ddim")
    covers = corpus.heldout[:count]
    h, w, c = covers.shape[1:]
    rows = []
    for b in payloads:
        codec, _ = train_codec(corpus.train, _codec_config(stage, c, payload=b))
        msgs = sample_message(h, w, b, [stage.seed, 5, b], batch=len(covers))
        res = run_batched(select_ddim_batch, len(covers), chunk, covers, msgs, codec=codec, diffusion=ddpm,
                          schedule=ddpm.schedule(), config=cfg)
        e0, p0, s0 = _cover_stats(covers, msgs, codec)
        best = np.stack([r.cover for r in res])
        _, p1, s1 = _cover_stats(best, msgs, codec)
        e1 = np.array([r.error for r in res])
        rows.append((b, e0.mean(), e1.mean(), s0.mean(), s1.mean(), _finite_mean(p0), _finite_mean(p1),
                     "unavailable", "unavailable"))
        results.summary.append(f"payload {b}: error {e0.mean():.6f} -> {e1.mean():.6f}")
    results.csvs["payload_sweep"] = (SWEEP_HEADER, rows)


def stage_robustness(stage: StageConfig, results: Results) -> None:
    corpus = _corpus(stage, results)
    codec = _codec(stage, results)
    ddpm = _ddpm(stage, results)
    kind = str(stage.get("robust.channel", "gaussian"))
    if kind not in ("gaussian", "jpeg"):
        raise ConfigError("robust.channel must be gaussian or jpeg")
    levels = _float_list(str(stage.get("robust.levels", "0.01,0.02" if kind == "gaussian" else "50,75,90")),
                         "robust.levels")
    base_cfg, count, chunk = _selection_config(stage, "ddim")
    covers = corpus.heldout[:count]
    h, w = covers.shape[1:3]
    msgs = sample_message(h, w, codec.config.payload, [stage.seed, 5], batch=len(covers))
    rows = []
    for lv in levels:
        over = {"channel": kind}
        over.update({"gaussian_beta": lv} if kind == "gaussian" else {"jpeg_quality": int(lv)})
        cfg = SelectionConfig(**{**base_cfg.to_kv(), **over})
        res = run_batched(select_ddim_batch, len(covers), chunk, covers, msgs, codec=codec, diffusion=ddpm,
                          schedule=ddpm.schedule(), config=cfg)
        channel = make_channel(kind, int(lv) if kind == "jpeg" else 75, lv if kind == "gaussian" else 0.0,
                               stage.seed + 1)
        base = np.stack([r.baseline_cover for r in res])
        best = np.stack([r.cover for r in res])
        e_orig, _, _ = _cover_stats(covers, msgs, codec, channel)
        e_base, _, _ = _cover_stats(base, msgs, codec, channel)
        e_best, _, _ = _cover_stats(best, msgs, codec, channel)
        rows.append((kind, lv, e_orig.mean(), e_base.mean(), e_best.mean()))
        results.summary.append(f"{kind} {lv}: baseline {e_base.mean():.6f} selected {e_best.mean():.6f}")
    results.csvs["robustness"] = (["channel", "level", "error_original", "error_baseline", "error_selected"], rows)


def run_steganalysis(corpus: Corpus, surrogate: Corpus, codec_cfg: CodecConfig, det_cfg: DetectorConfig,
                     weight: float, count: int, seed: int):
    """Scenario 1 and 2 for one payload; returns {scenario: (detection %, error %)} plus models."""
    surrogate_codec, _ = train_codec(surrogate.train, codec_cfg)
    s_covers = surrogate.train
    s_stegos, _ = A.encode_batch(s_covers, surrogate_codec, [seed, 21])
    detector, _ = train_detector(s_covers, s_stegos, det_cfg)
    held = corpus.heldout[:count]
    codec1, _ = train_codec(corpus.train, codec_cfg)
    ev1 = evaluate_codec(codec1, held, seed=[seed, 22])
    det1 = detection_rate(detector, ev1.stegos)
    penalty = lambda s: steganalysis_logit_loss(detector, s) * weight
    codec2, _ = train_codec(corpus.train, codec_cfg, penalty=penalty, model=None)
    ev2 = evaluate_codec(codec2, held, seed=[seed, 22])
    det2 = detection_rate(detector, ev2.stegos)
    return {1: (det1, 100 * ev1.error_rate), 2: (det2, 100 * ev2.error_rate)}, detector, codec1, codec2


def stage_steganalyze(stage: StageConfig, results: Results) -> None:
    corpus = _corpus(stage, results)
    payloads = _int_list(str(stage.get("stegan.payloads", "1,2")), "stegan.payloads")
    weight = float(stage.get("stegan.weight", 0.3))
    count = int(stage.get("stegan.count", 128))
    sur_seed = int(stage.get("stegan.surrogate_seed", stage.seed + 1))
    spec = SyntheticSpec.from_kv({k: str(v) for k, v in corpus.provenance.items()
                                  if k in SyntheticSpec.__dataclass_fields__})
    surrogate = generate_synthetic_corpus(SyntheticSpec(**{**spec.to_kv(), "seed": sur_seed}), len(corpus))
    det_cfg = _build(DetectorConfig, stage.group("detector"), channels=corpus.images.shape[3], seed=stage.seed)
    rows = []
    for b in payloads:
        out, *_ = run_steganalysis(corpus, surrogate, _codec_config(stage, corpus.images.shape[3], payload=b),
                                   det_cfg, weight, count, stage.seed)
        for sc in (1, 2):
            rows.append((b, sc, *out[sc]))
            results.summary.append(f"payload {b} scenario {sc}: detection={out[sc][0]:.2f}% error={out[sc][1]:.4f}%")
    path = stage.stage_dir() / "detection.csv"
    write_detection_csv(path, rows)
    results.files.append(path)


REPORT_HEADER = ["image", "error_rate", "psnr", "ssim", "entropy", "edge_density", "compression_ratio",
                 "color_diversity", "brisque"]


def stage_report(stage: StageConfig, results: Results) -> None:
    corpus = _corpus(stage, results)
    codec = _codec(stage, results)
    covers = corpus.heldout[:int(stage.get("report.count", 128))]
    h, w = covers.shape[1:3]
    msgs = sample_message(h, w, codec.config.payload, [stage.seed, 8], batch=len(covers))
    errs, ps, ss = _cover_stats(covers, msgs, codec)
    reports = []
    for i, x in enumerate(covers):
        c = M.complexity_metrics(x)
        reports.append(M.MetricReport(f"img_{i:04d}", float(errs[i]), float(ps[i]), float(ss[i]),
                                      c.entropy, c.edge_density, c.compression_ratio, c.color_diversity))
    results.csvs["metrics"] = (REPORT_HEADER, [[getattr(r, k) for k in REPORT_HEADER] for r in reports])
    metric_vecs = {k: [getattr(r, k) for r in reports]
                   for k in ("entropy", "edge_density", "compression_ratio", "color_diversity")}
    targets = {"error_rate": list(errs), "psnr": [p if math.isfinite(p) else 100.0 for p in ps], "ssim": list(ss)}
    path = stage.stage_dir() / "correlations.csv"
    if len(covers) >= 3:
        table = M.correlation_report(metric_vecs, targets, path)
        for (mk, tk), r in table.items():
            results.summary.append(f"pearson({mk},{tk})={_fmt(r)}")
    else:
        with open(path, "w") as fh:
            fh.write("metric,target,pearson_r,n\n")
    results.files.append(path)


STAGES: Dict[str, Callable[[StageConfig, Results], None]] = {
    "gen-data": stage_gen_data,
    "train-codec": stage_train_codec,
    "train-ddpm": stage_train_ddpm,
    "train-gan": stage_train_gan,
    "select-ddim": stage_select_ddim,
    "select-gan": stage_select_gan,
    "analyze": stage_analyze,
    "payload-sweep": stage_payload_sweep,
    "robustness": stage_robustness,
    "steganalyze": stage_steganalyze,
    "report": stage_report,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def load_stage(subcommand: str, config_path, seed: Optional[int], out: Optional[str]) -> StageConfig:
    try:
        text = Path(config_path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}") from None
    values = parse_config(subcommand, text)
    raw = parse_kv(text)
    seed_v = seed if seed is not None else int(values.get("seed", 0))
    out_root = Path(out if out is not None else str(values.get("out", "runs")))
    raw.pop("out", None)
    raw.pop("seed", None)
    return StageConfig(subcommand, values, seed_v, out_root, raw)


def run_experiment(subcommand: str, config_path, seed: Optional[int] = None,
                   out: Optional[str] = None) -> Path:
    """Run one stage and return the path of its manifest."""
    stage = load_stage(subcommand, config_path, seed, out)
    stage.stage_dir().mkdir(parents=True, exist_ok=True)
    results = Results()
    t0 = time.perf_counter()
    STAGES[subcommand](stage, results)
    results.timings[subcommand] = time.perf_counter() - t0
    inventory = write_report(results, stage.stage_dir())
    return write_manifest(stage, results, inventory)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stegolab", description="Cover-selection steganography experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output root (default: config 'out' or ./runs)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = run_experiment(args.subcommand, args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"stegolab {args.subcommand}: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any module abort maps to exit 2
        print(f"stegolab {args.subcommand}: aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
