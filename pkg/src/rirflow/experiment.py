"""Synthetic corpora, measurement simulation and the batch experiment harness.

Every random draw is taken from a stream keyed by ``(seed, item id, task,
SNR, purpose)``, so items can be processed in any order or in parallel and
reruns reproduce the same numbers.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .baselines import mle_declip_gn, mle_huber_deconv, mle_l2_deconv, trunc_shape
from .config import CorpusSpec, ExperimentConfig, TaskSettings
from .core import NoiseSpec, SignalBuffer, make_rng, noise_sigma_from_snr, read_wav, rms, stream_seed, synth_rir
from .flow import FlowConfig, FlowError, MeasurementTask, run
from .forward_ops import ClipSpec, ConvOperator, MaskOperator, ess_sweep, hard_clip
from .metrics import masked_st_nmse, st_nmse, st_nmse_per_band
from .refine import SolverError

log = logging.getLogger(__name__)

# synthetic per-band RTs are kept inside the denoiser's default grid
RT_CLIP = (0.1, 3.0)


@dataclass(frozen=True)
class CorpusItem:
    item_id: str
    signal: SignalBuffer
    rt_seconds: tuple
    alpha: float
    seed: int

    def manifest_entry(self) -> dict:
        from .core import rt_to_lambda

        return {"id": self.item_id, "rt_seconds": list(self.rt_seconds), "alpha": self.alpha, "seed": self.seed,
                "lambda": [float(v) for v in rt_to_lambda(np.asarray(self.rt_seconds), self.signal.sample_rate)],
                "n_samples": len(self.signal), "sample_rate": self.signal.sample_rate}


def _int_seed(*keys) -> int:
    return int(stream_seed(*keys).generate_state(1)[0])


def corpus_rts(spec: CorpusSpec) -> np.ndarray:
    """Reference RT per item: one jittered draw in each of ``n_items`` equal strata."""
    u = make_rng(spec.seed, "corpus", "rt").uniform(size=spec.n_items)
    pos = (np.arange(spec.n_items) + u) / spec.n_items
    return spec.rt_min + pos * (spec.rt_max - spec.rt_min)


def synth_corpus(spec: CorpusSpec, sample_rate: int = 8000, plan=None) -> List[CorpusItem]:
    n = int(round(spec.duration_s * sample_rate))
    items = []
    for i, base in enumerate(corpus_rts(spec)):
        seed = _int_seed(spec.seed, "corpus", "item", i)
        if spec.band_factors:
            rts = tuple(float(v) for v in np.clip(base * np.asarray(spec.band_factors), *RT_CLIP))
            sig = synth_rir(list(rts), spec.alpha, n, sample_rate, seed, plan=plan)
        else:
            rts = (float(base),)
            sig = synth_rir(float(base), spec.alpha, n, sample_rate, seed)
        items.append(CorpusItem(f"syn{i:03d}", sig, rts, spec.alpha, seed))
    return items


def load_corpus(spec: CorpusSpec, sample_rate: int, plan=None) -> List[CorpusItem]:
    if spec.kind == "synthetic":
        return synth_corpus(spec, sample_rate, plan)
    return [CorpusItem(Path(p).stem, read_wav(p, sample_rate), (), float("nan"), -1) for p in spec.paths]


# --------------------------------------------------------------------------
# measurements
# --------------------------------------------------------------------------


@dataclass
class Measurement:
    task: MeasurementTask
    y: SignalBuffer
    kernel: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)


def simulate(x: SignalBuffer, settings: TaskSettings, snr_db: float, rng) -> Measurement:
    """Synthesise the observation of ``x`` for one task at one SNR."""
    rng = make_rng(rng)
    fs = x.sample_rate
    n = len(x)
    kind = settings.kind
    if kind == "denoise":
        sigma = noise_sigma_from_snr(x, snr_db, settings.resolved_snr_mode)
        y = x.samples + sigma * rng.standard_normal(n)
        return Measurement(MeasurementTask(kind, n, NoiseSpec(sigma)), SignalBuffer(y, fs), info={"sigma_n": sigma})
    if kind == "inpaint":
        mask = MaskOperator.from_gaps(n, fs, settings.gaps)
        sigma = noise_sigma_from_snr(x, snr_db, settings.resolved_snr_mode)
        y = mask.apply(x.samples + sigma * rng.standard_normal(n))
        task = MeasurementTask(kind, n, NoiseSpec(sigma), keep=mask.keep)
        return Measurement(task, SignalBuffer(y, fs), info={"sigma_n": sigma})

    sweep = ess_sweep(settings.sweep_s, settings.sweep_f_start, sample_rate=fs).samples
    op = ConvOperator(sweep, n)
    clean = op.apply(x.samples)
    if kind == "deconv":
        sigma = rms(clean) * 10.0 ** (-snr_db / 20.0)
        y = clean + sigma * rng.standard_normal(clean.size)
        return Measurement(MeasurementTask(kind, n, NoiseSpec(sigma), kernel=sweep), SignalBuffer(y, fs), sweep,
                           {"sigma_n": sigma})
    if kind == "deconv_robust":
        sigma = rms(clean) * 10.0 ** (-snr_db / 20.0)
        sigma_eta = rms(clean) * 10.0 ** (-settings.laplace_snr_db / 20.0)
        b = sigma_eta / np.sqrt(2.0)
        y = clean + sigma * rng.standard_normal(clean.size) + rng.laplace(0.0, b, clean.size)
        task = MeasurementTask(kind, n, NoiseSpec(sigma, laplace_b=b), kernel=sweep)
        return Measurement(task, SignalBuffer(y, fs), sweep, {"sigma_n": sigma, "laplace_b": b})
    # declip: hard clipping of the measurement, smooth model in the solvers
    clip = ClipSpec.from_level(clean, settings.clip_c, settings.clip_zeta)
    clipped = hard_clip(clean, clip.tau)
    sigma = rms(clipped) * 10.0 ** (-snr_db / 20.0)
    y = clipped + sigma * rng.standard_normal(clean.size)
    task = MeasurementTask(kind, n, NoiseSpec(sigma), kernel=sweep, clip=clip)
    return Measurement(task, SignalBuffer(y, fs), sweep, {"sigma_n": sigma, "tau": clip.tau})


# --------------------------------------------------------------------------
# methods
# --------------------------------------------------------------------------


@dataclass
class MethodResult:
    estimate: Optional[SignalBuffer]
    success: bool
    info: dict = field(default_factory=dict)


def run_method(method: str, meas: Measurement, cfg: FlowConfig, seed: int) -> MethodResult:
    """Run one reconstruction method; solver failures become ``success=False``."""
    task = meas.task
    fs = meas.y.sample_rate
    sigma = task.noise.sigma_n
    tol = cfg.tolerances
    try:
        if method == "rirflow":
            est, trace = run(task, meas.y, replace(cfg, seed=seed))
            return MethodResult(est, True, trace.summary())
        if method in ("noisy", "zero_fill"):
            return MethodResult(meas.y, True)
        if method == "trunc_shape":
            res = trunc_shape(meas.y, cfg.band_plan, seed=seed)
            return MethodResult(res.signal, res.success, {"failed_bands": res.failed_bands})
        if method in ("l2", "l2_truncshape"):
            est = mle_l2_deconv(meas.y, meas.kernel, sigma, fs, tol)
        elif method in ("huber", "huber_truncshape"):
            est = mle_huber_deconv(meas.y, meas.kernel, sigma, task.noise.laplace_b, fs, tol)
        elif method == "l2declip":
            est = mle_declip_gn(meas.y, meas.kernel, task.clip, sigma, fs, tol)
        else:
            raise ValueError(f"unknown method {method!r}")
        if method.endswith("_truncshape"):
            res = trunc_shape(est, cfg.band_plan, seed=seed)
            return MethodResult(res.signal, res.success, {"failed_bands": res.failed_bands})
        return MethodResult(est, True)
    except (FlowError, SolverError) as exc:
        log.warning("%s failed: %s", method, exc)
        return MethodResult(None, False, {"error": str(exc)})


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate(x: SignalBuffer, res: MethodResult, plan, meas: Measurement) -> dict:
    row = {"success": bool(res.success)}
    if res.estimate is None:
        row.update(st_nmse_avg=float("nan"), band_st_nmse_avg=float("nan"))
        for c in plan.centers:
            row[f"band_{int(c)}"] = float("nan")
        return row
    est = res.estimate
    full = st_nmse(x, est)
    bands = st_nmse_per_band(x, est, plan)
    row["st_nmse_avg"] = full.avg
    row["band_st_nmse_avg"] = float(np.mean([b.avg for b in bands]))
    for c, b in zip(plan.centers, bands):
        row[f"band_{int(c)}"] = b.avg
    row["skipped_frames"] = full.skipped_frames
    if meas.task.kind == "inpaint":
        keep = meas.task.keep
        row["masked_st_nmse"] = masked_st_nmse(x, est, keep, x.sample_rate)
        obs = x.samples[keep]
        err = est.samples[keep] - obs
        row["observed_err_db"] = float(10.0 * np.log10(max(err @ err, 1e-300) / (obs @ obs)))
    return row


def process_item(item: CorpusItem, cfg: ExperimentConfig) -> dict:
    """All methods and SNR levels for one corpus item; returns rows and per-frame curves."""
    plan = cfg.flow.band_plan
    rows, frames, timings = [], [], []
    for snr in cfg.snr_levels:
        meas = simulate(item.signal, cfg.task, snr, stream_seed(cfg.seed, item.item_id, cfg.task.kind,
                                                                 f"{snr:g}", "measurement"))
        for method in cfg.methods:
            seed = _int_seed(cfg.seed, item.item_id, cfg.task.kind, f"{snr:g}", method)
            started = time.perf_counter()
            res = run_method(method, meas, cfg.flow, seed)
            row = {"item": item.item_id, "task": cfg.task.kind, "snr_db": snr, "method": method}
            row.update(evaluate(item.signal, res, plan, meas))
            rows.append(row)
            # wall-clock times are kept out of the tables so reruns are byte-identical
            timings.append({"item": item.item_id, "snr_db": snr, "method": method,
                            "wall_s": time.perf_counter() - started, "info": _jsonable(res.info)})
            if res.estimate is not None:
                per_frame = st_nmse(item.signal, res.estimate).per_frame
                frames.append({"item": item.item_id, "snr_db": snr, "method": method,
                               "per_frame": per_frame.tolist()})
    return {"item": item.item_id, "rows": rows, "frames": frames, "timings": timings}


def _jsonable(info: dict) -> dict:
    out = {}
    for k, v in info.items():
        if isinstance(v, (np.integer, np.floating, np.bool_)):
            v = v.item()
        if isinstance(v, (str, int, float, bool, list)) or v is None:
            out[k] = v
    return out


def _write_atomic(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def summarize(rows: List[dict], methods, snr_levels) -> dict:
    """Per (method, SNR): mean over all items, mean over successful items, success count."""
    out: Dict[str, dict] = {}
    for snr in snr_levels:
        for m in methods:
            sel = [r for r in rows if r["method"] == m and r["snr_db"] == snr]
            ok = [r for r in sel if r["success"]]
            key = f"{m}@{snr:g}dB"

            def mean(rs, col):
                vals = [r[col] for r in rs if np.isfinite(r[col])]
                return float(np.mean(vals)) if vals else float("nan")

            out[key] = {"method": m, "snr_db": snr, "n_items": len(sel), "success_count": len(ok),
                        "st_nmse_avg_mean": mean(sel, "st_nmse_avg"),
                        "st_nmse_avg_mean_successful": mean(ok, "st_nmse_avg"),
                        "st_nmse_avg_median": float(np.nanmedian([r["st_nmse_avg"] for r in sel]))
                        if sel else float("nan"),
                        "band_st_nmse_avg_mean": mean(sel, "band_st_nmse_avg"),
                        "band_st_nmse_avg_mean_successful": mean(ok, "band_st_nmse_avg")}
    return out


def _worker(args):
    item, cfg = args
    return process_item(item, cfg)


def run_experiment(cfg: ExperimentConfig, out_dir=None, config_text: Optional[str] = None,
                   items: Optional[List[CorpusItem]] = None) -> dict:
    """Run every method on every corpus item at every SNR level.

    With an output directory, per-item JSON files are written atomically as
    items finish, followed by ``results.csv`` (one row per item, method and
    SNR), ``frames.csv`` (per-frame ST-NMSE), ``summary.json`` and the
    verbatim ``config.toml``.
    """
    out_dir = Path(out_dir) if out_dir is not None else cfg.out_dir
    items = load_corpus(cfg.corpus, cfg.flow.sample_rate, cfg.flow.band_plan) if items is None else items
    if out_dir is not None:
        (out_dir / "items").mkdir(parents=True, exist_ok=True)
        if config_text is not None:
            _write_atomic(out_dir / "config.toml", config_text)
    results = []
    jobs = [(item, cfg) for item in items]
    if cfg.workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for res in pool.map(_worker, jobs):
                results.append(res)
                if out_dir is not None:
                    _write_atomic(out_dir / "items" / f"{res['item']}.json", _item_json(res))
    else:
        for job in jobs:
            res = _worker(job)
            results.append(res)
            if out_dir is not None:
                _write_atomic(out_dir / "items" / f"{res['item']}.json", _item_json(res))
    rows = [r for res in results for r in res["rows"]]
    summary = {"task": cfg.task.kind, "n_items": len(items), "methods": list(cfg.methods),
               "snr_levels": list(cfg.snr_levels), "flow": cfg.flow.to_dict(),
               "results": summarize(rows, cfg.methods, cfg.snr_levels)}
    if out_dir is not None:
        _write_rows(out_dir / "results.csv", rows)
        frame_rows = [{"item": f["item"], "snr_db": f["snr_db"], "method": f["method"], "frame": k, "st_nmse": v}
                      for res in results for f in res["frames"] for k, v in enumerate(f["per_frame"])]
        _write_rows(out_dir / "frames.csv", frame_rows)
        _write_atomic(out_dir / "summary.json", json.dumps(summary, indent=2, default=float))
        timings = [t for res in results for t in res["timings"]]
        _write_atomic(out_dir / "timings.json", json.dumps(timings, indent=2, default=float))
        if cfg.corpus.kind == "synthetic":
            _write_atomic(out_dir / "manifest.json", json.dumps([it.manifest_entry() for it in items], indent=2))
    return {"rows": rows, "summary": summary, "results": results}


def _item_json(res: dict) -> str:
    return json.dumps({k: v for k, v in res.items() if k != "timings"}, default=float)


def _write_rows(path: Path, rows: List[dict]):
    cols: List[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    tmp = path.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)
