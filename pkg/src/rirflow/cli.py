"""Command-line interface.

Single-measurement commands (``denoise``, ``deconv``, ``deconv-robust``,
``inpaint``, ``declip``) read a WAV observation, run the guided flow and write
the reconstructed RIR plus a JSON report. ``baseline`` runs one reference
method on the same inputs, ``synth`` writes a synthetic corpus and
``experiment`` runs a batch comparison from a TOML config.

Exit codes: 0 success, 2 configuration or input error, 3 solver failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import __version__
from .baselines import mle_declip_gn, mle_huber_deconv, mle_l2_deconv, trunc_shape
from .config import ExperimentConfig, config_from_dict, normalize_task
from .core import (
    ConfigurationError,
    InvalidInputError,
    NoiseSpec,
    SignalBuffer,
    noise_sigma_from_snr,
    read_wav,
    rms,
    write_wav,
)
from .experiment import run_experiment, synth_corpus
from .flow import FlowError, MeasurementTask, run
from .forward_ops import ClipSpec, MaskOperator, ess_sweep
from .metrics import st_nmse, st_nmse_per_band
from .refine import SolverError

log = logging.getLogger("rirflow")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

TASK_COMMANDS = ("denoise", "deconv", "deconv-robust", "inpaint", "declip")
BASELINES = {
    "denoise": ("trunc_shape",),
    "deconv": ("l2", "l2_truncshape"),
    "deconv_robust": ("l2", "huber", "huber_truncshape"),
    "declip": ("l2declip",),
}


class IOFailure(RuntimeError):
    """Reading or writing a file failed."""


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--gamma", type=float, help="uncertainty scale in [0, 1]")
    p.add_argument("--steps", type=int, help="number of flow steps T")
    p.add_argument("-v", "--verbose", action="store_true")


def _task_args(p: argparse.ArgumentParser, task: str):
    p.add_argument("input", type=Path, help="observed signal (mono WAV)")
    p.add_argument("--out", type=Path, required=True, help="output WAV")
    p.add_argument("--report", type=Path, help="JSON report path (default: <out>.json)")
    p.add_argument("--truth", type=Path, help="ground-truth RIR WAV; enables ST-NMSE outputs")
    noise = p.add_mutually_exclusive_group()
    noise.add_argument("--sigma-n", type=float, help="Gaussian noise std of the observation")
    noise.add_argument("--snr-db", type=float, help="derive sigma_n from the observation at this SNR")
    if task in ("deconv", "deconv-robust", "declip"):
        p.add_argument("--kernel", type=Path, help="excitation WAV (default: exponential sweep from the config)")
        p.add_argument("--length", type=int, help="RIR length in samples (default: len(y) - len(kernel) + 1)")
    if task == "deconv-robust":
        lap = p.add_mutually_exclusive_group()
        lap.add_argument("--laplace-b", type=float, help="Laplacian noise scale b")
        lap.add_argument("--laplace-snr-db", type=float, help="Laplacian SNR; b = sigma_eta / sqrt(2)")
    if task == "inpaint":
        p.add_argument("--gaps", help="missing spans in seconds, e.g. '0.1:0.2,0.5:1.0'")
    if task == "declip":
        p.add_argument("--clip-tau", type=float, help="clipping threshold (default: max |y|)")
        p.add_argument("--clip-zeta", type=float, help="soft-clip smoothness (default from config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rirflow", description="Training-free flow sampling for RIR inverse problems.")
    parser.add_argument("--version", action="version", version=f"rirflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for task in TASK_COMMANDS:
        p = sub.add_parser(task, help=f"{task} one measurement with the guided flow")
        _common(p)
        _task_args(p, task)
    p = sub.add_parser("baseline", help="run a reference method on one measurement")
    p.add_argument("task", choices=[t for t in TASK_COMMANDS if t != "inpaint"])
    p.add_argument("--method", help="baseline name (default: the task's first baseline)")
    _common(p)
    _task_args(p, "deconv-robust")
    p.add_argument("--clip-tau", type=float)
    p.add_argument("--clip-zeta", type=float)

    p = sub.add_parser("synth", help="write a synthetic RIR corpus and manifest")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--n-items", type=int, help="number of RIRs (overrides [corpus] n_items)")

    p = sub.add_parser("experiment", help="batch comparison over a corpus")
    _common(p)
    p.add_argument("--out", type=Path, help="results directory (overrides [experiment] out)")
    p.add_argument("--snr-db", type=float, action="append", help="SNR level; repeat for several")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--n-items", type=int, help="corpus size (overrides [corpus] n_items)")
    return parser


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _load(args, task: Optional[str] = None) -> Tuple[ExperimentConfig, str]:
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigurationError(f"config file not found: {args.config}")
        from .config import tomllib

        text = args.config.read_text(encoding="utf-8")
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{args.config}: {exc}") from exc
        base = args.config.parent
    else:
        data, text, base = {}, "", None
    if task is not None:
        data = {k: dict(v) for k, v in data.items()}
        data.setdefault("experiment", {})["task"] = task
        data.setdefault("task", {})["kind"] = task
        # method lists belong to batch runs
        data["experiment"].pop("methods", None)
    if getattr(args, "seed", None) is not None:
        data.setdefault("experiment", {})["seed"] = args.seed
        data.setdefault("flow", {})["seed"] = args.seed
    cfg = config_from_dict(data, base_dir=base)
    flow = cfg.flow
    try:
        if args.steps is not None:
            flow = replace(flow, steps_T=args.steps)
        if args.gamma is not None:
            flow = replace(flow, gamma=args.gamma)
    except InvalidInputError as exc:
        raise ConfigurationError(str(exc)) from exc
    cfg.flow = flow
    return cfg, text


def _parse_gaps(text: str):
    gaps = []
    try:
        for part in text.split(","):
            a, b = part.split(":")
            gaps.append((float(a), float(b)))
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse gaps {text!r}; expected 'start:stop,...'") from exc
    return tuple(gaps)


def _read(path, rate) -> SignalBuffer:
    try:
        return read_wav(path, rate)
    except FileNotFoundError as exc:
        raise IOFailure(f"{path}: file not found") from exc
    except (InvalidInputError, ConfigurationError):
        raise
    except (OSError, ValueError) as exc:
        raise IOFailure(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# single measurements
# --------------------------------------------------------------------------


def _measurement(args, cfg: ExperimentConfig, kind: str):
    """Build the :class:`MeasurementTask` and observation from the command line."""
    rate = cfg.flow.sample_rate
    y = _read(args.input, rate)
    settings = cfg.task
    if args.sigma_n is not None:
        sigma = float(args.sigma_n)
    elif args.snr_db is not None:
        # the clean signal is unknown; the observation stands in for it
        sigma = noise_sigma_from_snr(y, args.snr_db, settings.resolved_snr_mode)
    else:
        raise ConfigurationError("the noise level is required: pass --sigma-n or --snr-db")
    if not sigma > 0:
        raise ConfigurationError("sigma_n must be > 0")
    info = {"sigma_n": sigma}
    if kind == "denoise":
        return MeasurementTask(kind, len(y), NoiseSpec(sigma)), y, None, info
    if kind == "inpaint":
        gaps = _parse_gaps(args.gaps) if args.gaps else settings.gaps
        mask = MaskOperator.from_gaps(len(y), rate, gaps)
        info["gaps"] = [list(g) for g in gaps]
        return MeasurementTask(kind, len(y), NoiseSpec(sigma), keep=mask.keep), y, None, info

    if getattr(args, "kernel", None) is not None:
        kernel = _read(args.kernel, rate).samples
    else:
        kernel = ess_sweep(settings.sweep_s, settings.sweep_f_start, sample_rate=rate).samples
    n = args.length if getattr(args, "length", None) else len(y) - kernel.size + 1
    if n < 2 or n + kernel.size - 1 != len(y):
        raise ConfigurationError(f"observation length {len(y)} inconsistent with kernel length {kernel.size}"
                                 f" and RIR length {n}")
    info["kernel_len"] = int(kernel.size)
    if kind == "deconv":
        return MeasurementTask(kind, n, NoiseSpec(sigma), kernel=kernel), y, kernel, info
    if kind == "deconv_robust":
        if getattr(args, "laplace_b", None) is not None:
            b = float(args.laplace_b)
        else:
            snr = args.laplace_snr_db if getattr(args, "laplace_snr_db", None) is not None else settings.laplace_snr_db
            b = rms(y) * 10.0 ** (-snr / 20.0) / np.sqrt(2.0)
        if not b > 0:
            raise ConfigurationError("laplace_b must be > 0")
        info["laplace_b"] = b
        return MeasurementTask(kind, n, NoiseSpec(sigma, laplace_b=b), kernel=kernel), y, kernel, info
    tau = args.clip_tau if getattr(args, "clip_tau", None) is not None else float(np.max(np.abs(y.samples)))
    zeta = args.clip_zeta if getattr(args, "clip_zeta", None) is not None else settings.clip_zeta
    if not (tau > 0 and zeta > 0):
        raise ConfigurationError("clip tau and zeta must be > 0")
    clip = ClipSpec(tau=float(tau), zeta=float(zeta))
    info.update(tau=clip.tau, zeta=clip.zeta)
    return MeasurementTask(kind, n, NoiseSpec(sigma), kernel=kernel, clip=clip), y, kernel, info


def _metrics(truth: SignalBuffer, est: SignalBuffer, plan, csv_path: Path) -> dict:
    if len(truth) != len(est):
        raise ConfigurationError(f"ground truth has {len(truth)} samples, estimate has {len(est)}")
    full = st_nmse(truth, est)
    bands = st_nmse_per_band(truth, est, plan)
    lines = ["frame,full" + "".join(f",band_{int(c)}" for c in plan.centers)]
    for k in range(full.per_frame.size):
        vals = [full.per_frame[k]] + [b.per_frame[k] if k < b.per_frame.size else float("nan") for b in bands]
        lines.append(f"{k}," + ",".join(f"{v:.9g}" for v in vals))
    try:
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"{csv_path}: {exc}") from exc
    return {"st_nmse_avg": full.avg, "skipped_frames": full.skipped_frames,
            "band_st_nmse_avg": {str(int(c)): b.avg for c, b in zip(plan.centers, bands)},
            "frames_csv": str(csv_path)}


def _finish(args, cfg, text, kind, est: SignalBuffer, started, extra: dict) -> dict:
    out = Path(args.out)
    report_path = args.report or out.with_suffix(".json")
    truth = None
    if args.truth is not None:
        truth = _read(args.truth, cfg.flow.sample_rate)
    report = {"command": args.command, "task": kind, "version": __version__, "input": str(args.input),
              "output_wav": str(out), "config_file": str(args.config) if args.config else None,
              "config_text": text, "flow": cfg.flow.to_dict(), **extra}
    try:
        write_wav(out, est)
    except OSError as exc:
        raise IOFailure(f"{out}: {exc}") from exc
    if truth is not None:
        report["metrics"] = _metrics(truth, est, cfg.flow.band_plan, out.with_suffix(".stnmse.csv"))
    report["wall_clock_s"] = time.perf_counter() - started
    try:
        Path(report_path).write_text(json.dumps(report, indent=2, default=float), encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"{report_path}: {exc}") from exc
    return report


def cmd_task(args) -> int:
    started = time.perf_counter()
    kind = normalize_task(args.command)
    cfg, text = _load(args, kind)
    task, y, _, info = _measurement(args, cfg, kind)
    est, trace = run(task, y, cfg.flow)
    report = _finish(args, cfg, text, kind, est, started, {"measurement": info, "trace": trace.summary()})
    log.info("wrote %s", report["output_wav"])
    return EXIT_OK


def cmd_baseline(args) -> int:
    started = time.perf_counter()
    kind = normalize_task(args.task)
    method = args.method or BASELINES[kind][0]
    if method not in BASELINES[kind]:
        raise ConfigurationError(f"baseline {method!r} not available for {args.task}; choose from {BASELINES[kind]}")
    cfg, text = _load(args, kind)
    task, y, kernel, info = _measurement(args, cfg, kind)
    tol = cfg.flow.tolerances
    sigma = task.noise.sigma_n
    rate = cfg.flow.sample_rate
    extra = {"measurement": info, "method": method}
    if method == "trunc_shape":
        res = trunc_shape(y, cfg.flow.band_plan, seed=cfg.seed)
        est = res.signal
        extra.update(success=res.success, failed_bands=res.failed_bands,
                     rt_estimates=[e.rt_seconds for e in res.estimates])
    else:
        if method in ("l2", "l2_truncshape"):
            est = mle_l2_deconv(y, kernel, sigma, rate, tol)
        elif method in ("huber", "huber_truncshape"):
            est = mle_huber_deconv(y, kernel, sigma, task.noise.laplace_b, rate, tol)
        else:
            est = mle_declip_gn(y, kernel, task.clip, sigma, rate, tol)
        if method.endswith("_truncshape"):
            res = trunc_shape(est, cfg.flow.band_plan, seed=cfg.seed)
            est = res.signal
            extra.update(success=res.success, failed_bands=res.failed_bands)
    _finish(args, cfg, text, kind, est, started, extra)
    return EXIT_OK


# --------------------------------------------------------------------------
# corpus and batch runs
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg, text = _load(args)
    corpus = cfg.corpus
    if corpus.kind != "synthetic":
        raise ConfigurationError("synth needs a synthetic [corpus]")
    if args.n_items is not None:
        corpus = replace(corpus, n_items=args.n_items)
    if args.seed is not None:
        corpus = replace(corpus, seed=args.seed)
    items = synth_corpus(corpus, cfg.flow.sample_rate, cfg.flow.band_plan)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = []
        for item in items:
            path = write_wav(out / f"{item.item_id}.wav", item.signal)
            entry = item.manifest_entry()
            entry["file"] = path.name
            manifest.append(entry)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        if text:
            (out / "config.toml").write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"{out}: {exc}") from exc
    log.info("wrote %d RIRs to %s", len(items), out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg, text = _load(args)
    if args.snr_db:
        cfg.snr_levels = tuple(args.snr_db)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        cfg.workers = args.workers
    if args.n_items is not None:
        if cfg.corpus.kind != "synthetic" or args.n_items < 1:
            raise ConfigurationError("--n-items needs a synthetic corpus and a positive count")
        cfg.corpus = replace(cfg.corpus, n_items=args.n_items)
    if args.seed is not None:
        cfg.corpus = replace(cfg.corpus, seed=args.seed) if cfg.corpus.kind == "synthetic" else cfg.corpus
    out = args.out or cfg.out_dir
    if out is None:
        raise ConfigurationError("no results directory: pass --out or set [experiment] out")
    try:
        result = run_experiment(cfg, out_dir=Path(out), config_text=text)
    except OSError as exc:
        raise IOFailure(f"{out}: {exc}") from exc
    for key, row in result["summary"]["results"].items():
        print(f"{key}: success {row['success_count']}/{row['n_items']}  "
              f"ST-NMSE mean {row['st_nmse_avg_mean']:.4g}  per-band mean {row['band_st_nmse_avg_mean']:.4g}")
    return EXIT_OK


COMMANDS = {"baseline": cmd_baseline, "synth": cmd_synth, "experiment": cmd_experiment}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS.get(args.command, cmd_task)
    try:
        return handler(args)
    except (ConfigurationError, InvalidInputError) as exc:
        print(f"rirflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FlowError as exc:
        print(f"rirflow: solver failure at step {exc.step}: {exc.cause}", file=sys.stderr)
        if exc.diagnostics:
            print(f"rirflow: diagnostics: {json.dumps(exc.diagnostics, default=float)}", file=sys.stderr)
        return EXIT_SOLVER
    except SolverError as exc:
        print(f"rirflow: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except IOFailure as exc:
        print(f"rirflow: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"rirflow: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
