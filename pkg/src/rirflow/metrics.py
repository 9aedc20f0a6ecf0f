"""Short-time NMSE and EDC curves for evaluating RIR estimates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import InvalidInputError, SignalBuffer, as_array, schroeder_edc
from .filterbank import BandPlan, split_array


@dataclass(frozen=True)
class StNmseReport:
    per_frame: np.ndarray
    avg: float
    skipped_frames: int
    frame_ms: float = 20.0
    hop_ms: float = 10.0


def _frame_sizes(sample_rate, frame_ms, hop_ms):
    frame = int(round(frame_ms * sample_rate / 1000.0))
    hop = int(round(hop_ms * sample_rate / 1000.0))
    if frame < 1 or hop < 1:
        raise InvalidInputError("frame and hop must span at least one sample")
    return frame, hop


def st_nmse(x_true, x_est, frame_ms: float = 20.0, hop_ms: float = 10.0,
            sample_rate: Optional[int] = None) -> StNmseReport:
    """Per-frame ``||x_w - x_hat_w||^2 / ||x_w||^2`` with rectangular frames.

    Frames whose reference energy is zero are skipped and counted. The frame
    count is ``floor((N - frame) / hop) + 1``.
    """
    rate = sample_rate
    for sig in (x_true, x_est):
        if isinstance(sig, SignalBuffer):
            if rate is not None and sig.sample_rate != rate:
                raise InvalidInputError("sample rates differ")
            rate = sig.sample_rate
    if rate is None:
        raise InvalidInputError("sample rate unknown; pass SignalBuffers or sample_rate")
    ref = as_array(x_true)
    est = as_array(x_est)
    if ref.shape != est.shape:
        raise InvalidInputError(f"length mismatch: {ref.size} vs {est.size}")
    frame, hop = _frame_sizes(rate, frame_ms, hop_ms)
    if ref.size < frame:
        raise InvalidInputError("signal shorter than one frame")
    ref_frames = sliding_window_view(ref, frame)[::hop]
    err_frames = sliding_window_view(ref - est, frame)[::hop]
    energy = np.einsum("ij,ij->i", ref_frames, ref_frames)
    err = np.einsum("ij,ij->i", err_frames, err_frames)
    valid = energy > 0.0
    per_frame = err[valid] / energy[valid]
    avg = float(per_frame.mean()) if per_frame.size else float("nan")
    return StNmseReport(per_frame, avg, int((~valid).sum()), frame_ms, hop_ms)


def st_nmse_per_band(x_true, x_est, plan: BandPlan, frame_ms: float = 20.0,
                     hop_ms: float = 10.0) -> List[StNmseReport]:
    ref = split_array(as_array(x_true), plan)
    est = split_array(as_array(x_est), plan)
    return [st_nmse(r, e, frame_ms, hop_ms, sample_rate=plan.sample_rate) for r, e in zip(ref, est)]


def edc_db(x, floor_db: float = -120.0) -> np.ndarray:
    """Normalised EDC in dB, clamped below at ``floor_db``."""
    edc = schroeder_edc(x)
    if edc[0] == 0.0:
        raise InvalidInputError("EDC of an all-zero signal")
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(edc / edc[0])
    return np.maximum(out, floor_db)


def frame_starts(n: int, sample_rate: int, frame_ms: float = 20.0, hop_ms: float = 10.0) -> np.ndarray:
    """Start index of every analysis frame used by :func:`st_nmse`."""
    frame, hop = _frame_sizes(sample_rate, frame_ms, hop_ms)
    if n < frame:
        return np.empty(0, dtype=np.int64)
    return np.arange((n - frame) // hop + 1) * hop


def masked_st_nmse(x_true, x_est, keep, sample_rate: int, frame_ms: float = 20.0, hop_ms: float = 10.0) -> float:
    """Mean ST-NMSE over the frames that lie entirely inside unobserved samples."""
    ref = as_array(x_true)
    est = as_array(x_est)
    keep = np.asarray(keep, dtype=bool)
    if not (ref.shape == est.shape == keep.shape):
        raise InvalidInputError("x_true, x_est and keep must have equal lengths")
    frame, _ = _frame_sizes(sample_rate, frame_ms, hop_ms)
    vals = []
    for s in frame_starts(ref.size, sample_rate, frame_ms, hop_ms):
        if keep[s:s + frame].any():
            continue
        energy = float(ref[s:s + frame] @ ref[s:s + frame])
        if energy > 0:
            d = ref[s:s + frame] - est[s:s + frame]
            vals.append(float(d @ d) / energy)
    if not vals:
        raise InvalidInputError("no fully masked frames")
    return float(np.mean(vals))
