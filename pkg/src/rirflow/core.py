"""Signal containers, energy-decay and SNR utilities, synthetic RIRs and WAV I/O."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.io import wavfile

from . import kernels

# per-sample decay rate from reverberation time: lambda = RT_CONSTANT / (RT * fs)
RT_CONSTANT = 6.90


class InvalidInputError(ValueError):
    """Raised when a signal or parameter violates an operation's precondition."""


class ConfigurationError(ValueError):
    """Raised for inconsistent configuration (band plans, sample rates, ...)."""


@dataclass(frozen=True)
class SignalBuffer:
    """Finite real-valued discrete-time signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.shape[0] < 1:
            raise InvalidInputError("SignalBuffer needs a non-empty 1-D sample array")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("SignalBuffer samples must be finite")
        if int(self.sample_rate) <= 0 or int(self.sample_rate) != self.sample_rate:
            raise InvalidInputError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.samples if dtype is None else self.samples.astype(dtype)

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "SignalBuffer":
        return SignalBuffer(samples, self.sample_rate)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian standard deviation plus optional Laplacian scale."""

    sigma_n: float
    laplace_b: Optional[float] = None

    def __post_init__(self):
        if not self.sigma_n >= 0:
            raise InvalidInputError("sigma_n must be >= 0")
        if self.laplace_b is not None and not self.laplace_b > 0:
            raise InvalidInputError("laplace_b must be > 0 when given")


ArrayLike = Union[SignalBuffer, np.ndarray, Sequence[float]]


def as_array(x: ArrayLike) -> np.ndarray:
    """Samples of ``x`` as a contiguous float64 array (no copy when possible)."""
    if isinstance(x, SignalBuffer):
        return x.samples
    return np.ascontiguousarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# RNG streams
# --------------------------------------------------------------------------


def stream_seed(seed: int, *keys: Union[str, int]) -> np.random.SeedSequence:
    """Seed sequence for an independent stream named by ``keys``.

    String keys are hashed with CRC32 so stream ids are stable across runs and
    interpreters (unlike the builtin ``hash``).
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.SeedSequence(entropy)


def make_rng(seed, *keys) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(stream_seed(seed, *keys)))


# --------------------------------------------------------------------------
# energy decay and noise level
# --------------------------------------------------------------------------


def schroeder_edc(x: ArrayLike) -> np.ndarray:
    """Backward-integrated energy ``EDC(m) = sum_{k>=m} x_k^2``.

    The result is non-increasing by construction (running sum of non-negative
    terms), so no post-hoc monotonisation is applied.
    """
    samples = as_array(x)
    if samples.size == 0:
        raise InvalidInputError("EDC of an empty signal")
    return kernels.reverse_cumsum_sq(np.ascontiguousarray(samples))


def rms(x: ArrayLike) -> float:
    samples = as_array(x)
    return float(np.sqrt(np.mean(samples * samples)))


def noise_sigma_from_snr(reference: SignalBuffer, snr_db: float, mode: str = "rms_full") -> float:
    """Gaussian noise std giving ``snr_db`` relative to ``reference``.

    ``mode="rms_full"`` uses the RMS of the whole reference; ``"early_50ms"``
    uses the RMS of its first 50 ms (window rounded down to whole samples).
    """
    samples = as_array(reference)
    if samples.size == 0:
        raise InvalidInputError("empty reference")
    if mode == "early_50ms":
        if not isinstance(reference, SignalBuffer):
            raise InvalidInputError("early_50ms mode needs a SignalBuffer (sample rate)")
        n_early = int(np.floor(0.05 * reference.sample_rate))
        if n_early < 1 or samples.size < n_early:
            raise InvalidInputError("reference shorter than 50 ms")
        samples = samples[:n_early]
    elif mode != "rms_full":
        raise InvalidInputError(f"unknown SNR mode {mode!r}")
    level = rms(samples)
    if level == 0.0:
        raise InvalidInputError("zero-energy reference")
    return level * 10.0 ** (-snr_db / 20.0)


def rt_to_lambda(rt_seconds, sample_rate):
    """Per-sample decay rate ``6.90 / (RT * fs)``."""
    return RT_CONSTANT / (np.asarray(rt_seconds, dtype=np.float64) * sample_rate)


def lambda_to_rt(lam, sample_rate):
    return RT_CONSTANT / (np.asarray(lam, dtype=np.float64) * sample_rate)


# --------------------------------------------------------------------------
# synthetic RIRs
# --------------------------------------------------------------------------


def synth_rir(rt_seconds, alpha: float, n_samples: int, sample_rate: int, seed, plan=None) -> SignalBuffer:
    """Exponentially decaying white Gaussian noise, ``x_k ~ N(0, alpha^2 e^{-2 lambda k})``.

    ``rt_seconds`` may be a list with one RT per band of ``plan`` (default: the
    5-band octave plan); each band gets its own band-limited white carrier and
    envelope, so band ``b`` carries a fraction of the full-band variance equal to
    its bandwidth fraction.
    """
    if not alpha > 0:
        raise InvalidInputError("alpha must be > 0")
    if int(n_samples) < 1:
        raise InvalidInputError("n_samples must be >= 1")
    rng = make_rng(seed, "synth_rir")
    k = np.arange(int(n_samples))
    rts = np.atleast_1d(np.asarray(rt_seconds, dtype=np.float64))
    if np.any(~(rts > 0)):
        raise InvalidInputError("reverberation times must be > 0")
    if np.ndim(rt_seconds) == 0:
        lam = float(rt_to_lambda(rts[0], sample_rate))
        samples = alpha * np.exp(-lam * k) * rng.standard_normal(k.size)
        return SignalBuffer(samples, sample_rate)

    from .filterbank import brickwall, default_plan, split_array

    plan = plan if plan is not None else default_plan(sample_rate)
    if len(rts) != plan.n_bands:
        raise InvalidInputError(f"{len(rts)} RTs for a {plan.n_bands}-band plan")
    n = int(n_samples)
    # band-limit stationary noise first, then apply each band's envelope, so the
    # brick-wall ringing of a loud onset never enters the ground truth
    carriers = split_array(rng.standard_normal(n), brickwall(plan))
    out = np.zeros(n)
    for b, rt in enumerate(rts):
        lam = float(rt_to_lambda(rt, sample_rate))
        out += alpha * np.exp(-lam * k) * carriers[b]
    return SignalBuffer(out, sample_rate)


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------


def read_wav(path, expected_rate: Optional[int] = None) -> SignalBuffer:
    """Read a mono WAV (float32 or 16-bit PCM) as float64.

    A sample-rate mismatch with ``expected_rate`` is a configuration error; no
    resampling is done.
    """
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: only mono WAV files are supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    else:
        raise InvalidInputError(f"{path}: unsupported WAV sample format {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise ConfigurationError(f"{path}: sample rate {rate} Hz does not match configured {expected_rate} Hz")
    return SignalBuffer(samples, rate)


def write_wav(path, signal: SignalBuffer) -> Path:
    """Write ``signal`` as 32-bit float mono WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), signal.sample_rate, signal.samples.astype(np.float32))
    return path
