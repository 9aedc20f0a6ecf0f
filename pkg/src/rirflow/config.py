"""TOML configuration for single runs and batch experiments.

A config file has up to five tables::

    [experiment]  task, snr_db (list), methods, seed, workers, out
    [corpus]      kind = "synthetic" | "wav", generator parameters or paths
    [task]        sweep / clipping / gap parameters
    [flow]        steps, gamma, decay grid, band centers and crossover, sample_rate
    [solver]      SolverTolerances fields

Every table and key is optional; defaults follow the paper's experimental
setup. Unknown keys are rejected so typos do not silently fall back to
defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import ConfigurationError, InvalidInputError
from .filterbank import DEFAULT_CENTERS, octave_plan
from .flow import TASK_KINDS, FlowConfig
from .refine import SolverTolerances

DEFAULT_METHODS = {
    "denoise": ("rirflow", "trunc_shape", "noisy"),
    "deconv": ("rirflow", "l2", "l2_truncshape"),
    "deconv_robust": ("rirflow", "l2", "huber", "huber_truncshape"),
    "inpaint": ("rirflow", "zero_fill"),
    "declip": ("rirflow", "l2declip"),
}
# inpainting is evaluated on a practically noiseless observation
DEFAULT_SNR_DB = {"inpaint": (100.0,)}
ALL_METHODS = ("rirflow", "noisy", "zero_fill", "trunc_shape", "l2", "l2_truncshape", "huber",
               "huber_truncshape", "l2declip")


def normalize_task(name: str) -> str:
    """Accept the command-line spelling ``deconv-robust`` for ``deconv_robust``."""
    return str(name).replace("-", "_")


@dataclass(frozen=True)
class CorpusSpec:
    """Synthetic corpus generator parameters or a list of ground-truth WAVs.

    Synthetic items draw one reference RT per item, stratified over
    ``[rt_min, rt_max]``, and scale it per band by ``band_factors``.
    """

    kind: str = "synthetic"
    n_items: int = 20
    rt_min: float = 0.2
    rt_max: float = 2.3
    band_factors: Tuple[float, ...] = (1.25, 1.1, 1.0, 0.9, 0.75)
    alpha: float = 0.25
    duration_s: float = 1.5
    seed: int = 0
    paths: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("synthetic", "wav"):
            raise ConfigurationError(f"corpus kind must be 'synthetic' or 'wav', got {self.kind!r}")
        if self.kind == "wav":
            if not self.paths:
                raise ConfigurationError("a wav corpus needs at least one path")
            missing = [p for p in self.paths if not Path(p).is_file()]
            if missing:
                raise ConfigurationError(f"corpus files not found: {missing}")
            return
        if self.n_items < 1:
            raise ConfigurationError("corpus n_items must be >= 1")
        if not 0 < self.rt_min <= self.rt_max:
            raise ConfigurationError("need 0 < rt_min <= rt_max")
        if any(not f > 0 for f in self.band_factors):
            raise ConfigurationError("band_factors must be positive")
        if not self.alpha > 0 or not self.duration_s > 0:
            raise ConfigurationError("alpha and duration_s must be positive")


@dataclass(frozen=True)
class TaskSettings:
    kind: str = "denoise"
    sweep_s: float = 1.0
    sweep_f_start: float = 20.0
    laplace_snr_db: float = 30.0
    clip_c: float = 0.1
    clip_zeta: float = 1000.0
    gaps: Tuple[Tuple[float, float], ...] = ((0.1, 0.2), (0.5, 1.0))
    # "early_50ms" for denoising, "rms_full" for the measured-signal tasks
    snr_mode: Optional[str] = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"unknown task {self.kind!r}; expected one of {TASK_KINDS}")
        if not self.sweep_s > 0 or not self.sweep_f_start > 0:
            raise ConfigurationError("sweep_s and sweep_f_start must be positive")
        if not 0 < self.clip_c <= 1 or not self.clip_zeta > 0:
            raise ConfigurationError("need 0 < clip_c <= 1 and clip_zeta > 0")
        for start, stop in self.gaps:
            if not 0 <= start < stop:
                raise ConfigurationError(f"invalid gap ({start}, {stop})")
        if self.snr_mode not in (None, "early_50ms", "rms_full"):
            raise ConfigurationError(f"unknown snr_mode {self.snr_mode!r}")

    @property
    def resolved_snr_mode(self) -> str:
        if self.snr_mode is not None:
            return self.snr_mode
        return "early_50ms" if self.kind == "denoise" else "rms_full"


@dataclass
class ExperimentConfig:
    task: TaskSettings = field(default_factory=TaskSettings)
    flow: FlowConfig = field(default_factory=FlowConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    snr_levels: Optional[Tuple[float, ...]] = None
    methods: Tuple[str, ...] = ()
    seed: int = 0
    workers: int = 1
    out_dir: Optional[Path] = None

    def __post_init__(self):
        if not self.methods:
            self.methods = DEFAULT_METHODS[self.task.kind]
        if self.snr_levels is None:
            self.snr_levels = DEFAULT_SNR_DB.get(self.task.kind, (30.0,))
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; expected a subset of {ALL_METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigurationError("duplicate methods")
        if not self.snr_levels:
            raise ConfigurationError("need at least one SNR level")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")


def _take(table: dict, cls, name: str, renames: Optional[dict] = None) -> dict:
    renames = renames or {}
    allowed = {f.name for f in fields(cls)} | set(renames)
    unknown = set(table) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return {renames.get(k, k): v for k, v in table.items()}


def _flow_from_table(table: dict, solver: dict, seed: int) -> FlowConfig:
    table = dict(table)
    centers = table.pop("bands", None)
    transition = table.pop("band_transition", None)
    allowed = {"steps", "gamma", "schedule", "sample_rate", "rt_min", "rt_max", "rt_count", "rt_spacing",
               "alpha_sq", "alpha_sq_max", "seed"}
    unknown = set(table) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in [flow]: {sorted(unknown)}")
    kw = {("steps_T" if k == "steps" else k): v for k, v in table.items()}
    kw.setdefault("seed", seed)
    rate = int(kw.get("sample_rate", 8000))
    if centers is not None or transition is not None:
        if centers is None and rate != 8000:
            raise ConfigurationError("[flow] bands must be given explicitly when sample_rate is not 8000 Hz")
        extra = {} if transition is None else {"transition": float(transition)}
        kw["band_plan"] = octave_plan(rate, centers if centers is not None else DEFAULT_CENTERS, **extra)
    elif rate != 8000:
        raise ConfigurationError("[flow] bands must be given explicitly when sample_rate is not 8000 Hz")
    try:
        kw["tolerances"] = SolverTolerances(**_take(solver, SolverTolerances, "solver"))
        return FlowConfig(**kw)
    except InvalidInputError as exc:
        raise ConfigurationError(str(exc)) from exc


def config_from_dict(data: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from parsed TOML tables."""
    unknown = set(data) - {"experiment", "corpus", "task", "flow", "solver"}
    if unknown:
        raise ConfigurationError(f"unknown tables: {sorted(unknown)}")
    exp = dict(data.get("experiment", {}))
    allowed = {"task", "snr_db", "methods", "seed", "workers", "out"}
    if set(exp) - allowed:
        raise ConfigurationError(f"unknown keys in [experiment]: {sorted(set(exp) - allowed)}")
    seed = int(exp.get("seed", 0))
    task_table = dict(data.get("task", {}))
    task_table.setdefault("kind", exp.get("task", "denoise"))
    task_table["kind"] = normalize_task(task_table["kind"])
    if "gaps" in task_table:
        task_table["gaps"] = tuple(tuple(float(v) for v in g) for g in task_table["gaps"])
    task = TaskSettings(**_take(task_table, TaskSettings, "task"))

    corpus_table = dict(data.get("corpus", {}))
    if "band_factors" in corpus_table:
        corpus_table["band_factors"] = tuple(float(v) for v in corpus_table["band_factors"])
    if "paths" in corpus_table:
        root = base_dir or Path(".")
        corpus_table["paths"] = tuple(str((root / p) if not Path(p).is_absolute() else Path(p))
                                      for p in corpus_table["paths"])
    corpus = CorpusSpec(**_take(corpus_table, CorpusSpec, "corpus"))
    flow = _flow_from_table(data.get("flow", {}), data.get("solver", {}), seed)
    if corpus.kind == "synthetic" and len(corpus.band_factors) not in (0, flow.band_plan.n_bands):
        raise ConfigurationError("band_factors must have one entry per band (or be empty for one broadband RT)")
    snr = exp.get("snr_db")
    snr_levels = None if snr is None else tuple(float(s) for s in (snr if isinstance(snr, list) else [snr]))
    out = exp.get("out")
    return ExperimentConfig(task=task, flow=flow, corpus=corpus, snr_levels=snr_levels,
                            methods=tuple(exp.get("methods", ())), seed=seed,
                            workers=int(exp.get("workers", 1)), out_dir=Path(out) if out else None)


def load_config(path) -> Tuple[ExperimentConfig, str]:
    """Parse a TOML file; returns the config and the raw text (archived verbatim)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent), text
