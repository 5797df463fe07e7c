"""Run configuration: strict YAML parsing plus cross-field checks.

Unknown keys anywhere are rejected. Every cross-field rule names the pair
of keys that conflict, e.g. ``train.losses[0].kind=vlb`` against
``paradigm.kind=rectified-flow``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .paradigm import Paradigm
from .schedule import ScheduleError, ScheduleSpec, adaptive_ramp_length, build_schedule
from .variables import DependencyGraph

__all__ = ["ConfigError", "RunConfig", "load_config", "dump_config", "check_config"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MixtureSection(_Strict):
    weights: list[float]
    means: list[list[float]]
    covs: list[list[list[float]]]


class TaskSection(_Strict):
    kind: Literal["gaussian", "latin-square", "sequence", "mixture"] = "gaussian"
    # gaussian
    mean: list[float] = Field(default_factory=lambda: [0.0, 0.0])
    rho: float = 0.8
    scale: list[float] = Field(default_factory=lambda: [1.0, 1.0])
    # latin-square
    order: int = 3
    sigma: float = 0.1
    # sequence
    length: int = 8
    phi: float = 0.9
    # explicit mixture, laid out as n variables of width dim
    mixture: Optional[MixtureSection] = None
    dim: int = 1


class ParadigmSection(_Strict):
    kind: Literal["ddpm-discrete", "cosine-flow", "rectified-flow"] = "rectified-flow"
    d_steps: int = Field(1000, ge=1)
    beta_schedule: Literal["linear", "cosine"] = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02


class DenoiserSection(_Strict):
    kind: Literal["oracle", "neural"] = "oracle"
    trunk: list[int] = Field(default_factory=lambda: [64])
    head: list[int] = Field(default_factory=lambda: [64])
    emb_dim: int = 16
    pos_dim: int = 16
    log_var: bool = False
    var_interp: bool = False
    prediction: Literal["epsilon", "x0", "v", "u"] = "x0"
    checkpoint: Optional[str] = None
    backend: Literal["auto", "numpy", "numba"] = "auto"


class TSamplerSection(_Strict):
    kind: Literal["independent-uniform", "uniform-tbar", "shared-scalar"] = "independent-uniform"
    reweighter: Literal["uniform", "logit-normal"] = "uniform"
    m: float = 0.0
    s: float = Field(1.0, gt=0)


class LossSection(_Strict):
    kind: Literal["mse", "nll", "vlb", "cosine"]
    weight: float = Field(1.0, ge=0)
    target: Literal["epsilon", "x0", "v", "u"] = "epsilon"


class TrainSection(_Strict):
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, ge=0)
    steps: int = Field(2000, ge=0)
    batch: int = Field(64, ge=1)
    seed: int = 0
    init_seed: int = 0
    losses: list[LossSection] = Field(default_factory=lambda: [LossSection(kind="mse", target="x0")])


class ScheduleSection(_Strict):
    kind: Literal["parallel", "sequential", "next-k", "rolling-window", "adaptive-certainty"] = "parallel"
    d: int = Field(64, ge=1)
    order: Union[list[int], Literal["random", "graph", "index"]] = "index"
    seed: int = 0
    overlap: float = Field(0.0, ge=0, le=1)
    k: int = Field(1, ge=1)
    window: int = Field(1, ge=1)
    stride: int = Field(1, ge=1)
    use_graph: bool = False


class SamplerSection(_Strict):
    method: Literal["ddpm-ancestral", "ddim", "euler-flow", "heun-flow"] = "ddim"
    eta: float = Field(0.0, ge=0)
    learned_variance: bool = False
    seed: int = 0
    chains: int = Field(100, ge=1)
    block: int = Field(256, ge=1)
    record: bool = False
    condition: dict[int, Union[float, list[float]]] = Field(default_factory=dict)

    @field_validator("condition")
    @classmethod
    def _nonnegative(cls, v):
        if any(i < 0 for i in v):
            raise ValueError("conditioned variable indices must be nonnegative")
        return v


class EvalSection(_Strict):
    seed: int = 0
    calibration_levels: list[float] = Field(default_factory=lambda: [0.05, 0.95])


class OutputSection(_Strict):
    directory: str = "out"
    images: bool = True
    scale: int = Field(8, ge=1)


class RunConfig(_Strict):
    task: TaskSection = Field(default_factory=TaskSection)
    paradigm: ParadigmSection = Field(default_factory=ParadigmSection)
    denoiser: DenoiserSection = Field(default_factory=DenoiserSection)
    tsampler: TSamplerSection = Field(default_factory=TSamplerSection)
    train: TrainSection = Field(default_factory=TrainSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    output: OutputSection = Field(default_factory=OutputSection)


def _pair(k1, v1, k2, v2, why: str) -> ConfigError:
    return ConfigError(f"{k1}={v1} conflicts with {k2}={v2}: {why}")


def task_size(cfg: RunConfig) -> tuple[int, int]:
    t = cfg.task
    if t.kind == "gaussian":
        return len(t.mean), 1
    if t.kind == "latin-square":
        return t.order * t.order, 1
    if t.kind == "sequence":
        return t.length, 1
    D = len(t.mixture.means[0])
    return D // t.dim, t.dim


def check_config(cfg: RunConfig, command: str, base: Path | None = None) -> None:
    """Cross-field rules. ``command`` decides which file references must exist."""
    p, den, smp, sch, task = cfg.paradigm, cfg.denoiser, cfg.sampler, cfg.schedule, cfg.task
    discrete = p.kind == "ddpm-discrete"
    for j, loss in enumerate(cfg.train.losses):
        key = f"train.losses[{j}]"
        if loss.kind == "vlb" and not discrete:
            raise _pair(f"{key}.kind", "vlb", "paradigm.kind", p.kind, "vlb needs the ddpm-discrete paradigm")
        if loss.kind == "vlb" and not den.var_interp:
            raise _pair(f"{key}.kind", "vlb", "denoiser.var_interp", False, "vlb trains the variance head")
        if loss.kind == "nll" and not den.log_var:
            raise _pair(f"{key}.kind", "nll", "denoiser.log_var", False, "nll trains the uncertainty head")
        if loss.kind == "cosine" and loss.target != "u":
            raise _pair(f"{key}.kind", "cosine", f"{key}.target", loss.target, "cosine loss compares velocities (u)")
        if loss.target == "u" and discrete:
            raise _pair(f"{key}.target", "u", "paradigm.kind", p.kind, "the discrete paradigm has no velocity")
    if cfg.train.losses and not any(l.weight > 0 for l in cfg.train.losses):
        raise ConfigError("train.losses needs at least one term with positive weight")
    if den.prediction == "u" and discrete:
        raise _pair("denoiser.prediction", "u", "paradigm.kind", p.kind, "the discrete paradigm has no velocity")
    if smp.method == "ddpm-ancestral" and not discrete:
        raise _pair("sampler.method", smp.method, "paradigm.kind", p.kind, "ancestral steps need the DDPM grid")
    if smp.method in ("euler-flow", "heun-flow") and discrete:
        raise _pair("sampler.method", smp.method, "paradigm.kind", p.kind, "flow steps need a velocity")
    if smp.learned_variance:
        if smp.method != "ddpm-ancestral":
            raise _pair("sampler.learned_variance", True, "sampler.method", smp.method,
                        "learned variance only applies to ancestral steps")
        if den.kind != "neural" or not den.var_interp:
            raise _pair("sampler.learned_variance", True, "denoiser.var_interp", den.var_interp and den.kind == "neural",
                        "the denoiser has no variance head")
    if task.kind == "mixture" and task.mixture is None:
        raise _pair("task.kind", "mixture", "task.mixture", None, "an explicit mixture is required")
    if task.kind == "gaussian" and len(task.scale) != len(task.mean):
        raise _pair("task.mean", task.mean, "task.scale", task.scale, "lengths differ")
    if task.kind == "gaussian" and len(task.mean) != 2:
        raise ConfigError("task.mean must have two entries for the gaussian task")
    if task.kind == "latin-square" and task.order not in (2, 3):
        raise ConfigError(f"task.order={task.order} unsupported; use 2 or 3")
    if task.kind == "mixture" and len(task.mixture.means[0]) % task.dim:
        raise _pair("task.mixture.means", "...", "task.dim", task.dim, "mixture dimension is not a multiple of dim")

    n, dim = task_size(cfg)
    for i, v in smp.condition.items():
        if i >= n:
            raise _pair("sampler.condition", i, "task", f"{n} variables", "variable index out of range")
        if len(np.atleast_1d(v)) != dim:
            raise _pair(f"sampler.condition[{i}]", v, "task.dim", dim, "value width mismatch")
    if sch.order == "graph" and task.kind != "sequence":
        raise _pair("schedule.order", "graph", "task.kind", task.kind, "only the sequence task has a dependency graph")
    if sch.use_graph and task.kind != "sequence":
        raise _pair("schedule.use_graph", True, "task.kind", task.kind, "only the sequence task has a dependency graph")
    if isinstance(sch.order, list) and sorted(sch.order) != list(range(n)):
        raise _pair("schedule.order", sch.order, "task", f"{n} variables", "not a permutation")

    if command in ("sample", "eval") and den.kind == "neural":
        ck = resolve_path(den.checkpoint, base) if den.checkpoint else None
        if ck is None or not ck.exists():
            raise ConfigError(f"denoiser.checkpoint={den.checkpoint!r} does not exist (train first)")
    if command == "train":
        if den.kind != "neural":
            raise _pair("denoiser.kind", den.kind, "command", "train", "only the neural denoiser is trained")
        if not den.checkpoint:
            raise ConfigError("denoiser.checkpoint must name the file train writes")

    if command in ("sample", "viz-schedule"):
        _check_schedule_grid(cfg, n)


def _check_schedule_grid(cfg: RunConfig, n: int) -> None:
    """Dry-run the schedule against the paradigm so grid mismatches fail before any work."""
    p, sch, smp = cfg.paradigm, cfg.schedule, cfg.sampler
    cond = np.zeros(n, bool)
    cond[list(cfg.sampler.condition)] = True
    graph = None
    if cfg.task.kind == "sequence":
        graph = DependencyGraph(n, [(i, i + 1) for i in range(n - 1)])
    try:
        spec = schedule_spec(cfg, graph)
        T = build_schedule(spec, n, cond)
    except ScheduleError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    if p.kind != "ddpm-discrete":
        return
    if T.adaptive:
        ramp = adaptive_ramp_length(sch.d, int((~cond).sum()), sch.k)
        levels = np.arange(ramp + 1) / ramp
        steps = ramp
    else:
        levels = T.levels
        steps = None
    scaled = np.asarray(levels) * p.d_steps
    if np.any(np.abs(scaled - np.rint(scaled)) > 1e-9 * p.d_steps):
        raise _pair("schedule.d", sch.d, "paradigm.d_steps", p.d_steps, "schedule levels fall off the DDPM grid")
    if smp.method == "ddpm-ancestral":
        if T.adaptive:
            ok = steps == p.d_steps
        else:
            drops = -np.diff(np.rint(scaled), axis=1)
            ok = np.all((drops == 0) | (drops == 1))
        if not ok:
            raise _pair("sampler.method", smp.method, "schedule.d", sch.d,
                        "ancestral steps must move one grid level per column")


def schedule_spec(cfg: RunConfig, graph=None) -> ScheduleSpec:
    s = cfg.schedule
    order = None if s.order == "index" else s.order
    return ScheduleSpec(s.kind, s.d, order, s.seed, s.overlap, s.k, s.window, s.stride, graph)


def resolve_path(path: str | None, base: Path | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() or base is None else base / p


def load_config(path, command: str, seed: int | None = None) -> RunConfig:
    """Parse, apply a seed override and run the cross-field checks."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None
    if seed is not None:
        cfg = cfg.model_copy(
            update={
                "sampler": cfg.sampler.model_copy(update={"seed": seed}),
                "train": cfg.train.model_copy(update={"seed": seed}),
                "eval": cfg.eval.model_copy(update={"seed": seed}),
            }
        )
    check_config(cfg, command, Path.cwd())
    return cfg


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"])
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def paradigm_of(cfg: RunConfig) -> Paradigm:
    p = cfg.paradigm
    return Paradigm(p.kind, p.d_steps, p.beta_schedule, p.beta_start, p.beta_end)
