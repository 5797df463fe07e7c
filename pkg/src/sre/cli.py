"""Command-line entry point: ``sre {train,sample,eval,viz-schedule} --config FILE``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, dump_config, load_config, paradigm_of, resolve_path, schedule_spec
from .nn import DenoiserNet, LossSpec, LossTerm, NetConfig, NeuralDenoiser, Optimizer, load_net, save_net, train
from .oracle import GaussianMixture, OracleDenoiser
from .paradigm import coefficients
from .sampler import AdaptivePolicy, StepMethod, initial_noise, run_chains
from .schedule import build_schedule
from .tasks import (
    TaskDomain,
    condition_mixture,
    correlated_gaussian,
    evaluate_samples,
    identity_task,
    latin_square_mixture,
    sequence_task,
)
from .tsampling import TSampler

COMMANDS = ("train", "sample", "eval", "viz-schedule")


def build_task(cfg: RunConfig) -> TaskDomain:
    t = cfg.task
    if t.kind == "gaussian":
        return correlated_gaussian(t.mean, t.rho, t.scale)[1]
    if t.kind == "latin-square":
        return latin_square_mixture(t.order, t.sigma)[1]
    if t.kind == "sequence":
        return sequence_task(t.length, t.phi)[1]
    m = t.mixture
    gmm = GaussianMixture(m.weights, m.means, m.covs)
    return identity_task(gmm, gmm.D // t.dim, t.dim, "mixture")


def net_config(cfg: RunConfig, dim: int) -> NetConfig:
    d = cfg.denoiser
    return NetConfig(dim, tuple(d.trunk), tuple(d.head), d.emb_dim, d.pos_dim, d.log_var, d.var_interp, d.prediction)


def build_denoiser(cfg: RunConfig, task: TaskDomain, base: Path, conditioned=None):
    paradigm = paradigm_of(cfg)
    if cfg.denoiser.kind == "oracle":
        return OracleDenoiser(task.mixture, paradigm, task.n, task.dim, cfg.denoiser.backend)
    net = load_net(resolve_path(cfg.denoiser.checkpoint, base))
    if net.config.dim != task.dim:
        raise ConfigError(f"checkpoint dim {net.config.dim} does not match task.dim {task.dim}")
    return NeuralDenoiser(net, paradigm, task.positions, conditioned)


def _graph(cfg: RunConfig, task: TaskDomain):
    return task.graph if (cfg.schedule.use_graph or cfg.schedule.order == "graph") else None


def _threads() -> int:
    raw = os.environ.get("SRE_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise ConfigError(f"SRE_THREADS={raw!r} is not an integer") from None


def cmd_train(cfg: RunConfig, out: Path, base: Path) -> None:
    task = build_task(cfg)
    paradigm = paradigm_of(cfg)
    ncfg = net_config(cfg, task.dim)
    net = DenoiserNet.init(ncfg, np.random.default_rng(cfg.train.init_seed))
    spec = LossSpec(tuple(LossTerm(l.kind, l.weight, l.target) for l in cfg.train.losses))
    ts = TSampler(cfg.tsampler.kind, cfg.tsampler.reweighter, cfg.tsampler.m, cfg.tsampler.s)
    opt = Optimizer(cfg.train.optimizer, cfg.train.lr, cfg.train.steps, cfg.train.batch)
    net, trace = train(net, task, ts, opt, paradigm, spec, np.random.default_rng(cfg.train.seed))
    ck = resolve_path(cfg.denoiser.checkpoint, base)
    ck.parent.mkdir(parents=True, exist_ok=True)
    save_net(net, ck)
    io.write_loss_csv(trace, out / "loss.csv")


def _conditioning(cfg: RunConfig, task: TaskDomain):
    cond = np.zeros(task.n, bool)
    values = np.zeros((task.n, task.dim))
    for i, v in cfg.sampler.condition.items():
        cond[i] = True
        values[i] = np.atleast_1d(v)
    return cond, values


def cmd_sample(cfg: RunConfig, out: Path, base: Path) -> None:
    task = build_task(cfg)
    paradigm = paradigm_of(cfg)
    cond, cond_values = _conditioning(cfg, task)
    den = build_denoiser(cfg, task, base, cond)
    s = cfg.sampler
    method = StepMethod(s.method, s.eta, s.learned_variance)
    spec = schedule_spec(cfg, _graph(cfg, task))
    policy = AdaptivePolicy.from_spec(spec) if spec.kind == "adaptive-certainty" else build_schedule(spec, task.n, cond)

    def run_block(start: int):
        count = min(s.block, s.chains - start)
        x = initial_noise(s.seed, count, task.n, task.dim, offset=start)
        x[:, cond] = cond_values[cond]
        return run_chains(den, x, cond, policy, paradigm, method, s.seed, s.record, chain_offset=start)

    starts = list(range(0, s.chains, s.block))
    with ThreadPoolExecutor(max_workers=min(_threads(), len(starts))) as pool:
        results = list(pool.map(run_block, starts))
    values = np.concatenate([r.values for r in results])
    io.write_samples_csv(values, out / "samples.csv")
    if s.record:
        traj = results[0].trajectory
        for r in results[1:]:
            if r.trajectory.columns != traj.columns:
                raise RuntimeError("chain blocks recorded different numbers of rounds")
        merged = type(traj)(
            list(traj.columns),
            [np.concatenate(v) for v in zip(*(r.trajectory.values for r in results))],
            [np.concatenate(v) for v in zip(*(r.trajectory.levels for r in results))],
            list(traj.predictions),
        )
        io.write_trajectory_csv(merged, out / "trajectory.csv")
    if cfg.output.images and task.order is not None:
        io.render_board(values[0], out / "board_0.pgm", task.order)


def cmd_eval(cfg: RunConfig, out: Path, base: Path) -> None:
    task = build_task(cfg)
    path = out / "samples.csv"
    if not path.exists():
        raise ConfigError(f"{path} not found (run sample first)")
    values, _ = io.read_samples_csv(path)
    if values.shape[1:] != (task.n, task.dim):
        raise ConfigError(f"samples have shape {values.shape[1:]}, task expects ({task.n}, {task.dim})")
    preds = _calibration_predictions(cfg, task, values, base)
    metrics = evaluate_samples(values, task, preds)
    cond, cond_values = _conditioning(cfg, task)
    if cond.any() and task.mixture is not None:
        # moments and likelihood of the free variables against their exact conditional
        coords = (np.flatnonzero(cond)[:, None] * task.dim + np.arange(task.dim)).ravel()
        gmm = condition_mixture(task.mixture, coords, cond_values[cond])
        free = evaluate_samples(values[:, ~cond], identity_task(gmm, int((~cond).sum()), task.dim))
        metrics.moment_error, metrics.nll = free.moment_error, free.nll
    io.write_metrics_json(metrics, out / "metrics.json")


def _calibration_predictions(cfg: RunConfig, task: TaskDomain, values: np.ndarray, base: Path):
    """Re-noise each sample at random levels and ask the denoiser for x0 and its uncertainty."""
    den = build_denoiser(cfg, task, base)
    if cfg.denoiser.kind == "neural" and not cfg.denoiser.log_var:
        return None
    paradigm = paradigm_of(cfg)
    rng = np.random.default_rng(cfg.eval.seed)
    lo, hi = cfg.eval.calibration_levels
    levels = rng.uniform(lo, hi, values.shape[:2])
    if paradigm.is_discrete:
        d = paradigm.d_steps
        levels = np.clip(np.rint(levels * d), 1, d) / d
    c = coefficients(paradigm, levels)
    x_t = c.a[..., None] * values + c.b[..., None] * rng.standard_normal(values.shape)
    return den(x_t, levels)


def cmd_viz(cfg: RunConfig, out: Path, base: Path) -> None:
    task = build_task(cfg)
    cond, _ = _conditioning(cfg, task)
    T = build_schedule(schedule_spec(cfg, _graph(cfg, task)), task.n, cond)
    io.write_schedule_csv(T, out / "schedule.csv")
    io.render_schedule(T, out / "schedule.pgm", scale=cfg.output.scale)


HANDLERS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "viz-schedule": cmd_viz}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sre", description="Sequential reasoning by heterogeneous-level denoising.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    ap.add_argument("--out", default=None, help="output directory (overrides output.directory)")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    config_path = Path(args.config)
    try:
        cfg = load_config(config_path, args.command, args.seed)
        out = Path(args.out) if args.out else Path(cfg.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.yaml").write_text(dump_config(cfg))
        HANDLERS[args.command](cfg, out, Path.cwd())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
