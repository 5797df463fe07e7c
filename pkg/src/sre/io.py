"""File formats: CSV exports, PGM/PPM images and metrics JSON."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .sampler import Trajectory
from .schedule import ScheduleMatrix
from .tasks import Metrics
from .variables import ReasoningState

METRIC_KEYS = ("moment_error", "nll", "validity_rate", "uncertainty_calibration")
BOARD_SCALE = 32


def _fmt(x: float) -> str:
    return repr(float(x))


def write_schedule_csv(schedule: ScheduleMatrix, path) -> None:
    """One row per variable, one column per schedule column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", *[f"c{k}" for k in range(schedule.levels.shape[1])]])
        for i, row in enumerate(schedule.levels):
            w.writerow([i, *map(_fmt, row)])


def write_samples_csv(values, path, var=None) -> None:
    """Rows (chain, variable, v0, v1, ...) and, if given, the predicted uncertainty."""
    values = np.asarray(values, dtype=np.float64)
    B, n, dim = values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "variable", *[f"v{j}" for j in range(dim)], *(["var"] if var is not None else [])])
        for c in range(B):
            for i in range(n):
                extra = [_fmt(var[c, i])] if var is not None else []
                w.writerow([c, i, *map(_fmt, values[c, i]), *extra])


def read_samples_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["chain", "variable"]:
        raise ValueError(f"{path}: not a samples file")
    has_var = header[-1] == "var"
    dim = len(header) - 2 - int(has_var)
    arr = np.array(body, dtype=np.float64)
    B, n = int(arr[:, 0].max()) + 1, int(arr[:, 1].max()) + 1
    values = np.empty((B, n, dim))
    values[arr[:, 0].astype(int), arr[:, 1].astype(int)] = arr[:, 2 : 2 + dim]
    var = None
    if has_var:
        var = np.empty((B, n))
        var[arr[:, 0].astype(int), arr[:, 1].astype(int)] = arr[:, -1]
    return values, var


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Rows (chain, column, variable, level, v0, ...) for every recorded snapshot."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = traj.values[0].shape[-1]
        w.writerow(["chain", "column", "variable", "level", *[f"v{j}" for j in range(dim)]])
        B, n = traj.levels[0].shape
        for c in range(B):
            for col, vals, lv in zip(traj.columns, traj.values, traj.levels):
                for i in range(n):
                    w.writerow([c, col, i, _fmt(lv[c, i]), *map(_fmt, vals[c, i])])


def write_metrics_json(metrics: Metrics, path) -> None:
    data = {k: getattr(metrics, k) for k in METRIC_KEYS}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=False) + "\n")


def write_loss_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for k, v in enumerate(trace):
            w.writerow([k, _fmt(v)])


def _write_image(pixels: np.ndarray, path, color: bool) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]
    if color:
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[..., None], 3, axis=-1)
        head = b"P6\n%d %d\n255\n" % (w, h)
    else:
        head = b"P5\n%d %d\n255\n" % (w, h)
    with open(path, "wb") as fh:
        fh.write(head + pixels.tobytes())


def read_pnm(path) -> np.ndarray:
    """Minimal reader for the files written here (no comments in the header)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    magic, size, _, body = parts
    w, h = map(int, size.split())
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if magic == b"P6" else arr.reshape(h, w)


def value_to_gray(values) -> np.ndarray:
    """Map values in [-1, 1] to 0..255, so 0 lands on mid-gray."""
    return np.rint(np.clip((np.asarray(values, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0) * 255).astype(np.uint8)


def render_board(board, path, order: int | None = None, color: bool = False) -> None:
    """Board values (a state, an (n, 1) matrix or an order x order grid) as gray cells, 32 px each."""
    values = board.values if isinstance(board, ReasoningState) else np.asarray(board, dtype=np.float64)
    if order is None:
        order = int(round(np.sqrt(values.size)))
    if order * order != values.size:
        raise ValueError(f"cannot lay out {values.size} values as a {order} x {order} board")
    cells = value_to_gray(values.reshape(order, order))
    _write_image(np.kron(cells, np.ones((BOARD_SCALE, BOARD_SCALE), np.uint8)), path, color)


def render_schedule(schedule: ScheduleMatrix | np.ndarray, path, scale: int = 8, color: bool = False) -> None:
    """Level heat map: one cell per (variable, column); level 1 black, level 0 white."""
    levels = schedule.levels if isinstance(schedule, ScheduleMatrix) else np.asarray(schedule, dtype=np.float64)
    cells = np.rint((1.0 - np.clip(levels, 0.0, 1.0)) * 255).astype(np.uint8)
    _write_image(np.kron(cells, np.ones((scale, scale), np.uint8)), path, color)


def render_ppm(obj, path, **kwargs) -> None:
    """Dispatch on type: schedules become heat maps, anything else a board."""
    if isinstance(obj, ScheduleMatrix):
        render_schedule(obj, path, **kwargs)
    else:
        render_board(obj, path, **kwargs)
