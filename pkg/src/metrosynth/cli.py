"""Command-line interface: train, evaluate, bounds, bin.

Exit codes: 0 on success, 1 on runtime failure, 2 on invalid configuration
or arguments.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .agents import load_checkpoint, save_checkpoint
from .config import ConfigError, Experiment, load, resolved
from .models import BoundSpec, DolinarModel, dc_lower_bound
from .simulation import RunConfig, episode_rngs, run_batch
from .training import train

THREADS_ENV = "METROSYNTH_THREADS"
EVAL_CHUNK = 256


def _fmt(x) -> str:
    return repr(float(x))


def run_directory(base, prefix: str) -> Path:
    """Fresh timestamped subdirectory of ``base``; never reuses one."""
    base = Path(base)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = base / f"{prefix}-{stamp}"
    n = 1
    while path.exists():
        path = base / f"{prefix}-{stamp}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}")
    return n


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    exp = load(args.config)
    if args.seed is not None:
        exp.run.seed = args.seed
    if not exp.agent.trainable:
        raise ConfigError(f"agent.kind: {exp.agent.kind!r} has no trainable parameters")
    out = run_directory(args.out, "train")
    _write_json(out / "config.json", resolved(exp))
    rows = []
    start = time.perf_counter()
    train(exp.model, exp.agent, exp.run, exp.loss, callback=rows.append)
    elapsed = time.perf_counter() - start
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "learning_rate"])
        for r in rows:
            w.writerow([r.step, _fmt(r.loss), _fmt(r.learning_rate)])
    save_checkpoint(exp.agent, out / "checkpoint.json")
    _write_json(out / "run_info.json", {"wall_time_s": elapsed, "step_wall_times_s": [r.wall_time for r in rows]})
    print(out)
    return 0


# --------------------------------------------------------------------------
# evaluate


def evaluation_columns(model) -> list[str]:
    control = "Theta" if isinstance(model, DolinarModel) else "Tau"
    cols = ["Episode", "MeasStep", "Resources", control, "Outcome", "Estimator", "True"]
    if isinstance(model, DolinarModel):
        return cols + ["Alpha", "ProbError"]
    return cols + ["SquaredError"]


def _evaluate_chunk(exp: Experiment, seed: int, chunk: int, size: int, offset: int) -> list[list[str]]:
    cfg = exp.run
    with ad.no_grad():
        rec = run_batch(exp.model, exp.agent, cfg, episode_rngs(seed, size, stream=chunk))
    dolinar = isinstance(exp.model, DolinarModel)
    rows = []
    for k, ep in enumerate(rec):
        for t in range(len(ep.outcomes)):
            if not ep.active[t]:
                break
            est = ep.estimators[t, 0]
            true = ep.theta[0]
            row = [str(offset + k), str(t + 1), _fmt(ep.resources[t]), _fmt(ep.controls[t, 0]), _fmt(ep.outcomes[t]), _fmt(est), _fmt(true)]
            if dolinar:
                row += [_fmt(ep.theta[1]), _fmt(float(est != true))]
            else:
                row += [_fmt((est - true) ** 2)]
            rows.append(row)
    return rows


def evaluate(exp: Experiment, episodes: int, seed: int, workers: int = 1) -> str:
    """Per-step evaluation CSV as a string."""
    chunk = int(exp.evaluation.get("batch", EVAL_CHUNK))
    sizes = []
    left = episodes
    while left > 0:
        sizes.append(min(chunk, left))
        left -= sizes[-1]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int) if sizes else []
    jobs = [(seed, i + 1, s, int(o)) for i, (s, o) in enumerate(zip(sizes, offsets))]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda j: _evaluate_chunk(exp, *j), jobs))
    else:
        parts = [_evaluate_chunk(exp, *j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(evaluation_columns(exp.model))
    for part in parts:
        w.writerows(part)
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    exp = load(args.config)
    if exp.agent.trainable:
        if args.checkpoint is None:
            raise ConfigError(f"--checkpoint: required for a trainable {exp.agent.kind!r} agent")
        try:
            load_checkpoint(exp.agent, args.checkpoint)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--checkpoint: cannot read {args.checkpoint}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"--checkpoint: {exc}") from None
    episodes = args.episodes if args.episodes is not None else int(exp.evaluation.get("episodes", 1000))
    if episodes < 0:
        raise ConfigError("--episodes: must be non-negative")
    seed = args.seed if args.seed is not None else int(exp.evaluation.get("seed", exp.run.seed + 1_000_003))
    text = evaluate(exp, episodes, seed, _workers())
    out = run_directory(args.out, "evaluate")
    (out / "evaluation.csv").write_text(text)
    _write_json(out / "config.json", resolved(exp) | {"evaluation_seed": seed, "episodes": episodes})
    print(out)
    return 0


# --------------------------------------------------------------------------
# bounds


def bounds_table(regime: str, T2: float, grid) -> str:
    spec = BoundSpec(regime, T2)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Resources", "Bound"])
    for r in grid:
        w.writerow([_fmt(r), _fmt(dc_lower_bound(spec, r))])
    return buf.getvalue()


def _grid(start: float, stop: float, step: float) -> list[float]:
    if step <= 0:
        raise ConfigError("--step: must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1 if stop >= start else 0
    return [start + i * step for i in range(max(n, 0))]


def cmd_bounds(args) -> int:
    try:
        T2 = math.inf if args.T2.lower() in ("inf", "infinity") else float(args.T2)
    except ValueError:
        raise ConfigError(f"--T2: expected a number or 'inf', got {args.T2!r}") from None
    if args.regime not in ("measurements", "time"):
        raise ConfigError(f"--regime: unknown regime {args.regime!r}")
    text = bounds_table(args.regime, T2, _grid(args.start, args.stop, args.step))
    _emit(text, args.out, "bounds", "bounds.csv")
    return 0


# --------------------------------------------------------------------------
# precision binning


def precision_bin(points, delta: float) -> list[tuple[float, float, int]]:
    """Barycentres ``(mean R, mean loss, count)`` of bins ``[k d, (k+1) d)``."""
    if not delta > 0:
        raise ValueError("bin width must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return []
    keys = np.floor(pts[:, 0] / delta).astype(np.int64)
    out = []
    for k in np.unique(keys):
        sel = pts[keys == k]
        out.append((float(sel[:, 0].mean()), float(sel[:, 1].mean()), int(len(sel))))
    return out


def read_points(path, x: str = "Resources", y: str | None = None) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return np.zeros((0, 2))
        if y is None:
            y = next((c for c in ("SquaredError", "ProbError", "Bound", "Loss") if c in header), None)
        for name in (x, y):
            if name not in header:
                raise ConfigError(f"--points: column {name!r} not found in {path}")
        ix, iy = header.index(x), header.index(y)
        return np.array([[float(r[ix]), float(r[iy])] for r in reader if r], dtype=np.float64).reshape(-1, 2)


def cmd_bin(args) -> int:
    if not args.delta > 0:
        raise ConfigError(f"--delta: bin width must be positive, got {args.delta}")
    pts = read_points(args.points, args.x_column, args.y_column)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Resources", "Loss", "Count"])
    for r, l, n in precision_bin(pts, args.delta):
        w.writerow([_fmt(r), _fmt(l), n])
    _emit(buf.getvalue(), args.out, "bin", "binned.csv")
    return 0


def _emit(text: str, out, prefix: str, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = run_directory(out, prefix) / name
    path.write_text(text)
    print(path.parent)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metrosynth", description="Particle-filter metrology with trained control strategies.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="runs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="simulate evaluation episodes and write per-step CSV")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", default="runs")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bounds", help="tabulate the DC magnetometry lower bounds")
    b.add_argument("--regime", default="measurements", help="measurements or time")
    b.add_argument("--T2", default="inf")
    b.add_argument("--start", type=float, default=1.0)
    b.add_argument("--stop", type=float, default=20.0)
    b.add_argument("--step", type=float, default=1.0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bounds)

    n = sub.add_parser("bin", help="bin precision points into barycentres")
    n.add_argument("--points", required=True, help="CSV with a Resources column and a loss column")
    n.add_argument("--delta", type=float, required=True)
    n.add_argument("--x-column", default="Resources")
    n.add_argument("--y-column")
    n.add_argument("--out")
    n.set_defaults(func=cmd_bin)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"metrosynth: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"metrosynth: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
