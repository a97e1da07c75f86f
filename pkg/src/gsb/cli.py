"""Command-line entry points: train, simulate, evaluate, list-problems."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .dynamics import SimulationError, TimeGrid, export_snapshots, simulate, snapshot_steps
from .nets import NetworkSet
from .problems import PROBLEM_NAMES, load_toml, make_problem, problem_from_dict
from .trainer import LOSS_COLUMNS, TrainConfig, TrainingError, evaluate, run_training

log = logging.getLogger("gsb")

PROBLEM_HELP = {
    "gaussian": "N(0, I) -> N(0, 4I), no drift or interaction (closed-form bridge)",
    "gmm": "N(0, I) -> ring of 8 Gaussians, three elliptical obstacles",
    "vneck": "crowd through an hourglass corridor, obstacle + entropy",
    "stunnel": "crowd through an S-shaped passage, obstacle + congestion",
    "opinion": "2-D party-model polarization, entropy interaction",
    "opinion_1k": "high-dimensional party-model polarization (d overridable)",
}

LAYOUT = {
    "manifest": "manifest.json",
    "metrics": "metrics.jsonl",
    "losses": "losses.csv",
    "checkpoints": "checkpoints/stage_XXXX.pt, checkpoints/final.pt",
    "snapshots": "snapshots/forward_step_XXXX.csv",
}


class ConfigError(ValueError):
    pass


def _set_threads() -> None:
    n = os.environ.get("GSB_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ConfigError(f"GSB_THREADS must be an integer, got {n!r}")


def read_config(path) -> dict:
    """JSON or TOML with optional ``problem`` and ``train`` tables."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}")
    try:
        if path.suffix == ".toml":
            cfg = load_toml(text)
        else:
            cfg = json.loads(text)
    except Exception as err:  # parse errors from either format
        raise ConfigError(f"cannot parse config {path}: {err}")
    unknown = set(cfg) - {"problem", "train"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    return cfg


def build_run(args) -> tuple:
    """Resolve the problem and training config from --config plus flag overrides."""
    cfg = read_config(args.config) if args.config else {}
    pcfg = dict(cfg.get("problem", {}))
    name = args.problem or pcfg.pop("base", None) or pcfg.get("name")
    if name is None:
        raise ConfigError("no problem given: use --problem or a config with a problem table")
    if "rho0" in pcfg and "base" not in cfg.get("problem", {}):
        problem = problem_from_dict(pcfg)
    else:
        if name not in PROBLEM_NAMES:
            raise ConfigError(f"unknown problem {name!r}; known: {', '.join(PROBLEM_NAMES)}")
        overrides = {k: v for k, v in pcfg.items() if k != "name"}
        base = make_problem(name, **({"d": overrides.pop("d")} if "d" in overrides and name == "opinion_1k" else {}))
        merged = base.to_dict()
        merged.update(overrides)
        problem = problem_from_dict(merged)

    tcfg = {"K": problem.K, "n_stages": problem.stages}
    tcfg.update(cfg.get("train", {}))
    if args.mode:
        tcfg["mode"] = args.mode.replace("-", "_")
    if args.seed is not None:
        tcfg["seed"] = args.seed
    if args.stages is not None:
        tcfg["n_stages"] = args.stages
    if args.k_iters is not None:
        tcfg["K"] = args.k_iters
    if args.batch is not None:
        tcfg["batch"] = args.batch
    if args.no_boundary_density:
        tcfg["boundary_aware"] = False
    if tcfg.get("x_kind") is None and problem.d > 8:
        tcfg["x_kind"] = "resnet"
    config = TrainConfig.from_dict(tcfg)
    return problem, config


def _write_losses(rows, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _write_snapshots(nets, problem, grid, seed: int, batch: int, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        r = simulate(nets, problem, grid, batch, seed, "forward")
    paths = []
    for k in snapshot_steps(grid.n_steps):
        paths.append(export_snapshots(r, out / f"forward_step_{k:04d}.csv", [k]))
    return paths


def cmd_train(args) -> int:
    problem, config = build_run(args)
    out = Path(args.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "seed": config.seed,
        "problem": problem.to_dict(),
        "train": config.to_dict(),
        "checkpoint_every": args.checkpoint_every,
        "snapshot_batch": args.snapshot_batch,
        "layout": LAYOUT,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    extra = {"problem": problem.to_dict(), "train": config.to_dict()}

    def on_stage(state, report):
        if report is not None:
            with metrics_path.open("a") as fh:
                fh.write(report.to_json() + "\n")
        if args.checkpoint_every and (state.stage + 1) % args.checkpoint_every == 0:
            state.nets.save(out / "checkpoints" / f"stage_{state.stage + 1:04d}.pt",
                            extra={**extra, "stage": state.stage + 1})
        _write_losses(state.loss_log, out / "losses.csv")

    try:
        result = run_training(problem, config, callback=on_stage)
    except (TrainingError, SimulationError) as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 1
    _write_losses(result.loss_log, out / "losses.csv")
    result.nets.save(out / "checkpoints" / "final.pt", extra={**extra, "stage": config.n_stages})
    _write_snapshots(result.nets, problem, result.state.grid, config.seed + 7, args.snapshot_batch,
                     out / "snapshots")
    if result.history:
        print(result.history[-1].to_json())
    return 0


def _load_checkpoint(path, problem_override=None):
    try:
        nets, extra = NetworkSet.load(path)
    except (OSError, RuntimeError) as err:
        raise ConfigError(f"cannot load checkpoint {path}: {err}")
    if problem_override is not None:
        problem = make_problem(problem_override)
    elif "problem" in extra:
        problem = problem_from_dict(extra["problem"])
    else:
        raise ConfigError("checkpoint has no problem descriptor; pass --problem")
    if nets.spec is not None and nets.spec.d != problem.d:
        raise ConfigError(f"checkpoint is for d={nets.spec.d}, problem has d={problem.d}")
    if abs(nets.sigma - problem.sigma) > 0:
        raise ConfigError(f"checkpoint sigma {nets.sigma} does not match problem sigma {problem.sigma}")
    return nets, problem, extra


def cmd_simulate(args) -> int:
    nets, problem, _ = _load_checkpoint(args.checkpoint, args.problem)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = TimeGrid.from_dt(problem.T, problem.dt)
    with torch.no_grad():
        r = simulate(nets, problem, grid, args.batch, args.seed, args.direction)
    export_snapshots(r, out / f"{args.direction}_trajectories.csv", list(range(grid.n_steps + 1)))
    export_snapshots(r, out / f"{args.direction}_terminal.csv", [grid.n_steps])
    return 0


def _mean_std(values: list[float]) -> dict:
    n = len(values)
    mean = sum(values) / n
    std = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
    return {"mean": mean, "std": std, "values": values}


def cmd_evaluate(args) -> int:
    nets, problem, extra = _load_checkpoint(args.checkpoint, args.problem)
    reports = [evaluate(nets, problem, seed=args.seed + i, batch=args.batch, stage=extra.get("stage", 0),
                        violation=True) for i in range(args.runs)]
    keys = ("W2_sinkhorn", "W2_backward", "obstacle_mass", "td_violation_theta", "td_violation_phi",
            "fk_violation")
    summary = {"problem": problem.name, "runs": args.runs, "seed": args.seed,
               **{k: _mean_std([getattr(r, k) for r in reports]) for k in keys}}
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_list(args) -> int:
    for name in PROBLEM_NAMES:
        p = make_problem(name, d=4) if name == "opinion_1k" else make_problem(name)
        print(f"{name:11s} sigma={p.sigma:g} T={p.T:g} K={p.K} stages={p.stages}  {PROBLEM_HELP[name]}")
    return 0


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsb", description="Deep generalized Schrodinger bridge solver")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train on a problem")
    tr.add_argument("--problem", choices=PROBLEM_NAMES)
    tr.add_argument("--config", help="JSON or TOML file with problem/train tables")
    tr.add_argument("--mode", choices=("actor-critic", "critic"))
    tr.add_argument("--seed", type=int)
    tr.add_argument("--stages", type=int)
    tr.add_argument("--k-iters", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--no-boundary-density", action="store_true",
                    help="drop the boundary log-density anchors from the TD targets")
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--checkpoint-every", type=int, default=5)
    tr.add_argument("--snapshot-batch", type=int, default=512)
    tr.set_defaults(func=cmd_train)

    sm = sub.add_parser("simulate", help="sample trajectories from a checkpoint")
    sm.add_argument("--checkpoint", required=True)
    sm.add_argument("--problem", choices=PROBLEM_NAMES)
    sm.add_argument("--direction", choices=("forward", "backward"), default="forward")
    sm.add_argument("--batch", type=int, default=512)
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--out-dir", required=True)
    sm.set_defaults(func=cmd_simulate)

    ev = sub.add_parser("evaluate", help="metrics over several evaluation seeds")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--problem", choices=PROBLEM_NAMES)
    ev.add_argument("--runs", type=int, default=3)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--batch", type=int, default=1000)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_evaluate)

    ls = sub.add_parser("list-problems", help="show built-in problems")
    ls.set_defaults(func=cmd_list)
    return ap


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except (ConfigError, ValueError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
