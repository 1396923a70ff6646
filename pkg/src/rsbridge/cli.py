"""``rsbridge`` command line: train, sample, translate, eval, oracle, plot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import metrics, plotting, sinkhorn, toydata
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config, run_name
from .ipf import IPFState, MetricRow, TrainConfig, generate, train
from .nnet import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
METRIC_FIELDS = ["stage", "direction", "iteration", "loss", "sliced_w", "mode_coverage"]

log = logging.getLogger("rsbridge")


def _fmt(v):
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def write_metrics(path: Path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])


def cmd_train(args) -> int:
    cfg, doc = load_config(args.config, full_budget=args.full_budget or None, seed=args.seed)
    run_dir = Path(args.run_dir) if args.run_dir else Path("runs") / run_name(doc, args.config)
    (run_dir / "samples").mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.config, run_dir / "config.toml")

    def on_stage(state: IPFState) -> None:
        save_checkpoint(run_dir / f"stage_{state.stage}.ckpt.json", state, cfg)
        write_metrics(run_dir / "metrics.csv", list(state.history))
        log.info("stage %d checkpoint written", state.stage)

    state = train(cfg, on_stage=on_stage)
    shutil.copyfile(run_dir / f"stage_{state.stage}.ckpt.json", run_dir / "final.ckpt.json")
    direction = "backward" if cfg.task.kind == "unconditional" else "forward"
    traj, scale = generate(state, cfg, 2000, direction, np.random.default_rng([cfg.seed, 99]))
    toydata.write_points_csv(run_dir / "samples" / f"final_{direction}.csv", traj.terminal * scale)
    if not args.quiet:
        print(f"trained {state.stage} IPF stages; run directory {run_dir}")
    return EXIT_OK


def _sample(args, direction: str) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    start = toydata.read_points_csv(args.input) if args.input else None
    n = len(start) if start is not None else args.n
    if n < 0:
        raise ConfigError("n", "must be non-negative")
    traj, scale = generate(state, cfg, n, direction, rng, start=start)
    if args.output:
        toydata.write_points_csv(args.output, traj.terminal * scale)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["x", "y"])
        w.writerows((repr(float(x)), repr(float(y))) for x, y in traj.terminal * scale)
    if args.trajectory:
        traj.to_csv(args.trajectory, scale)
    return EXIT_OK


def cmd_sample(args) -> int:
    """Also serves ``translate``, which only changes the defaults."""
    return _sample(args, args.direction)


def evaluation_report(state: IPFState, cfg: TrainConfig, n: int, seed: int) -> metrics.EvalReport:
    """Generate ``n`` samples in the generative direction and score them."""
    if cfg.task.kind == "unconditional":
        direction, spec = "backward", cfg.task.start
    else:
        direction, spec = "forward", cfg.task.end
    rng = np.random.default_rng(seed)
    traj, scale = generate(state, cfg, n, direction, rng)
    samples = traj.terminal * scale
    truth = toydata.sample(spec, n, rng)
    sw = metrics.sliced_w2(samples, truth, 256, rng) if n else float("nan")
    coverage, counts = None, []
    if spec.kind in toydata.MIXTURE_KINDS:
        centers = toydata.mode_centers(spec)
        min_count = max(1, n // (4 * len(centers)))
        coverage, counts = metrics.mode_coverage(samples, centers, 3 * spec.mode_std, min_count)
    return metrics.EvalReport(sw, coverage, counts, n)


def cmd_eval(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    if args.n < 1:
        raise ConfigError("n", "must be >= 1")
    report = evaluation_report(state, cfg, args.n, args.seed if args.seed is not None else 0)
    text = report.to_json()
    out = Path(args.output) if args.output else Path(args.checkpoint).with_name("eval.json")
    out.write_text(text + "\n")
    if not args.quiet:
        print(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    if not args.eps > 0:
        raise ConfigError("eps", "must be positive")
    if not args.tol > 0:
        raise ConfigError("tol", "must be positive")
    mu = sinkhorn.read_measure_csv(args.mu)
    nu = sinkhorn.read_measure_csv(args.nu)
    C = sinkhorn.cost_matrix(mu, nu)
    coupling = sinkhorn.sinkhorn_solve(mu, nu, args.eps, max_iters=args.max_iters, tol=args.tol, C=C)
    summary = sinkhorn.summary(coupling, C, args.eps)
    if args.plan:
        sinkhorn.write_plan_csv(args.plan, coupling.plan)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.summary:
        Path(args.summary).write_text(text + "\n")
    if not args.quiet:
        print(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    n_panels = plotting.plot_csv(args.input, args.output)
    if not args.quiet:
        print(f"wrote {args.output} ({n_panels} panel{'s' if n_panels != 1 else ''})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--run-dir", default=argparse.SUPPRESS, help="run directory (train)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="rsbridge", description=__doc__)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--quiet", action="store_true", default=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="run IPF training from a TOML config")
    s.add_argument("config")
    s.add_argument("--full-budget", action="store_true", help="use the full iteration budget (5x desk)")
    s.set_defaults(func=cmd_train)

    for name, default_dir in (("sample", "backward"), ("translate", "forward")):
        s = sub.add_parser(name, parents=[common], help=f"{name} with a trained bridge")
        s.add_argument("checkpoint")
        s.add_argument("-n", type=int, default=1000, help="number of samples (ignored with --input)")
        s.add_argument("--direction", choices=["forward", "backward"], default=default_dir)
        s.add_argument("--input", required=name == "translate", help="CSV of starting points (x,y)")
        s.add_argument("-o", "--output", help="CSV of terminal samples (default stdout)")
        s.add_argument("--trajectory", help="also write the full trajectory CSV")
        s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint against fresh ground truth")
    s.add_argument("checkpoint")
    s.add_argument("-n", type=int, default=10_000)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("oracle", parents=[common], help="entropic OT between two CSV measures")
    s.add_argument("mu")
    s.add_argument("nu")
    s.add_argument("--eps", type=float, required=True)
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--max-iters", type=int, default=10_000)
    s.add_argument("--plan")
    s.add_argument("--summary")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("plot", parents=[common], help="render a points or trajectory CSV to SVG")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
