"""Command-line entry points.

Subcommands: ``train`` (run an experiment config), ``rank-scan`` and
``correlate`` and ``uncertainty-scan`` (offline analytics on a checkpoint and
a replay-buffer snapshot), ``complete`` (standalone matrix completion on CSV
files), and ``report`` (aggregate final returns across run directories,
optionally with SVG charts).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .agent import grid_values, load_bundle
from .completion import SoftImputeConfig, reconstruct
from .envs import ReplayBuffer
from .harness import (
    ExperimentConfig,
    aggregate_report,
    correlate,
    quantifier_from_bundle,
    rank_scan,
    read_metrics,
    run_experiment,
)
from .seeding import stream
from .uncertainty import uncertainty_matrix


def read_matrix_csv(path) -> np.ndarray:
    m = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if m.size == 0:
        raise ValueError(f"{path}: empty matrix")
    return m


def write_matrix_csv(path, m: np.ndarray):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.atleast_2d(m):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_removals_csv(path) -> set:
    removals = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'row,col', got {line!r}")
            removals.add((int(parts[0]), int(parts[1])))
    return removals


def _load_checkpoint(args):
    bundle = load_bundle(args.checkpoint)
    buffer = ReplayBuffer.load(args.buffer)
    if len(buffer) < args.size:
        raise ValueError(f"buffer holds {len(buffer)} transitions, need {args.size}")
    return bundle, buffer


def _cmd_train(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    out = Path(args.out) if args.out else Path("runs") / Path(args.config).stem
    run_dir = run_experiment(config, out, seed_override=args.seed, force=args.force)
    print(json.dumps({"run_dir": str(run_dir)}))
    return 0


def _cmd_rank_scan(args) -> int:
    bundle, buffer = _load_checkpoint(args)
    rng = stream(args.seed, "rank_scan", 0)
    result = rank_scan(
        lambda s, a: grid_values(bundle.critic, s, a),
        buffer.state_pool(), buffer.action_pool(),
        args.n, args.size, args.delta, rng,
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("arank,count\n")
            for rank, count in result.histogram().items():
                fh.write(f"{rank},{count}\n")
    print(json.dumps({
        "num_matrices": args.n, "size": args.size, "delta": args.delta,
        "arank_mean": result.mean, "arank_std": result.std,
    }))
    return 0


def _cmd_correlate(args) -> int:
    bundle, buffer = _load_checkpoint(args)
    quantifier = quantifier_from_bundle(bundle, args.quantifier)
    rng = stream(args.seed, "correlate", 0)
    report = correlate(
        lambda s, a: grid_values(bundle.critic, s, a), quantifier,
        buffer.state_pool(), buffer.action_pool(),
        args.n, args.size, args.delta, rng,
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("u_mean,u_std,arank\n")
            for u_mean, u_std, arank in report.rows:
                fh.write(f"{u_mean!r},{u_std!r},{arank}\n")
    print(json.dumps({
        "num_matrices": args.n, "size": args.size,
        "quantifier": args.quantifier,
        "spearman": report.spearman, "defined": report.defined,
    }))
    return 0


def _cmd_uncertainty_scan(args) -> int:
    bundle, buffer = _load_checkpoint(args)
    quantifier = quantifier_from_bundle(bundle, args.quantifier)
    rng = stream(args.seed, "uncertainty_scan", 0)
    si = rng.choice(len(buffer), size=args.size, replace=False)
    ai = rng.choice(len(buffer), size=args.size, replace=False)
    states = buffer.state_pool()[si]
    actions = buffer.action_pool()[ai]
    q_matrix = grid_values(bundle.critic, states, actions)
    u_matrix = uncertainty_matrix(states, actions, quantifier)
    write_matrix_csv(args.out_q, q_matrix)
    write_matrix_csv(args.out_u, u_matrix)
    print(json.dumps({
        "size": args.size, "quantifier": args.quantifier,
        "q_matrix": str(args.out_q), "uncertainty_matrix": str(args.out_u),
        "u_mean": float(u_matrix.mean()), "u_std": float(u_matrix.std(ddof=0)),
    }))
    return 0


def _cmd_complete(args) -> int:
    matrix = read_matrix_csv(args.matrix)
    removals = read_removals_csv(args.removals)
    config = SoftImputeConfig(zeta=args.zeta, epsilon=args.epsilon, max_iterations=args.max_iter)
    result = reconstruct(matrix, removals, config)
    out = args.out or str(Path(args.matrix).with_suffix("")) + "_reconstructed.csv"
    write_matrix_csv(out, result.matrix)
    print(json.dumps({
        "iterations": result.iterations,
        "converged": result.converged,
        "final_relative_change": result.final_relative_change,
    }))
    return 0


def _cmd_report(args) -> int:
    report = aggregate_report(args.runs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(out_dir / "report.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("variant,env,mean_final_return,std_final_return,num_seeds\n")
        for e in report["runs"]:
            fh.write(f"{e['variant']},{e['env']},{e['mean_final_return']!r},"
                     f"{e['std_final_return']!r},{e['num_seeds']}\n")
    if args.svg:
        _write_charts(args.runs, out_dir)
    print(json.dumps({"out_dir": str(out_dir), "num_runs": len(report["runs"])}))
    return 0


def _write_charts(run_dirs, out_dir: Path):
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on extras
        raise SystemExit("--svg requires matplotlib (install the 'plots' extra)") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        seed_dirs = sorted(d for d in run_dir.iterdir() if d.is_dir() and d.name.startswith("seed_"))
        for column, label in (("average_return", "return"), ("arank_mean", "arank")):
            fig, ax = plt.subplots(figsize=(5, 3))
            for sd in seed_dirs:
                m = read_metrics(sd / "metrics.csv")
                ax.plot(m["step"], m[column], label=sd.name)
            ax.set_xlabel("step")
            ax.set_ylabel(label)
            ax.set_title(run_dir.name)
            ax.legend(fontsize=7)
            fig.tight_layout()
            fig.savefig(out_dir / f"{run_dir.name}_{label}.svg")
            plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ualqe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config's seed list")
    p.add_argument("--out", default=None, help="run directory (default runs/<config stem>)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("rank-scan", help="approximate-rank statistics of sampled Q-matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--buffer", required=True)
    p.add_argument("--n", type=int, default=100, help="number of sampled matrices")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the rank histogram CSV here")
    p.set_defaults(fn=_cmd_rank_scan)

    p = sub.add_parser("correlate", help="rank vs uncertainty correlation over sampled Q-matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--buffer", required=True)
    p.add_argument("--quantifier", required=True, choices=["cb", "bb"])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write per-matrix rows CSV here")
    p.set_defaults(fn=_cmd_correlate)

    p = sub.add_parser("uncertainty-scan", help="dump one sampled Q-matrix and its uncertainty matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--buffer", required=True)
    p.add_argument("--quantifier", required=True, choices=["cb", "bb"])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-q", required=True, help="output CSV for the Q-matrix")
    p.add_argument("--out-u", required=True, help="output CSV for the uncertainty matrix")
    p.set_defaults(fn=_cmd_uncertainty_scan)

    p = sub.add_parser("complete", help="reconstruct removed entries of a CSV matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--removals", required=True, help="CSV of row,col pairs to re-estimate")
    p.add_argument("--zeta", type=float, default=50.0)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--out", default=None, help="output CSV (default <matrix>_reconstructed.csv)")
    p.set_defaults(fn=_cmd_complete)

    p = sub.add_parser("report", help="aggregate final returns across run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default="report")
    p.add_argument("--svg", action="store_true", help="also emit return/arank line charts")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
