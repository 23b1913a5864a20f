"""Command-line surface: run the loop, evaluate a policy, fit a model, report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .dynamics import EpisodeData, FitConfig, fit_model
from .harness import HarnessError, RunConfig, evaluate_policy, export_results, load_config, run_soc_em
from .policy import PolicyParams
from .report import render_report


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.iters is not None:
        overrides["n_iters"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = cfg.with_overrides(**overrides)

    result = run_soc_em(cfg)
    written = export_results(result, args.out)
    if args.plots:
        written.extend(render_report(args.out))
    first, last = result.records[0], result.records[-1]
    print(f"run complete: {len(result.records)} iterations -> {args.out}")
    print(f"cumulative cost (mean +/- std over {cfg.eval_rollouts} eval rollouts):")
    print(f"  iteration {first.iteration}: {first.final_cost_mean:.3f} +/- {first.final_cost_std:.3f}")
    print(f"  iteration {last.iteration}: {last.final_cost_mean:.3f} +/- {last.final_cost_std:.3f}")
    for p in written:
        print(f"  wrote {p}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    policy = PolicyParams.load(args.policy)
    mean, std, _ = evaluate_policy(
        cfg.plant, policy, cfg.cost, cfg.law,
        rollouts=args.rollouts, seed=args.seed, deterministic=args.deterministic,
    )
    print(f"cumulative cost over {args.rollouts} rollouts: "
          f"{mean[-1]:.4f} +/- {std[-1]:.4f}")
    if args.out:
        import csv

        with Path(args.out).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "mean", "std"])
            for k in range(mean.shape[0]):
                writer.writerow([k + 1, f"{mean[k]:.17g}", f"{std[k]:.17g}"])
        print(f"wrote {args.out}")
    return 0


def _cmd_fit(args: argparse.Namespace) -> int:
    data = EpisodeData.from_csv(args.data)
    fit_cfg = FitConfig()
    if args.config:
        cfg = load_config(args.config)
        fit_cfg = cfg.fit
    model = fit_model(data, fit_cfg)
    model.save(args.out)
    print(f"fitted {model.T}-step model (n_s={model.n_s}, n_a={model.n_a}) -> {args.out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    written = render_report(args.run, args.out)
    for p in written:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="socem",
        description="EM-based trajectory optimization on a noisy point-mass plant",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full iteration loop and export results")
    run.add_argument("--config", type=str, default=None, help="JSON or TOML run configuration")
    run.add_argument("--variant", choices=("em1", "em2"), default=None)
    run.add_argument("--iters", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", type=str, required=True, help="output directory")
    run.add_argument("--plots", action="store_true", help="also render report figures")
    run.set_defaults(func=_cmd_run)

    ev = sub.add_parser("eval", help="evaluate a stored policy on the plant")
    ev.add_argument("--policy", type=str, required=True, help="policy JSON document")
    ev.add_argument("--config", type=str, default=None)
    ev.add_argument("--rollouts", type=int, default=20)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--deterministic", action="store_true")
    ev.add_argument("--out", type=str, default=None, help="optional cost-curve CSV")
    ev.set_defaults(func=_cmd_eval)

    fit = sub.add_parser("fit", help="fit a transition model from rollout tuples")
    fit.add_argument("--data", type=str, required=True, help="episode-data CSV")
    fit.add_argument("--config", type=str, default=None)
    fit.add_argument("--out", type=str, required=True, help="model JSON output")
    fit.set_defaults(func=_cmd_fit)

    rep = sub.add_parser("report", help="render figures from a run directory")
    rep.add_argument("--run", type=str, required=True, help="run directory with CSV outputs")
    rep.add_argument("--out", type=str, default=None, help="figure directory (default run/figures)")
    rep.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(
            f"replay: stage={exc.stage} iteration={exc.iteration} seed={exc.seed}",
            file=sys.stderr,
        )
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
