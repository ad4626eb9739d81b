"""Command-line entry points.

Exit codes: 0 success, 2 invalid input, 3 optimization failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .assignment import AssignmentConfig, Policy
from .baselines import baseline_estimates
from .core import InvalidAnswerError, SchemaError, quality_from_variance
from .inference import InferenceConfig, OptimizationError, run_em
from .metrics import error_rate, mnad
from .simulator import (
    GeneratorConfig,
    NoiseConfig,
    SimulationConfig,
    SyntheticCrowd,
    generate_dataset,
    generate_table,
    generate_workers,
    inject_noise,
    run_simulation,
    simulation_inference_config,
)

EXIT_INPUT = 2
EXIT_OPTIMIZATION = 3


class UsageError(ValueError):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inference_config(args) -> InferenceConfig:
    return InferenceConfig(convergence_threshold=args.threshold, epsilon=args.epsilon)


def _metrics_rows(method, estimates, truth, answers, schema):
    return [(method, error_rate(estimates, truth, schema), mnad(estimates, truth, answers, schema))]


def _fmt_metric(x) -> str:
    return "/" if x is None else f"{x:.4f}"


def _print_metrics(rows):
    for method, err, nad in rows:
        print(f"{method}: error_rate={_fmt_metric(err)} mnad={_fmt_metric(nad)}")


# -- subcommands -----------------------------------------------------------------


def cmd_infer(args) -> int:
    schema, answers, truth = io.load_dataset(args.schema, args.answers, args.truth)
    state = run_em(answers, schema, _inference_config(args))
    out = _out_dir(args)
    estimates = state.estimates()
    io.save_estimates(estimates, schema, out / "estimates.csv",
                      standardized=state.truths.point_estimates())
    p = state.params
    counts = np.bincount(state.observations.worker, minlength=len(p.workers))
    io.save_worker_quality(p.workers, p.phi, quality_from_variance(p.phi, p.epsilon), counts,
                           out / "worker_quality.csv")
    io.save_difficulty(p.alpha, p.beta, schema, out / "difficulty.csv")
    print(f"EM: {state.iteration} iterations, converged={state.converged}, "
          f"Q={state.objective:.6f}")
    if truth is not None:
        rows = _metrics_rows("tcrowd", estimates, truth, answers, schema)
        io.save_metrics(rows, out / "metrics.csv")
        _print_metrics(rows)
    return 0


def cmd_evaluate(args) -> int:
    schema, answers, truth = io.load_dataset(args.schema, args.answers, args.truth)
    estimates = io.load_estimates(args.estimates, schema)
    rows = _metrics_rows(args.method, estimates, truth, answers, schema)
    io.save_metrics(rows, _out_dir(args) / "metrics.csv")
    _print_metrics(rows)
    return 0


def _generator_config(args, seed=None) -> GeneratorConfig:
    return GeneratorConfig(
        rows=args.rows, cols=args.cols, cat_ratio=args.ratio,
        mean_difficulty=args.difficulty, worker_count=args.workers,
        answers_per_task=args.answers_per_task, epsilon=args.epsilon,
        seed=args.seed if seed is None else seed,
    )


def cmd_generate(args) -> int:
    table, _, answers = generate_dataset(_generator_config(args))
    out = _out_dir(args)
    io.save_schema(table.schema, out / "schema.json")
    io.save_answers(answers, out / "answers.csv")
    io.save_truth(table.truth, table.schema, out / "truth.csv")
    print(f"wrote {len(answers)} answers for {table.schema.n_rows}x{table.schema.n_cols} "
          f"table to {out}")
    return 0


def cmd_noise(args) -> int:
    schema, answers, _ = io.load_dataset(args.schema, args.answers)
    noisy = inject_noise(answers, NoiseConfig(args.gamma, args.seed))
    out = _out_dir(args)
    io.save_answers(noisy, out / "answers.csv")
    print(f"perturbed answers written to {out / 'answers.csv'}")
    return 0


def cmd_baseline(args) -> int:
    schema, answers, truth = io.load_dataset(args.schema, args.answers, args.truth)
    estimates = baseline_estimates(answers, args.method)
    out = _out_dir(args)
    io.save_estimates(estimates, schema, out / "estimates.csv")
    if truth is not None:
        name = {"mv": "majority_vote", "median": "median", "both": "mv+median"}[args.method]
        err = error_rate(estimates, truth, schema) if args.method != "median" else None
        nad = mnad(estimates, truth, answers, schema) if args.method != "mv" else None
        rows = [(name, err, nad)]
        io.save_metrics(rows, out / "metrics.csv")
        _print_metrics(rows)
    return 0


def cmd_simulate(args) -> int:
    try:
        policies = [Policy(p.strip()) for p in args.policy.split(",")]
    except ValueError:
        raise UsageError(f"unknown policy in {args.policy!r}; choose from "
                         + ", ".join(p.value for p in Policy)) from None
    stop = None
    if args.stop_error is not None or args.stop_mnad is not None:
        stop = (args.stop_error if args.stop_error is not None else 1.0,
                args.stop_mnad if args.stop_mnad is not None else float("inf"))
    inference = simulation_inference_config(epsilon=args.epsilon,
                                            convergence_threshold=args.threshold)
    rows = []
    for seed in range(args.seed, args.seed + args.trials):
        gen = _generator_config(args, seed)
        crowd = SyntheticCrowd(generate_table(gen), generate_workers(gen), seed)
        for policy in policies:
            cfg = SimulationConfig(
                budget=args.budget,
                assignment=AssignmentConfig(policy, s_cont=args.s_cont, batch_k=args.k,
                                            seed=seed),
                inference=inference,
                initial_answers=args.initial_answers,
                checkpoint_every=args.checkpoint_every,
                stop_at=stop,
            )
            run = run_simulation(crowd, cfg)
            rows.extend((seed, policy.value, rec) for rec in run.records)
            last = run.records[-1]
            print(f"seed {seed} {policy.value}: {last.answers} answers, "
                  f"error_rate={_fmt_metric(last.error_rate)} mnad={_fmt_metric(last.mnad)}")
    io.save_curve(rows, _out_dir(args) / "curve.csv")
    return 0


# -- parser --------------------------------------------------------------------------


def _add_dataset(p, truth: str = "optional"):
    p.add_argument("--schema", required=True, help="schema JSON")
    p.add_argument("--answers", required=True, help="answers CSV (worker,row,col,value)")
    if truth == "required":
        p.add_argument("--truth", required=True, help="truth CSV (row,col,value)")
    elif truth == "optional":
        p.add_argument("--truth", help="truth CSV (row,col,value); enables metrics.csv")


def _add_generator(p):
    p.add_argument("--rows", type=int, default=50)
    p.add_argument("--cols", type=int, default=10)
    p.add_argument("--ratio", type=float, default=0.5, help="fraction of categorical columns")
    p.add_argument("--difficulty", type=float, default=1.0, help="mean alpha_i * beta_j")
    p.add_argument("--workers", type=int, default=30)
    p.add_argument("--answers-per-task", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcrowd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--epsilon", type=float, default=0.5,
                        help="quality tolerance on the standardized scale")
    common.add_argument("--threshold", type=float, default=1e-5,
                        help="EM convergence threshold on parameter change")
    common.add_argument("--out-dir", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", parents=[common], help="run EM truth inference")
    _add_dataset(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="score an estimates file")
    _add_dataset(p, "required")
    p.add_argument("--estimates", required=True)
    p.add_argument("--method", default="tcrowd", help="method name for metrics.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    _add_generator(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("noise", parents=[common], help="perturb a fraction of the answers")
    _add_dataset(p, "none")
    p.add_argument("--gamma", type=float, required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("baseline", parents=[common], help="majority vote / median")
    _add_dataset(p)
    p.add_argument("--method", choices=("mv", "median", "both"), default="both")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("simulate", parents=[common], help="run the assignment loop")
    _add_generator(p)
    p.add_argument("--policy", default="saig",
                   help="comma-separated: " + ",".join(x.value for x in Policy))
    p.add_argument("--budget", type=int, default=3000)
    p.add_argument("--k", type=int, default=10, help="tasks per worker request")
    p.add_argument("--s-cont", type=int, default=10, help="answer samples for continuous gain")
    p.add_argument("--trials", type=int, default=1, help="seeds run: seed .. seed+trials-1")
    p.add_argument("--initial-answers", type=int, default=1)
    p.add_argument("--checkpoint-every", type=float, default=0.5)
    p.add_argument("--stop-error", type=float, default=None)
    p.add_argument("--stop-mnad", type=float, default=None)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OptimizationError as exc:
        print(f"error: optimization failed: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    except (io.DatasetError, SchemaError, InvalidAnswerError, UsageError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
