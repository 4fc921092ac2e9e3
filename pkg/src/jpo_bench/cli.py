from __future__ import annotations

import argparse
import asyncio
import logging
from collections.abc import Sequence
from pathlib import Path

import pandas as pd
import uvloop
from neuro_logging import init_logging

from .alignment_model import TaskKind, alignment_sweep
from .config import (
    AlignmentTaskConfig,
    ConfigError,
    HarnessSettings,
    load_alignment_config,
    load_config,
)
from .container import save_method_result, save_net_params, save_problem_set
from .harness import (
    audit,
    load_record,
    report,
    run_experiment,
    save_alignment_fit,
)
from .methods import MethodTag, history_frame, solve
from .noise_lab import Reducer, theory_sweep
from .optimizers import OptimizerConfig
from .problems import Family, generate


LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as ex:
        msg = f"expected comma-separated integers, got {text!r}"
        raise argparse.ArgumentTypeError(msg) from ex


def _theory(args: argparse.Namespace) -> int:
    rows = theory_sweep(
        Reducer(args.reducer),
        args.ns,
        components=args.components,
        snr=args.snr,
        samples=args.samples,
        seed=args.seed,
    )
    frame = pd.DataFrame([vars(row) for row in rows])
    frame.to_csv(args.output, index=False)
    for row in rows:
        LOGGER.info(
            "N=%d measured %.4f +- %.4f closed form %.4f",
            row.n,
            row.p_measured,
            row.stderr,
            row.p_closed_form,
        )
    return EXIT_OK


def _align(args: argparse.Namespace) -> int:
    if args.config is not None:
        config = load_alignment_config(args.config)
    else:
        config = AlignmentTaskConfig(
            task=TaskKind(args.task),
            ns=tuple(args.ns),
            seeds=tuple(args.seeds),
            learning_rate=args.learning_rate,
            reducer=Reducer(args.reducer),
        )
    logging.info("Loaded config: %r", config)
    rows, fit = alignment_sweep(
        config.task,
        config.ns,
        config.seeds,
        learning_rate=config.learning_rate,
        reducer=config.reducer,
    )
    pd.DataFrame([vars(row) for row in rows]).to_csv(args.output, index=False)
    LOGGER.info(
        "Fitted plasticity %.4g, complexity %.4g (rms %.3g, flat=%s)",
        fit.params.plasticity,
        fit.params.complexity,
        fit.residual,
        fit.flat,
    )
    if args.params_out is not None:
        save_alignment_fit(fit, args.params_out)
    return EXIT_OK


def _solve(args: argparse.Namespace) -> int:
    problems = generate(args.family, args.n, args.seed)
    args.output.mkdir(parents=True, exist_ok=True)
    save_problem_set(args.output / "problems.jpob", problems)
    result = solve(
        args.method,
        problems.without_ground_truth(),
        seed=args.seed,
        refinement=OptimizerConfig() if args.refine else None,
    )
    save_method_result(args.output / "result.jpob", result, seed=args.seed)
    if result.params is not None:
        save_net_params(args.output / "network.jpob", result.params)
    history_frame(result).to_csv(args.output / "history.csv", index=False)
    LOGGER.info(
        "%s on %d %s problems: mean loss %.6g",
        result.method,
        problems.n,
        problems.family,
        float(result.refined_losses.mean()),
    )
    return EXIT_OK


def _sweep(args: argparse.Namespace) -> int:
    settings = HarnessSettings()
    config = load_config(args.config, settings)
    logging.info("Loaded config: %r", config)
    workers = args.workers or settings.workers
    with asyncio.Runner(loop_factory=uvloop.new_event_loop) as runner:
        record = runner.run(run_experiment(config, workers=workers))
    report(record, config.output_dir)
    return EXIT_PARTIAL if record.failures else EXIT_OK


def _report(args: argparse.Namespace) -> int:
    path = args.run / "record.json" if args.run.is_dir() else args.run
    record = load_record(path)
    if not audit(record):
        LOGGER.error("Stored metrics in %s do not match their digests", path)
        return EXIT_PARTIAL
    report(record, args.output or path.parent)
    return EXIT_PARTIAL if record.failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jpo-bench")
    commands = parser.add_subparsers(dest="command", required=True)

    theory = commands.add_parser("theory", help="alignment probability tables")
    theory.add_argument("--reducer", choices=[r.value for r in Reducer], default="sum")
    theory.add_argument("--ns", type=_int_list, default=[1, 4, 16, 64])
    theory.add_argument("--components", type=int, default=8)
    theory.add_argument("--snr", type=float, default=0.05)
    theory.add_argument("--samples", type=int, default=100_000)
    theory.add_argument("--seed", type=int, default=0)
    theory.add_argument("--output", type=Path, default=Path("theory.csv"))
    theory.set_defaults(handler=_theory)

    align = commands.add_parser("align", help="measured vs predicted alignment")
    align.add_argument("--config", type=Path)
    align.add_argument("--task", choices=[t.value for t in TaskKind], default="linear")
    align.add_argument("--ns", type=_int_list, default=list(range(1, 65)))
    align.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3])
    align.add_argument("--learning-rate", type=float, default=1e-4)
    align.add_argument("--reducer", choices=[r.value for r in Reducer], default="sum")
    align.add_argument("--output", type=Path, default=Path("alignment.csv"))
    align.add_argument("--params-out", type=Path)
    align.set_defaults(handler=_align)

    solve_cmd = commands.add_parser("solve", help="run one method on one set")
    solve_cmd.add_argument("--family", choices=[f.value for f in Family], required=True)
    solve_cmd.add_argument(
        "--method", choices=[m.value for m in MethodTag], required=True
    )
    solve_cmd.add_argument("--n", type=int, required=True)
    solve_cmd.add_argument("--seed", type=int, default=0)
    solve_cmd.add_argument("--refine", action="store_true")
    solve_cmd.add_argument("--output", type=Path, default=Path("solve"))
    solve_cmd.set_defaults(handler=_solve)

    sweep = commands.add_parser("sweep", help="run an experiment config")
    sweep.add_argument("--config", type=Path, required=True)
    sweep.add_argument("--workers", type=int)
    sweep.set_defaults(handler=_sweep)

    report_cmd = commands.add_parser("report", help="rebuild CSVs from a run")
    report_cmd.add_argument("--run", type=Path, required=True)
    report_cmd.add_argument("--output", type=Path)
    report_cmd.set_defaults(handler=_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:  # pragma: no coverage
    init_logging()
    args = build_parser().parse_args(argv)
    try:
        return int(args.handler(args))
    except (ConfigError, OSError) as ex:
        LOGGER.error("%s", ex)
        return EXIT_ERROR
