#!/usr/bin/env python3
"""
evolving-solver command line.

Subcommands: gen-tasks, pretrain, solve, ablate, report, grad-check, replay.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path

# IMPORTANT: Configure logging BEFORE initializing Sentry
from ..settings import settings

logging.basicConfig(
    level=settings.log_level,
    format="[%(levelname)s] %(message)s",
)

# IMPORTANT: Initialize Sentry BEFORE importing the engine, so worker failures are captured
from ..sentry_config import init_sentry  # noqa: E402

init_sentry()

import torch  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from ..engine.corpus_pretrain import gen_corpus, heldout_tasks, pretrain, suite_tasks, write_corpus  # noqa: E402
from ..engine.dsl_env import dump_tasks, load_tasks  # noqa: E402
from ..engine.evolution_loop import Policy, replay, solve_greedy  # noqa: E402
from ..engine.policy_net import PolicyNet  # noqa: E402
from ..engine.snapshot import save_snapshot  # noqa: E402
from ..engine.vocab import Vocabulary  # noqa: E402
from ..errors import ReplayDivergence, SolverError  # noqa: E402
from ..models.config import EvolutionConfig, ExperimentConfig, Method, PretrainConfig  # noqa: E402
from ..models.reports import AblationCell, SolveReport  # noqa: E402
from .ablation import ABLATION_JSONL, cell_dirname, run_ablation  # noqa: E402
from .config_file import load_config  # noqa: E402
from .gradcheck import check_gradients  # noqa: E402
from .runner import load_policy, run_suite  # noqa: E402
from .summary import (  # noqa: E402
    ablation_frame,
    collect_summaries,
    markdown_table,
    method_table,
    summary_frame,
    verify_method_dir,
)
from .validation import read_jsonl  # noqa: E402

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEFAULT_MIX = "1:0.4,2:0.3,3:0.2,4:0.1"
GRADCHECK_TOLERANCE = 1e-4


class UsageError(ValueError):
    """Bad command-line input detected after argument parsing"""


def parse_mix(text: str) -> dict[int, float]:
    """'1:0.4,2:0.6' -> {1: 0.4, 2: 0.6}"""
    mix: dict[int, float] = {}
    for item in text.split(","):
        level, colon, weight = item.strip().partition(":")
        if not colon:
            raise UsageError(f"difficulty mix entries look like level:weight (got {item!r})")
        try:
            key = int(level)
            mix[key] = float(weight)
        except ValueError as e:
            raise UsageError(f"malformed difficulty mix entry {item!r}") from e
    return mix


def parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"seeds must be comma-separated integers (got {text!r})") from e


def parse_methods(text: str) -> list[Method]:
    try:
        return [Method(m.strip()) for m in text.split(",") if m.strip()]
    except ValueError as e:
        raise UsageError(f"unknown method in {text!r}; choose from {', '.join(Method)}") from e


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Config file plus command-line overrides, revalidated"""
    config = load_config(args.config)
    updates: dict = {}
    if getattr(args, "seeds", None):
        updates["seeds"] = parse_seeds(args.seeds)
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    if getattr(args, "snapshot", None):
        updates["snapshot_path"] = args.snapshot
    if getattr(args, "suite", None):
        updates["suite_path"] = args.suite
    if not updates:
        return config
    data = config.model_dump(mode="json")
    data.update({k: str(v) if isinstance(v, Path) else v for k, v in updates.items()})
    return ExperimentConfig.model_validate(data)


def _load_suite(config: ExperimentConfig) -> list:
    if not config.suite_path.is_file():
        raise SolverError(f"Task suite not found: {config.suite_path}")
    return load_tasks(config.suite_path)


def cmd_gen_tasks(args: argparse.Namespace) -> int:
    mix = parse_mix(args.difficulty_mix)
    tasks = suite_tasks(args.n, mix, args.seed)
    manifest = args.manifest or args.out.with_suffix(".solutions.jsonl")
    dump_tasks(tasks, args.out, manifest)
    print(f"{len(tasks)} tasks -> {args.out} (solutions: {manifest})")
    return EXIT_OK


def greedy_solve_rate(policy: Policy, tasks: list, config: EvolutionConfig) -> float:
    solved = sum(solve_greedy(task, policy, config, seed=0).solved for task in tasks)
    return solved / len(tasks)


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    updates = {
        key: value
        for key, value in {
            "n_examples": args.n_examples,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "seed": args.seed,
        }.items()
        if value is not None
    }
    if args.difficulty_mix:
        updates["difficulty_mix"] = parse_mix(args.difficulty_mix)
    pre = PretrainConfig.model_validate({**config.pretrain.model_dump(), **updates})

    vocab = Vocabulary()
    encoder = PolicyNet(vocab, config.net)
    corpus = gen_corpus(pre.n_examples, pre.difficulty_mix, pre.seed, encoder)
    if args.corpus_out:
        write_corpus(args.corpus_out, corpus)
        log.info(f"Wrote corpus to {args.corpus_out}")
    result = pretrain(corpus, pre, vocab, config.net)

    out = args.out or Path(settings.snapshot_path)
    heldout = heldout_tasks(args.heldout, difficulty=1)
    trained = Policy(net=result.net.to(torch.float64))
    control_net = PolicyNet(vocab, config.net)
    control_net.init_weights(torch.Generator().manual_seed(pre.seed))
    control = Policy(net=control_net.to(torch.float64))
    trained_rate = greedy_solve_rate(trained, heldout, config.evolution)
    control_rate = greedy_solve_rate(control, heldout, config.evolution)
    log.info(f"Held-out difficulty-1 greedy solve rate: {trained_rate:.3f} (random init: {control_rate:.3f})")

    checksum = save_snapshot(
        out,
        result.net.to(torch.float32),
        {
            "pretrain": pre.model_dump(mode="json"),
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
            "loss_curve": result.curve,
            "heldout_d1_tasks": len(heldout),
            "heldout_d1_greedy_solve_rate": trained_rate,
            "random_init_greedy_solve_rate": control_rate,
        },
    )
    print(f"snapshot {out} checksum {checksum}")
    print(f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    print(f"held-out d1 greedy solve rate {trained_rate:.3f} (random init {control_rate:.3f})")
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    config = _experiment(args)
    methods = parse_methods(args.method) if args.method else [config.method]
    tasks = _load_suite(config)
    summaries = run_suite(config, tasks, methods, config.out_dir, args.workers, args.dump_dir)
    print(markdown_table(method_table(summaries)), end="")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _experiment(args)
    tasks = _load_suite(config)
    cells = run_ablation(config, tasks, args.grid, config.out_dir, args.workers)
    print(markdown_table(ablation_frame(cells)), end="")
    return EXIT_OK


def _verified_cells(run_dir: Path, force: bool) -> list[AblationCell]:
    cells = read_jsonl(run_dir / ABLATION_JSONL, AblationCell)
    for cell in cells:
        method_dir = run_dir / cell_dirname(cell.label) / str(cell.summary.method)
        recomputed = verify_method_dir(method_dir, force)
        if recomputed.canonical_json() != cell.summary.canonical_json():
            raise SolverError(f"ablation cell {cell.label} does not match the reports in {method_dir}")
    return cells


def cmd_report(args: argparse.Namespace) -> int:
    if (args.input / ABLATION_JSONL).is_file():
        frame = ablation_frame(_verified_cells(args.input, args.force))
        table = frame.to_csv(index=False) if args.format == "csv" else markdown_table(frame)
    else:
        summaries = collect_summaries(args.input, args.force)
        if args.format == "csv":
            table = summary_frame(summaries).to_csv(index=False)
        else:
            table = markdown_table(method_table(summaries))
    if args.output:
        args.output.write_text(table, encoding="utf-8")
        log.info(f"Wrote {args.output}")
    else:
        print(table, end="")
    return EXIT_OK


def _gradcheck_net(args: argparse.Namespace) -> PolicyNet:
    if args.snapshot:
        return load_policy(args.snapshot).net
    net = PolicyNet(Vocabulary())
    net.init_weights(torch.Generator().manual_seed(args.seed))
    return net.to(torch.float64).freeze()


def cmd_grad_check(args: argparse.Namespace) -> int:
    worst = check_gradients(_gradcheck_net(args), args.groups, args.coords, args.step, args.seed)
    ok = worst < args.tolerance
    print(f"worst relative error {worst:.3e} over {args.coords} coordinates ({'ok' if ok else 'FAILED'})")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_replay(args: argparse.Namespace) -> int:
    reports: list[SolveReport] = read_jsonl(args.report, SolveReport)
    if args.index is not None:
        if not 0 <= args.index < len(reports):
            raise UsageError(f"--index {args.index} out of range for {len(reports)} reports")
        reports = [reports[args.index]]
    policy = load_policy(args.snapshot or Path(settings.snapshot_path))
    failures = 0
    for report in reports:
        try:
            replay(report, policy)
            log.info(f"replay {report.task_id} seed {report.seed}: identical")
        except ReplayDivergence as e:
            failures += 1
            log.error(f"{e}; first mismatch: {json.dumps(e.first_mismatch, sort_keys=True)}")
    print(f"{len(reports) - failures}/{len(reports)} reports replayed identically")
    return EXIT_OK if failures == 0 else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evolving-solver",
        description="Test-time policy evolution over a stack-machine DSL",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="Generate a held-out task suite and its solutions manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--difficulty-mix", default=DEFAULT_MIX, help="level:weight pairs, e.g. 2:0.4,3:0.3,4:0.3")
    p.add_argument("--seed", type=int, default=settings.pot_seed)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--manifest", type=Path, default=None, help="Default: <out>.solutions.jsonl")
    p.set_defaults(handler=cmd_gen_tasks)

    p = sub.add_parser("pretrain", help="Pretrain the base policy on a generated corpus and write a snapshot")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--n-examples", type=int, default=None)
    p.add_argument("--difficulty-mix", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=settings.pot_seed)
    p.add_argument("--heldout", type=int, default=100, help="Held-out difficulty-1 tasks for the sanity check")
    p.add_argument("--corpus-out", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None, help="Snapshot path (default: SNAPSHOT_PATH)")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("solve", help="Run one or more methods over a task suite")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--method", default=None, help=f"Comma-separated subset of {', '.join(Method)}")
    p.add_argument("--seeds", default=None, help="Comma-separated seeds (default: from config)")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--snapshot", type=Path, default=None)
    p.add_argument("--suite", type=Path, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--dump-dir", type=Path, default=None, help="Write search trees and final adapters here")
    p.set_defaults(handler=cmd_solve)

    p = sub.add_parser("ablate", help="Run the configured method over a parameter grid")
    p.add_argument("--grid", required=True, help="k=1,3 | beta=0.002,0.02,0.2 | rank_lr=4:1e-4,8:1e-4")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--seeds", default=None)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--snapshot", type=Path, default=None)
    p.add_argument("--suite", type=Path, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("report", help="Verify stored summaries against their reports and print tables")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--format", choices=("csv", "md"), default="md")
    p.add_argument("--force", action="store_true", help="Aggregate across mismatched fingerprints")
    p.add_argument("--output", type=Path, default=None)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("grad-check", help="Finite-difference check of adapter gradients")
    p.add_argument("--snapshot", type=Path, default=None, help="Default: a randomly initialized network")
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--seed", type=int, default=settings.pot_seed)
    p.set_defaults(handler=cmd_grad_check)

    p = sub.add_parser("replay", help="Re-run stored reports and require identical results")
    p.add_argument("--report", type=Path, required=True, help="reports.jsonl of a solve run")
    p.add_argument("--index", type=int, default=None, help="Replay only this line (0-based)")
    p.add_argument("--snapshot", type=Path, default=None)
    p.set_defaults(handler=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (UsageError, ValidationError) as e:
        log.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except SolverError as e:
        log.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    except ValueError as e:
        # parameter values rejected before any work starts
        log.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        log.warning(f"{args.command} interrupted; finished reports were kept")
        return EXIT_FAILURE
    except Exception as e:
        log.error(f"{args.command} failed unexpectedly: {e}", exc_info=True)
        return EXIT_FAILURE


def entry_point() -> None:
    """Entry point for the script command"""
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
