"""
Batch runner: one method over every (task, seed) pair of a suite.

Solves run in a task-level process pool; each worker loads the base snapshot
once and owns the solves it is handed. Reports are written to disk in job
order as they complete, so an interrupted run keeps every finished report.

Output layout under the run directory:

    config.yaml               effective experiment config
    <method>/reports.jsonl    one SolveReport per line
    <method>/traces.jsonl     one line per report: (task, seed, trace events)
    <method>/summary.json     SuiteSummary of the reports
    summary.csv               method x seed rows across every method run
"""

import json
import logging
import multiprocessing
from collections.abc import Iterator
from concurrent.futures import Future, ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import torch

from ..engine.evolution_loop import Policy, run_method
from ..engine.snapshot import load_snapshot
from ..models.config import ExperimentConfig, Method
from ..models.dsl import TaskInstance
from ..models.reports import SolveReport, SuiteSummary
from ..settings import settings
from .config_file import dump_config
from .summary import (
    CONFIG_FILE,
    REPORTS_FILE,
    SUMMARY_CSV,
    SUMMARY_FILE,
    TRACES_FILE,
    summarize,
    write_summary_csv,
)

logger = logging.getLogger(__name__)


def load_policy(path: Path, expected_checksum: str | None = None) -> Policy:
    """
    Load the frozen base policy.

    Raises:
        SnapshotError: corrupt snapshot or checksum mismatch
    """
    net, header = load_snapshot(path, expected_checksum=expected_checksum)
    return Policy(net=net, checksum=header["checksum"])


@dataclass(frozen=True)
class SolveJob:
    task: TaskInstance
    seed: int
    method: Method
    config: ExperimentConfig
    fingerprint: str
    dump_dir: Path | None = None


def failed_report(job: SolveJob, checksum: str, error: BaseException) -> SolveReport:
    """Unsolved placeholder report for a solve that raised"""
    return SolveReport(
        task_id=job.task.task_id,
        task=job.task.model_dump(mode="json"),
        task_fingerprint=job.task.fingerprint(),
        method=job.method,
        seed=job.seed,
        config_fingerprint=job.fingerprint,
        config={"evolution": job.config.evolution.model_dump(mode="json")},
        snapshot_checksum=checksum,
        solved=False,
        reward=0.0,
        final_program="",
        error=f"{type(error).__name__}: {error}",
    )


def execute_job(policy: Policy, job: SolveJob) -> SolveReport:
    """Run one solve. A failing solve is logged and reported unsolved; the batch goes on."""
    best_of_n = job.config.effective_best_of_n
    try:
        return run_method(
            job.method,
            job.task,
            policy,
            job.config.evolution,
            job.seed,
            best_of_n,
            job.fingerprint,
            job.dump_dir,
        )
    except Exception as e:
        logger.error(f"Solve of {job.task.task_id} (seed {job.seed}, {job.method}) failed: {e}", exc_info=True)
        return failed_report(job, policy.checksum, e)


# Per-process policy, set by the pool initializer
_worker_policy: Policy | None = None


def _init_worker(snapshot_path: Path, expected_checksum: str | None, threads: int) -> None:
    global _worker_policy
    torch.set_num_threads(threads)
    _worker_policy = load_policy(snapshot_path, expected_checksum)


def _run_in_worker(job: SolveJob) -> SolveReport:
    if _worker_policy is None:
        raise RuntimeError("worker policy not initialized")
    return execute_job(_worker_policy, job)


def iter_reports(jobs: list[SolveJob], config: ExperimentConfig, workers: int) -> Iterator[SolveReport]:
    """Reports in job order. One worker runs in-process, more use a process pool."""
    if workers <= 1:
        torch.set_num_threads(settings.torch_threads)
        policy = load_policy(config.snapshot_path, config.snapshot_checksum)
        for job in jobs:
            yield execute_job(policy, job)
        return

    with ProcessPoolExecutor(
        max_workers=workers,
        mp_context=multiprocessing.get_context("spawn"),
        initializer=_init_worker,
        initargs=(config.snapshot_path, config.snapshot_checksum, settings.torch_threads),
    ) as pool:
        futures: list[Future[SolveReport]] = [pool.submit(_run_in_worker, job) for job in jobs]
        try:
            for future in futures:
                yield future.result()
        except BaseException:
            for future in futures:
                future.cancel()
            raise


def run_method_suite(
    config: ExperimentConfig,
    tasks: list[TaskInstance],
    method: Method,
    out_dir: Path,
    workers: int | None = None,
    dump_dir: Path | None = None,
) -> SuiteSummary:
    """
    Solve every task under every seed with one method and write its reports.

    Raises:
        SnapshotError: snapshot missing, corrupt or with another checksum
    """
    if not tasks:
        raise ValueError("task suite is empty")
    cfg = config.for_method(method)
    fingerprint = cfg.fingerprint()
    jobs = [
        SolveJob(task=task, seed=seed, method=method, config=cfg, fingerprint=fingerprint, dump_dir=dump_dir)
        for task in tasks
        for seed in cfg.seeds
    ]
    method_dir = out_dir / str(method)
    method_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running {method} on {len(tasks)} tasks x {len(cfg.seeds)} seeds (fingerprint {fingerprint})")

    reports: list[SolveReport] = []
    with (
        (method_dir / REPORTS_FILE).open("w", encoding="utf-8") as report_file,
        (method_dir / TRACES_FILE).open("w", encoding="utf-8") as trace_file,
    ):
        for report in iter_reports(jobs, cfg, workers or settings.workers):
            report_file.write(report.canonical_json() + "\n")
            report_file.flush()
            trace_line = {
                "task_id": report.task_id,
                "seed": report.seed,
                "method": str(report.method),
                "trace": [event.model_dump(mode="json") for event in report.trace],
            }
            trace_file.write(json.dumps(trace_line, sort_keys=True, separators=(",", ":")) + "\n")
            trace_file.flush()
            reports.append(report)
            logger.info(
                f"[{len(reports)}/{len(jobs)}] {report.task_id} seed {report.seed}: "
                f"solved={report.solved} reward={report.reward:.3f} nodes={report.ledger.nodes_generated}"
            )

    summary = summarize(reports, method, fingerprint)
    (method_dir / SUMMARY_FILE).write_text(summary.canonical_json() + "\n", encoding="utf-8")
    logger.info(f"{method}: solve rate {summary.solve_rate:.3f} over {summary.n_reports} solves")
    return summary


def run_suite(
    config: ExperimentConfig,
    tasks: list[TaskInstance],
    methods: list[Method],
    out_dir: Path,
    workers: int | None = None,
    dump_dir: Path | None = None,
) -> list[SuiteSummary]:
    """Run each method in turn over the same tasks and seeds; writes the combined CSV."""
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / CONFIG_FILE)
    summaries = [run_method_suite(config, tasks, m, out_dir, workers, dump_dir) for m in methods]
    write_summary_csv(summaries, out_dir / SUMMARY_CSV)
    return summaries
