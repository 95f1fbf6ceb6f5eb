"""
Suite aggregation and report tables.

Every statistic here is a pure function of the per-task reports, so a stored
summary can always be recomputed and checked.
"""

import logging
import math
from pathlib import Path

import pandas as pd

from ..errors import ReportFileError
from ..engine.evolution_loop import estimate_budget
from ..models.config import METHOD_ORDER, EvolutionConfig, Method
from ..models.reports import AblationCell, SeedSummary, SolveReport, SuiteSummary
from .validation import read_json, read_jsonl

logger = logging.getLogger(__name__)

REPORTS_FILE = "reports.jsonl"
TRACES_FILE = "traces.jsonl"
SUMMARY_FILE = "summary.json"
SUMMARY_CSV = "summary.csv"
CONFIG_FILE = "config.yaml"

# Fixed CSV columns, one row per (method, seed)
CSV_COLUMNS = ["method", "seed", "solve_rate", "mean_reward", "nodes", "wall_ms", "fingerprint"]


def reports_frame(reports: list[SolveReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "task_id": r.task_id,
                "seed": r.seed,
                "solved": r.solved,
                "reward": r.reward,
                "nodes": r.ledger.nodes_generated,
                "wall_ms": r.wall_ms,
                "post_kl": r.mean_post_kl,
            }
            for r in reports
        ]
    )


def budget_model_error(reports: list[SolveReport]) -> float | None:
    """
    Relative error of the phase cost model over a suite: |sum(predicted) - sum(actual)| / sum(actual).

    None when no report ran a search phase.
    """
    estimates = [
        estimate_budget(EvolutionConfig.model_validate(r.config["evolution"]), r.ledger)
        for r in reports
        if r.ledger.phases
    ]
    actual = sum(e.actual_ms for e in estimates)
    if actual <= 0:
        return None
    return abs(sum(e.predicted_ms for e in estimates) - actual) / actual


def summarize(reports: list[SolveReport], method: Method, fingerprint: str) -> SuiteSummary:
    """
    Aggregate one method's reports.

    Raises:
        ValueError: no reports
    """
    if not reports:
        raise ValueError(f"no reports to summarize for {method}")
    df = reports_frame(reports)
    per_seed = [
        SeedSummary(
            seed=int(seed),
            n_tasks=len(group),
            solve_rate=float(group["solved"].mean()),
            mean_reward=float(group["reward"].mean()),
            mean_nodes=float(group["nodes"].mean()),
            mean_wall_ms=float(group["wall_ms"].mean()),
        )
        for seed, group in df.groupby("seed", sort=True)
    ]
    phase_costs = [p.cost_ms for r in reports for p in r.ledger.phases]
    post_kl = df["post_kl"].dropna()
    return SuiteSummary(
        method=method,
        fingerprint=fingerprint,
        n_reports=len(reports),
        solve_rate=float(df["solved"].mean()),
        mean_reward=float(df["reward"].mean()),
        mean_nodes=float(df["nodes"].mean()),
        mean_wall_ms=float(df["wall_ms"].mean()),
        mean_phase_cost_ms=float(pd.Series(phase_costs, dtype="float64").mean()) if phase_costs else 0.0,
        mean_post_kl=float(post_kl.mean()) if len(post_kl) else None,
        budget_error=budget_model_error(reports),
        per_seed=per_seed,
        task_fingerprints=sorted({r.task_fingerprint for r in reports}),
    )


def summary_frame(summaries: list[SuiteSummary]) -> pd.DataFrame:
    """method x seed rows in report order"""
    rows = [
        {
            "method": str(s.method),
            "seed": seed.seed,
            "solve_rate": seed.solve_rate,
            "mean_reward": seed.mean_reward,
            "nodes": seed.mean_nodes,
            "wall_ms": seed.mean_wall_ms,
            "fingerprint": s.fingerprint,
        }
        for s in order_summaries(summaries)
        for seed in s.per_seed
    ]
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def write_summary_csv(summaries: list[SuiteSummary], path: Path) -> None:
    summary_frame(summaries).to_csv(path, index=False)
    logger.info(f"Wrote {path}")


def order_summaries(summaries: list[SuiteSummary]) -> list[SuiteSummary]:
    return sorted(summaries, key=lambda s: METHOD_ORDER.index(s.method))


def _cell(value: object) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def markdown_table(df: pd.DataFrame) -> str:
    """Pipe table with one header row; floats to four significant digits, missing values as a dash"""
    header = "| " + " | ".join(df.columns) + " |"
    rule = "| " + " | ".join("---" for _ in df.columns) + " |"
    body = ["| " + " | ".join(_cell(v) for v in row) + " |" for row in df.itertuples(index=False)]
    return "\n".join([header, rule, *body]) + "\n"


def method_table(summaries: list[SuiteSummary]) -> pd.DataFrame:
    """One row per method, in ablation-table order"""
    return pd.DataFrame(
        [
            {
                "method": str(s.method),
                "solve_rate": s.solve_rate,
                "mean_reward": s.mean_reward,
                "nodes": s.mean_nodes,
                "phase_cost_ms": s.mean_phase_cost_ms,
                "post_kl": s.mean_post_kl,
                "budget_error": s.budget_error,
                "wall_ms": s.mean_wall_ms,
                "fingerprint": s.fingerprint,
            }
            for s in order_summaries(summaries)
        ]
    )


def ablation_frame(cells: list[AblationCell]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "cell": c.label,
                "solve_rate": c.summary.solve_rate,
                "mean_reward": c.summary.mean_reward,
                "nodes": c.summary.mean_nodes,
                "phase_cost_ms": c.summary.mean_phase_cost_ms,
                "post_kl": c.summary.mean_post_kl,
                "budget_error": c.summary.budget_error,
                "fingerprint": c.summary.fingerprint,
            }
            for c in cells
        ]
    )


def verify_method_dir(method_dir: Path, force: bool = False) -> SuiteSummary:
    """
    Recompute a method's summary from its reports and require it to equal the stored one.

    Raises:
        ReportFileError: missing or corrupt files, mixed fingerprints (unless
            forced), or a stored summary that differs from the recomputation
    """
    stored = read_json(method_dir / SUMMARY_FILE, SuiteSummary)
    reports = read_jsonl(method_dir / REPORTS_FILE, SolveReport)
    if not reports:
        raise ReportFileError(f"{method_dir / REPORTS_FILE} has no reports")
    fingerprints = {r.config_fingerprint for r in reports} | {stored.fingerprint}
    if len(fingerprints) > 1:
        if not force:
            raise ReportFileError(
                f"{method_dir}: reports mix config fingerprints {sorted(fingerprints)}; use --force to aggregate anyway"
            )
        logger.warning(f"{method_dir}: aggregating across fingerprints {sorted(fingerprints)}")
    recomputed = summarize(reports, stored.method, stored.fingerprint)
    if recomputed.canonical_json() != stored.canonical_json():
        raise ReportFileError(f"{method_dir / SUMMARY_FILE} does not match the summary recomputed from its reports")
    return recomputed


def collect_summaries(run_dir: Path, force: bool = False) -> list[SuiteSummary]:
    """
    Verified summaries of every method directory under a run directory.

    Raises:
        ReportFileError: nothing to report, a bad method directory, or methods
            run on different task suites (unless forced)
    """
    if not run_dir.is_dir():
        raise ReportFileError(f"Missing run directory: {run_dir}")
    method_dirs = [run_dir / str(m) for m in METHOD_ORDER if (run_dir / str(m)).is_dir()]
    if not method_dirs:
        raise ReportFileError(f"No method directories under {run_dir}")
    summaries = [verify_method_dir(d, force) for d in method_dirs]
    suites = {tuple(s.task_fingerprints) for s in summaries}
    if len(suites) > 1:
        if not force:
            raise ReportFileError(f"{run_dir}: methods were run on different task suites; use --force")
        logger.warning(f"{run_dir}: comparing methods across different task suites")
    return summaries
