"""
Ablation grids over the branching factor, the KL coefficient, or the adapter
rank together with its learning rate.

Grid syntax (one axis per run):

    k=1,3
    beta=0.002,0.02,0.2
    rank_lr=4:1e-4,8:1e-4,8:1e-3

Every cell solves the same tasks under the same seeds, so cells are paired.
"""

import logging
from pathlib import Path
from typing import Any

from ..models.config import ExperimentConfig
from ..models.dsl import TaskInstance
from ..models.reports import AblationCell
from .runner import run_method_suite
from .summary import ablation_frame, markdown_table

logger = logging.getLogger(__name__)

ABLATION_JSONL = "ablation.jsonl"
ABLATION_CSV = "ablation.csv"
ABLATION_MD = "ablation.md"


def _number(axis: str, raw: str, kind: type) -> Any:
    try:
        return kind(raw)
    except ValueError as e:
        raise ValueError(f"grid {axis}: {raw!r} is not a valid {kind.__name__}") from e


def parse_grid(spec: str) -> list[tuple[str, dict[str, Any]]]:
    """
    Parse a grid spec into (cell label, dotted-path overrides) pairs.

    Raises:
        ValueError: unknown axis, empty or duplicate values, malformed entry
    """
    axis, sep, values = spec.partition("=")
    axis = axis.strip()
    if not sep:
        raise ValueError(f"grid must look like axis=v1,v2 (got {spec!r})")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ValueError(f"grid {axis!r} has no values")

    cells: list[tuple[str, dict[str, Any]]] = []
    if axis == "k":
        for raw in items:
            k = _number(axis, raw, int)
            cells.append((f"k={k}", {"evolution.search.k": k}))
    elif axis == "beta":
        for raw in items:
            beta = _number(axis, raw, float)
            cells.append((f"beta={beta:g}", {"evolution.grpo.beta": beta}))
    elif axis == "rank_lr":
        for raw in items:
            rank, colon, lr = raw.partition(":")
            if not colon:
                raise ValueError(f"grid rank_lr entries look like rank:lr (got {raw!r})")
            r, eta = _number(axis, rank, int), _number(axis, lr, float)
            cells.append((f"r={r},lr={eta:g}", {"evolution.adapter.rank": r, "evolution.adapter.lr": eta}))
    else:
        raise ValueError(f"unknown grid axis {axis!r}; expected k, beta or rank_lr")

    labels = [label for label, _ in cells]
    if len(set(labels)) != len(labels):
        raise ValueError(f"grid {axis!r} repeats a value")
    return cells


def apply_overrides(config: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """
    Copy of the config with dotted-path fields replaced, revalidated.

    Raises:
        pydantic.ValidationError: an override violates a config invariant
    """
    data = config.model_dump(mode="json")
    for path, value in overrides.items():
        *parents, leaf = path.split(".")
        node = data
        for key in parents:
            node = node[key]
        if leaf not in node:
            raise KeyError(f"unknown config field {path}")
        node[leaf] = value
    return ExperimentConfig.model_validate(data)


def cell_dirname(label: str) -> str:
    return label.replace("=", "").replace(",", "_")


def run_ablation(
    config: ExperimentConfig,
    tasks: list[TaskInstance],
    grid: str,
    out_dir: Path,
    workers: int | None = None,
) -> list[AblationCell]:
    """One suite run of the configured method per grid cell; writes JSONL, CSV and markdown tables."""
    cells = parse_grid(grid)
    configs = [(label, overrides, apply_overrides(config, overrides)) for label, overrides in cells]
    out_dir.mkdir(parents=True, exist_ok=True)
    results: list[AblationCell] = []
    for label, overrides, cell_config in configs:
        logger.info(f"Ablation cell {label}")
        summary = run_method_suite(cell_config, tasks, cell_config.method, out_dir / cell_dirname(label), workers)
        results.append(AblationCell(label=label, overrides=overrides, summary=summary))

    with (out_dir / ABLATION_JSONL).open("w", encoding="utf-8") as f:
        for cell in results:
            f.write(cell.canonical_json() + "\n")
    frame = ablation_frame(results)
    frame.to_csv(out_dir / ABLATION_CSV, index=False)
    (out_dir / ABLATION_MD).write_text(markdown_table(frame), encoding="utf-8")
    logger.info(f"Wrote ablation over {len(results)} cells to {out_dir}")
    return results
