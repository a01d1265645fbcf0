from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, load_config, problem_mapping
from .exceptions import SimConfigError, SimIncomparableRunsError, SimRunPathError
from .experiment import CONFIG_FILE, SUMMARY_FILE

logger: logging.Logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComparisonRow:
    run: str
    optimizer: str
    scheduler: str
    setting: str
    """`homogeneous` or `heterogeneous` worker timing."""
    loss_mean: float
    loss_std: float
    grad_norm2_mean: float
    grad_norm2_std: float
    loss_diff: float
    """Mean final loss minus that of the first run."""


@dataclass(frozen=True)
class ComparisonTable:
    problem: dict[str, str]
    rows: tuple[ComparisonRow, ...]

    def render(self) -> str:
        header: tuple[str, ...] = (
            "run",
            "optimizer",
            "scheduler",
            "setting",
            "final loss",
            "final |grad F|^2",
            "loss diff",
        )
        body: list[tuple[str, ...]] = [
            (
                r.run,
                r.optimizer,
                r.scheduler,
                r.setting,
                f"{r.loss_mean:.6g} ± {r.loss_std:.2g}",
                f"{r.grad_norm2_mean:.6g} ± {r.grad_norm2_std:.2g}",
                f"{r.loss_diff:+.3g}",
            )
            for r in self.rows
        ]
        widths: list[int] = [
            max(len(line[i]) for line in [header, *body]) for i in range(len(header))
        ]
        lines: list[str] = [
            "  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
            for line in [header, *body]
        ]
        problem: str = ", ".join(f"{k}={v}" for k, v in self.problem.items())
        return "\n".join([f"problem: {problem}", *lines]) + "\n"


def _load_run(directory: Path, /) -> tuple[ExperimentConfig, dict[str, object]]:
    config_path: Path = directory / CONFIG_FILE
    summary_path: Path = directory / SUMMARY_FILE
    for path in (directory, config_path, summary_path):
        if not path.exists():
            raise SimRunPathError(
                f"Run path `{path}` does not exist",
                service="compare_report",
                context={"path": str(path)},
            )
    try:
        summary: dict[str, object] = json.loads(summary_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise SimRunPathError(
            f"Run summary `{summary_path}` is not valid JSON",
            service="compare_report",
            context={"path": str(summary_path)},
            cause=err,
        ) from err
    return load_config(config_path), summary


def compare_report(run_dirs: Sequence[str | Path], /) -> ComparisonTable:
    """
    Tabulate the final loss and squared gradient norm of completed runs.

    Raises:
        * `SimConfigError`: If fewer than two runs are given
        * `SimRunPathError`: If a run directory or its files are missing
        * `SimIncomparableRunsError`: If the runs were made on different problems
    """

    if len(run_dirs) < 2:
        raise SimConfigError(
            f"A comparison needs at least two runs, got {len(run_dirs)}",
            service="compare_report",
            category="USAGE",
        )

    loaded: list[tuple[Path, ExperimentConfig, dict[str, object]]] = []
    for entry in run_dirs:
        directory: Path = Path(entry)
        cfg, summary = _load_run(directory)
        loaded.append((directory, cfg, summary))

    reference: dict[str, str] = problem_mapping(loaded[0][1])
    for directory, cfg, _ in loaded[1:]:
        other: dict[str, str] = problem_mapping(cfg)
        if other != reference:
            differing: list[str] = sorted(k for k in reference if reference[k] != other[k])
            raise SimIncomparableRunsError(
                f"Run `{directory}` uses a different problem ({', '.join(differing)})",
                service="compare_report",
                context={"run": str(directory), "keys": differing},
            )

    first_loss: float = _stat(loaded[0][2], "final_loss", "mean")
    rows: list[ComparisonRow] = []
    for directory, cfg, summary in loaded:
        loss: float = _stat(summary, "final_loss", "mean")
        rows.append(
            ComparisonRow(
                run=str(directory),
                optimizer=cfg.optimizer,
                scheduler=cfg.scheduler,
                setting="heterogeneous" if cfg.heterogeneous else "homogeneous",
                loss_mean=loss,
                loss_std=_stat(summary, "final_loss", "std"),
                grad_norm2_mean=_stat(summary, "final_grad_norm2", "mean"),
                grad_norm2_std=_stat(summary, "final_grad_norm2", "std"),
                loss_diff=loss - first_loss,
            )
        )
    return ComparisonTable(problem=reference, rows=tuple(rows))


def _stat(summary: dict[str, object], metric: str, key: str, /) -> float:
    block: object = summary.get(metric)
    if not isinstance(block, dict) or key not in block:
        raise SimRunPathError(
            f"Summary has no `{metric}.{key}` entry",
            service="compare_report",
            category="INVALID",
        )
    return float(block[key])
