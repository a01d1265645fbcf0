"""
Experiment orchestration: seeds, sweeps, verification and file output.

A run directory holds `config.txt` (the configuration echo, loadable as is),
one `seed-<s>/` directory per seed with `trace.csv` and `metrics.csv`, and
`summary.json` with the across-seed statistics.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (
    DEFAULTS,
    KEYS,
    ExperimentConfig,
    dumps_config,
    from_mapping,
    problem_mapping,
    resolve_output,
)
from .engine import MetricsRow, RunObserver, RunResult, TraceRecord, init_cluster, run
from .exceptions import SimConfigError, SimError, SimVerificationError
from .optim import make_rule
from .problems import AssumptionConstants, Problem, assumption_constants, make_problem
from .verify import DelayStats, GapVerifier, ResidualReport, check_trace_legality, delay_stats

logger: logging.Logger = logging.getLogger(__name__)

TRACE_HEADER: tuple[str, ...] = ("t", "worker", "ite", "tau", "sim_time")
METRICS_HEADER: tuple[str, ...] = ("t", "sim_time", "loss", "grad_norm2", "tau", "b", "eta_eff")

CONFIG_FILE: str = "config.txt"
SUMMARY_FILE: str = "summary.json"

# ======================================================================================
#   Models
# ======================================================================================


@dataclass(frozen=True)
class SeedOutcome:
    """Final statistics of one seed."""

    seed: int
    final_loss: float
    final_grad_norm2: float
    delays: DelayStats
    sim_time: float
    final_accuracy: float | None = None
    """Held-out accuracy, for problems with a held-out set."""


@dataclass(frozen=True)
class ExperimentSummary:
    """Outcomes of every seed of one configuration."""

    cfg: ExperimentConfig
    outcomes: tuple[SeedOutcome, ...]

    def as_dict(self) -> dict[str, object]:
        """Contents of `summary.json`."""

        def stats(values: Sequence[float]) -> dict[str, object]:
            return {
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
                "values": [float(v) for v in values],
            }

        summary: dict[str, object] = {
            "optimizer": self.cfg.optimizer,
            "scheduler": self.cfg.scheduler,
            "workers": self.cfg.workers,
            "iterations": self.cfg.iterations,
            "heterogeneous": self.cfg.heterogeneous,
            "problem": problem_mapping(self.cfg),
            "seeds": [o.seed for o in self.outcomes],
            "final_loss": stats([o.final_loss for o in self.outcomes]),
            "final_grad_norm2": stats([o.final_grad_norm2 for o in self.outcomes]),
            "tau_mean": stats([o.delays.mean for o in self.outcomes]),
            "tau_max": stats([float(o.delays.max) for o in self.outcomes]),
            "sim_time": stats([o.sim_time for o in self.outcomes]),
        }
        accuracies: list[float | None] = [o.final_accuracy for o in self.outcomes]
        if accuracies and all(a is not None for a in accuracies):
            summary["final_accuracy"] = stats([a for a in accuracies if a is not None])
        return summary


@dataclass(frozen=True)
class SeedVerification:
    seed: int
    reports: tuple[ResidualReport, ...]
    violations: tuple[str, ...]
    constants: AssumptionConstants

    @property
    def passed(self) -> bool:
        return not self.violations and all(r.passed for r in self.reports)


@dataclass(frozen=True)
class VerificationOutcome:
    seeds: tuple[SeedVerification, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.seeds)

    def raise_for_failures(self) -> None:
        """
        Raises:
            * `SimVerificationError`: If any seed failed a check
        """

        failed: dict[str, list[str]] = {
            str(s.seed): [r.name for r in s.reports if not r.passed]
            + (["trace_legality"] if s.violations else [])
            for s in self.seeds
            if not s.passed
        }
        if failed:
            raise SimVerificationError(
                f"Verification failed for seed(s) {', '.join(failed)}",
                service="verify_experiment",
                context={"failed": failed},
            )


# ======================================================================================
#   Files
# ======================================================================================


def write_trace(path: Path, trace: Iterable[TraceRecord], /) -> None:
    """Write one row per server iteration."""

    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in trace:
            writer.writerow((r.t, r.k_t, r.ite, r.tau, repr(r.sim_time)))


def write_metrics(path: Path, metrics: Iterable[MetricsRow], /) -> None:
    """Write the metric rows; `b` is blank for rules without a head bucket."""

    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for m in metrics:
            writer.writerow(
                (
                    m.t,
                    repr(m.sim_time),
                    repr(m.loss),
                    repr(m.grad_norm2),
                    m.tau,
                    "" if m.b is None else m.b,
                    repr(m.eta_eff),
                )
            )


def seed_dir(output: Path, seed: int, /) -> Path:
    """Directory of one seed inside a run."""

    return output / f"seed-{seed}"


# ======================================================================================
#   Runs
# ======================================================================================


def run_seed(
    cfg: ExperimentConfig,
    seed: int,
    /,
    problem: Problem | None = None,
    observers: Iterable[RunObserver] = (),
) -> tuple[RunResult, SeedOutcome]:
    """Run one seed of `cfg` in memory."""

    problem = problem or make_problem(cfg.problem)
    try:
        result: RunResult = run(
            init_cluster(cfg.workers, cfg.delay, seed),
            cfg.iterations,
            make_rule(cfg.optimizer, cfg.hyper),
            problem,
            cfg.scheduler,
            batch_size=cfg.batch,
            stride=cfg.stride,
            observers=observers,
        )
    except SimError as err:
        err.context.setdefault("seed", seed)
        raise

    full: np.ndarray = problem.full_gradient(result.w)
    outcome: SeedOutcome = SeedOutcome(
        seed=seed,
        final_loss=problem.loss(result.w),
        final_grad_norm2=float(full @ full),
        delays=delay_stats(result.trace),
        sim_time=result.state.sim_time,
        final_accuracy=problem.accuracy(result.w),
    )
    return result, outcome


def _seed_job(cfg: ExperimentConfig, seed: int) -> SeedOutcome:
    result, outcome = run_seed(cfg, seed)
    directory: Path = seed_dir(cfg.output, seed)
    directory.mkdir(parents=True, exist_ok=True)
    write_trace(directory / "trace.csv", result.trace)
    write_metrics(directory / "metrics.csv", result.metrics)
    logger.info(
        "Seed %d of `%s` done: final loss %.6g", seed, cfg.optimizer, outcome.final_loss
    )
    return outcome


def run_experiment(cfg: ExperimentConfig, /, jobs: int = 1) -> ExperimentSummary:
    """
    Run every seed of `cfg` and write the run directory.

    Seeds run in separate processes when `jobs > 1`; the files do not depend on it.
    """

    if jobs < 1:
        raise SimConfigError(f"`jobs` must be at least 1, got {jobs}", service="run_experiment")
    cfg.output.mkdir(parents=True, exist_ok=True)
    _ = (cfg.output / CONFIG_FILE).write_text(dumps_config(cfg), encoding="utf-8")
    logger.info("Running `%s` over %d seed(s) into %s", cfg.optimizer, len(cfg.seeds), cfg.output)

    outcomes: list[SeedOutcome]
    if jobs == 1 or len(cfg.seeds) == 1:
        outcomes = [_seed_job(cfg, seed) for seed in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cfg.seeds))) as pool:
            outcomes = list(pool.map(_seed_job, itertools.repeat(cfg), cfg.seeds))

    summary: ExperimentSummary = ExperimentSummary(cfg=cfg, outcomes=tuple(outcomes))
    _ = (cfg.output / SUMMARY_FILE).write_text(
        json.dumps(summary.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary


def sweep_configs(
    raw: Mapping[str, str], vary: Mapping[str, Sequence[str]], /
) -> list[ExperimentConfig]:
    """
    One configuration per combination of the varied values.

    Each combination writes into `<output>/<key>=<value>,...`.

    Raises:
        * `SimConfigError`: If a varied key is unknown or any combination is invalid
    """

    for key, values in vary.items():
        if key not in KEYS or key == "output":
            raise SimConfigError(
                f"Cannot vary key `{key}`", service="sweep", context={"key": key}
            )
        if not values:
            raise SimConfigError(
                f"No values given for key `{key}`", service="sweep", context={"key": key}
            )

    base: Path = resolve_output(raw.get("output") or DEFAULTS["output"])
    keys: list[str] = list(vary)
    configs: list[ExperimentConfig] = []
    for combo in itertools.product(*(vary[k] for k in keys)):
        name: str = ",".join(f"{k}={v}" for k, v in zip(keys, combo))
        merged: dict[str, str] = {**raw, **dict(zip(keys, combo)), "output": str(base / name)}
        configs.append(from_mapping(merged))
    return configs


def sweep(
    raw: Mapping[str, str], vary: Mapping[str, Sequence[str]], /, jobs: int = 1
) -> list[ExperimentSummary]:
    configs: list[ExperimentConfig] = sweep_configs(raw, vary)
    return [run_experiment(cfg, jobs=jobs) for cfg in configs]


# ======================================================================================
#   Verification & data
# ======================================================================================


def verify_experiment(
    cfg: ExperimentConfig, /, jsonl: Path | None = None
) -> VerificationOutcome:
    """
    Run every seed with the gap identities checked along the way.

    Raises:
        * `SimConfigError`: If the configuration is not an ordered-momentum run with
            a constant learning rate
    """

    problem: Problem = make_problem(cfg.problem)
    seeds: list[SeedVerification] = []
    for seed in cfg.seeds:
        verifier: GapVerifier = GapVerifier(track_noise=True)
        result, _ = run_seed(cfg, seed, problem=problem, observers=(verifier,))
        violations: list[str] = check_trace_legality(
            result.trace, result.state.dispatch_log, cfg.scheduler, cfg.workers
        )
        verification: SeedVerification = SeedVerification(
            seed=seed,
            reports=tuple(verifier.reports()),
            violations=tuple(violations),
            constants=assumption_constants(problem, verifier.observed()),
        )
        seeds.append(verification)
        logger.info("Seed %d verification %s", seed, "passed" if verification.passed else "FAILED")

    outcome: VerificationOutcome = VerificationOutcome(seeds=tuple(seeds))
    if jsonl is not None:
        jsonl.parent.mkdir(parents=True, exist_ok=True)
        with jsonl.open("w", encoding="utf-8") as f:
            for s in outcome.seeds:
                for report in s.reports:
                    _ = f.write(json.dumps({"seed": s.seed, **report.as_dict()}, sort_keys=True))
                    _ = f.write("\n")
                for violation in s.violations:
                    _ = f.write(json.dumps({"seed": s.seed, "violation": violation}) + "\n")
    return outcome


def dump_dataset(cfg: ExperimentConfig, /, out: Path | None = None) -> Path:
    """Write the generated dataset of `cfg.problem` as CSV."""

    problem: Problem = make_problem(cfg.problem)
    header, rows = problem.dataset()
    path: Path = out or cfg.output / "dataset.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    logger.info("Wrote %d rows to %s", len(rows), path)
    return path
