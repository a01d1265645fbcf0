import csv
import json
from pathlib import Path

import pytest

from ormo_sim import ExperimentConfig, SimConfigError, loads_config
from ormo_sim.config import load_raw
from ormo_sim.experiment import (
    CONFIG_FILE,
    METRICS_HEADER,
    SUMMARY_FILE,
    TRACE_HEADER,
    ExperimentSummary,
    SeedVerification,
    VerificationOutcome,
    dump_dataset,
    run_experiment,
    run_seed,
    sweep,
    sweep_configs,
    verify_experiment,
)
from ormo_sim.exceptions import SimVerificationError
from ormo_sim.problems import AssumptionConstants


def _rows(path: Path) -> list[list[str]]:
    with path.open(encoding="utf-8", newline="") as f:
        return list(csv.reader(f))


def test_run_experiment_writes_run_directory(config_text: str) -> None:
    """Test the configuration echo, per-seed CSVs and the summary."""

    cfg: ExperimentConfig = loads_config(config_text)
    summary: ExperimentSummary = run_experiment(cfg)

    assert (cfg.output / CONFIG_FILE).read_text(encoding="utf-8").startswith("problem = ")
    for seed in cfg.seeds:
        trace: list[list[str]] = _rows(cfg.output / f"seed-{seed}" / "trace.csv")
        metrics: list[list[str]] = _rows(cfg.output / f"seed-{seed}" / "metrics.csv")
        assert tuple(trace[0]) == TRACE_HEADER
        assert len(trace) == cfg.iterations + 1
        assert tuple(metrics[0]) == METRICS_HEADER
        assert [int(r[0]) for r in metrics[1:3]] == [0, 10]

    data: dict[str, object] = json.loads((cfg.output / SUMMARY_FILE).read_text(encoding="utf-8"))
    assert data["seeds"] == [0, 1]
    assert data["optimizer"] == "ormo"
    assert data["final_loss"] == summary.as_dict()["final_loss"]


@pytest.mark.parametrize(
    ("optimizer", "scheduler"),
    [
        ("ormo", "asynchronous"),
        ("ormo", "synchronous"),
        ("asgd", "asynchronous"),
        ("naive_asgdm", "asynchronous"),
        ("ssgdm_global", "synchronous"),
    ],
)
def test_metrics_rows_follow_the_trace(config_text: str, optimizer: str, scheduler: str) -> None:
    """Test metric rows sit on the stride plus the last iteration and agree with the trace."""

    text: str = config_text.replace("optimizer = ormo", f"optimizer = {optimizer}")
    text = text.replace("stride = 10", "stride = 8") + f"scheduler = {scheduler}\n"
    cfg: ExperimentConfig = loads_config(text)
    _ = run_experiment(cfg)

    t_col: int = METRICS_HEADER.index("t")
    tau_col: int = METRICS_HEADER.index("tau")
    b_col: int = METRICS_HEADER.index("b")
    for seed in cfg.seeds:
        trace: list[list[str]] = _rows(cfg.output / f"seed-{seed}" / "trace.csv")[1:]
        metrics: list[list[str]] = _rows(cfg.output / f"seed-{seed}" / "metrics.csv")[1:]
        tau_at: dict[str, str] = {
            row[TRACE_HEADER.index("t")]: row[TRACE_HEADER.index("tau")] for row in trace
        }

        assert [row[t_col] for row in metrics] == [str(t) for t in range(0, 120, 8)] + ["119"]
        for row in metrics:
            assert row[tau_col] == tau_at[row[t_col]]
            assert (row[b_col] == "") == (optimizer != "ormo")


def test_summary_reports_holdout_accuracy(config_text: str) -> None:
    """Test classification runs add the held-out accuracy and regression runs do not."""

    logistic: ExperimentConfig = loads_config(
        config_text.replace("noisy_quadratic", "logistic_regression").replace("run\n", "lr\n")
    )
    quadratic: ExperimentConfig = loads_config(config_text)

    accuracy = run_experiment(logistic).as_dict()["final_accuracy"]
    data: dict[str, object] = json.loads(
        (logistic.output / SUMMARY_FILE).read_text(encoding="utf-8")
    )

    assert isinstance(accuracy, dict)
    assert 0.0 <= accuracy["mean"] <= 1.0
    assert len(accuracy["values"]) == 2
    assert data["final_accuracy"] == accuracy
    assert "final_accuracy" not in run_experiment(quadratic).as_dict()


def test_run_experiment_is_reproducible(config_text: str, tmp_path: Path) -> None:
    """Test repeated runs write byte-identical files."""

    first: ExperimentConfig = loads_config(config_text.replace("run\n", "first\n"))
    second: ExperimentConfig = loads_config(config_text.replace("run\n", "second\n"))
    _ = run_experiment(first)
    _ = run_experiment(second)

    for name in ("seed-0/trace.csv", "seed-0/metrics.csv", "seed-1/metrics.csv", SUMMARY_FILE):
        assert (first.output / name).read_bytes() == (second.output / name).read_bytes()


def test_parallel_seeds_match_serial(config_text: str) -> None:
    """Test the process pool does not change the results."""

    serial: ExperimentConfig = loads_config(config_text.replace("run\n", "serial\n"))
    parallel: ExperimentConfig = loads_config(config_text.replace("run\n", "parallel\n"))

    assert run_experiment(serial).as_dict() == run_experiment(parallel, jobs=2).as_dict()
    assert (serial.output / "seed-1/trace.csv").read_bytes() == (
        parallel.output / "seed-1/trace.csv"
    ).read_bytes()


def test_invalid_jobs(config_text: str) -> None:
    """Test the job count must be positive."""

    with pytest.raises(SimConfigError, match="jobs"):
        _ = run_experiment(loads_config(config_text), jobs=0)


def test_run_seed_in_memory(config_text: str) -> None:
    """Test one seed without touching the disk."""

    cfg: ExperimentConfig = loads_config(config_text)
    result, outcome = run_seed(cfg, 0)

    assert len(result.trace) == cfg.iterations
    assert outcome.delays.max >= 3
    assert not cfg.output.exists()


def test_sweep_runs_every_combination(config_file: Path, tmp_path: Path) -> None:
    """Test one sub-directory per combination of the varied keys."""

    raw: dict[str, str] = load_raw(config_file)
    raw["seeds"] = "0"
    summaries: list[ExperimentSummary] = sweep(
        raw, {"optimizer": ["asgd", "ormo"], "workers": ["2", "4"]}
    )

    names: list[str] = sorted(s.cfg.output.name for s in summaries)
    assert names == [
        "optimizer=asgd,workers=2",
        "optimizer=asgd,workers=4",
        "optimizer=ormo,workers=2",
        "optimizer=ormo,workers=4",
    ]
    assert all((s.cfg.output / SUMMARY_FILE).exists() for s in summaries)
    assert all(s.cfg.output.parent == tmp_path / "run" for s in summaries)


def test_sweep_rejects_bad_keys(config_file: Path) -> None:
    """Test unknown, output and empty varied keys."""

    raw: dict[str, str] = load_raw(config_file)

    with pytest.raises(SimConfigError, match="Cannot vary"):
        _ = sweep_configs(raw, {"colour": ["red"]})
    with pytest.raises(SimConfigError, match="Cannot vary"):
        _ = sweep_configs(raw, {"output": ["x"]})
    with pytest.raises(SimConfigError, match="No values"):
        _ = sweep_configs(raw, {"beta": []})
    with pytest.raises(SimConfigError, match="`beta`"):
        _ = sweep_configs(raw, {"beta": ["0.5", "2.0"]})


def test_verify_experiment_passes(config_text: str, tmp_path: Path) -> None:
    """Test a small ordered-momentum run passes every check and logs details."""

    jsonl: Path = tmp_path / "verify" / "checks.jsonl"
    outcome: VerificationOutcome = verify_experiment(loads_config(config_text), jsonl=jsonl)

    assert outcome.passed
    outcome.raise_for_failures()
    assert [s.seed for s in outcome.seeds] == [0, 1]
    assert outcome.seeds[0].constants.sigma2 > 0.0
    lines: list[dict[str, object]] = [
        json.loads(line) for line in jsonl.read_text(encoding="utf-8").splitlines()
    ]
    assert len(lines) == 2 * 6
    assert {line["name"] for line in lines} >= {"momentum_gap", "parameter_gap"}


def test_verify_experiment_needs_ordered_momentum(config_text: str) -> None:
    """Test verification refuses other optimizers."""

    with pytest.raises(SimConfigError):
        _ = verify_experiment(loads_config(config_text.replace("= ormo", "= asgd")))


def test_failed_verification_raises() -> None:
    """Test a failing seed surfaces as a verification error."""

    outcome: VerificationOutcome = VerificationOutcome(
        seeds=(
            SeedVerification(
                seed=4,
                reports=(),
                violations=("t=3: sim_time went backwards",),
                constants=AssumptionConstants(sigma2=0.0, G2=0.0, L=1.0),
            ),
        )
    )

    with pytest.raises(SimVerificationError) as info:
        outcome.raise_for_failures()

    assert info.value.context["failed"] == {"4": ["trace_legality"]}


def test_dump_dataset(config_text: str, tmp_path: Path) -> None:
    """Test the generated dataset is written as CSV."""

    cfg: ExperimentConfig = loads_config(config_text)
    path: Path = dump_dataset(cfg)
    other: Path = dump_dataset(cfg, out=tmp_path / "data.csv")

    rows: list[list[str]] = _rows(path)
    assert path == cfg.output / "dataset.csv"
    assert rows[0][0] == "zeta_0"
    assert len(rows) == 200 + 1
    assert other.read_bytes() == path.read_bytes()
