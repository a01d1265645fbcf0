from pathlib import Path

import pytest

from ormo_sim.config import OUTPUT_ENV
from ormo_sim.engine import DelayModel
from ormo_sim.problems import (
    LogisticRegression,
    NoisyQuadratic,
    ProblemSpec,
    TwoLayerNet,
)

from ._classes import quadratic_spec


@pytest.fixture(autouse=True)
def no_output_root(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(OUTPUT_ENV, raising=False)


@pytest.fixture
def quadratic() -> NoisyQuadratic:
    return NoisyQuadratic(quadratic_spec())


@pytest.fixture
def logistic() -> LogisticRegression:
    return LogisticRegression(
        ProblemSpec(kind="logistic_regression", dimension=5, samples=50)
    )


@pytest.fixture
def net() -> TwoLayerNet:
    return TwoLayerNet(
        ProblemSpec(kind="two_layer_net", dimension=3, samples=40, hidden=4)
    )


@pytest.fixture
def heterogeneous() -> DelayModel:
    return DelayModel(kind="lognormal", slow_fraction=1 / 16, slow_factor=10.0)


@pytest.fixture
def config_text(tmp_path: Path) -> str:
    return (
        "# small ordered-momentum run\n"
        + "problem = noisy_quadratic\n"
        + "dimension = 10\n"
        + "samples = 200\n"
        + "workers = 4\n"
        + "iterations = 120\n"
        + "optimizer = ormo\n"
        + "eta = 0.01\n"
        + "beta = 0.9\n"
        + "batch = 4\n"
        + "seeds = 0,1\n"
        + "stride = 10\n"
        + f"output = {tmp_path / 'run'}\n"
    )


@pytest.fixture
def config_file(tmp_path: Path, config_text: str) -> Path:
    path: Path = tmp_path / "ormo.cfg"
    _ = path.write_text(config_text, encoding="utf-8")
    return path
