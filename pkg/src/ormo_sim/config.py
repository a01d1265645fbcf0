"""
Flat `key=value` experiment configuration.

Lines are `key = value`; `#` starts a comment line and blank lines are
ignored. Every key is validated before a run starts; unknown keys are rejected.
"""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import TypeVar, cast, get_args

from .engine import DelayModel
from .exceptions import SimConfigError
from .optim import RULES, HyperParams, required_scheduler
from .problems import ProblemSpec
from .rng import check_seed
from .types import DelayKind, OptimizerName, ProblemKind, Scheduler

logger: logging.Logger = logging.getLogger(__name__)

OUTPUT_ENV: str = "ORMO_SIM_OUTPUT"
"""Root directory for relative `output` paths."""

REQUIRED: tuple[str, ...] = ("problem", "workers", "iterations", "optimizer", "eta")

# fmt: off
DEFAULTS: dict[str, str] = {
    "dimension":     "50",
    "samples":       "10000",
    "noise":         "0.1",
    "curvature":     "1.0",
    "condition":     "100.0",
    "label_noise":   "0.05",
    "hidden":        "8",
    "weight_decay":  "0.0",
    "problem_seed":  "0",
    "scheduler":     "",        # By optimizer
    "beta":          "0.9",
    "lr_schedule":   "",
    "lr_epochs":     "",
    "batch":         "64",
    "delay":         "lognormal",
    "compute_time":  "1.0",
    "delay_sigma":   "0.25",
    "slow_fraction": "0.0",
    "slow_factor":   "1.0",
    "seeds":         "0",
    "stride":        "50",
    "output":        "runs",
}
# fmt: on

KEYS: tuple[str, ...] = (
    "problem",
    "dimension",
    "samples",
    "noise",
    "curvature",
    "condition",
    "label_noise",
    "hidden",
    "weight_decay",
    "problem_seed",
    "workers",
    "iterations",
    "optimizer",
    "scheduler",
    "eta",
    "beta",
    "lr_schedule",
    "lr_epochs",
    "batch",
    "delay",
    "compute_time",
    "delay_sigma",
    "slow_fraction",
    "slow_factor",
    "seeds",
    "stride",
    "output",
)

T = TypeVar(name="T")

# ======================================================================================
#   Models
# ======================================================================================


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    workers: int
    iterations: int
    optimizer: OptimizerName
    scheduler: Scheduler
    hyper: HyperParams
    delay: DelayModel
    batch: int = 64
    seeds: tuple[int, ...] = (0,)
    stride: int = 50
    output: Path = Path("runs")

    @property
    def heterogeneous(self) -> bool:
        return self.delay.slow_workers(self.workers) > 0 and self.delay.slow_factor > 1.0


# ======================================================================================
#   Parsing
# ======================================================================================


def parse_pairs(text: str, /) -> dict[str, str]:
    """
    Split configuration text into raw string values.

    Raises:
        * `SimConfigError`: On a line without `=` or a repeated key
    """

    raw: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise SimConfigError(
                f"Line {number} is not a `key = value` pair: {line!r}",
                service="parse_pairs",
                context={"line": number},
            )
        if key in raw:
            raise SimConfigError(
                f"Key `{key}` is set twice (line {number})",
                service="parse_pairs",
                context={"key": key, "line": number},
            )
        raw[key] = value.strip()
    return raw


def _convert(raw: Mapping[str, str], key: str, parse: Callable[[str], T], /) -> T:
    value: str = raw[key] if key in raw else DEFAULTS[key]
    try:
        return parse(value)
    except SimConfigError as err:
        err.context.setdefault("key", key)
        raise
    except (TypeError, ValueError) as err:
        raise SimConfigError(
            f"Key `{key}` has an invalid value {value!r}: {err}",
            service="load_config",
            cause=err,
            context={"key": key},
        ) from err


def _choice(options: tuple[str, ...], key: str) -> Callable[[str], str]:
    def parse(value: str) -> str:
        if value not in options:
            raise SimConfigError(
                f"Key `{key}` must be one of {', '.join(options)}; got {value!r}",
                service="load_config",
                context={"key": key},
            )
        return value

    return parse


def _int(value: str, /) -> int:
    return int(value)


def _float(value: str, /) -> float:
    number: float = float(value)
    if not math.isfinite(number):
        raise ValueError("not a finite number")
    return number


def _pairs(value: str, /) -> tuple[tuple[int, float], ...]:
    if not value:
        return ()
    entries: list[tuple[int, float]] = []
    for item in value.split(","):
        at, sep, mult = item.strip().partition(":")
        if not sep:
            raise ValueError(f"expected `point:multiplier`, got {item.strip()!r}")
        entries.append((int(at), _float(mult)))
    return tuple(entries)


def _seeds(value: str, /) -> tuple[int, ...]:
    seeds: tuple[int, ...] = tuple(check_seed(int(s)) for s in value.split(",") if s.strip())
    if not seeds:
        raise ValueError("at least one seed is needed")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    return seeds


def resolve_output(value: str, /) -> Path:
    """Resolve a relative output path against `$ORMO_SIM_OUTPUT` when it is set."""

    path: Path = Path(value)
    root: str | None = os.environ.get(OUTPUT_ENV)
    if root and not path.is_absolute():
        return Path(root).absolute() / path
    return path


def epoch_iterations(samples: int, workers: int, batch: int, /) -> int:
    """Server iterations per data epoch: `ceil(n / (K * batch)) * K`."""

    return math.ceil(samples / (workers * batch)) * workers


def from_mapping(raw: Mapping[str, str], /) -> ExperimentConfig:
    """
    Build a validated configuration from raw string values.

    Raises:
        * `SimConfigError`: Naming the offending key on any missing, unknown or
            invalid value
    """

    unknown: list[str] = sorted(set(raw) - set(KEYS))
    if unknown:
        raise SimConfigError(
            f"Unknown keys: {', '.join(unknown)}",
            service="load_config",
            context={"keys": unknown},
        )
    missing: list[str] = [key for key in REQUIRED if key not in raw or not raw[key]]
    if missing:
        raise SimConfigError(
            f"Missing required keys: {', '.join(missing)}",
            service="load_config",
            context={"keys": missing},
        )

    problem: ProblemSpec = ProblemSpec(
        kind=cast(
            ProblemKind, _convert(raw, "problem", _choice(get_args(ProblemKind), "problem"))
        ),
        dimension=_convert(raw, "dimension", _int),
        samples=_convert(raw, "samples", _int),
        noise=_convert(raw, "noise", _float),
        curvature=_convert(raw, "curvature", _float),
        condition=_convert(raw, "condition", _float),
        label_noise=_convert(raw, "label_noise", _float),
        hidden=_convert(raw, "hidden", _int),
        weight_decay=_convert(raw, "weight_decay", _float),
        seed=_convert(raw, "problem_seed", _int),
    )

    workers: int = _convert(raw, "workers", _int)
    iterations: int = _convert(raw, "iterations", _int)
    batch: int = _convert(raw, "batch", _int)
    stride: int = _convert(raw, "stride", _int)
    counts: dict[str, int] = {
        "workers": workers,
        "iterations": iterations,
        "batch": batch,
        "stride": stride,
    }
    for key, value in counts.items():
        if value < 1:
            raise SimConfigError(
                f"Key `{key}` must be at least 1, got {value}",
                service="load_config",
                context={"key": key},
            )

    optimizer: OptimizerName = cast(
        OptimizerName, _convert(raw, "optimizer", _choice(RULES.names(), "optimizer"))
    )
    bound: Scheduler | None = required_scheduler(optimizer)
    scheduler: Scheduler = bound or "asynchronous"
    if raw.get("scheduler"):
        scheduler = cast(
            Scheduler, _convert(raw, "scheduler", _choice(get_args(Scheduler), "scheduler"))
        )
        if bound is not None and scheduler != bound:
            raise SimConfigError(
                f"Key `scheduler`: optimizer `{optimizer}` runs only under the"
                + f" {bound} scheduler",
                service="load_config",
                context={"key": "scheduler"},
            )

    schedule: tuple[tuple[int, float], ...] = _convert(raw, "lr_schedule", _pairs)
    epochs: tuple[tuple[int, float], ...] = _convert(raw, "lr_epochs", _pairs)
    if schedule and epochs:
        raise SimConfigError(
            "Keys `lr_schedule` and `lr_epochs` cannot both be set",
            service="load_config",
            context={"key": "lr_epochs"},
        )
    if epochs:
        per_epoch: int = epoch_iterations(problem.samples, workers, batch)
        schedule = tuple((epoch * per_epoch, mult) for epoch, mult in epochs)
        logger.debug("Epoch schedule %s maps to iterations %s", epochs, schedule)

    hyper: HyperParams = HyperParams(
        eta=_convert(raw, "eta", _float),
        beta=_convert(raw, "beta", _float),
        K=workers,
        lr_schedule=schedule,
    )
    delay: DelayModel = DelayModel(
        kind=cast(
            DelayKind, _convert(raw, "delay", _choice(get_args(DelayKind), "delay"))
        ),
        mean_compute_time=_convert(raw, "compute_time", _float),
        slow_fraction=_convert(raw, "slow_fraction", _float),
        slow_factor=_convert(raw, "slow_factor", _float),
        sigma=_convert(raw, "delay_sigma", _float),
    )

    return ExperimentConfig(
        problem=problem,
        workers=workers,
        iterations=iterations,
        optimizer=optimizer,
        scheduler=scheduler,
        hyper=hyper,
        delay=delay,
        batch=batch,
        seeds=_convert(raw, "seeds", _seeds),
        stride=stride,
        output=_convert(raw, "output", resolve_output),
    )


def loads_config(text: str, /) -> ExperimentConfig:
    return from_mapping(parse_pairs(text))


def load_raw(path: str | os.PathLike[str], /) -> dict[str, str]:
    """
    Read a configuration file without validating its values.

    Raises:
        * `SimConfigError`: If the file is missing, unreadable or malformed
    """

    try:
        text: str = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as err:
        raise SimConfigError(
            f"Cannot read configuration `{path}`: {err}",
            service="load_config",
            cause=err,
            context={"path": str(path)},
        ) from err
    return parse_pairs(text)


def load_config(path: str | os.PathLike[str], /) -> ExperimentConfig:
    return from_mapping(load_raw(path))


# ======================================================================================
#   Dumping
# ======================================================================================


def config_mapping(cfg: ExperimentConfig, /) -> dict[str, str]:
    """Every key of `cfg` as the string `load_config` parses back to the same value."""

    p: ProblemSpec = cfg.problem
    return {
        "problem": p.kind,
        "dimension": str(p.dimension),
        "samples": str(p.samples),
        "noise": repr(p.noise),
        "curvature": repr(p.curvature),
        "condition": repr(p.condition),
        "label_noise": repr(p.label_noise),
        "hidden": str(p.hidden),
        "weight_decay": repr(p.weight_decay),
        "problem_seed": str(p.seed),
        "workers": str(cfg.workers),
        "iterations": str(cfg.iterations),
        "optimizer": cfg.optimizer,
        "scheduler": cfg.scheduler,
        "eta": repr(cfg.hyper.eta),
        "beta": repr(cfg.hyper.beta),
        "lr_schedule": ",".join(f"{at}:{mult!r}" for at, mult in cfg.hyper.lr_schedule),
        "lr_epochs": "",
        "batch": str(cfg.batch),
        "delay": cfg.delay.kind,
        "compute_time": repr(cfg.delay.mean_compute_time),
        "delay_sigma": repr(cfg.delay.sigma),
        "slow_fraction": repr(cfg.delay.slow_fraction),
        "slow_factor": repr(cfg.delay.slow_factor),
        "seeds": ",".join(str(s) for s in cfg.seeds),
        "stride": str(cfg.stride),
        "output": str(cfg.output),
    }


def dumps_config(cfg: ExperimentConfig, /) -> str:
    mapping: dict[str, str] = config_mapping(cfg)
    return "".join(f"{key} = {mapping[key]}\n" for key in KEYS)


def problem_mapping(cfg: ExperimentConfig, /) -> dict[str, str]:
    """The keys that define the problem; runs are comparable iff these agree."""

    mapping: dict[str, str] = config_mapping(cfg)
    keys: tuple[str, ...] = KEYS[: KEYS.index("problem_seed") + 1]
    return {key: mapping[key] for key in keys}
