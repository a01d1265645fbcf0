from typing import Literal, TypeAlias

import numpy as np
import numpy.typing as npt

Vector: TypeAlias = npt.NDArray[np.float64]
IndexArray: TypeAlias = npt.NDArray[np.int64]

# ======================================================================================
#   Engine
# ======================================================================================

Scheduler: TypeAlias = Literal[
    "synchronous",
    "asynchronous",
]
"""Communication schedulers of the server loop."""

DelayKind: TypeAlias = Literal[
    "deterministic",
    "exponential",
    "lognormal",
]
"""Compute-time distributions of a worker."""

WorkerStatus: TypeAlias = Literal["computing", "waiting"]

# ======================================================================================
#   Optimizers & problems
# ======================================================================================

OptimizerName: TypeAlias = Literal[
    "asgd",
    "naive_asgdm",
    "shifted",
    "ssgd",
    "ssgdm_global",
    "ssgdm_local",
    "ormo",
]
"""Server update rules selectable by name."""

ProblemKind: TypeAlias = Literal[
    "noisy_quadratic",
    "logistic_regression",
    "two_layer_net",
]
"""Gradient oracles selectable by name."""
