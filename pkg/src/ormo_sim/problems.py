"""
Seeded stochastic-gradient oracles.

Every problem is a finite sum `F(w) = (1/n) * sum_i f(w; i)` over a dataset that
is generated in memory from `ProblemSpec.seed`. Oracles are pure: the same
parameter and the same `GradientSample` give the same bits.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from functools import cached_property
from typing import ClassVar, override

import numpy as np
import numpy.typing as npt

from .exceptions import SimConfigError, SimSampleError
from .registry import Registry
from .rng import Stream, check_seed, stream
from .types import IndexArray, ProblemKind, Vector

logger: logging.Logger = logging.getLogger(__name__)

HOLDOUT_FRACTION: float = 0.2
"""Size of the held-out classification set relative to the training set."""

# ======================================================================================
#   Models
# ======================================================================================


@dataclass(frozen=True)
class ProblemSpec:
    """
    Description of a gradient oracle.

    `smoothness` is left empty in configuration and filled in by the built
    problem (`Problem.spec`) with its analytic or estimated constant.
    """

    kind: ProblemKind
    dimension: int = 50
    samples: int = 10000
    noise: float = 0.1
    curvature: float = 1.0
    condition: float = 100.0
    label_noise: float = 0.05
    hidden: int = 8
    weight_decay: float = 0.0
    seed: int = 0
    smoothness: float | None = None

    def __post_init__(self) -> None:
        checks: list[tuple[bool, str, str]] = [
            (self.dimension >= 1, "dimension", "must be at least 1"),
            (self.samples >= 1, "samples", "must be at least 1"),
            (self.noise >= 0.0, "noise", "must be non-negative"),
            (self.curvature > 0.0, "curvature", "must be positive"),
            (self.condition >= 1.0, "condition", "must be at least 1"),
            (0.0 <= self.label_noise <= 0.5, "label_noise", "must lie in [0, 0.5]"),
            (self.hidden >= 1, "hidden", "must be at least 1"),
            (self.weight_decay >= 0.0, "weight_decay", "must be non-negative"),
        ]
        for ok, key, reason in checks:
            if not ok:
                raise SimConfigError(
                    f"Problem parameter `{key}` {reason}, got {getattr(self, key)!r}",
                    service=self.__class__.__name__,
                    context={"key": key},
                )
        _ = check_seed(self.seed)


@dataclass(frozen=True, eq=False)
class GradientSample:
    """Dataset indices of one stochastic gradient and the parameter it is taken at."""

    sample_indices: IndexArray
    base_param_iter: int
    worker_id: int = 0


@dataclass(frozen=True)
class AssumptionConstants:
    sigma2: float
    """Largest observed `||grad f - grad F||^2`."""
    G2: float
    """Largest observed `||grad f||^2`."""
    L: float


# ======================================================================================
#   Base
# ======================================================================================


class Problem(ABC):
    """Base strategy of a finite-sum gradient oracle."""

    kind: ClassVar[ProblemKind]

    def __init__(self, spec: ProblemSpec) -> None:
        self._spec: ProblemSpec = spec
        self.n: int = spec.samples
        self.weight_decay: float = spec.weight_decay

    @property
    def spec(self) -> ProblemSpec:
        return dataclasses.replace(self._spec, smoothness=self.smoothness)

    @property
    @abstractmethod
    def dim(self) -> int:
        """Length of the parameter vector."""

    @property
    @abstractmethod
    def smoothness(self) -> float:
        """Smoothness constant `L` of the full objective."""

    @abstractmethod
    def _batch_loss(self, w: Vector, indices: IndexArray, /) -> float:
        """Mean loss over the rows in `indices`."""

    @abstractmethod
    def _batch_gradient(self, w: Vector, indices: IndexArray, /) -> Vector:
        """Mean gradient over the rows in `indices`."""

    @abstractmethod
    def dataset(self) -> tuple[list[str], npt.NDArray[np.float64]]:
        """Column names and rows of the generated dataset."""

    # ----------------------------------------------------------------------------------
    #   Oracles
    # ----------------------------------------------------------------------------------

    def stochastic_grad(self, w: Vector, s: GradientSample, /) -> Vector:
        """
        Mean gradient of the sampled instances at `w`.

        Raises:
            * `SimSampleError`: If an index lies outside the dataset
        """

        indices: IndexArray = self._check_indices(s.sample_indices)
        grad: Vector = self._batch_gradient(w, indices)
        if self.weight_decay:
            grad = grad + self.weight_decay * w
        return grad

    def full_gradient(self, w: Vector, /) -> Vector:
        grad: Vector = self._batch_gradient(w, self._all)
        if self.weight_decay:
            grad = grad + self.weight_decay * w
        return grad

    def loss(self, w: Vector, /) -> float:
        value: float = self._batch_loss(w, self._all)
        if self.weight_decay:
            value += 0.5 * self.weight_decay * float(w @ w)
        return value

    def sample(self, rng: np.random.Generator, batch: int, /) -> IndexArray:
        """Draw `batch` indices uniformly with replacement."""

        return rng.integers(low=0, high=self.n, size=batch, dtype=np.int64)

    def accuracy(self, w: Vector, /) -> float | None:
        """Held-out classification accuracy at `w`, for problems that have one."""

        return None

    def initial_point(self) -> Vector:
        """Starting parameter, drawn from the INIT stream of the problem seed."""

        rng: np.random.Generator = stream(self._spec.seed, Stream.INIT)
        return self._initial_point(rng)

    def _initial_point(self, rng: np.random.Generator, /) -> Vector:
        return np.zeros(self.dim, dtype=np.float64)

    @cached_property
    def _all(self) -> IndexArray:
        return np.arange(self.n, dtype=np.int64)

    def _data_rng(self) -> np.random.Generator:
        return stream(self._spec.seed, Stream.PROBLEM)

    def _check_indices(self, indices: IndexArray, /) -> IndexArray:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 1 or indices.size == 0:
            raise SimSampleError(
                "A gradient sample needs a non-empty 1-D index array",
                service=self.__class__.__name__,
            )
        low: int = int(indices.min())
        high: int = int(indices.max())
        if low < 0 or high >= self.n:
            raise SimSampleError(
                f"Sample index out of range [0, {self.n}): got {low if low < 0 else high}",
                service=self.__class__.__name__,
                context={"n": self.n, "min": low, "max": high},
            )
        return indices


# ======================================================================================
#   Problems
# ======================================================================================


class NoisyQuadratic(Problem):
    """
    `F(w) = w^T A w / 2` with per-instance additive gradient noise.

    Instance `i` carries a noise vector `zeta_i`; the set is centered and scaled so
    that it averages to zero and its mean squared norm is exactly `noise ** 2`.
    """

    kind: ClassVar[ProblemKind] = "noisy_quadratic"

    def __init__(self, spec: ProblemSpec) -> None:
        super().__init__(spec)
        d: int = spec.dimension
        rng: np.random.Generator = self._data_rng()

        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eigenvalues: Vector = np.geomspace(spec.curvature, spec.curvature / spec.condition, d)
        a: npt.NDArray[np.float64] = (q * eigenvalues) @ q.T
        self.A: npt.NDArray[np.float64] = 0.5 * (a + a.T)
        self.eigenvalues: Vector = eigenvalues

        zeta: npt.NDArray[np.float64] = rng.standard_normal((spec.samples, d))
        zeta -= zeta.mean(axis=0)
        mean_sq: float = float(np.mean(np.sum(zeta**2, axis=1)))
        if spec.noise > 0.0 and mean_sq > 0.0:
            zeta *= spec.noise / math.sqrt(mean_sq)
        else:
            zeta[:] = 0.0
        self.zeta: npt.NDArray[np.float64] = zeta

    @property
    @override
    def dim(self) -> int:
        return self._spec.dimension

    @property
    @override
    def smoothness(self) -> float:
        return self._spec.curvature + self.weight_decay

    def hessian(self) -> npt.NDArray[np.float64]:
        return self.A + self.weight_decay * np.eye(self.dim)

    @override
    def _batch_loss(self, w: Vector, indices: IndexArray, /) -> float:
        return 0.5 * float(w @ self.A @ w) + float(np.mean(self.zeta[indices] @ w))

    @override
    def _batch_gradient(self, w: Vector, indices: IndexArray, /) -> Vector:
        return self.A @ w + np.mean(self.zeta[indices], axis=0)

    @override
    def full_gradient(self, w: Vector, /) -> Vector:
        grad: Vector = self.A @ w
        if self.weight_decay:
            grad = grad + self.weight_decay * w
        return grad

    @override
    def _initial_point(self, rng: np.random.Generator, /) -> Vector:
        return rng.standard_normal(self.dim)

    @override
    def dataset(self) -> tuple[list[str], npt.NDArray[np.float64]]:
        return [f"zeta_{j}" for j in range(self.dim)], self.zeta


class LogisticRegression(Problem):
    """
    Binary logistic regression on unit-norm inputs.

    Labels come from a random ground-truth separator, each flipped with
    probability `label_noise`.
    """

    kind: ClassVar[ProblemKind] = "logistic_regression"

    def __init__(self, spec: ProblemSpec) -> None:
        super().__init__(spec)
        rng: np.random.Generator = self._data_rng()
        x: npt.NDArray[np.float64] = rng.standard_normal((spec.samples, spec.dimension))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        self.truth: Vector | None = rng.standard_normal(spec.dimension)
        self.X: npt.NDArray[np.float64] = x
        self.y: Vector = self._label(rng, x)

    @classmethod
    def from_arrays(
        cls, X: npt.ArrayLike, y: npt.ArrayLike, /, weight_decay: float = 0.0
    ) -> LogisticRegression:
        """Build the problem over a given dataset instead of a generated one."""

        x_: npt.NDArray[np.float64] = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y_: Vector = np.asarray(y, dtype=np.float64).reshape(-1)
        if x_.shape[0] != y_.shape[0]:
            raise SimConfigError(
                f"Got {x_.shape[0]} inputs but {y_.shape[0]} labels",
                service=cls.__name__,
            )
        if not np.all((y_ == 0.0) | (y_ == 1.0)):
            raise SimConfigError("Labels must be 0 or 1", service=cls.__name__)

        spec: ProblemSpec = ProblemSpec(
            kind="logistic_regression",
            dimension=x_.shape[1],
            samples=x_.shape[0],
            weight_decay=weight_decay,
        )
        problem: LogisticRegression = cls.__new__(cls)
        Problem.__init__(problem, spec)
        problem.truth = None
        problem.X = x_
        problem.y = y_
        return problem

    @property
    @override
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    @override
    def smoothness(self) -> float:
        return float(np.max(np.sum(self.X**2, axis=1))) / 4.0 + self.weight_decay

    def _label(self, rng: np.random.Generator, x: npt.NDArray[np.float64], /) -> Vector:
        assert self.truth is not None
        y: Vector = (x @ self.truth > 0.0).astype(np.float64)
        flips: npt.NDArray[np.bool_] = rng.random(x.shape[0]) < self._spec.label_noise
        y[flips] = 1.0 - y[flips]
        return y

    @cached_property
    def holdout(self) -> tuple[npt.NDArray[np.float64], Vector] | None:
        """
        Held-out inputs and labels from the same separator, `HOLDOUT_FRACTION` of
        the training size. None for a dataset given by `from_arrays`.
        """

        if self.truth is None:
            return None
        rng: np.random.Generator = stream(self._spec.seed, Stream.HOLDOUT)
        size: int = max(1, math.ceil(HOLDOUT_FRACTION * self.n))
        x: npt.NDArray[np.float64] = rng.standard_normal((size, self.dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        return x, self._label(rng, x)

    @override
    def accuracy(self, w: Vector, /) -> float | None:
        if self.holdout is None:
            return None
        x, y = self.holdout
        return float(np.mean((x @ w > 0.0) == (y == 1.0)))

    def hessian(self, w: Vector, /) -> npt.NDArray[np.float64]:
        p: Vector = _sigmoid(self.X @ w)
        curvature: Vector = p * (1.0 - p)
        h: npt.NDArray[np.float64] = (self.X.T * curvature) @ self.X / self.n
        return h + self.weight_decay * np.eye(self.dim)

    @override
    def _batch_loss(self, w: Vector, indices: IndexArray, /) -> float:
        z: Vector = self.X[indices] @ w
        return float(np.mean(np.logaddexp(0.0, z) - self.y[indices] * z))

    @override
    def _batch_gradient(self, w: Vector, indices: IndexArray, /) -> Vector:
        x: npt.NDArray[np.float64] = self.X[indices]
        residual: Vector = _sigmoid(x @ w) - self.y[indices]
        return x.T @ residual / indices.size

    @override
    def dataset(self) -> tuple[list[str], npt.NDArray[np.float64]]:
        header: list[str] = [f"x_{j}" for j in range(self.dim)] + ["y"]
        return header, np.column_stack([self.X, self.y])


class TwoLayerNet(Problem):
    """
    Regression with one tanh hidden layer and squared loss.

    Targets are produced by a randomly drawn network of the same shape plus
    Gaussian noise of standard deviation `label_noise`. The parameter vector is
    `[W1 (hidden x d), b1 (hidden), w2 (hidden), b2]`.
    """

    kind: ClassVar[ProblemKind] = "two_layer_net"

    def __init__(self, spec: ProblemSpec) -> None:
        super().__init__(spec)
        self.d: int = spec.dimension
        self.hidden: int = spec.hidden
        rng: np.random.Generator = self._data_rng()
        self.X: npt.NDArray[np.float64] = rng.standard_normal((spec.samples, self.d))
        target: Vector = self._initial_point(rng)
        self.y: Vector = self._forward(target, self.X)[1] + spec.label_noise * (
            rng.standard_normal(spec.samples)
        )

    @property
    @override
    def dim(self) -> int:
        return self.hidden * (self.d + 2) + 1

    @property
    @override
    def smoothness(self) -> float:
        return self._estimated_smoothness

    @cached_property
    def _estimated_smoothness(self) -> float:
        value: float = estimate_smoothness(self, self.initial_point())
        logger.info("Estimated smoothness of %s: %.6g", self.kind, value)
        return value

    def unpack(self, w: Vector, /) -> tuple[npt.NDArray[np.float64], Vector, Vector, float]:
        h: int = self.hidden
        cut: int = h * self.d
        return (
            w[:cut].reshape(h, self.d),
            w[cut : cut + h],
            w[cut + h : cut + 2 * h],
            float(w[-1]),
        )

    def _forward(
        self, w: Vector, x: npt.NDArray[np.float64], /
    ) -> tuple[npt.NDArray[np.float64], Vector]:
        w1, b1, w2, b2 = self.unpack(w)
        hidden: npt.NDArray[np.float64] = np.tanh(x @ w1.T + b1)
        return hidden, hidden @ w2 + b2

    @override
    def _batch_loss(self, w: Vector, indices: IndexArray, /) -> float:
        _, out = self._forward(w, self.X[indices])
        return 0.5 * float(np.mean((out - self.y[indices]) ** 2))

    @override
    def _batch_gradient(self, w: Vector, indices: IndexArray, /) -> Vector:
        x: npt.NDArray[np.float64] = self.X[indices]
        hidden, out = self._forward(w, x)
        _, _, w2, _ = self.unpack(w)
        batch: int = indices.size

        r: Vector = out - self.y[indices]
        grad_w2: Vector = hidden.T @ r / batch
        grad_b2: float = float(np.mean(r))
        back: npt.NDArray[np.float64] = np.outer(r, w2) * (1.0 - hidden**2)
        grad_w1: npt.NDArray[np.float64] = back.T @ x / batch
        grad_b1: Vector = back.mean(axis=0)
        return np.concatenate([grad_w1.ravel(), grad_b1, grad_w2, [grad_b2]])

    @override
    def _initial_point(self, rng: np.random.Generator, /) -> Vector:
        h: int = self.hidden
        w1: npt.NDArray[np.float64] = rng.standard_normal((h, self.d)) / math.sqrt(self.d)
        w2: Vector = rng.standard_normal(h) / math.sqrt(h)
        return np.concatenate([w1.ravel(), np.zeros(h), w2, [0.0]])

    @override
    def dataset(self) -> tuple[list[str], npt.NDArray[np.float64]]:
        header: list[str] = [f"x_{j}" for j in range(self.d)] + ["y"]
        return header, np.column_stack([self.X, self.y])


def _sigmoid(z: Vector, /) -> Vector:
    return np.exp(-np.logaddexp(0.0, -z))


# ======================================================================================
#   Registry
# ======================================================================================

PROBLEMS: Registry[Problem] = Registry[Problem]("problem")
PROBLEMS.register(NoisyQuadratic.kind, factory=NoisyQuadratic, description="noisy quadratic")
PROBLEMS.register(
    LogisticRegression.kind, factory=LogisticRegression, description="logistic regression"
)
PROBLEMS.register(TwoLayerNet.kind, factory=TwoLayerNet, description="two-layer tanh net")


def make_problem(spec: ProblemSpec, /) -> Problem:
    """
    Build the oracle described by `spec`.

    Raises:
        * `SimRegistryError`: If `spec.kind` is not a known problem
    """

    problem: Problem = PROBLEMS.resolve(spec.kind, spec)
    logger.debug("Built %s with d=%d, n=%d", spec.kind, problem.dim, problem.n)
    return problem


# ======================================================================================
#   Numerics
# ======================================================================================


def finite_difference(
    func: Callable[[Vector], float], w: Vector, /, step: float = 1e-5
) -> Vector:
    """Central-difference gradient of `func` at `w`."""

    grad: Vector = np.zeros_like(w, dtype=np.float64)
    x: Vector = np.array(w, dtype=np.float64, copy=True)
    for j in range(x.size):
        x[j] = w[j] + step
        f_plus: float = func(x)
        x[j] = w[j] - step
        f_minus: float = func(x)
        x[j] = w[j]
        grad[j] = (f_plus - f_minus) / (2.0 * step)
    return grad


def estimate_smoothness(
    problem: Problem,
    w: Vector,
    /,
    iterations: int = 50,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """
    Largest Hessian eigenvalue magnitude of `F` near `w`.

    Power iteration on central-difference Hessian-vector products of the full
    gradient.
    """

    rng: np.random.Generator = stream(seed, Stream.INIT, worker=1)
    v: Vector = rng.standard_normal(problem.dim)
    v /= np.linalg.norm(v)
    value: float = 0.0
    for _ in range(iterations):
        hv: Vector = (
            problem.full_gradient(w + step * v) - problem.full_gradient(w - step * v)
        ) / (2.0 * step)
        value = float(np.linalg.norm(hv))
        if value == 0.0:
            break
        v = hv / value
    return value


def assumption_constants(
    problem: Problem, observed: Iterable[tuple[Vector, Vector]], /
) -> AssumptionConstants:
    """
    Observed noise and gradient bounds along a run.

    `observed` holds pairs of a stochastic gradient and the full gradient at the
    same parameter.
    """

    sigma2: float = 0.0
    g2: float = 0.0
    for grad, full in observed:
        sigma2 = max(sigma2, float(np.sum((grad - full) ** 2)))
        g2 = max(g2, float(grad @ grad))
    return AssumptionConstants(sigma2=sigma2, G2=g2, L=problem.smoothness)
