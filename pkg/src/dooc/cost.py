"""Local cost functions and the global-minimizer oracle."""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import optimize

MAX_BRACKET_DOUBLINGS = 200


class CostFunction(ABC):
    """A strongly convex scalar cost with a globally Lipschitz gradient."""

    kind: str

    @abstractmethod
    def value(self, s: float) -> float: ...

    @abstractmethod
    def gradient(self, s: float) -> float: ...

    @property
    @abstractmethod
    def strong_convexity(self) -> float:
        """Modulus ϖ."""

    @property
    @abstractmethod
    def lipschitz_grad(self) -> float:
        """Lipschitz constant l of the gradient."""


@dataclass(frozen=True)
class QuadraticCost(CostFunction):
    """``c(s) = q (s - b)^2``."""

    q: float
    b: float = 0.0
    kind = "quadratic"

    def __post_init__(self) -> None:
        if not self.q > 0:
            raise ValueError(f"Quadratic cost needs q > 0, got {self.q}")

    def value(self, s: float) -> float:
        return self.q * (s - self.b) ** 2

    def gradient(self, s: float) -> float:
        return 2.0 * self.q * (s - self.b)

    @property
    def strong_convexity(self) -> float:
        return 2.0 * self.q

    @property
    def lipschitz_grad(self) -> float:
        return 2.0 * self.q


@dataclass(frozen=True)
class LogisticQuadraticCost(CostFunction):
    """``c(s) = q (s - b)^2 + log(1 + e^s)``; curvature lies in [2q, 2q + 1/4]."""

    q: float
    b: float = 0.0
    kind = "logistic_quadratic"

    def __post_init__(self) -> None:
        if not self.q > 0:
            raise ValueError(f"Logistic-quadratic cost needs q > 0, got {self.q}")

    def value(self, s: float) -> float:
        # log1p(e^s) without overflow for large s
        softplus = s + math.log1p(math.exp(-s)) if s > 0 else math.log1p(math.exp(s))
        return self.q * (s - self.b) ** 2 + softplus

    def gradient(self, s: float) -> float:
        if s >= 0:
            sigmoid = 1.0 / (1.0 + math.exp(-s))
        else:
            e = math.exp(s)
            sigmoid = e / (1.0 + e)
        return 2.0 * self.q * (s - self.b) + sigmoid

    @property
    def strong_convexity(self) -> float:
        return 2.0 * self.q

    @property
    def lipschitz_grad(self) -> float:
        return 2.0 * self.q + 0.25


def gradient(c: CostFunction, s: float) -> float:
    """Exact analytic gradient of ``c`` at ``s``."""
    return c.gradient(s)


def aggregate_gradient(costs: Sequence[CostFunction], s: float) -> float:
    return sum(c.gradient(s) for c in costs)


class StackedGradient:
    """Map ``y -> (∇c_1(y_1), ..., ∇c_n(y_n))`` over a vector of local arguments.

    All-quadratic cost lists are evaluated as one array expression.
    """

    def __init__(self, costs: Sequence[CostFunction]):
        self.costs = tuple(costs)
        self.quadratic = all(isinstance(c, QuadraticCost) for c in self.costs)
        self._slope = np.array([2.0 * c.q for c in self.costs]) if self.quadratic else None
        self._center = np.array([c.b for c in self.costs]) if self.quadratic else None

    def __call__(self, y: np.ndarray) -> np.ndarray:
        if self.quadratic:
            return self._slope * (y - self._center)
        return np.array([c.gradient(float(s)) for c, s in zip(self.costs, y)])


def _bracket(costs: Sequence[CostFunction]) -> tuple[float, float]:
    if all(isinstance(c, QuadraticCost) for c in costs):
        centers = [c.b for c in costs]
        return min(centers) - 1.0, max(centers) + 1.0

    lo, hi = -1.0, 1.0
    for _ in range(MAX_BRACKET_DOUBLINGS):
        if aggregate_gradient(costs, lo) <= 0.0 <= aggregate_gradient(costs, hi):
            return lo, hi
        lo, hi = 2.0 * lo, 2.0 * hi
    raise ArithmeticError("Could not bracket the minimizer of the aggregate cost")


def global_minimizer(costs: Sequence[CostFunction]) -> float:
    """Minimizer ``s*`` of ``sum_i c_i`` by bisection on the monotone aggregate gradient.

    The aggregate gradient is strictly increasing, so its unique zero is the minimizer.
    """
    if not costs:
        raise ValueError("global_minimizer needs at least one cost")
    lo, hi = _bracket(costs)
    f_lo = aggregate_gradient(costs, lo)
    f_hi = aggregate_gradient(costs, hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    return optimize.bisect(
        lambda s: aggregate_gradient(costs, s), lo, hi, xtol=1e-15, rtol=4 * 2.0**-52, maxiter=200
    )


def build_cost(kind: str, q: float, b: float) -> CostFunction:
    """Instantiate a built-in cost kind from its config parameters."""
    if kind == "quadratic":
        return QuadraticCost(q=q, b=b)
    if kind == "logistic_quadratic":
        return LogisticQuadraticCost(q=q, b=b)
    raise ValueError(f"Unknown cost kind: {kind!r}")
