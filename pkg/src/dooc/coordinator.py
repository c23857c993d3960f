"""Distributed optimal coordinator over an unbalanced digraph.

Each agent i integrates

    dy_i/dt   = -(1/ξ_i^i) ∇c_i(y_i) - α1 (L y)_i - α2 ζ_i
    dζ_i/dt   =  α1 (L y)_i,                ζ_i(0) = 0
    dξ_i/dt   = -Σ_j a_ij (ξ_i - ξ_j),      ξ_i(0) = e_i

where ξ_i is row i of Ξ. Along the flow Ξ1 = 1 and ξ_i^i -> r_i, the positive left
null vector of L, which compensates the imbalance of the digraph.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from dooc.cost import CostFunction, global_minimizer
from dooc.errors import DegenerateStateError
from dooc.graph import Laplacian, left_eigenvector


@dataclass(frozen=True)
class CoordinatorParams:
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self) -> None:
        if not (self.alpha1 > 0 and self.alpha2 > 0):
            raise ValueError(
                f"Coordinator gains must be positive, got α1={self.alpha1}, α2={self.alpha2}"
            )


@dataclass(frozen=True)
class CoordinatorState:
    """Reference signals ``y_r``, integral states ``zeta`` and the matrix ``xi`` (rows ξ_i).

    Also used for the time derivative of the state, which has the same shape.
    """

    y_r: np.ndarray
    zeta: np.ndarray
    xi: np.ndarray

    @property
    def n(self) -> int:
        return self.y_r.shape[0]

    @staticmethod
    def size(n: int) -> int:
        """Length of the flattened state for ``n`` agents."""
        return 2 * n + n * n

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.y_r, self.zeta, self.xi.ravel()])

    @classmethod
    def from_vector(cls, n: int, vec: np.ndarray) -> CoordinatorState:
        return cls(y_r=vec[:n], zeta=vec[n : 2 * n], xi=vec[2 * n :].reshape(n, n))


def init_state(n: int, y_r0: Sequence[float] | None = None) -> CoordinatorState:
    """Initial state: ``zeta = 0``, ``xi = I``, ``y_r = y_r0`` (zeros when omitted)."""
    if n < 1:
        raise ValueError(f"Coordinator needs at least one agent, got n={n}")
    y_r = np.zeros(n) if y_r0 is None else np.array(y_r0, dtype=float)
    if y_r.shape != (n,):
        raise ValueError(f"y_r0 must have length {n}, got shape {y_r.shape}")
    return CoordinatorState(y_r=y_r, zeta=np.zeros(n), xi=np.eye(n))


def require_positive_diagonal(diag: np.ndarray) -> None:
    """Raise ``DegenerateStateError`` unless every ``ξ_i^i`` is positive."""
    if diag.min() <= 0:
        bad = int(np.argmin(diag))
        raise DegenerateStateError(
            f"Coordinator entry ξ_{bad + 1}^{bad + 1} = {diag[bad]:.3g} is not positive",
            block="coordinator.xi",
        )


def coordinator_rhs(
    state: CoordinatorState,
    lap: Laplacian,
    costs: Sequence[CostFunction],
    params: CoordinatorParams,
) -> CoordinatorState:
    """Right-hand side of the coordinator flow. Pure; returns the derivative."""
    diag = np.diagonal(state.xi)
    require_positive_diagonal(diag)
    L = lap.matrix
    grads = np.array([c.gradient(y) for c, y in zip(costs, state.y_r)])
    consensus = params.alpha1 * (L @ state.y_r)
    return CoordinatorState(
        y_r=-grads / diag - consensus - params.alpha2 * state.zeta,
        zeta=consensus,
        xi=-(L @ state.xi),
    )


def equilibrium(
    lap: Laplacian, costs: Sequence[CostFunction], params: CoordinatorParams
) -> CoordinatorState:
    """Equilibrium reached from ``zeta(0) = 0``, ``xi(0) = I``.

    ``y_r = s* 1``, ``zeta_i = -∇c_i(s*) / (α2 r_i)`` and ``xi = 1 r^T``.
    """
    r = left_eigenvector(lap)
    s_star = global_minimizer(costs)
    n = lap.n
    zeta = np.array([-c.gradient(s_star) for c in costs]) / (params.alpha2 * r)
    return CoordinatorState(y_r=np.full(n, s_star), zeta=zeta, xi=np.outer(np.ones(n), r))
