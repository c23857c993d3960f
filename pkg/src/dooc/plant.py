"""Agent plants in normal form and the exosystem that generates disturbances.

Two families ship built in:

- ``A``: scalar zero dynamics and a double integrator chain,
      z'  = p1 z + x1 + A_w1 v1
      x1' = x2
      x2' = p2 z x1 x2 + p3 x2 + A_w2 v2 + b u
- ``B``: a triple integrator chain with a cubic output nonlinearity,
      x1' = x2,  x2' = x3
      x3' = p1 x3 + p2 x2 + p3 x1^3 + A_w3 v1 + b u

Further families are added with :func:`register_family`.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from dooc.errors import NotApplicableError, ScenarioValidationError

PlantRhs = Callable[["AgentPlant", np.ndarray, np.ndarray, float, np.ndarray], tuple]
PlantJacobian = Callable[["AgentPlant", np.ndarray, np.ndarray, np.ndarray], np.ndarray]
PlantLinear = Callable[["AgentPlant", int], tuple[np.ndarray, np.ndarray, np.ndarray]]
PlantNonlinear = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

P1_RANGE = (-2.0, -0.1)
P_SPREAD = 0.2


# ── Exosystem ─────────────────────────────────────────────────


def is_neutrally_stable(S: np.ndarray, tol: float = 1e-9) -> bool:
    """All eigenvalues of ``S`` on the imaginary axis and semi-simple."""
    eig = np.linalg.eigvals(S)
    if np.any(np.abs(eig.real) > tol):
        return False
    n = S.shape[0]
    for lam in eig:
        algebraic = int(np.sum(np.abs(eig - lam) <= 1e-7))
        geometric = n - np.linalg.matrix_rank(S - lam * np.eye(n), tol=1e-7)
        if geometric != algebraic:
            return False
    return True


@dataclass(frozen=True)
class Exosystem:
    """Autonomous disturbance generator ``v' = S v`` with state ``v``."""

    S: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        S = np.array(self.S, dtype=float)
        v = np.array(self.v, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1] or v.shape != (S.shape[0],):
            raise ScenarioValidationError(
                f"Exosystem shapes are inconsistent: S {S.shape}, v {v.shape}"
            )
        if not is_neutrally_stable(S):
            raise ScenarioValidationError(
                "Exosystem matrix S must have semi-simple eigenvalues with zero real parts"
            )
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "v", v)

    @classmethod
    def harmonic(cls, theta: float, v0: Sequence[float] = (1.0, 0.0)) -> Exosystem:
        """Sinusoid generator ``S = [[0, θ], [-θ, 0]]``."""
        return cls(S=np.array([[0.0, theta], [-theta, 0.0]]), v=np.array(v0, dtype=float))

    @property
    def n_v(self) -> int:
        return self.S.shape[0]


def exosystem_rhs(exo: Exosystem, v: np.ndarray | None = None) -> np.ndarray:
    """``S v``; uses the exosystem's own state when ``v`` is omitted."""
    return exo.S @ (exo.v if v is None else v)


# ── Plant families ────────────────────────────────────────────


@dataclass(frozen=True)
class FamilyDef:
    """A plant family, given either as a full ``rhs`` or as a ``linear``/``nonlinear`` split.

    ``linear(plant, n_v)`` returns ``(F, E, g)`` so that the linear part of the stacked
    ``(z, x)`` derivative is ``F (z, x) + E v + g u``. ``nonlinear(p, z, x)`` evaluates the
    remainder for a batch of agents: rows of ``p``, ``z`` and ``x`` belong to one agent each
    and the result has one row of length ``n_z + order`` per agent.
    """

    name: str
    order: int
    n_z: int
    rhs: PlantRhs | None = None
    jacobian: PlantJacobian | None = None
    linear: PlantLinear | None = None
    nonlinear: PlantNonlinear | None = None

    @property
    def split(self) -> bool:
        return self.linear is not None and self.nonlinear is not None


FAMILIES: dict[str, FamilyDef] = {}


def register_family(
    name: str,
    order: int,
    n_z: int,
    rhs: PlantRhs | None = None,
    jacobian: PlantJacobian | None = None,
    *,
    linear: PlantLinear | None = None,
    nonlinear: PlantNonlinear | None = None,
) -> FamilyDef:
    """Register a plant family under ``name``.

    ``rhs(plant, z, x, u, v)`` must return ``(dz, dx)`` and vanish at the origin with
    ``u = 0`` and ``v = 0``. Stability of the zero dynamics is the caller's responsibility.
    Families given as a ``linear``/``nonlinear`` split are integrated in batches.
    """
    if order < 1 or n_z < 0:
        raise ValueError(f"Family {name!r} needs order >= 1 and n_z >= 0")
    if rhs is None and (linear is None or nonlinear is None):
        raise ValueError(f"Family {name!r} needs rhs or both linear and nonlinear")
    family = FamilyDef(
        name=name,
        order=order,
        n_z=n_z,
        rhs=rhs,
        jacobian=jacobian,
        linear=linear,
        nonlinear=nonlinear,
    )
    FAMILIES[name] = family
    return family


@dataclass(frozen=True)
class AgentPlant:
    """One agent's plant: family, parameters ``p = p̄ + w``, input gain and initial state.

    Attributes:
        index: 1-based agent index.
        family: Registered family name.
        p: Actual parameters (nominal plus uncertainty).
        b: Input coefficient, positive.
        amplitudes: Disturbance amplitudes ``A_wk = μ_k A``.
        z0: Initial zero-dynamics state.
        x0: Initial chain state.
    """

    index: int
    family: str
    p: tuple[float, ...]
    b: float = 1.0
    amplitudes: tuple[float, ...] = (0.0, 0.0, 0.0)
    z0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x0: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ScenarioValidationError(f"Unknown plant family {self.family!r}")
        if not self.b > 0:
            raise ScenarioValidationError(f"Agent {self.index}: input gain b must be positive")
        if self.family == "A" and not self.p[0] < 0:
            raise ScenarioValidationError(
                f"Agent {self.index}: family A needs p1 < 0 for stable zero dynamics, "
                f"got {self.p[0]}"
            )
        spec = FAMILIES[self.family]
        z0 = np.array(self.z0, dtype=float).reshape(-1)
        if z0.size == 0 and spec.n_z:
            z0 = np.zeros(spec.n_z)
        x0 = np.zeros(spec.order) if self.x0 is None else np.array(self.x0, dtype=float)
        if z0.shape != (spec.n_z,) or x0.shape != (spec.order,):
            raise ScenarioValidationError(
                f"Agent {self.index}: initial state shapes z0 {z0.shape}, x0 {x0.shape} do not "
                f"match family {self.family} (n_z={spec.n_z}, order={spec.order})"
            )
        object.__setattr__(self, "p", tuple(float(p) for p in self.p))
        object.__setattr__(self, "z0", z0)
        object.__setattr__(self, "x0", x0)

    @property
    def order(self) -> int:
        return FAMILIES[self.family].order

    @property
    def n_z(self) -> int:
        return FAMILIES[self.family].n_z


def _family_a_linear(a: AgentPlant, n_v: int):
    p1, _, p3 = a.p
    aw1, aw2, _ = a.amplitudes
    F = np.array([[p1, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, p3]])
    E = np.zeros((3, n_v))
    E[0, 0] = aw1
    E[2, 1] = aw2
    return F, E, np.array([0.0, 0.0, a.b])


def _family_a_nonlinear(p, z, x):
    out = np.zeros((p.shape[0], 3))
    out[:, 2] = p[:, 1] * z[:, 0] * x[:, 0] * x[:, 1]
    return out


def _family_a_jacobian(a: AgentPlant, z, x, v):
    p1, p2, p3 = a.p
    z1, x1, x2 = z[0], x[0], x[1]
    return np.array(
        [
            [p1, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [p2 * x1 * x2, p2 * z1 * x2, p2 * z1 * x1 + p3],
        ]
    )


def _family_b_linear(a: AgentPlant, n_v: int):
    p1, p2, _ = a.p
    F = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, p2, p1]])
    E = np.zeros((3, n_v))
    E[2, 0] = a.amplitudes[2]
    return F, E, np.array([0.0, 0.0, a.b])


def _family_b_nonlinear(p, z, x):
    out = np.zeros((p.shape[0], 3))
    out[:, 2] = p[:, 2] * x[:, 0] ** 3
    return out


def _family_b_jacobian(a: AgentPlant, z, x, v):
    p1, p2, p3 = a.p
    return np.array(
        [
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [3.0 * p3 * x[0] ** 2, p2, p1],
        ]
    )


register_family(
    "A",
    order=2,
    n_z=1,
    jacobian=_family_a_jacobian,
    linear=_family_a_linear,
    nonlinear=_family_a_nonlinear,
)
register_family(
    "B",
    order=3,
    n_z=0,
    jacobian=_family_b_jacobian,
    linear=_family_b_linear,
    nonlinear=_family_b_nonlinear,
)


# ── Operations ────────────────────────────────────────────────


def plant_rhs(
    a: AgentPlant, z: np.ndarray, x: np.ndarray, u: float, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Time derivative ``(dz, dx)`` of the plant state under input ``u`` and disturbance ``v``."""
    family = FAMILIES[a.family]
    if family.rhs is not None:
        return family.rhs(a, z, x, u, v)
    v = np.asarray(v, dtype=float)
    F, E, g = family.linear(a, v.shape[0])
    zx = np.concatenate([np.asarray(z, dtype=float), np.asarray(x, dtype=float)])
    nl = family.nonlinear(np.array([a.p]), zx[None, : a.n_z], zx[None, a.n_z :])[0]
    d = F @ zx + E @ v + g * u + nl
    return d[: a.n_z], d[a.n_z :]


def plant_jacobian(a: AgentPlant, z: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of :func:`plant_rhs` with respect to the stacked state ``(z, x)``."""
    jac = FAMILIES[a.family].jacobian
    if jac is None:
        raise NotApplicableError(f"Family {a.family!r} has no analytic Jacobian")
    return jac(a, z, x, v)


def zero_dynamics_manifold(
    a: AgentPlant, s: float, v: np.ndarray, theta: float, offset_gain: float = 0.0
) -> float:
    """Steady-state zero-dynamics value ``z*(s, v)`` for family A (diagnostic only).

    The ``v``-dependent part solves the regulator equation of the ``z`` dynamics;
    the constant offset is ``offset_gain * s``, supplied by configuration.
    """
    if a.family != "A":
        raise NotApplicableError(f"z* is only defined for family A, not {a.family!r}")
    p1 = a.p[0]
    aw1 = a.amplitudes[0]
    denom = p1**2 + theta**2
    return -(p1 * aw1 / denom) * v[0] - (theta * aw1 / denom) * v[1] + offset_gain * s


def disturbance_amplitudes(amplitude: float, count: int = 3) -> tuple[float, ...]:
    """``A_wk = (1 + 0.1 k) A`` for ``k = 1..count``."""
    return tuple((1.0 + 0.1 * k) * amplitude for k in range(1, count + 1))


def nominal_params(i: int) -> tuple[float, float, float]:
    """Nominal parameters ``p̄_i = (i, i, i)`` for 1-based agent ``i``."""
    return (float(i), float(i), float(i))


def agent_rng(seed: int, i: int) -> np.random.Generator:
    """Per-agent generator derived from the top-level seed by hashing ``(seed, i)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, i]))


def sample_uncertainty(
    seed: int,
    i: int,
    nominal: Sequence[float] | None = None,
    mode: Literal["random", "zero"] = "random",
) -> np.ndarray:
    """Uncertainty ``w_i`` such that ``p_i1 = p̄_i1 + w_i1`` is negative.

    ``random`` draws ``p_i1`` uniformly in [-2, -0.1] and ``w_i2, w_i3`` uniformly in
    [-0.2, 0.2]; ``zero`` forces ``p_i1 = -1`` and leaves the other parameters nominal.
    """
    p_bar = np.array(nominal_params(i) if nominal is None else nominal, dtype=float)
    if mode == "zero":
        return np.array([-1.0 - p_bar[0], 0.0, 0.0])
    rng = agent_rng(seed, i)
    p1 = rng.uniform(*P1_RANGE)
    w23 = rng.uniform(-P_SPREAD, P_SPREAD, size=2)
    return np.array([p1 - p_bar[0], w23[0], w23[1]])
