"""Internal model: the disturbance-mode pair (Φ, Γ), the compensator pair (M, N),
the Sylvester solution T and the feedforward oracle u*.

The compensator ``η' = M η + N u`` reproduces the steady-state input because
``T Φ - M T = N Γ`` makes ``η = T τ`` an invariant manifold with ``u* = Γ T⁻¹ η``.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from dooc.errors import InternalModelError, NotApplicableError
from dooc.plant import AgentPlant

logger = logging.getLogger(__name__)

SYLVESTER_RESIDUAL_TOL = 1e-10
ILL_CONDITIONED = 1e8
SPECTRUM_TOL = 1e-9

# Compensator pairs used in the five-agent example, by plant family.
DEFAULT_PAIRS: dict[str, tuple[list[list[float]], list[float]]] = {
    "A": ([[0.0, 1.0], [-2.0, -3.0]], [0.0, 1.0]),
    "B": ([[-3.0, -7.0, -5.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [1.0, 0.0, 0.0]),
}


# ── Construction helpers ──────────────────────────────────────


def build_phi_gamma(order: int, ell: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Companion pair for ``P(σ) = σ^s - ℓ1 - ℓ2 σ - ... - ℓs σ^(s-1)``.

    Returns:
        ``(Phi, Gamma)`` with ``Phi`` the shift matrix whose last row is ``ℓ`` and
        ``Gamma = [1, 0, ..., 0]`` as a ``1 x s`` row.

    Raises:
        InternalModelError: if the roots of ``P`` are repeated or off the imaginary axis.
    """
    ell = np.asarray(ell, dtype=float)
    if order < 1 or ell.shape != (order,):
        raise InternalModelError(f"Expected {order} ℓ coefficients, got {ell.shape}")
    phi = np.zeros((order, order))
    phi[:-1, 1:] = np.eye(order - 1)
    phi[-1, :] = ell
    gamma = np.zeros((1, order))
    gamma[0, 0] = 1.0

    eig = np.linalg.eigvals(phi)
    if np.any(np.abs(eig.real) > SPECTRUM_TOL):
        raise InternalModelError(f"Internal-model roots must lie on the imaginary axis: {eig}")
    gaps = np.abs(eig[:, None] - eig[None, :])
    np.fill_diagonal(gaps, np.inf)
    if order > 1 and gaps.min() <= SPECTRUM_TOL:
        raise InternalModelError(f"Internal-model roots must be distinct: {eig}")
    return phi, gamma


def harmonic_ell(family: str, theta: float) -> tuple[float, ...]:
    """ℓ coefficients of the built-in families for a disturbance at frequency θ.

    Family A's feedforward is a pure sinusoid (``ü* = -θ² u*``); family B's adds a
    constant (``u*''' = -θ² u̇*``).
    """
    if family == "A":
        return (-(theta**2), 0.0)
    if family == "B":
        return (0.0, -(theta**2), 0.0)
    raise NotApplicableError(f"Family {family!r} must supply its ℓ coefficients explicitly")


def default_pair(family: str) -> tuple[np.ndarray, np.ndarray]:
    if family not in DEFAULT_PAIRS:
        raise NotApplicableError(f"No default (M, N) pair for family {family!r}")
    m, n = DEFAULT_PAIRS[family]
    return np.array(m), np.array(n).reshape(-1, 1)


def is_hurwitz_matrix(m: np.ndarray) -> bool:
    return bool(np.all(np.linalg.eigvals(m).real < 0))


def is_controllable(m: np.ndarray, n: np.ndarray) -> bool:
    """Kalman rank test on ``[N, MN, ..., M^(s-1) N]``."""
    s = m.shape[0]
    blocks = [n.reshape(s, -1)]
    for _ in range(s - 1):
        blocks.append(m @ blocks[-1])
    return int(np.linalg.matrix_rank(np.hstack(blocks))) == s


@dataclass(frozen=True)
class SylvesterSolution:
    T: np.ndarray
    residual: float
    cond: float
    min_singular: float


def solve_sylvester(
    phi: np.ndarray, m: np.ndarray, n: np.ndarray, gamma: np.ndarray
) -> SylvesterSolution:
    """Solve ``T Φ - M T = N Γ`` through the Kronecker system
    ``(Φᵀ ⊗ I - I ⊗ M) vec(T) = vec(N Γ)`` (column-major ``vec``).

    Raises:
        InternalModelError: if Φ and M share an eigenvalue, the residual exceeds
            1e-10 or ``T`` is singular.
    """
    s = phi.shape[0]
    eig_phi = np.linalg.eigvals(phi)
    eig_m = np.linalg.eigvals(m)
    gap = np.min(np.abs(eig_phi[:, None] - eig_m[None, :]))
    if gap <= SPECTRUM_TOL:
        raise InternalModelError(
            f"Φ and M share an eigenvalue (gap {gap:.3g}); the Sylvester equation has no "
            "unique solution"
        )
    rhs = n.reshape(s, -1) @ gamma.reshape(1, s)
    eye = np.eye(s)
    system = np.kron(phi.T, eye) - np.kron(eye, m)
    vec_t = linalg.solve(system, rhs.ravel(order="F"))
    t = vec_t.reshape((s, s), order="F")

    residual = float(np.linalg.norm(t @ phi - m @ t - rhs, ord="fro"))
    if residual > SYLVESTER_RESIDUAL_TOL:
        raise InternalModelError(f"Sylvester residual {residual:.3g} exceeds tolerance")
    sigma = linalg.svdvals(t)
    min_singular = float(sigma[-1])
    if min_singular == 0.0:
        raise InternalModelError("Sylvester solution T is singular")
    cond = float(sigma[0] / min_singular)
    if cond > ILL_CONDITIONED:
        logger.warning("Sylvester solution T is ill-conditioned (cond=%.3g)", cond)
    return SylvesterSolution(T=t, residual=residual, cond=cond, min_singular=min_singular)


# ── Regulator ─────────────────────────────────────────────────


@dataclass(frozen=True)
class RegulatorSpec:
    """Internal model of one agent.

    Attributes:
        Phi: Companion matrix of the disturbance modes.
        Gamma: ``1 x s`` readout row.
        M: Hurwitz compensator matrix.
        N: Compensator input column.
        T: Sylvester solution.
        eta: Compensator state ``η``.
        residual: ``‖TΦ - MT - NΓ‖_F``.
        cond: Condition number of ``T``.
    """

    Phi: np.ndarray
    Gamma: np.ndarray
    M: np.ndarray
    N: np.ndarray
    T: np.ndarray
    eta: np.ndarray
    residual: float = 0.0
    cond: float = 1.0

    @property
    def order(self) -> int:
        return self.Phi.shape[0]

    @cached_property
    def readout(self) -> np.ndarray:
        """Row ``Γ T⁻¹`` that maps ``η`` to the feedforward estimate."""
        return linalg.solve(self.T.T, self.Gamma.ravel())

    @classmethod
    def build(
        cls,
        phi: np.ndarray,
        gamma: np.ndarray,
        m: np.ndarray,
        n: np.ndarray,
        eta0: Sequence[float] | None = None,
    ) -> RegulatorSpec:
        """Validate ``(M, N)`` and solve for ``T``."""
        m = np.asarray(m, dtype=float)
        s = phi.shape[0]
        n = np.asarray(n, dtype=float).reshape(-1, 1)
        if m.shape != (s, s) or n.shape != (s, 1):
            raise InternalModelError(
                f"(M, N) shapes {m.shape}, {n.shape} do not match internal-model order {s}"
            )
        if not is_hurwitz_matrix(m):
            raise InternalModelError(f"M is not Hurwitz: eigenvalues {np.linalg.eigvals(m)}")
        if not is_controllable(m, n):
            raise InternalModelError("(M, N) is not controllable")
        sol = solve_sylvester(phi, m, n, gamma)
        eta = np.zeros(s) if eta0 is None else np.asarray(eta0, dtype=float)
        if eta.shape != (s,):
            raise InternalModelError(f"η(0) must have length {s}, got {eta.shape}")
        return cls(
            Phi=phi,
            Gamma=gamma,
            M=m,
            N=n,
            T=sol.T,
            eta=eta,
            residual=sol.residual,
            cond=sol.cond,
        )

    @classmethod
    def for_family(
        cls,
        family: str,
        theta: float,
        m: np.ndarray | None = None,
        n: np.ndarray | None = None,
        ell: Sequence[float] | None = None,
        eta0: Sequence[float] | None = None,
    ) -> RegulatorSpec:
        """Regulator for a plant family; ℓ follows from θ unless given explicitly."""
        ell = harmonic_ell(family, theta) if ell is None else tuple(ell)
        phi, gamma = build_phi_gamma(len(ell), ell)
        if m is None or n is None:
            m_default, n_default = default_pair(family)
            m = m_default if m is None else m
            n = n_default if n is None else n
        return cls.build(phi, gamma, m, n, eta0=eta0)


def regulator_rhs(spec: RegulatorSpec, u: float, eta: np.ndarray | None = None) -> np.ndarray:
    """``M η + N u``; uses the spec's own state when ``eta`` is omitted."""
    eta = spec.eta if eta is None else eta
    return spec.M @ eta + spec.N.ravel() * u


def reproduction_matrix(spec: RegulatorSpec) -> np.ndarray:
    """``M + N Γ T⁻¹``, similar to Φ; the η-flow driven by its own feedforward estimate."""
    return spec.M + np.outer(spec.N.ravel(), spec.readout)


# ── Feedforward oracle ────────────────────────────────────────


def feedforward_affine(a: AgentPlant, s_star: float) -> tuple[float, np.ndarray]:
    """Steady-state input as an affine map of ``v``: ``u* = c0 + cᵀ v``."""
    if a.family == "A":
        return 0.0, np.array([0.0, -a.amplitudes[1] / a.b])
    if a.family == "B":
        p3 = a.p[2]
        return -p3 * s_star**3 / a.b, np.array([-a.amplitudes[2] / a.b, 0.0])
    raise NotApplicableError(f"No feedforward oracle for family {a.family!r}")


def feedforward_oracle(a: AgentPlant, s_star: float, v: np.ndarray) -> float:
    """Closed-form ``u*(s*, v, w)`` that holds ``y = s*`` against the disturbance."""
    c0, c = feedforward_affine(a, s_star)
    return float(c0 + c @ v)


def feedforward_derivatives(
    a: AgentPlant, s_star: float, v: np.ndarray, S: np.ndarray, order: int
) -> np.ndarray:
    """``τ = (u*, u̇*, ..., u*^(order-1))`` along the exosystem ``v' = S v``."""
    c0, c = feedforward_affine(a, s_star)
    tau = np.empty(order)
    tau[0] = c0 + c @ v
    w = v
    for k in range(1, order):
        w = S @ w
        tau[k] = c @ w
    return tau


def steady_state_eta(spec: RegulatorSpec, tau: np.ndarray) -> np.ndarray:
    """Point ``η = T τ`` on the invariant manifold."""
    return spec.T @ tau
