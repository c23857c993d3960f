"""High-gain observer for the integrator chain, driven by the measured output only.

    x̃_k' = x̃_(k+1) + h^k c_(n-k+1) (y - x̃_1),   k = 1..n   (x̃_(n+1) := 0)
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import special

from dooc.errors import ScenarioValidationError

HURWITZ_TOL = 0.0


# ── Polynomials ───────────────────────────────────────────────


def monic_roots(coeffs: Sequence[float]) -> np.ndarray:
    """Roots of ``λ^m + a_m λ^(m-1) + ... + a_2 λ + a_1`` for ``coeffs = (a_1, ..., a_m)``."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size == 0:
        return np.zeros(0, dtype=complex)
    return np.roots(np.concatenate([[1.0], coeffs[::-1]]))


def is_hurwitz(coeffs: Sequence[float]) -> bool:
    """True iff every root of the monic polynomial has a negative real part."""
    return bool(np.all(monic_roots(coeffs).real < -HURWITZ_TOL))


def binomial_coefficients(n: int, pole: float = 1.0) -> tuple[float, ...]:
    """Coefficients ``(a_1, ..., a_n)`` of ``(λ + ρ)^n``; all roots at ``-ρ``."""
    if n < 0 or not pole > 0:
        raise ValueError(f"Binomial coefficients need n >= 0 and pole > 0, got {n}, {pole}")
    return tuple(
        float(special.comb(n, k - 1, exact=True)) * pole ** (n - k + 1) for k in range(1, n + 1)
    )


# ── Observer ──────────────────────────────────────────────────


@dataclass(frozen=True)
class ObserverSpec:
    """High-gain observer of one agent.

    Attributes:
        n: Chain length.
        h: High-gain parameter.
        c: Coefficients ``(c_1, ..., c_n)`` of a Hurwitz polynomial.
        x_tilde: Current estimate.
    """

    n: int
    h: float
    c: tuple[float, ...]
    x_tilde: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.h > 0:
            raise ScenarioValidationError(f"Observer gain h must be positive, got {self.h}")
        c = tuple(float(x) for x in self.c)
        if len(c) != self.n:
            raise ScenarioValidationError(
                f"Observer needs {self.n} coefficients, got {len(c)}"
            )
        if not is_hurwitz(c):
            raise ScenarioValidationError(
                f"Observer polynomial with coefficients {c} is not Hurwitz"
            )
        x_tilde = np.zeros(self.n) if self.x_tilde is None else np.asarray(self.x_tilde, float)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "x_tilde", x_tilde)

    @classmethod
    def binomial(cls, n: int, h: float, pole: float = 1.0) -> ObserverSpec:
        return cls(n=n, h=h, c=binomial_coefficients(n, pole))


def observer_gain(spec: ObserverSpec) -> np.ndarray:
    """Gain column with k-th entry ``h^k c_(n-k+1)``."""
    n = spec.n
    return np.array([spec.h**k * spec.c[n - k] for k in range(1, n + 1)])


def observer_rhs(
    spec: ObserverSpec,
    y: float,
    x_tilde: np.ndarray | None = None,
    gain: np.ndarray | None = None,
) -> np.ndarray:
    """Estimate derivative. ``gain`` may be precomputed with :func:`observer_gain`."""
    x_tilde = spec.x_tilde if x_tilde is None else x_tilde
    gain = observer_gain(spec) if gain is None else gain
    shift = np.empty_like(x_tilde)
    shift[:-1] = x_tilde[1:]
    shift[-1] = 0.0
    return shift + gain * (y - x_tilde[0])


def estimation_error_spectrum(spec: ObserverSpec) -> np.ndarray:
    """Eigenvalues of the scaled estimation-error dynamics, ``h`` times the polynomial roots."""
    return spec.h * monic_roots(spec.c)


def initial_estimate(n: int, y0: float) -> np.ndarray:
    """``(y(0), 0, ..., 0)``."""
    x_tilde = np.zeros(n)
    x_tilde[0] = y0
    return x_tilde


def error_scaling(spec: ObserverSpec) -> np.ndarray:
    """``H = diag(h^(n-1), ..., h, 1)``."""
    return np.diag([spec.h ** (spec.n - k) for k in range(1, spec.n + 1)])


def scaled_error(
    spec: ObserverSpec, x: np.ndarray, x_tilde: np.ndarray | None = None
) -> np.ndarray:
    """``e_k = h^(n-k) (x_k - x̃_k)``."""
    x_tilde = spec.x_tilde if x_tilde is None else x_tilde
    return error_scaling(spec) @ (np.asarray(x) - x_tilde)
