"""Decentralized stabilizer: composite variable, saturated feedback and gain checks.

Output feedback:  u = -β_δ(K ϑ̃) + Γ T⁻¹ η
State feedback:   ū = -K ϑ   (ϑ built from the true chain state)
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np
from pydantic import BaseModel, Field

from dooc.errors import GainValidationError
from dooc.observer import is_hurwitz, monic_roots
from dooc.regulator import RegulatorSpec


class ControlMode(str, Enum):
    OUTPUT_FEEDBACK = "output-feedback"
    STATE_FEEDBACK = "state-feedback"
    COORDINATOR_ONLY = "coordinator-only"


@dataclass(frozen=True)
class ControllerGains:
    """Feedback gain ``K``, saturation bound ``delta``, composite gain ``g`` and ``gamma``."""

    K: float
    delta: float
    g: float = 1.0
    gamma: tuple[float, ...] = ()


# ── Control law ───────────────────────────────────────────────


def saturate(r: float, delta: float) -> float:
    """``β_δ(r)``: identity on ``(-δ, δ)``, ``sgn(r) δ`` outside."""
    if abs(r) < delta:
        return r
    return delta if r > 0 else -delta


def composite_weights(g: float, gamma: Sequence[float]) -> np.ndarray:
    """Weights ``(g^(n-1) γ_1, ..., g γ_(n-1), 1)`` of the composite variable."""
    m = len(gamma)
    return np.array([g ** (m - k) * gamma[k] for k in range(m)] + [1.0])


def theta_tilde(
    x_tilde: np.ndarray,
    y_r: float,
    g: float,
    gamma: Sequence[float],
    weights: np.ndarray | None = None,
) -> float:
    """Composite variable ``ϑ̃ = x̃_n + g γ_(n-1) x̃_(n-1) + ... + g^(n-1) γ_1 (x̃_1 - y^r)``.

    Also yields the true ``ϑ`` when called with the plant state instead of the estimate.
    """
    w = composite_weights(g, gamma) if weights is None else weights
    err = np.array(x_tilde, dtype=float)
    err[0] -= y_r
    return float(w @ err)


def control_output(
    theta_tilde: float, eta: np.ndarray, spec: RegulatorSpec, gains: ControllerGains
) -> float:
    return -saturate(gains.K * theta_tilde, gains.delta) + float(spec.readout @ eta)


def state_feedback_output(theta: float, gains: ControllerGains) -> float:
    return -gains.K * theta


# ── Gain validation ───────────────────────────────────────────


class GainCheck(BaseModel):
    """Outcome of one gain check."""

    name: str
    passed: bool
    detail: str = ""


class ValidationReport(BaseModel):
    """All gain checks for one agent (or the whole scenario)."""

    checks: list[GainCheck] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def extend(self, other: ValidationReport, prefix: str = "") -> None:
        for check in other.checks:
            self.checks.append(check.model_copy(update={"name": f"{prefix}{check.name}"}))

    def raise_if_failed(self) -> None:
        if not self.passed:
            raise GainValidationError(self)

    def summary(self) -> str:
        return "\n".join(
            f"{'PASS' if c.passed else 'FAIL'}  {c.name}  {c.detail}".rstrip() for c in self.checks
        )


def _hurwitz_check(name: str, coeffs: Sequence[float]) -> GainCheck:
    coeffs = tuple(float(c) for c in coeffs)
    if any(c <= 0 for c in coeffs):
        return GainCheck(
            name=name, passed=False, detail=f"non-positive coefficient in {coeffs}"
        )
    roots = monic_roots(coeffs)
    worst = float(roots.real.max()) if roots.size else float("-inf")
    return GainCheck(
        name=name,
        passed=is_hurwitz(coeffs),
        detail=f"max root real part {worst:.6g}",
    )


def _positive_check(name: str, value: float) -> GainCheck:
    return GainCheck(name=name, passed=bool(value > 0), detail=f"{name}={value:g}")


def validate_gains(
    gamma: Sequence[float],
    c: Sequence[float],
    K: float,
    g: float,
    delta: float,
) -> ValidationReport:
    """Hurwitz status of the γ- and c-polynomials, positivity of ``K`` and ``δ``, and ``g >= 1``.

    A positive-coefficient screen runs before root finding; failing it fails the check.
    """
    return ValidationReport(
        checks=[
            _hurwitz_check("gamma_hurwitz", gamma),
            _hurwitz_check("c_hurwitz", c),
            _positive_check("K", K),
            GainCheck(name="g", passed=bool(g >= 1.0), detail=f"g={g:g}, needs g >= 1"),
            _positive_check("delta", delta),
        ]
    )
