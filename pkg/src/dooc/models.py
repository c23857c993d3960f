"""Pydantic models for scenario files, plus loading and dotted-key overrides."""

from __future__ import annotations

import json
from collections.abc import Iterable
from importlib import resources
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError, model_validator

from dooc.controller import ControlMode
from dooc.errors import ScenarioValidationError

SHIPPED_SCENARIOS = "scenarios"

Coefficients = Literal["binomial"] | list[float]


class _Config(BaseModel):
    model_config = {"extra": "forbid", "populate_by_name": True}


# ── Network and costs ─────────────────────────────────────────

class EdgeConfig(_Config):
    """Directed edge, 1-based node labels."""
    source: int = Field(alias="from", ge=1)
    target: int = Field(alias="to", ge=1)
    weight: float = Field(1.0, gt=0)


class GraphConfig(_Config):
    nodes: int = Field(ge=1)
    edges: list[EdgeConfig] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_edges(self) -> GraphConfig:
        seen: set[tuple[int, int]] = set()
        for e in self.edges:
            if e.source > self.nodes or e.target > self.nodes:
                raise ValueError(
                    f"Edge {e.source}->{e.target} references a node beyond {self.nodes}"
                )
            if e.source == e.target:
                raise ValueError(f"Self-loop on node {e.source}")
            if (e.source, e.target) in seen:
                raise ValueError(f"Duplicate edge {e.source}->{e.target}")
            seen.add((e.source, e.target))
        return self


class CostConfig(_Config):
    """``q (s - b)^2`` plus ``log(1 + e^s)`` for the logistic kind."""
    kind: Literal["quadratic", "logistic_quadratic"] = "quadratic"
    q: float = Field(gt=0)
    b: float = 0.0


class CoordinatorConfig(_Config):
    alpha1: float = Field(1.0, gt=0)
    alpha2: float = Field(1.0, gt=0)
    y_r0: list[float] | None = None


class ExosystemConfig(_Config):
    """Harmonic disturbance generator at frequency ``theta``."""
    theta: float = Field(0.8, gt=0)
    v0: list[float] = Field(default_factory=lambda: [1.0, 0.0], min_length=2, max_length=2)


# ── Agents ────────────────────────────────────────────────────

class PlantConfig(_Config):
    """One agent's plant.

    ``w`` fixes the uncertainty explicitly; otherwise ``uncertainty`` selects a seeded
    draw (``random``) or the forced ``p1 = -1`` offsets (``zero``).
    """
    family: str = "A"
    b: float = 1.0
    nominal: list[float] | None = None
    uncertainty: Literal["random", "zero"] = "random"
    w: list[float] | None = None
    amplitude: float = Field(10.0, ge=0)
    z0: list[float] | None = None
    x0: list[float] | None = None
    gamma: list[float] | None = None
    c: list[float] | None = None


class RegulatorConfig(_Config):
    """Compensator pair and internal-model coefficients; family defaults when omitted."""
    M: list[list[float]] | None = None
    N: list[float] | None = None
    ell: list[float] | None = None
    eta0: list[float] | None = None


class ObserverConfig(_Config):
    h: float = 100.0
    c: Coefficients = "binomial"
    pole: float = Field(1.0, gt=0)
    init: Literal["output", "zero"] = "output"


class ControllerConfig(_Config):
    mode: ControlMode = ControlMode.OUTPUT_FEEDBACK
    K: float = 4.0e4
    delta: float = 1.0e5
    g: float = 1.0
    gamma: Coefficients = "binomial"
    pole: float = Field(1.0, gt=0)


class IntegrationConfig(_Config):
    dt: float = Field(1.0e-4, gt=0)
    t_final: float = Field(100.0, gt=0)
    record_stride: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _check_horizon(self) -> IntegrationConfig:
        if self.t_final < self.dt:
            raise ValueError(f"t_final ({self.t_final}) must be at least dt ({self.dt})")
        return self


class DiagnosticsConfig(_Config):
    settle_band: float = Field(0.05, gt=0)
    residual_window: float = Field(0.2, gt=0, le=1)
    z_offset_gain: float = 0.0


# ── Scenario ──────────────────────────────────────────────────

class Scenario(_Config):
    """A complete closed-loop experiment."""
    name: str = "scenario"
    seed: int = Field(0, ge=0)
    graph: GraphConfig
    costs: list[CostConfig]
    coordinator: CoordinatorConfig = Field(default_factory=CoordinatorConfig)
    exosystem: ExosystemConfig = Field(default_factory=ExosystemConfig)
    plants: list[PlantConfig] = Field(default_factory=list)
    regulators: list[RegulatorConfig] | None = None
    observer: ObserverConfig = Field(default_factory=ObserverConfig)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    integration: IntegrationConfig = Field(default_factory=IntegrationConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)

    @model_validator(mode="after")
    def _check_sections(self) -> Scenario:
        n = self.graph.nodes
        if len(self.costs) != n:
            raise ValueError(f"Expected {n} costs, got {len(self.costs)}")
        coordinator_only = self.controller.mode == ControlMode.COORDINATOR_ONLY
        if not (len(self.plants) == n or (coordinator_only and not self.plants)):
            raise ValueError(f"Expected {n} plants, got {len(self.plants)}")
        if self.regulators is not None and len(self.regulators) != len(self.plants):
            raise ValueError(
                f"Expected {len(self.plants)} regulator entries, got {len(self.regulators)}"
            )
        if self.coordinator.y_r0 is not None and len(self.coordinator.y_r0) != n:
            raise ValueError(f"coordinator.y_r0 must have {n} entries")
        return self

    @property
    def n(self) -> int:
        return self.graph.nodes

    def dump(self) -> dict[str, Any]:
        """JSON-ready dict using the file's key names."""
        return self.model_dump(mode="json", by_alias=True)

    def with_overrides(self, overrides: Iterable[str]) -> Scenario:
        return parse_scenario(apply_overrides(self.dump(), overrides))


# ── Loading ───────────────────────────────────────────────────

def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``dotted.key=value`` overrides in place and return ``raw``.

    Integer segments index into lists; values are parsed as JSON, falling back to the
    raw string.

    Raises:
        ScenarioValidationError: for a malformed override or one naming a missing key.
    """
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ScenarioValidationError(f"Override must look like key=value, got {item!r}")
        *parents, leaf = key.split(".")
        node: Any = raw
        for segment in parents:
            node = _child(node, segment, key)
        if isinstance(node, list):
            index = _index(node, leaf, key)
            node[index] = _parse_value(value)
        elif isinstance(node, dict) and leaf in node:
            node[leaf] = _parse_value(value)
        else:
            raise ScenarioValidationError(f"Override {key!r} does not name an existing key")
    return raw


def _child(node: Any, segment: str, key: str) -> Any:
    if isinstance(node, list):
        return node[_index(node, segment, key)]
    if isinstance(node, dict) and segment in node and node[segment] is not None:
        return node[segment]
    raise ScenarioValidationError(f"Override {key!r} does not name an existing key")


def _index(node: list, segment: str, key: str) -> int:
    if not segment.isdigit() or int(segment) >= len(node):
        raise ScenarioValidationError(f"Override {key!r}: bad list index {segment!r}")
    return int(segment)


def parse_scenario(raw: dict[str, Any]) -> Scenario:
    try:
        return Scenario.model_validate(raw)
    except ValidationError as e:
        raise ScenarioValidationError(f"Invalid scenario:\n{e}") from e


def shipped_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``paper_sec4.json``."""
    if not name.endswith(".json"):
        name = f"{name}.json"
    return Path(str(resources.files("dooc") / SHIPPED_SCENARIOS / name))


def resolve_scenario_path(path: str | Path) -> Path:
    """``path`` itself when it exists, else the shipped scenario of that file name."""
    path = Path(path)
    if path.exists():
        return path
    shipped = shipped_scenario_path(path.name)
    if shipped.exists():
        return shipped
    raise ScenarioValidationError(f"Scenario file not found: {path}")


def load_scenario(
    path: str | Path,
    overrides: Iterable[str] = (),
    seed: int | None = None,
) -> Scenario:
    """Load, validate and override a scenario file.

    Overrides are applied to the fully resolved scenario so defaulted keys can be set.
    """
    path = resolve_scenario_path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ScenarioValidationError(f"{path}: not valid JSON ({e})") from e
    scenario = parse_scenario(raw)
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"seed={seed}")
    if overrides:
        scenario = scenario.with_overrides(overrides)
    return scenario


def load_shipped(name: str = "paper_sec4", overrides: Iterable[str] = ()) -> Scenario:
    return load_scenario(shipped_scenario_path(name), overrides)
