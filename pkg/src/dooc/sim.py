"""Fixed-step closed-loop simulation, trajectory recording, metrics and writers.

The network is integrated as one monolithic state vector::

    [ y_r | ζ | Ξ (row-major) | agent 1: z, x, x̃, η | ... | agent N: z, x, x̃, η | v ]
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse

from dooc.controller import (
    ControlMode,
    ControllerGains,
    GainCheck,
    ValidationReport,
    composite_weights,
    control_output,
    state_feedback_output,
    theta_tilde,
    validate_gains,
)
from dooc.coordinator import (
    CoordinatorParams,
    CoordinatorState,
    init_state,
    require_positive_diagonal,
)
from dooc.cost import CostFunction, StackedGradient, build_cost, global_minimizer
from dooc.errors import DOOCError, DivergenceError, NotApplicableError, ScenarioValidationError
from dooc.graph import Digraph, Laplacian, laplacian, left_eigenvector
from dooc.models import Coefficients, RegulatorConfig, Scenario
from dooc.observer import (
    ObserverSpec,
    binomial_coefficients,
    initial_estimate,
    observer_gain,
)
from dooc.plant import (
    FAMILIES,
    AgentPlant,
    Exosystem,
    PlantNonlinear,
    disturbance_amplitudes,
    nominal_params,
    plant_rhs,
    sample_uncertainty,
    zero_dynamics_manifold,
)
from dooc.regulator import RegulatorSpec, feedforward_oracle

logger = logging.getLogger(__name__)

Block = tuple[str, slice]
RATE_FLOOR = 1e-11


# ── Integrator ────────────────────────────────────────────────


def _first_bad_block(vec: np.ndarray, blocks: Sequence[Block] | None) -> str | None:
    for name, sl in blocks or ():
        if not np.all(np.isfinite(vec[sl])):
            return name
    return None


def rk4_step(
    rhs: Callable[[np.ndarray], np.ndarray],
    state: np.ndarray,
    dt: float,
    blocks: Sequence[Block] | None = None,
    t: float | None = None,
) -> np.ndarray:
    """One classical Runge-Kutta step of ``state' = rhs(state)``.

    A non-finite stage derivative always reaches the new state, so only that is checked.

    Raises:
        DivergenceError: when the new state is not finite; the offending block is named
            when ``blocks`` is given.
    """
    half = 0.5 * dt
    k1 = rhs(state)
    k2 = rhs(state + half * k1)
    k3 = rhs(state + half * k2)
    k4 = rhs(state + dt * k3)
    new = state + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
    if not np.isfinite(new).all():
        raise DivergenceError("Non-finite state", time=t, block=_first_bad_block(new, blocks))
    return new


# ── Closed loop ───────────────────────────────────────────────


@dataclass(frozen=True)
class AgentLoop:
    """Compiled per-agent loop: plant, internal model, observer, gains and state slices."""

    plant: AgentPlant
    regulator: RegulatorSpec
    observer: ObserverSpec
    gains: ControllerGains
    weights: np.ndarray
    obs_gain: np.ndarray
    z: slice
    x: slice
    x_tilde: slice
    eta: slice

    @property
    def index(self) -> int:
        return self.plant.index

    def blocks(self) -> list[Block]:
        prefix = f"agent{self.index}"
        return [
            (f"{prefix}.z", self.z),
            (f"{prefix}.x", self.x),
            (f"{prefix}.x_tilde", self.x_tilde),
            (f"{prefix}.eta", self.eta),
        ]


def resolve_coefficients(value: Coefficients, n: int, pole: float, what: str) -> tuple[float, ...]:
    if value == "binomial":
        return binomial_coefficients(n, pole)
    if len(value) != n:
        raise ScenarioValidationError(f"{what} needs {n} coefficients, got {len(value)}")
    return tuple(float(c) for c in value)


@dataclass
class ClosedLoop:
    """A validated, compiled scenario ready to integrate."""

    scenario: Scenario
    digraph: Digraph
    laplacian: Laplacian
    costs: list[CostFunction]
    params: CoordinatorParams
    exosystem: Exosystem
    mode: ControlMode
    agents: list[AgentLoop]
    s_star: float
    r: np.ndarray
    report: ValidationReport = field(default_factory=ValidationReport)

    # ── construction ──

    @classmethod
    def compile(cls, scn: Scenario) -> ClosedLoop:
        """Build every module object and run all pre-run validations.

        Raises:
            ScenarioValidationError: (or a subclass) when any validation fails.
        """
        n = scn.n
        digraph = Digraph.from_edges(
            n, [(e.source - 1, e.target - 1, e.weight) for e in scn.graph.edges]
        )
        lap = laplacian(digraph)
        r = left_eigenvector(lap)
        costs = [build_cost(c.kind, c.q, c.b) for c in scn.costs]
        s_star = global_minimizer(costs)
        params = CoordinatorParams(scn.coordinator.alpha1, scn.coordinator.alpha2)
        exo = Exosystem.harmonic(scn.exosystem.theta, scn.exosystem.v0)
        mode = scn.controller.mode

        agents: list[AgentLoop] = []
        report = ValidationReport()
        if mode != ControlMode.COORDINATOR_ONLY:
            offset = CoordinatorState.size(n)
            for i, pc in enumerate(scn.plants, start=1):
                agent, agent_report = _compile_agent(scn, i, offset)
                report.extend(agent_report, prefix=f"agent{i}.")
                if agent is not None:
                    agents.append(agent)
                    offset = agent.eta.stop
        report.raise_if_failed()
        logger.debug("Compiled %s: %d agents, s*=%.12g", scn.name, len(agents), s_star)
        return cls(
            scenario=scn,
            digraph=digraph,
            laplacian=lap,
            costs=costs,
            params=params,
            exosystem=exo,
            mode=mode,
            agents=agents,
            s_star=s_star,
            r=r,
            report=report,
        )

    # ── layout ──

    @property
    def n(self) -> int:
        return self.laplacian.n

    @property
    def coord_slice(self) -> slice:
        return slice(0, CoordinatorState.size(self.n))

    @property
    def v_slice(self) -> slice:
        start = self.agents[-1].eta.stop if self.agents else self.coord_slice.stop
        return slice(start, start + self.exosystem.n_v)

    @property
    def size(self) -> int:
        return self.v_slice.stop

    def blocks(self) -> list[Block]:
        n = self.n
        blocks: list[Block] = [
            ("coordinator.y_r", slice(0, n)),
            ("coordinator.zeta", slice(n, 2 * n)),
            ("coordinator.xi", slice(2 * n, CoordinatorState.size(n))),
        ]
        for agent in self.agents:
            blocks.extend(agent.blocks())
        blocks.append(("exosystem.v", self.v_slice))
        return blocks

    def initial_state(self) -> np.ndarray:
        state = np.zeros(self.size)
        coord = init_state(self.n, self.scenario.coordinator.y_r0)
        state[self.coord_slice] = coord.to_vector()
        for agent in self.agents:
            state[agent.z] = agent.plant.z0
            state[agent.x] = agent.plant.x0
            state[agent.x_tilde] = agent.observer.x_tilde
            state[agent.eta] = agent.regulator.eta
        state[self.v_slice] = self.exosystem.v
        return state

    # ── dynamics ──

    def _control(self, agent: AgentLoop, state: np.ndarray, y_r: float) -> tuple[float, float]:
        gains = agent.gains
        eta = state[agent.eta]
        if self.mode == ControlMode.STATE_FEEDBACK:
            theta = theta_tilde(state[agent.x], y_r, gains.g, gains.gamma, agent.weights)
            u = state_feedback_output(theta, gains) + float(agent.regulator.readout @ eta)
            return u, theta
        theta = theta_tilde(state[agent.x_tilde], y_r, gains.g, gains.gamma, agent.weights)
        return control_output(theta, eta, agent.regulator, gains), theta

    @cached_property
    def kernel(self) -> LoopKernel:
        return LoopKernel.assemble(self)

    def inputs(self, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Composite variables and control inputs of all agents, in agent order."""
        return self.kernel.inputs(self.kernel.operator @ state)

    def rhs(self, state: np.ndarray) -> np.ndarray:
        """Time derivative of the stacked state."""
        kernel, n = self.kernel, self.n
        diag = state[kernel.xi_diag]
        require_positive_diagonal(diag)
        out = kernel.operator @ state
        deriv = out[: kernel.size]
        deriv[:n] -= kernel.gradient(state[:n]) / diag
        if not self.agents:
            return deriv
        _, u = kernel.inputs(out)
        deriv[kernel.u_rows] += kernel.u_gain * u[kernel.u_cols]
        for term in kernel.terms:
            term.add_to(state, deriv)
        if kernel.generic:
            v = state[self.v_slice]
            for pos in kernel.generic:
                agent = self.agents[pos]
                dz, dx = plant_rhs(agent.plant, state[agent.z], state[agent.x], u[pos], v)
                deriv[agent.z] += dz
                deriv[agent.x] += dx
        return deriv

    def signals(self, state: np.ndarray) -> dict[str, np.ndarray]:
        """Per-agent output, input and diagnostic signals at ``state``."""
        n = self.n
        y_r = state[:n]
        out = {
            "y": y_r.copy(),
            "u": np.full(n, np.nan),
            "theta_tilde": np.full(n, np.nan),
            "eta_ff": np.full(n, np.nan),
            "u_star": np.full(n, np.nan),
            "z_star": np.full(n, np.nan),
        }
        v = state[self.v_slice]
        exo, diag = self.scenario.exosystem, self.scenario.diagnostics
        for agent in self.agents:
            k = agent.index - 1
            u, theta = self._control(agent, state, y_r[k])
            out["y"][k] = state[agent.x][0]
            out["u"][k] = u
            out["theta_tilde"][k] = theta
            out["eta_ff"][k] = float(agent.regulator.readout @ state[agent.eta])
            try:
                out["u_star"][k] = feedforward_oracle(agent.plant, self.s_star, v)
            except NotApplicableError:
                pass
            if agent.plant.n_z:
                try:
                    out["z_star"][k] = zero_dynamics_manifold(
                        agent.plant, self.s_star, v, exo.theta, diag.z_offset_gain
                    )
                except NotApplicableError:
                    pass
        return out


@dataclass(frozen=True)
class BatchTerm:
    """Nonlinear plant terms of every agent of one split family, evaluated together."""

    nonlinear: PlantNonlinear
    p: np.ndarray
    z: np.ndarray
    x: np.ndarray
    rows: np.ndarray

    def add_to(self, state: np.ndarray, deriv: np.ndarray) -> None:
        deriv[self.rows] += self.nonlinear(self.p, state[self.z], state[self.x])


@dataclass(frozen=True)
class LoopKernel:
    """The closed loop split into one sparse operator and a few nonlinear terms.

    ``operator @ state`` stacks the affine part of the derivative (``size`` rows) on the
    composite variables ``ϑ̃`` (one row per agent) and the feedforward readouts
    ``Γ T⁻¹ η``. Control inputs enter rows ``u_rows`` with weights ``u_gain``.
    """

    size: int
    operator: sparse.csr_matrix
    gain: np.ndarray
    bound: np.ndarray
    u_rows: np.ndarray
    u_cols: np.ndarray
    u_gain: np.ndarray
    xi_diag: np.ndarray
    gradient: StackedGradient
    terms: tuple[BatchTerm, ...] = ()
    generic: tuple[int, ...] = ()

    def inputs(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(ϑ̃, u)`` from the stacked operator output."""
        m = self.gain.shape[0]
        fb = out[self.size :]
        theta = fb[:m]
        # bound is +inf in state-feedback mode, which leaves -K ϑ unsaturated
        push = np.minimum(np.maximum(self.gain * theta, -self.bound), self.bound)
        return theta, fb[m:] - push

    @classmethod
    def assemble(cls, loop: ClosedLoop) -> LoopKernel:
        n, size, m = loop.n, loop.size, len(loop.agents)
        L = loop.laplacian.matrix
        alpha1, alpha2 = loop.params.alpha1, loop.params.alpha2
        A = np.zeros((size + 2 * m, size))

        # coordinator, minus the gradient term
        A[:n, :n] = -alpha1 * L
        A[:n, n : 2 * n] = -alpha2 * np.eye(n)
        A[n : 2 * n, :n] = alpha1 * L
        A[2 * n : CoordinatorState.size(n), 2 * n : CoordinatorState.size(n)] = -np.kron(
            L, np.eye(n)
        )
        v = loop.v_slice
        A[v, v] = loop.exosystem.S

        u_rows: list[int] = []
        u_cols: list[int] = []
        u_gain: list[float] = []
        batches: dict[str, list[AgentLoop]] = {}
        generic: list[int] = []
        for pos, agent in enumerate(loop.agents):
            zx = np.r_[agent.z.start : agent.z.stop, agent.x.start : agent.x.stop]
            family = FAMILIES[agent.plant.family]
            if family.split:
                F, E, g = family.linear(agent.plant, loop.exosystem.n_v)
                A[np.ix_(zx, zx)] = F
                A[np.ix_(zx, np.arange(v.start, v.stop))] = E
                for row, weight in zip(zx, g):
                    if weight:
                        u_rows.append(int(row))
                        u_cols.append(pos)
                        u_gain.append(float(weight))
                batches.setdefault(family.name, []).append(agent)
            else:
                generic.append(pos)

            # observer: shifted chain plus output injection
            xt, y = agent.x_tilde, agent.x.start
            order = xt.stop - xt.start
            A[xt.start : xt.stop - 1, xt.start + 1 : xt.stop] = np.eye(order - 1)
            A[xt, y] += agent.obs_gain
            A[xt, xt.start] -= agent.obs_gain

            reg = agent.regulator
            A[agent.eta, agent.eta] = reg.M
            for row, weight in zip(range(agent.eta.start, agent.eta.stop), reg.N.ravel()):
                if weight:
                    u_rows.append(row)
                    u_cols.append(pos)
                    u_gain.append(float(weight))

            chain = agent.x if loop.mode == ControlMode.STATE_FEEDBACK else agent.x_tilde
            A[size + pos, chain] = agent.weights
            A[size + pos, agent.index - 1] -= agent.weights[0]
            A[size + m + pos, agent.eta] = reg.readout

        if loop.mode == ControlMode.STATE_FEEDBACK:
            bound = np.full(m, np.inf)
        else:
            bound = np.array([a.gains.delta for a in loop.agents])
        return cls(
            size=size,
            operator=sparse.csr_matrix(A),
            gain=np.array([a.gains.K for a in loop.agents]),
            bound=bound,
            u_rows=np.array(u_rows, dtype=np.intp),
            u_cols=np.array(u_cols, dtype=np.intp),
            u_gain=np.array(u_gain),
            xi_diag=2 * n + np.arange(n) * (n + 1),
            gradient=StackedGradient(loop.costs),
            terms=tuple(_batch_term(agents) for agents in batches.values()),
            generic=tuple(generic),
        )


def _batch_term(agents: list[AgentLoop]) -> BatchTerm:
    family = FAMILIES[agents[0].plant.family]
    z = np.array([np.arange(a.z.start, a.z.stop) for a in agents], dtype=np.intp)
    x = np.array([np.arange(a.x.start, a.x.stop) for a in agents], dtype=np.intp)
    return BatchTerm(
        nonlinear=family.nonlinear,
        p=np.array([a.plant.p for a in agents]),
        z=z.reshape(len(agents), family.n_z),
        x=x,
        rows=np.hstack([z.reshape(len(agents), family.n_z), x]),
    )


def _compile_agent(scn: Scenario, i: int, offset: int) -> tuple[AgentLoop | None, ValidationReport]:
    pc = scn.plants[i - 1]
    nominal = tuple(pc.nominal) if pc.nominal is not None else nominal_params(i)
    w = (
        np.asarray(pc.w, dtype=float)
        if pc.w is not None
        else sample_uncertainty(scn.seed, i, nominal, pc.uncertainty)
    )
    if len(w) != len(nominal):
        raise ScenarioValidationError(f"Agent {i}: w must have {len(nominal)} entries")
    plant = AgentPlant(
        index=i,
        family=pc.family,
        p=tuple(np.asarray(nominal, dtype=float) + w),
        b=pc.b,
        amplitudes=disturbance_amplitudes(pc.amplitude),
        z0=np.asarray(pc.z0 or [], dtype=float),
        x0=pc.x0,
    )
    order = plant.order

    ctl, obs = scn.controller, scn.observer
    gamma = resolve_coefficients(
        pc.gamma if pc.gamma is not None else ctl.gamma, order - 1, ctl.pole, f"Agent {i} gamma"
    )
    c = resolve_coefficients(pc.c if pc.c is not None else obs.c, order, obs.pole, f"Agent {i} c")
    report = validate_gains(gamma, c, ctl.K, ctl.g, ctl.delta)
    report.checks.append(GainCheck(name="h", passed=bool(obs.h > 0), detail=f"h={obs.h:g}"))
    if not report.passed:
        return None, report

    rc = scn.regulators[i - 1] if scn.regulators is not None else RegulatorConfig()
    regulator = RegulatorSpec.for_family(
        pc.family,
        scn.exosystem.theta,
        m=None if rc.M is None else np.asarray(rc.M, dtype=float),
        n=None if rc.N is None else np.asarray(rc.N, dtype=float),
        ell=rc.ell,
        eta0=rc.eta0,
    )
    x_tilde0 = initial_estimate(order, plant.x0[0]) if obs.init == "output" else np.zeros(order)
    observer = ObserverSpec(n=order, h=obs.h, c=c, x_tilde=x_tilde0)
    gains = ControllerGains(K=ctl.K, delta=ctl.delta, g=ctl.g, gamma=gamma)

    z = slice(offset, offset + plant.n_z)
    x = slice(z.stop, z.stop + order)
    x_tilde = slice(x.stop, x.stop + order)
    eta = slice(x_tilde.stop, x_tilde.stop + regulator.order)
    agent = AgentLoop(
        plant=plant,
        regulator=regulator,
        observer=observer,
        gains=gains,
        weights=composite_weights(ctl.g, gamma),
        obs_gain=observer_gain(observer),
        z=z,
        x=x,
        x_tilde=x_tilde,
        eta=eta,
    )
    return agent, report


# ── Trajectory ────────────────────────────────────────────────


@dataclass
class Trajectory:
    """Recorded time series on a shared grid.

    ``(T, N)`` arrays are indexed by record then agent. In coordinator-only mode ``y``
    equals ``y_r`` and the input columns are NaN.
    """

    t: np.ndarray
    y: np.ndarray
    y_r: np.ndarray
    u: np.ndarray
    theta_tilde: np.ndarray
    eta_ff: np.ndarray
    u_star: np.ndarray
    zeta: np.ndarray
    xi: np.ndarray
    v: np.ndarray
    z_star: np.ndarray | None = None
    z: list[np.ndarray] = field(default_factory=list)
    x: list[np.ndarray] = field(default_factory=list)
    x_tilde: list[np.ndarray] = field(default_factory=list)
    eta: list[np.ndarray] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return self.y_r.shape[1]

    @property
    def xi_diag(self) -> np.ndarray:
        return np.diagonal(self.xi, axis1=1, axis2=2)

    def prefix(self, t_end: float) -> Trajectory:
        """Records with ``t <= t_end``."""
        k = int(np.searchsorted(self.t, t_end + 1e-9 * max(1.0, abs(t_end)), side="right"))
        return Trajectory(
            t=self.t[:k],
            y=self.y[:k],
            y_r=self.y_r[:k],
            u=self.u[:k],
            theta_tilde=self.theta_tilde[:k],
            eta_ff=self.eta_ff[:k],
            u_star=self.u_star[:k],
            zeta=self.zeta[:k],
            xi=self.xi[:k],
            v=self.v[:k],
            z_star=None if self.z_star is None else self.z_star[:k],
            z=[a[:k] for a in self.z],
            x=[a[:k] for a in self.x],
            x_tilde=[a[:k] for a in self.x_tilde],
            eta=[a[:k] for a in self.eta],
            metadata=self.metadata,
        )


def _span(sl: slice) -> int:
    return sl.stop - sl.start


class _Recorder:
    def __init__(self, loop: ClosedLoop, count: int):
        n = loop.n
        self.loop = loop
        self.k = 0
        self.t = np.empty(count)
        self.series = {
            name: np.empty((count, n))
            for name in ("y", "y_r", "u", "theta_tilde", "eta_ff", "u_star", "z_star", "zeta")
        }
        self.xi = np.empty((count, n, n))
        self.v = np.empty((count, loop.exosystem.n_v))
        self.agent_series = {
            name: [np.empty((count, _span(getattr(a, name)))) for a in loop.agents]
            for name in ("z", "x", "x_tilde", "eta")
        }

    def record(self, t: float, state: np.ndarray) -> None:
        loop, k, n = self.loop, self.k, self.loop.n
        self.t[k] = t
        for name, values in loop.signals(state).items():
            self.series[name][k] = values
        self.series["y_r"][k] = state[:n]
        self.series["zeta"][k] = state[n : 2 * n]
        self.xi[k] = state[2 * n : CoordinatorState.size(n)].reshape(n, n)
        self.v[k] = state[loop.v_slice]
        for name, arrays in self.agent_series.items():
            for agent, arr in zip(loop.agents, arrays):
                arr[k] = state[getattr(agent, name)]
        self.k += 1

    def trajectory(self, metadata: dict[str, Any]) -> Trajectory:
        return Trajectory(
            t=self.t,
            xi=self.xi,
            v=self.v,
            metadata=metadata,
            **self.series,
            **self.agent_series,
        )


def run(scn: Scenario | ClosedLoop) -> Trajectory:
    """Integrate the closed loop over the scenario horizon.

    Deterministic in (scenario, seed). Records at ``t = 0``, every ``record_stride``
    steps and at the final step.

    Raises:
        ScenarioValidationError: before the first step when validation fails.
        DivergenceError: on the first non-finite value, with time stamp and block.
    """
    loop = scn if isinstance(scn, ClosedLoop) else ClosedLoop.compile(scn)
    cfg = loop.scenario.integration
    dt, stride = cfg.dt, cfg.record_stride
    n_steps = max(1, int(round(cfg.t_final / dt)))
    count = n_steps // stride + 1 + (1 if n_steps % stride else 0)
    blocks = loop.blocks()

    logger.info(
        "Running %s: mode=%s, %d agents, %d steps of dt=%g",
        loop.scenario.name,
        loop.mode.value,
        len(loop.agents),
        n_steps,
        dt,
    )
    recorder = _Recorder(loop, count)
    state = loop.initial_state()
    recorder.record(0.0, state)
    progress_every = max(1, n_steps // 10)
    for step in range(1, n_steps + 1):
        t_prev = (step - 1) * dt
        try:
            state = rk4_step(loop.rhs, state, dt, blocks, t_prev)
        except DivergenceError as e:
            if e.time is None:
                raise type(e)(e.reason, time=t_prev, block=e.block) from e
            raise
        if step % stride == 0 or step == n_steps:
            recorder.record(step * dt, state)
        if step % progress_every == 0:
            logger.debug("%s: %d%% (t=%.4g)", loop.scenario.name, 100 * step // n_steps, step * dt)

    logger.info("Finished %s at t=%g", loop.scenario.name, n_steps * dt)
    return recorder.trajectory(run_metadata(loop))


def run_metadata(loop: ClosedLoop) -> dict[str, Any]:
    from dooc import __version__

    return {
        "scenario": loop.scenario.dump(),
        "seed": loop.scenario.seed,
        "version": __version__,
        "s_star": loop.s_star,
        "r": loop.r.tolist(),
        "agents": [
            {
                "agent": a.index,
                "family": a.plant.family,
                "p": list(a.plant.p),
                "sylvester_residual": a.regulator.residual,
                "T_cond": a.regulator.cond,
            }
            for a in loop.agents
        ],
    }


def _run_captured(scn: Scenario) -> Trajectory | DOOCError:
    try:
        return run(scn)
    except DOOCError as e:
        return e


def run_many(
    scenarios: Sequence[Scenario], jobs: int = 1, capture_errors: bool = False
) -> list[Trajectory | DOOCError]:
    """Run independent scenarios, concurrently in worker processes when ``jobs > 1``.

    With ``capture_errors`` a failed run yields its exception in place of a trajectory
    instead of aborting the batch.
    """
    worker = _run_captured if capture_errors else run
    if jobs <= 1 or len(scenarios) <= 1:
        return [worker(s) for s in scenarios]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, scenarios))


# ── Metrics ───────────────────────────────────────────────────


class MetricsReport(BaseModel):
    """Convergence summary of one trajectory."""

    s_star: float
    final_error: float = Field(description="max_i |y_i(T) - s*|")
    final_reference_error: float = Field(description="max_i |y_i^r(T) - s*|")
    settling_times: list[float | None]
    sup_u: list[float | None]
    im_residual: list[float | None] = Field(
        description="sup |Γ T⁻¹ η_i - u*_i| over the final window"
    )
    im_residual_ratio: list[float | None]
    zero_dynamics_error: list[float | None] = Field(
        default_factory=list,
        description="sup |z_i - z*_i| over the final window, family A agents only",
    )
    reference_rate: float | None = Field(
        None, description="Fitted slope of log max_i |y_i^r - s*|, 1/s"
    )
    xi_row_sum_error: float
    xi_diag_min: float


def _settling_time(t: np.ndarray, err: np.ndarray, band: float) -> float | None:
    outside = np.flatnonzero(err > band)
    if outside.size == 0:
        return float(t[0])
    if outside[-1] == err.size - 1:
        return None
    return float(t[outside[-1] + 1])


def fit_rate(t: np.ndarray, err: np.ndarray, floor: float = RATE_FLOOR) -> float | None:
    """Slope of ``log err`` over the last 90% of the horizon, ignoring round-off samples."""
    start = t[0] + 0.1 * (t[-1] - t[0])
    mask = (t >= start) & (err > floor)
    if mask.sum() < 3:
        return None
    return float(np.polyfit(t[mask], np.log(err[mask]), 1)[0])


def _sup(values: np.ndarray) -> float | None:
    return None if np.all(np.isnan(values)) else float(np.nanmax(np.abs(values)))


def metrics(
    traj: Trajectory, s_star: float, band: float = 0.05, window: float = 0.2
) -> MetricsReport:
    t = traj.t
    window_mask = t >= t[-1] - window * (t[-1] - t[0])
    residual, ratio = [], []
    for k in range(traj.n_agents):
        diff = traj.eta_ff[window_mask, k] - traj.u_star[window_mask, k]
        res = _sup(diff)
        scale = _sup(traj.u_star[window_mask, k])
        residual.append(res)
        ratio.append(None if res is None or not scale else res / scale)

    zero_dynamics = [
        None
        if traj.z_star is None or z.shape[1] == 0
        else _sup(z[window_mask, 0] - traj.z_star[window_mask, k])
        for k, z in enumerate(traj.z)
    ]
    ref_err = np.abs(traj.y_r - s_star)
    return MetricsReport(
        s_star=s_star,
        final_error=float(np.max(np.abs(traj.y[-1] - s_star))),
        final_reference_error=float(np.max(ref_err[-1])),
        settling_times=[
            _settling_time(t, np.abs(traj.y[:, k] - s_star), band) for k in range(traj.n_agents)
        ],
        sup_u=[_sup(traj.u[:, k]) for k in range(traj.n_agents)],
        im_residual=residual,
        im_residual_ratio=ratio,
        zero_dynamics_error=zero_dynamics,
        reference_rate=fit_rate(t, ref_err.max(axis=1)),
        xi_row_sum_error=float(np.max(np.abs(traj.xi.sum(axis=2) - 1.0))),
        xi_diag_min=float(np.min(traj.xi_diag)),
    )


# ── Writers ───────────────────────────────────────────────────


def _fmt(value: float) -> str:
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def _indexed(prefix: str, count: int) -> list[str]:
    return [f"{prefix}_{k}" for k in range(1, count + 1)]


def _width(arrays: list[np.ndarray]) -> int:
    return max((a.shape[1] for a in arrays), default=0)


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> Path:
    """One row per agent per recorded step; indexed columns padded with empty cells."""
    path = Path(path)
    groups = {
        "z": _width(traj.z),
        "x": _width(traj.x),
        "x_tilde": _width(traj.x_tilde),
        "eta": _width(traj.eta),
    }
    header = ["t", "agent", "y", "y_r", "u", "theta_tilde", "eta_ff", "u_star", "zeta", "xi_ii"]
    for name, width in groups.items():
        header += _indexed(name, width)
    header += _indexed("v", traj.v.shape[1])

    xi_diag = traj.xi_diag
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for j, t in enumerate(traj.t):
            v_cells = [_fmt(x) for x in traj.v[j]]
            for k in range(traj.n_agents):
                row = [_fmt(t), str(k + 1)]
                row += [
                    _fmt(s[j, k])
                    for s in (
                        traj.y,
                        traj.y_r,
                        traj.u,
                        traj.theta_tilde,
                        traj.eta_ff,
                        traj.u_star,
                        traj.zeta,
                        xi_diag,
                    )
                ]
                for name, width in groups.items():
                    arrays = getattr(traj, name)
                    values = [_fmt(x) for x in arrays[k][j]] if arrays else []
                    row += values + [""] * (width - len(values))
                writer.writerow(row + v_cells)
    return path


def write_tracking_csv(traj: Trajectory, path: str | Path) -> Path:
    """Plot-ready outputs and references: ``t, y_1..y_N, y_r_1..y_r_N``."""
    path = Path(path)
    n = traj.n_agents
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t"] + _indexed("y", n) + _indexed("y_r", n))
        for j, t in enumerate(traj.t):
            writer.writerow(
                [_fmt(t)] + [_fmt(x) for x in traj.y[j]] + [_fmt(x) for x in traj.y_r[j]]
            )
    return path


def write_metadata(traj: Trajectory, report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    payload = dict(traj.metadata)
    payload["metrics"] = report.model_dump(mode="json")
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def write_outputs(traj: Trajectory, out_dir: str | Path) -> MetricsReport:
    """Write ``trajectory.csv`` and ``metadata.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    diag = Scenario.model_validate(traj.metadata["scenario"]).diagnostics
    report = metrics(traj, traj.metadata["s_star"], diag.settle_band, diag.residual_window)
    write_trajectory_csv(traj, out_dir / "trajectory.csv")
    write_metadata(traj, report, out_dir / "metadata.json")
    return report
