"""Tests for the closed-loop simulator, metrics and writers."""

import csv
import json
import time

import numpy as np
import pytest

from dooc import __version__
from dooc.controller import ControlMode, control_output, state_feedback_output, theta_tilde
from dooc.coordinator import CoordinatorState, coordinator_rhs
from dooc.errors import (
    DegenerateStateError,
    DivergenceError,
    GainValidationError,
    ScenarioValidationError,
)
from dooc.models import parse_scenario
from dooc.observer import observer_rhs
from dooc.plant import FAMILIES, exosystem_rhs, plant_rhs, register_family
from dooc.regulator import regulator_rhs
from dooc.sim import (
    ClosedLoop,
    Trajectory,
    fit_rate,
    metrics,
    rk4_step,
    run,
    run_many,
    write_tracking_csv,
    write_outputs,
    write_trajectory_csv,
)

from .conftest import EXAMPLE_R, single_agent_raw


def _constant_trajectory(value, n=2, count=11):
    t = np.linspace(0.0, 1.0, count)
    full = np.full((count, n), value)
    nan = np.full((count, n), np.nan)
    return Trajectory(
        t=t,
        y=full,
        y_r=full,
        u=np.zeros((count, n)),
        theta_tilde=nan,
        eta_ff=nan,
        u_star=nan,
        zeta=np.zeros((count, n)),
        xi=np.tile(np.full((n, n), 1.0 / n), (count, 1, 1)),
        v=np.zeros((count, 2)),
    )


# ── Integrator ────────────────────────────────────────────────


class TestRk4Step:

    def test_exponential(self):
        state = np.array([1.0])
        for _ in range(100):
            state = rk4_step(lambda x: -x, state, 0.01)
        assert state[0] == pytest.approx(np.exp(-1.0), abs=1e-10)

    def test_names_non_finite_block(self):
        blocks = [("a", slice(0, 1)), ("b", slice(1, 2))]

        def rhs(x):
            return np.array([0.0, np.inf])

        with pytest.raises(DivergenceError) as exc:
            rk4_step(rhs, np.zeros(2), 0.1, blocks, t=2.5)
        assert exc.value.block == "b"
        assert exc.value.time == 2.5
        assert "block=b" in str(exc.value)


# ── Compile ───────────────────────────────────────────────────


class TestCompile:

    def test_example_layout(self, example_scenario):
        loop = ClosedLoop.compile(example_scenario)
        assert loop.s_star == pytest.approx(2.0, abs=1e-12)
        np.testing.assert_allclose(loop.r, EXAMPLE_R, atol=1e-12)
        # coordinator 2n + n^2, agents A: 1 + 2 + 2 + 2, B: 3 + 3 + 3, exosystem 2
        assert loop.size == 35 + 2 * 7 + 3 * 9 + 2
        assert [b[0] for b in loop.blocks()][:4] == [
            "coordinator.y_r",
            "coordinator.zeta",
            "coordinator.xi",
            "agent1.z",
        ]
        assert loop.report.passed

    def test_initial_state(self, example_scenario):
        loop = ClosedLoop.compile(example_scenario)
        state = loop.initial_state()
        agent = loop.agents[2]
        assert state[agent.x].tolist() == [1.0, -0.2, 0.1]
        assert state[agent.x_tilde].tolist() == [1.0, 0.0, 0.0]
        assert state[loop.v_slice].tolist() == [1.0, 0.0]

    def test_gain_failure_lists_failed_checks(self):
        raw = single_agent_raw()
        raw["controller"]["gamma"] = [1.0, -1.0]
        raw["controller"]["K"] = -1.0
        with pytest.raises(GainValidationError) as exc:
            ClosedLoop.compile(parse_scenario(raw))
        failed = [c.name for c in exc.value.report.checks if not c.passed]
        assert failed == ["agent1.gamma_hurwitz", "agent1.K"]

    def test_wrong_coefficient_count(self):
        raw = single_agent_raw()
        raw["plants"][0]["c"] = [1.0, 2.0]
        with pytest.raises(ScenarioValidationError, match="coefficients"):
            ClosedLoop.compile(parse_scenario(raw))

    def test_not_strongly_connected(self):
        raw = single_agent_raw()
        raw["graph"] = {"nodes": 2, "edges": [{"from": 1, "to": 2}]}
        raw["costs"] *= 2
        raw["plants"] *= 2
        raw["coordinator"]["y_r0"] = None
        with pytest.raises(ScenarioValidationError, match="strongly connected"):
            ClosedLoop.compile(parse_scenario(raw))


# ── Run ───────────────────────────────────────────────────────


class TestRun:

    def test_single_linear_agent_tracks_reference(self, single_agent_scenario):
        traj = run(single_agent_scenario)
        assert traj.t[-1] == pytest.approx(25.0)
        assert abs(traj.y[-1, 0] - 1.0) < 1e-4
        assert np.all(traj.y_r == 1.0)

    def test_record_grid(self, short_example_scenario):
        traj = run(short_example_scenario)
        np.testing.assert_allclose(traj.t, np.arange(7) * 0.005, atol=1e-12)
        assert traj.y.shape == (7, 5)
        assert traj.xi.shape == (7, 5, 5)
        assert [a.shape[1] for a in traj.x] == [2, 2, 3, 3, 3]
        assert [a.shape[1] for a in traj.eta] == [2, 2, 3, 3, 3]

    def test_record_grid_includes_final_step(self):
        raw = single_agent_raw()
        raw["integration"] = {"dt": 0.01, "t_final": 0.25, "record_stride": 10}
        traj = run(parse_scenario(raw))
        np.testing.assert_allclose(traj.t, [0.0, 0.1, 0.2, 0.25], atol=1e-12)

    def test_deterministic(self, short_example_scenario):
        first, second = run(short_example_scenario), run(short_example_scenario)
        for name in ("y", "y_r", "u", "eta_ff", "zeta", "xi", "v"):
            assert np.array_equal(getattr(first, name), getattr(second, name))

    def test_finite_and_coordinator_invariants(self, short_example_scenario):
        traj = run(short_example_scenario)
        assert np.all(np.isfinite(traj.y))
        assert np.all(np.isfinite(traj.u))
        assert np.max(np.abs(traj.xi.sum(axis=2) - 1.0)) <= 1e-12
        assert np.all(traj.xi_diag > 0)

    def test_oracle_columns(self, short_example_scenario):
        traj = run(short_example_scenario)
        assert traj.u_star[0, 0] == 0.0
        p3 = traj.metadata["agents"][2]["p"][2]
        assert traj.u_star[0, 2] == pytest.approx(-(13.0 + 8.0 * p3) / 0.005)

    def test_seed_changes_uncertainty(self, short_example_scenario):
        other = short_example_scenario.with_overrides(["seed=1"])
        p0 = ClosedLoop.compile(short_example_scenario).agents[0].plant.p
        p1 = ClosedLoop.compile(other).agents[0].plant.p
        assert p0 != p1

    def test_state_feedback_mode(self, short_example_scenario):
        traj = run(short_example_scenario.with_overrides(["controller.mode=state-feedback"]))
        assert np.all(np.isfinite(traj.u))
        assert traj.metadata["scenario"]["controller"]["mode"] == "state-feedback"

    def test_coordinator_only(self, ring_scenario):
        traj = run(ring_scenario)
        assert np.all(np.isnan(traj.u))
        assert np.array_equal(traj.y, traj.y_r)
        assert traj.x == []
        assert np.max(np.abs(traj.xi.sum(axis=2) - 1.0)) <= 1e-12

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_time_and_block(self):
        raw = single_agent_raw()
        raw["integration"] = {"dt": 0.5, "t_final": 100.0, "record_stride": 1}
        with pytest.raises(DivergenceError) as exc:
            run(parse_scenario(raw))
        assert exc.value.time is not None
        assert exc.value.block.startswith("agent1.")
        assert exc.value.exit_code == 3

    def test_zero_dynamics_reference(self, short_example_scenario):
        traj = run(short_example_scenario)
        assert np.all(np.isfinite(traj.z_star[:, :2]))
        assert np.all(np.isnan(traj.z_star[:, 2:]))
        report = metrics(traj, 2.0)
        assert report.zero_dynamics_error[2:] == [None, None, None]
        window = traj.t >= traj.t[-1] - 0.2 * traj.t[-1]
        expected = np.max(np.abs(traj.z[0][window, 0] - traj.z_star[window, 0]))
        assert report.zero_dynamics_error[0] == pytest.approx(expected)

    def test_zero_dynamics_offset_gain(self, short_example_scenario):
        shifted = short_example_scenario.with_overrides(["diagnostics.z_offset_gain=0.5"])
        base, moved = run(short_example_scenario), run(shifted)
        np.testing.assert_allclose(moved.z_star[:, :2] - base.z_star[:, :2], 0.5 * 2.0)

    def test_prefix(self, short_example_scenario):
        traj = run(short_example_scenario)
        head = traj.prefix(0.01)
        assert head.t.size == 3
        assert head.x[2].shape == (3, 3)

    def test_metadata(self, short_example_scenario):
        meta = run(short_example_scenario).metadata
        assert meta["version"] == __version__
        assert meta["seed"] == 0
        assert meta["s_star"] == pytest.approx(2.0)
        assert len(meta["agents"]) == 5
        assert meta["agents"][3]["sylvester_residual"] <= 1e-10

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_run_many_captures_errors(self, ring_scenario):
        bad = single_agent_raw()
        bad["integration"] = {"dt": 0.5, "t_final": 100.0, "record_stride": 1}
        results = run_many([ring_scenario, parse_scenario(bad)], capture_errors=True)
        assert isinstance(results[0], Trajectory)
        assert isinstance(results[1], DivergenceError)


# ── Metrics ───────────────────────────────────────────────────


class TestMetrics:

    def test_constant_trajectory(self):
        report = metrics(_constant_trajectory(2.0), s_star=2.0)
        assert report.final_error == 0.0
        assert report.settling_times == [0.0, 0.0]
        assert report.sup_u == [0.0, 0.0]
        assert report.im_residual == [None, None]
        assert report.reference_rate is None
        assert report.xi_row_sum_error == 0.0
        assert report.xi_diag_min == 0.5

    def test_never_settles(self):
        report = metrics(_constant_trajectory(3.0), s_star=2.0)
        assert report.settling_times == [None, None]
        assert report.final_error == 1.0

    def test_zero_dynamics_error_needs_reference(self):
        traj = _constant_trajectory(2.0)
        traj.z = [np.full((11, 1), 0.5), np.zeros((11, 0))]
        assert metrics(traj, s_star=2.0).zero_dynamics_error == [None, None]
        traj.z_star = np.column_stack([np.full(11, 0.25), np.full(11, np.nan)])
        assert metrics(traj, s_star=2.0).zero_dynamics_error == [0.25, None]

    def test_fit_rate(self):
        t = np.linspace(0.0, 10.0, 101)
        assert fit_rate(t, 3.0 * np.exp(-0.5 * t)) == pytest.approx(-0.5)

    def test_fit_rate_ignores_round_off(self):
        t = np.linspace(0.0, 10.0, 101)
        assert fit_rate(t, np.full(101, 1e-14)) is None


# ── Loop kernel ───────────────────────────────────────────────


def _composed_rhs(loop, state):
    """Closed-loop derivative assembled agent by agent from the module operations."""
    n = loop.n
    deriv = np.zeros_like(state)
    coord = CoordinatorState.from_vector(n, state[loop.coord_slice])
    deriv[loop.coord_slice] = coordinator_rhs(
        coord, loop.laplacian, loop.costs, loop.params
    ).to_vector()
    v = state[loop.v_slice]
    deriv[loop.v_slice] = exosystem_rhs(loop.exosystem, v)
    for agent in loop.agents:
        gains, eta = agent.gains, state[agent.eta]
        y_r = state[agent.index - 1]
        if loop.mode == ControlMode.STATE_FEEDBACK:
            theta = theta_tilde(state[agent.x], y_r, gains.g, gains.gamma)
            u = state_feedback_output(theta, gains) + float(agent.regulator.readout @ eta)
        else:
            theta = theta_tilde(state[agent.x_tilde], y_r, gains.g, gains.gamma)
            u = control_output(theta, eta, agent.regulator, gains)
        dz, dx = plant_rhs(agent.plant, state[agent.z], state[agent.x], u, v)
        deriv[agent.z] = dz
        deriv[agent.x] = dx
        deriv[agent.x_tilde] = observer_rhs(agent.observer, state[agent.x][0], state[agent.x_tilde])
        deriv[agent.eta] = regulator_rhs(agent.regulator, u, eta)
    return deriv


def _perturbed_states(loop, count, seed=4):
    rng = np.random.default_rng(seed)
    base = loop.initial_state()
    for _ in range(count):
        yield base + rng.normal(0.0, 0.1, size=base.size)


class TestLoopKernel:

    @pytest.mark.parametrize("mode", ["output-feedback", "state-feedback"])
    def test_matches_module_operations(self, example_scenario, mode):
        loop = ClosedLoop.compile(example_scenario.with_overrides([f"controller.mode={mode}"]))
        for state in _perturbed_states(loop, 5):
            np.testing.assert_allclose(
                loop.rhs(state), _composed_rhs(loop, state), rtol=1e-9, atol=1e-6
            )

    def test_matches_module_operations_with_logistic_costs(self, example_scenario):
        overrides = [f"costs.{i}.kind=logistic_quadratic" for i in range(5)]
        loop = ClosedLoop.compile(example_scenario.with_overrides(overrides))
        assert not loop.kernel.gradient.quadratic
        for state in _perturbed_states(loop, 3):
            np.testing.assert_allclose(
                loop.rhs(state), _composed_rhs(loop, state), rtol=1e-9, atol=1e-6
            )

    def test_coordinator_only(self, ring_scenario):
        loop = ClosedLoop.compile(ring_scenario)
        for state in _perturbed_states(loop, 3):
            np.testing.assert_allclose(
                loop.rhs(state), _composed_rhs(loop, state), rtol=1e-10, atol=1e-12
            )

    def test_inputs_match_signals(self, example_scenario):
        loop = ClosedLoop.compile(example_scenario)
        state = next(_perturbed_states(loop, 1))
        theta, u = loop.inputs(state)
        signals = loop.signals(state)
        np.testing.assert_allclose(theta, signals["theta_tilde"], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(u, signals["u"], rtol=1e-10, atol=1e-9)

    def test_custom_family_falls_back_to_rhs(self):
        def rhs(a, z, x, u, v):
            return np.zeros(0), np.array([x[1], -x[0] - x[1] + a.b * u])

        register_family("damped", order=2, n_z=0, rhs=rhs)
        try:
            raw = single_agent_raw()
            raw["plants"][0].update(family="damped", nominal=[], w=[], x0=[0.3, 0.0])
            raw["regulators"] = [
                {"M": [[0.0, 1.0], [-1.0, -2.0]], "N": [0.0, 1.0], "ell": [-0.64, 0.0]}
            ]
            loop = ClosedLoop.compile(parse_scenario(raw))
            assert loop.kernel.generic == (0,)
            assert loop.kernel.terms == ()
            for state in _perturbed_states(loop, 3):
                np.testing.assert_allclose(
                    loop.rhs(state), _composed_rhs(loop, state), rtol=1e-9, atol=1e-9
                )
        finally:
            FAMILIES.pop("damped", None)

    def test_degenerate_xi_diagonal(self, ring_scenario):
        loop = ClosedLoop.compile(ring_scenario)
        state = loop.initial_state()
        state[loop.kernel.xi_diag[1]] = 0.0
        with pytest.raises(DegenerateStateError) as exc:
            loop.rhs(state)
        assert exc.value.block == "coordinator.xi"

    def test_short_horizon_is_fast(self, example_scenario):
        raw = example_scenario.dump()
        raw["integration"] = {"dt": 1e-4, "t_final": 0.2, "record_stride": 100}
        scn = parse_scenario(raw)
        run(parse_scenario({**raw, "integration": {"dt": 1e-4, "t_final": 1e-3}}))
        start = time.perf_counter()
        traj = run(scn)
        elapsed = time.perf_counter() - start
        assert traj.t[-1] == pytest.approx(0.2)
        assert elapsed < 1.5


# ── Writers ───────────────────────────────────────────────────


class TestWriters:

    def test_trajectory_csv(self, short_example_scenario, tmp_path):
        traj = run(short_example_scenario)
        path = write_trajectory_csv(traj, tmp_path / "trajectory.csv")
        with path.open() as f:
            rows = list(csv.reader(f))
        assert rows[0] == [
            "t", "agent", "y", "y_r", "u", "theta_tilde", "eta_ff", "u_star", "zeta", "xi_ii",
            "z_1", "x_1", "x_2", "x_3", "x_tilde_1", "x_tilde_2", "x_tilde_3",
            "eta_1", "eta_2", "eta_3", "v_1", "v_2",
        ]  # fmt: skip
        assert len(rows) == 1 + 7 * 5
        # family B has no zero dynamics and a third chain state
        agent3 = rows[3]
        assert agent3[1] == "3"
        assert agent3[10] == ""
        assert float(agent3[13]) == 0.1
        agent1 = rows[1]
        assert agent1[13] == ""

    def test_csv_round_trips_floats(self, ring_scenario, tmp_path):
        traj = run(ring_scenario)
        path = write_tracking_csv(traj, tmp_path / "tracking.csv")
        with path.open() as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["t", "y_1", "y_2", "y_3", "y_r_1", "y_r_2", "y_r_3"]
        assert float(rows[-1][4]) == traj.y_r[-1, 0]

    def test_write_outputs(self, ring_scenario, tmp_path):
        report = write_outputs(run(ring_scenario), tmp_path / "out")
        meta = json.loads((tmp_path / "out" / "metadata.json").read_text())
        assert meta["metrics"]["final_reference_error"] == report.final_reference_error
        assert meta["scenario"]["name"] == "ring"
        assert (tmp_path / "out" / "trajectory.csv").exists()
