"""Fixed-point solvers for the stochastic and the first-order mean field game."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from detlimit.dynamics import ConstantPolicy, a_priori_bound, integrate_batch
from detlimit.errors import ValidationError
from detlimit.generator import GeneratorSpec
from detlimit.measures import (EmpiricalMeasure, FlowOfProbabilities, PathMeasure, pushforward_at,
                               wasserstein2)
from detlimit.simulator import PathEnsemble, SimConfig, empirical_flow, simulate
from detlimit.value import (DeviationConfig, FeedbackPolicy, GridConfig, ValueGrid, check_deviation,
                            evaluate, expected_payoff, solve_deterministic_value, solve_stochastic_value)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    horizon: float = 1.0
    dt: float = 1 / 200
    h: float = 1 / 100
    half_width: Optional[float] = None  # None: from the a-priori bound plus 20%
    n_particles: int = 10_000
    seed: int = 0
    max_iter: int = 30
    damping: float = 0.7
    tol: float = 1e-3
    growth_M: float = 1.0

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValidationError("damping must lie in (0, 1]")
        if self.dt <= 0 or self.h <= 0 or self.horizon <= 0:
            raise ValidationError("dt, h and horizon must be positive")

    @property
    def time_grid(self) -> np.ndarray:
        n = int(round(self.horizon / self.dt))
        return np.linspace(0.0, self.horizon, n + 1)


@dataclass(eq=False)
class EquilibriumSolution:
    kind: str  # "stochastic" or "minimax"
    value: ValueGrid
    flow: FlowOfProbabilities
    initial: EmpiricalMeasure
    traj_measure: Optional[PathMeasure] = None
    ensemble: Optional[PathEnsemble] = None
    reference_flow: Optional[FlowOfProbabilities] = None  # the flow the value was solved against
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", False))


def auto_half_width(m0: EmpiricalMeasure, flow: FlowOfProbabilities, M: float, T: float) -> float:
    """Box half width from the Gronwall bound on the initial support, plus 20%."""
    radius = float(np.linalg.norm(m0.points, axis=1).max())
    sup_sigma = max(m.sigma for m in flow.measures)
    return 1.2 * a_priori_bound(radius, M, T, sup_sigma)


def _flow_increment(a: np.ndarray, b: np.ndarray, weights: np.ndarray) -> float:
    """max over nodes of W2 between particle arrays (P, nt, d).

    Exact in 1-D; otherwise the index-aligned coupling, which bounds W2 from above.
    """
    if a.shape[2] == 1:
        return max(wasserstein2(EmpiricalMeasure(a[:, i], weights), EmpiricalMeasure(b[:, i], weights), "exact1d")
                   for i in range(a.shape[1]))
    sq = np.einsum("ptd,ptd->pt", a - b, a - b)
    return float(np.sqrt((weights @ sq).max()))


def _mix(old: np.ndarray, new: np.ndarray, beta: float, seed: int, k: int) -> np.ndarray:
    """Replace each particle path by its best-response counterpart with probability beta."""
    if beta >= 1.0:
        return new.copy()
    mask = np.random.default_rng([seed, 3, k]).random(old.shape[0]) < beta
    out = old.copy()
    out[mask] = new[mask]
    return out


def free_control_index(spec: GeneratorSpec) -> int:
    """The control closest to the origin stands in for 'uncontrolled'."""
    return spec.controls.index_nearest(np.zeros(spec.controls.dim))


def solve_stochastic_mfg(spec: GeneratorSpec, m0n: EmpiricalMeasure, config: SolverConfig,
                         grid: Optional[GridConfig] = None) -> EquilibriumSolution:
    """Damped Picard iteration for the probabilistic solution.

    Starts from the free-flow law, alternates value solve, feedback extraction
    and particle simulation, and mixes flows particle-wise with weight
    ``damping``. The returned flow is the law of the optimally controlled
    process for the last iterate; ``reference_flow`` is that iterate.
    """
    sim = SimConfig(config.n_particles, config.dt, config.seed, config.horizon)
    tg = config.time_grid
    free = simulate(spec, ConstantPolicy(free_control_index(spec)), None, m0n, sim)
    zeta_x = free.x
    w = np.full(config.n_particles, 1.0 / config.n_particles)
    if grid is None:
        grid = GridConfig(half_width=config.half_width or auto_half_width(
            m0n, empirical_flow(free), config.growth_M, config.horizon), h=config.h)
    history = []
    converged = False
    for k in range(config.max_iter):
        zeta = FlowOfProbabilities.from_particles(tg, zeta_x)
        V = solve_stochastic_value(spec, zeta, grid)
        ens = simulate(spec, FeedbackPolicy(V, spec), zeta, m0n, sim)
        mixed = _mix(zeta_x, ens.x, config.damping, config.seed, k)
        inc = _flow_increment(mixed, zeta_x, w)
        history.append(inc)
        log.debug("stochastic iteration %d: increment %.3e", k, inc)
        zeta_x = mixed
        if inc < config.tol:
            converged = True
            break
    diagnostics = {
        "converged": converged, "iterations": len(history), "increments": history,
        "value": V.diagnostics, "n_particles": config.n_particles, "dt": config.dt,
        "seed": config.seed, "damping": config.damping, "tol": config.tol,
    }
    return EquilibriumSolution("stochastic", V, empirical_flow(ens), ens.law_at(0), None, ens, zeta, diagnostics)


def solve_minimax_mfg(spec: GeneratorSpec, m0: EmpiricalMeasure, config: SolverConfig,
                      grid: Optional[GridConfig] = None) -> EquilibriumSolution:
    """Same loop with deterministic characteristics; particles are the atoms of m0.

    The trajectory measure holds the final best-response paths with their
    accumulated payoff and the flow is its time marginals.
    """
    if not spec.is_deterministic:
        raise ValidationError("solve_minimax_mfg needs a deterministic generator")
    tg = config.time_grid
    w = m0.weights
    zeta_x, _, _ = integrate_batch(spec, None, m0.points, ConstantPolicy(free_control_index(spec)),
                                   time_grid=tg, weights=w)
    if grid is None:
        grid = GridConfig(half_width=config.half_width or auto_half_width(
            m0, FlowOfProbabilities.from_particles(tg, zeta_x, w), config.growth_M, config.horizon), h=config.h)
    history = []
    converged = False
    for k in range(config.max_iter):
        zeta = FlowOfProbabilities.from_particles(tg, zeta_x, w)
        V = solve_deterministic_value(spec, zeta, grid)
        x, z, ctrl = integrate_batch(spec, zeta, m0.points, FeedbackPolicy(V, spec), weights=w)
        mixed = _mix(zeta_x, x, config.damping, config.seed, k)
        inc = _flow_increment(mixed, zeta_x, w)
        history.append(inc)
        log.debug("minimax iteration %d: increment %.3e", k, inc)
        zeta_x = mixed
        if inc < config.tol:
            converged = True
            break
    chi = PathMeasure(tg, x, z, w)
    flow = FlowOfProbabilities(tg, tuple(pushforward_at(chi, t) for t in tg))
    diagnostics = {
        "converged": converged, "iterations": len(history), "increments": history,
        "value": V.diagnostics, "n_particles": int(m0.size), "dt": config.dt,
        "seed": config.seed, "damping": config.damping, "tol": config.tol,
    }
    return EquilibriumSolution("minimax", V, flow, m0, chi, None, zeta, diagnostics)


@dataclass
class MinimaxReport:
    initial_gap: float
    pushforward_gap: float
    along_path_gap: float
    tol: float
    worst_path: int = -1

    @property
    def initial_ok(self) -> bool:
        return self.initial_gap <= 1e-12

    @property
    def pushforward_ok(self) -> bool:
        return self.pushforward_gap <= 1e-12

    @property
    def along_path_ok(self) -> bool:
        return self.along_path_gap <= self.tol

    @property
    def passed(self) -> bool:
        return self.initial_ok and self.pushforward_ok and self.along_path_ok


def along_path_residuals(sol: EquilibriumSolution, spec: GeneratorSpec) -> np.ndarray:
    """|V(s, x(s)) - (sigma(x(T), flow_T) + z(T) - z(s))| for every path and node; (P, nt)."""
    chi = sol.traj_measure
    V = sol.value
    P, nt, _ = chi.x.shape
    terminal = np.asarray(spec.terminal(chi.x[:, -1], sol.flow[-1]), float)
    out = np.empty((P, nt))
    for i in range(nt):
        vi = V.interpolate(int(np.argmin(np.abs(V.time_grid - chi.time_grid[i]))), chi.x[:, i])
        out[:, i] = np.abs(vi - (terminal + chi.z[:, -1] - chi.z[:, i]))
    return out


def verify_minimax(sol: EquilibriumSolution, spec: GeneratorSpec, tol: float) -> MinimaxReport:
    """Initial condition, marginal consistency and the along-path optimality identity."""
    if sol.traj_measure is None:
        raise ValidationError("verify_minimax needs a trajectory measure")
    chi = sol.traj_measure
    a = wasserstein2(sol.flow[0], sol.initial)
    b = max(wasserstein2(sol.flow[i], pushforward_at(chi, t)) for i, t in enumerate(sol.flow.time_grid))
    res = along_path_residuals(sol, spec)
    worst = int(np.unravel_index(np.argmax(res), res.shape)[0])
    return MinimaxReport(a, b, float(res.max()), tol, worst)


@dataclass
class ProbabilisticReport:
    achieved_gap: float        # max |payoff(optimal) - V| - 3 SE over starts
    flow_gap: float            # sup_t W2(flow, re-derived best-response flow)
    deviation_excess: float    # max (gap - 3 SE) over the policy dictionary
    tol: float
    details: dict = field(default_factory=dict)

    @property
    def achieved_ok(self) -> bool:
        return self.achieved_gap <= self.tol

    @property
    def flow_ok(self) -> bool:
        return self.flow_gap <= self.tol

    @property
    def deviation_ok(self) -> bool:
        return self.deviation_excess <= self.tol

    @property
    def passed(self) -> bool:
        return self.achieved_ok and self.flow_ok and self.deviation_ok


def verify_probabilistic(sol: EquilibriumSolution, spec: GeneratorSpec, policies: Sequence,
                         tol: float, config: DeviationConfig) -> ProbabilisticReport:
    """Checks of the achieved value, flow consistency and the deviation inequality."""
    zeta = sol.reference_flow or sol.flow
    opt = FeedbackPolicy(sol.value, spec)
    achieved = []
    for s, xi in config.starts:
        mean, se = expected_payoff(spec, opt, zeta, (s, xi), config)
        achieved.append(abs(mean - evaluate(sol.value, s, xi)) - 3 * se)
    # Re-derive the best response to the reported flow with the solver's own seed.
    d = sol.diagnostics
    V2 = solve_stochastic_value(spec, sol.flow, GridConfig(sol.value.half_width, sol.value.h))
    sim = SimConfig(int(d.get("n_particles", sol.initial.size)), float(d.get("dt", sol.flow.time_grid[1])),
                    int(d.get("seed", 0)), sol.flow.horizon)
    ens = simulate(spec, FeedbackPolicy(V2, spec), sol.flow, sol.initial, sim,
                   initial_states=sol.ensemble.x[:, 0] if sol.ensemble is not None else None)
    resim = empirical_flow(ens, sol.flow.time_grid)
    flow_gap = max(wasserstein2(a, b) for a, b in zip(sol.flow.measures, resim.measures))
    dev = check_deviation(sol.value, spec, zeta, list(policies), config)
    return ProbabilisticReport(float(max(achieved)), float(flow_gap), dev.max_excess, tol,
                               {"achieved": achieved, "max_gap": dev.max_gap})


# --- serialization -------------------------------------------------------------


def save_solution(sol: EquilibriumSolution, directory) -> None:
    """value.npz + flow.npz + chi.npz (minimax only) + diagnostics.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sol.value.save(d / "value.npz")
    xs = np.stack([m.points for m in sol.flow.measures], axis=1)
    extra = {}
    if sol.reference_flow is not None:
        extra["reference_points"] = np.stack([m.points for m in sol.reference_flow.measures], axis=1)
        extra["reference_weights"] = sol.reference_flow[0].weights
    np.savez(d / "flow.npz", version=1, time_grid=sol.flow.time_grid, points=xs, weights=sol.flow[0].weights,
             initial_points=sol.initial.points, initial_weights=sol.initial.weights, **extra)
    if sol.traj_measure is not None:
        chi = sol.traj_measure
        np.savez(d / "chi.npz", version=1, time_grid=chi.time_grid, x=chi.x, z=chi.z, weights=chi.weights)
    if sol.ensemble is not None:
        np.savez(d / "ensemble_initial.npz", x0=sol.ensemble.x[:, 0])
    diag = dict(sol.diagnostics, kind=sol.kind)
    (d / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True, default=float))


def load_solution(directory) -> EquilibriumSolution:
    d = Path(directory)
    if not (d / "diagnostics.json").exists():
        raise ValidationError(f"no solution found in {d}")
    diag = json.loads((d / "diagnostics.json").read_text())
    V = ValueGrid.load(d / "value.npz")
    with np.load(d / "flow.npz") as f:
        tg = f["time_grid"]
        flow = FlowOfProbabilities.from_particles(tg, f["points"], f["weights"])
        initial = EmpiricalMeasure(f["initial_points"], f["initial_weights"])
        ref = (FlowOfProbabilities.from_particles(tg, f["reference_points"], f["reference_weights"])
               if "reference_points" in f else None)
    chi = None
    if (d / "chi.npz").exists():
        with np.load(d / "chi.npz") as f:
            chi = PathMeasure(f["time_grid"], f["x"], f["z"], f["weights"])
    ens = None
    if (d / "ensemble_initial.npz").exists():
        with np.load(d / "ensemble_initial.npz") as f:
            x0 = f["x0"]
        ens = PathEnsemble(tg, x0[:, None, :], np.zeros((x0.shape[0], 1)), np.zeros((x0.shape[0], 0), int),
                           np.zeros((x0.shape[0], 0), bool), np.zeros((1, 1)), int(diag.get("seed", 0)),
                           float(diag.get("dt", tg[1])))
    return EquilibriumSolution(diag["kind"], V, flow, initial, chi, ens, ref, diag)
