"""Convergence studies towards the first-order limit and audits of the moment bounds."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from detlimit.dynamics import OpenLoopBundle, integrate_batch
from detlimit.equilibrium import (EquilibriumSolution, auto_half_width, save_solution, solve_minimax_mfg,
                                  solve_stochastic_mfg)
from detlimit.errors import NumericalError, ValidationError
from detlimit.generator import epsilon_estimate, growth_audit, make_sample
from detlimit.measures import EmpiricalMeasure, FlowOfProbabilities, wasserstein2
from detlimit.scenario import Scenario
from detlimit.value import GridConfig, ValueGrid

log = logging.getLogger(__name__)

COLUMNS = (
    "n", "eps", "sup_w2", "value_error", "coupled_distance", "closeness_ratio", "coupled_ratio",
    "max_second_moment", "C1", "C1_ok", "moment_growth_ratio", "C3", "C3_ok", "converged", "iterations",
)


def derived_seed(master: int, *tags: int) -> int:
    """Independent 32-bit seed for a (master, tags) key."""
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


# --- constants ------------------------------------------------------------------


def constant_C1(M0: float, M: float, T: float) -> float:
    return (M0 + 2 * M * T) * math.exp(7 * M * T)


def constant_C3(C1: float, M: float, T: float) -> float:
    return 2 * M * T * (1 + C1) * math.exp(5 * M * T)


def constant_C5(C1: float, K: float, T: float) -> float:
    """c10' T exp(c9' T) with c7' = 5K + 5, c8' = c1' + c6'."""
    c7 = 5 * K + 5
    c1, c6 = 1 + 2 * C1, 0.5 + C1
    c9 = math.exp(c7 * T) * K
    c10 = math.exp(c7 * T) * (c1 + c6)
    return c10 * T * math.exp(c9 * T)


# --- per-n quantities -----------------------------------------------------------


def weighted_value_error(V1: ValueGrid, V2: ValueGrid) -> float:
    """sup over grid nodes and times of |V1 - V2| / (1 + |x|^2)."""
    if V1.values.shape != V2.values.shape or abs(V1.half_width - V2.half_width) > 1e-12:
        raise ValidationError("value grids must share the lattice")
    nodes = V1.nodes()
    w = (1.0 + np.einsum("bi,bi->b", nodes, nodes)).reshape(V1.values.shape[1:])
    return float((np.abs(V1.values - V2.values) / w).max())


def flow_distance(a: FlowOfProbabilities, b: FlowOfProbabilities) -> np.ndarray:
    """W2 at every node of a's grid (b is sampled at the nearest node)."""
    return np.array([wasserstein2(a[i], b.at(t)) for i, t in enumerate(a.time_grid)])


def coupled_auxiliary(sol: EquilibriumSolution, spec) -> np.ndarray:
    """Deterministic paths driven by the realized controls from the same initial states.

    The law of these paths is the self-consistent flow of the coupled process.
    """
    ens = sol.ensemble
    policy = OpenLoopBundle(ens.time_grid, ens.controls)
    x, _, _ = integrate_batch(spec.deterministic_part(), None, ens.x[:, 0], policy, time_grid=ens.time_grid)
    return x


@dataclass
class StudyRow:
    n: int
    eps: float
    sup_w2: float
    value_error: float
    coupled_distance: float
    closeness_ratio: float
    coupled_ratio: float
    max_second_moment: float
    C1: float
    C1_ok: bool
    moment_growth_ratio: float
    C3: float
    C3_ok: bool
    converged: bool
    iterations: int
    w2_series: np.ndarray = field(repr=False, default=None)
    coupled_series: np.ndarray = field(repr=False, default=None)

    def as_tuple(self):
        return tuple(getattr(self, c) for c in COLUMNS)


@dataclass
class ConvergenceReport:
    scenario: str
    rows: list
    noise_floor_w2: float
    noise_floor_value: float
    C5_paper: float
    C5_fit: float
    C6_fit: float
    minimax_converged: bool
    runtimes: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r.as_tuple()])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "scenario": self.scenario, "noise_floor_w2": self.noise_floor_w2,
            "noise_floor_value": self.noise_floor_value, "C5_paper": self.C5_paper, "C5_fit": self.C5_fit,
            "C6_fit": self.C6_fit, "minimax_converged": self.minimax_converged,
            "all_finite": all(np.isfinite(float(v)) for r in self.rows for v in r.as_tuple()),
        }


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9e}"


def _initial_moment_bound(scenario: Scenario) -> float:
    return max(scenario.initial_for(n).second_moment for n in scenario.n_list) if scenario.n_list else scenario.initial.second_moment


def epsilons(scenario: Scenario) -> list:
    """Sampled epsilon^n on a small (t, x, m) sample that includes the origin and a Dirac law."""
    d = scenario.dim
    xs = [np.zeros(d), np.ones(d), -2 * np.ones(d)]
    ms = [EmpiricalMeasure.dirac(np.zeros(d)), scenario.initial]
    sample = make_sample([0.0, scenario.horizon], xs, ms, scenario.limit.controls)
    return epsilon_estimate([scenario.member(n) for n in scenario.n_list], scenario.limit, sample)


def _growth_sample(scenario: Scenario):
    d = scenario.dim
    xs = [np.zeros(d), np.ones(d), -3 * np.ones(d), 5 * np.eye(d)[0]]
    ms = [EmpiricalMeasure.dirac(np.zeros(d)), scenario.initial]
    return make_sample([0.0, scenario.horizon / 2, scenario.horizon], xs, ms, scenario.limit.controls)


def _grid(scenario: Scenario, minimax: EquilibriumSolution) -> GridConfig:
    return GridConfig(minimax.value.half_width, scenario.solver.h)


def solve_limit(scenario: Scenario) -> EquilibriumSolution:
    return solve_minimax_mfg(scenario.limit, scenario.initial, scenario.solver)


def _moment_checks(sol: EquilibriumSolution, C1: float, C3: float):
    """max_t s^2 and max_{s<=t} E|Y_t|^2 / (1 + E|Y_s|^2) from the particle flow."""
    m2 = np.array([m.second_moment for m in sol.flow.measures])
    ratio = (m2[None, :] / (1.0 + m2[:, None]))[np.triu_indices(m2.size)].max()
    return float(m2.max()), bool(m2.max() <= C1 * 1.1), float(ratio), bool(ratio <= C3 * 1.1)


def run_convergence_study(scenario: Scenario, out: Optional[Path] = None,
                          minimax: Optional[EquilibriumSolution] = None) -> ConvergenceReport:
    """Limit solve, stochastic solves along the family, coupled process and bound audits."""
    t_start = time.perf_counter()
    runtimes = {}
    if minimax is None:
        minimax = solve_limit(scenario)
    runtimes["minimax"] = time.perf_counter() - t_start
    grid = _grid(scenario, minimax)
    T, M = scenario.horizon, scenario.M
    eps = epsilons(scenario)
    if any(b > a + 1e-15 for a, b in zip(eps, eps[1:])):
        log.warning("epsilon estimates do not decrease along n_list: %s", eps)
    C1 = constant_C1(_initial_moment_bound(scenario), M, T)
    C3 = constant_C3(C1, M, T)
    C5 = constant_C5(C1, scenario.K, T)
    budget = 1.0 + _initial_moment_bound(scenario)

    # noise floor: the limit family member solved by the stochastic route with two seeds
    floor_w2 = floor_v = 0.0
    for k in (1, 2):
        t0 = time.perf_counter()
        cfg = replace(scenario.solver, seed=derived_seed(scenario.solver.seed, 0, k))
        s = solve_stochastic_mfg(scenario.limit, scenario.initial, cfg, grid)
        floor_w2 = max(floor_w2, float(flow_distance(s.flow, minimax.flow).max()))
        floor_v = max(floor_v, weighted_value_error(s.value, minimax.value))
        runtimes[f"floor_{k}"] = time.perf_counter() - t0

    rows = []
    for n, e in zip(scenario.n_list, eps):
        t0 = time.perf_counter()
        spec = scenario.member(n)
        cfg = replace(scenario.solver, seed=derived_seed(scenario.solver.seed, n))
        try:
            sol = solve_stochastic_mfg(spec, scenario.initial_for(n), cfg, grid)
        except NumericalError as exc:
            raise NumericalError(f"stochastic solve failed for n={n}: {exc}") from exc
        w2 = flow_distance(sol.flow, minimax.flow)
        X = coupled_auxiliary(sol, spec)
        Y = sol.ensemble.x
        coupled = np.einsum("ptd,ptd->pt", Y - X, Y - X).mean(axis=0)
        aux = FlowOfProbabilities.from_particles(sol.ensemble.time_grid, X)
        close = np.array([wasserstein2(sol.ensemble.law_at(i), aux[i]) ** 2 for i in range(aux.time_grid.size)])
        m2max, c1ok, growth, c3ok = _moment_checks(sol, C1, C3)
        rows.append(StudyRow(
            n=n, eps=float(e), sup_w2=float(w2.max()), value_error=weighted_value_error(sol.value, minimax.value),
            coupled_distance=float(coupled.max()), closeness_ratio=float(close.max() / e) if e > 0 else 0.0,
            coupled_ratio=float(coupled.max() / (e * budget)) if e > 0 else 0.0,
            max_second_moment=m2max, C1=C1, C1_ok=c1ok, moment_growth_ratio=growth, C3=C3, C3_ok=c3ok,
            converged=sol.converged, iterations=int(sol.diagnostics["iterations"]),
            w2_series=w2, coupled_series=coupled))
        runtimes[f"n={n}"] = time.perf_counter() - t0
        if out is not None:
            save_solution(sol, Path(out) / f"n_{n}")
        log.info("n=%d eps=%.3g sup_w2=%.4g value_error=%.4g", n, e, rows[-1].sup_w2, rows[-1].value_error)
    runtimes["total"] = time.perf_counter() - t_start
    report = ConvergenceReport(
        scenario.name, rows, floor_w2, floor_v, C5,
        C5_fit=max((r.closeness_ratio for r in rows), default=0.0),
        C6_fit=max((r.coupled_ratio for r in rows), default=0.0),
        minimax_converged=minimax.converged, runtimes=runtimes)
    if out is not None:
        write_report(report, minimax, Path(out))
    return report


def write_report(report: ConvergenceReport, minimax: EquilibriumSolution, out: Path) -> None:
    """CSV, plot-data series and summary; runtimes go to their own file so the CSV stays reproducible."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "convergence.csv").write_text(report.to_csv())
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    (out / "runtimes.json").write_text(json.dumps(report.runtimes, indent=2, sort_keys=True))
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    ns = report.column("n")
    for col in ("sup_w2", "value_error", "coupled_distance", "closeness_ratio", "coupled_ratio"):
        np.savetxt(plots / f"{col}_vs_n.dat", np.column_stack([ns, report.column(col)]),
                   fmt="%.9e", header=f"n {col}", comments="# ")
    tg = minimax.flow.time_grid
    for r in report.rows:
        np.savetxt(plots / f"w2_vs_t_n{r.n}.dat", np.column_stack([tg, r.w2_series]), fmt="%.9e",
                   header="t w2", comments="# ")
    save_solution(minimax, out / "minimax")


# --- bounds audit ---------------------------------------------------------------


@dataclass
class BoundsAudit:
    n: int
    eps: float
    growth_passed: bool
    M0: float
    C1: float
    max_second_moment: float
    C1_ok: bool
    C3: float
    moment_growth_ratio: float
    C3_ok: bool
    C5: float
    closeness: float          # max_t W2^2(zeta^n, mu^n)
    C5_ok: bool
    coupled_distance: float   # max_t E|Y - X|^2
    C6_fit: float

    @property
    def passed(self) -> bool:
        return self.C1_ok and self.C3_ok and self.C5_ok

    def as_dict(self) -> dict:
        d = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in self.__dict__.items()}
        d["passed"] = self.passed
        return d


def run_bounds_audit(scenario: Scenario, n: int) -> BoundsAudit:
    """Empirical left-hand sides of the moment and closeness bounds against the explicit constants."""
    spec = scenario.member(n)
    audit = growth_audit(spec, scenario.M, _growth_sample(scenario), limit=scenario.limit)
    if not audit.passed:
        raise ValidationError(
            f"growth audit failed for M={scenario.M}: drift ratio {audit.max_drift_ratio:.3g}, "
            f"noise ratio {audit.max_noise_ratio:.3g}; the explicit constants would be meaningless")
    T, M = scenario.horizon, scenario.M
    M0 = _initial_moment_bound(scenario)
    C1 = constant_C1(M0, M, T)
    C3 = constant_C3(C1, M, T)
    C5 = constant_C5(C1, scenario.K, T)
    cfg = replace(scenario.solver, seed=derived_seed(scenario.solver.seed, n))
    sol = solve_stochastic_mfg(spec, scenario.initial_for(n), cfg)
    m2max, c1ok, growth, c3ok = _moment_checks(sol, C1, C3)
    X = coupled_auxiliary(sol, spec)
    Y = sol.ensemble.x
    coupled = float(np.einsum("ptd,ptd->pt", Y - X, Y - X).mean(axis=0).max())
    aux = FlowOfProbabilities.from_particles(sol.ensemble.time_grid, X)
    close = max(wasserstein2(sol.ensemble.law_at(i), aux[i]) ** 2 for i in range(aux.time_grid.size))
    e = epsilon_estimate([spec], scenario.limit, make_sample(
        [0.0], [np.zeros(scenario.dim)], [EmpiricalMeasure.dirac(np.zeros(scenario.dim))], scenario.limit.controls))[0]
    return BoundsAudit(n, e, audit.passed, M0, C1, m2max, c1ok, C3, growth, c3ok, C5, close,
                       bool(close <= C5 * e * 1.1 + 1e-12), coupled,
                       coupled / (e * (1 + M0)) if e > 0 else 0.0)
