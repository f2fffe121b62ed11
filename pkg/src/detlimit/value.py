"""Backward grid solvers for the value function.

Both solvers share one monotone semi-Lagrangian kernel. For a node x and a
control u the one-step candidate is

    g dt + (1 - Lambda dt) * mean_k V(x + b dt +/- sqrt(d dt) s_k)
         + sum_j lambda_j dt * V(x + b dt + y_j)

where b is the drift minus the small-jump compensator, s_k are the columns
of sqrt(G) and Lambda is the total jump rate. Without diffusion and jumps it
reduces to g dt + V(x + f dt).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from detlimit.errors import NumericalError, ValidationError
from detlimit.generator import GeneratorSpec, diffusion_matrix, jump_atoms, small_jump_compensator, sqrt_psd
from detlimit.measures import EmpiricalMeasure, FlowOfProbabilities

JUMP_STABILITY = 0.45
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GridConfig:
    half_width: float
    h: float
    margin: float = 0.2  # feet farther than margin * half_width outside the box are reported


@dataclass(eq=False)
class ValueGrid:
    time_grid: np.ndarray
    half_width: float
    h: float
    dim: int
    values: np.ndarray  # (nt, n, ..., n)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def axis(self) -> np.ndarray:
        return -self.half_width + self.h * np.arange(self.n_nodes)

    def nodes(self) -> np.ndarray:
        """All lattice nodes, row-major, shape (n**d, d)."""
        ax = self.axis
        mesh = np.meshgrid(*([ax] * self.dim), indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=1)

    def interpolate(self, i: int, x: np.ndarray) -> np.ndarray:
        return interpolate(self.values[i], -self.half_width, self.h, np.atleast_2d(x))

    def save(self, path) -> None:
        np.savez(path, version=FORMAT_VERSION, T=self.time_grid[-1], L=self.half_width, h=self.h,
                 d=self.dim, time_grid=self.time_grid, values=self.values)

    @classmethod
    def load(cls, path) -> "ValueGrid":
        with np.load(path) as f:
            if int(f["version"]) != FORMAT_VERSION:
                raise ValidationError(f"unsupported value grid version {int(f['version'])}")
            return cls(f["time_grid"], float(f["L"]), float(f["h"]), int(f["d"]), f["values"])


def make_axis(cfg: GridConfig) -> tuple[float, int]:
    """Symmetric lattice containing 0: returns (actual half width, node count)."""
    half = int(math.ceil(cfg.half_width / cfg.h - 1e-9))
    return half * cfg.h, 2 * half + 1


def interpolate(values: np.ndarray, lower: float, h: float, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation on a uniform lattice; linear continuation outside."""
    d = x.shape[1]
    n = values.shape[0]
    s = (x - lower) / h
    i0 = np.clip(np.floor(s), 0, n - 2).astype(np.intp)
    theta = s - i0
    if d == 1:
        v = values
        return v[i0[:, 0]] * (1 - theta[:, 0]) + v[i0[:, 0] + 1] * theta[:, 0]
    out = np.zeros(x.shape[0])
    for corner in itertools.product((0, 1), repeat=d):
        w = np.ones(x.shape[0])
        idx = []
        for a, c in enumerate(corner):
            w = w * (theta[:, a] if c else 1 - theta[:, a])
            idx.append(i0[:, a] + c)
        out += w * values[tuple(idx)]
    return out


def evaluate(V: ValueGrid, s: float, xi) -> float:
    """Nearest time node, multilinear in space, linear continuation outside the box."""
    T = V.time_grid[-1]
    if s < -1e-12 or s > T + 1e-12:
        raise ValueError(f"s={s} outside [0, {T}]")
    i = int(np.argmin(np.abs(V.time_grid - s)))
    return float(V.interpolate(i, np.atleast_1d(np.asarray(xi, float))[None, :])[0])


def _candidates(spec: GeneratorSpec, v_next: np.ndarray, lower: float, h: float,
                t: float, dt: float, m: EmpiricalMeasure, x: np.ndarray, stats: Optional[dict] = None) -> np.ndarray:
    """One-step candidates for every (state, control); shape (B, C)."""
    B, d = x.shape
    U = spec.controls.points
    C = U.shape[0]
    X = np.repeat(x, C, axis=0)
    Uc = np.tile(U, (B, 1))
    drift = np.asarray(spec.drift(t, X, m, Uc), float).reshape(B * C, d)
    if spec.jumps:
        drift = drift - small_jump_compensator(spec, t, X, m, Uc)
    foot = X + drift * dt
    if spec.diffusion is None:
        expect = interpolate(v_next, lower, h, foot)
    else:
        G = diffusion_matrix(spec, t, X, m, Uc)
        root = sqrt_psd(G) * np.sqrt(d * dt)
        expect = np.zeros(B * C)
        for k in range(d):
            col = root[:, :, k]
            expect += interpolate(v_next, lower, h, foot + col) + interpolate(v_next, lower, h, foot - col)
        expect /= 2 * d
        if stats is not None:
            stats["cfl_diffusion"] = max(stats.get("cfl_diffusion", 0.0),
                                         float(np.trace(G, axis1=1, axis2=2).max()) * dt / h**2)
    if spec.jumps:
        total_rate = np.zeros(B * C)
        jump_part = np.zeros(B * C)
        for rate, y in jump_atoms(spec, t, X, m, Uc):
            total_rate += rate
            target = foot + y
            jump_part += rate * dt * interpolate(v_next, lower, h, target)
            if stats is not None:
                stats["jump_targets_outside"] = stats.get("jump_targets_outside", 0) + int(
                    np.sum(np.any(np.abs(target) > -lower * (1 + stats["margin"]), axis=1)))
        if np.any(total_rate * dt > JUMP_STABILITY):
            raise NumericalError(f"jump stability violated: dt * rate = {float((total_rate * dt).max()):.3g} > {JUMP_STABILITY}")
        expect = (1 - total_rate * dt) * expect + jump_part
    if stats is not None:
        stats["feet_outside"] = stats.get("feet_outside", 0) + int(
            np.sum(np.any(np.abs(foot) > -lower * (1 + stats["margin"]), axis=1)))
    g = np.asarray(spec.running(t, X, m, Uc), float)
    cand = (g * dt + expect).reshape(B, C)
    if not np.all(np.isfinite(cand)):
        raise NumericalError(f"non-finite value candidates at t={t:.6g}")
    return cand


def _sweep(spec: GeneratorSpec, flow: FlowOfProbabilities, grid: GridConfig, max_dim: int) -> ValueGrid:
    if spec.dim > max_dim:
        raise ValidationError(f"grid solver supports d <= {max_dim}")
    L, n = make_axis(grid)
    tg = flow.time_grid
    V = ValueGrid(tg, L, grid.h, spec.dim, np.empty((tg.size,) + (n,) * spec.dim))
    nodes = V.nodes()
    shape = (n,) * spec.dim
    V.values[-1] = np.asarray(spec.terminal(nodes, flow[-1]), float).reshape(shape)
    stats = {"margin": grid.margin}
    for i in range(tg.size - 2, -1, -1):
        cand = _candidates(spec, V.values[i + 1], -L, grid.h, tg[i], tg[i + 1] - tg[i], flow[i], nodes, stats)
        V.values[i] = cand.max(axis=1).reshape(shape)
    V.diagnostics = {"half_width": L, "h": grid.h, "nodes_per_axis": n, **stats}
    return V


def solve_deterministic_value(spec: GeneratorSpec, mu: FlowOfProbabilities, grid: GridConfig) -> ValueGrid:
    """Backward semi-Lagrangian dynamic programming for the first-order problem."""
    if not spec.is_deterministic:
        raise ValidationError("solve_deterministic_value needs a deterministic generator")
    return _sweep(spec, mu, grid, max_dim=3)


def solve_stochastic_value(spec: GeneratorSpec, zeta: FlowOfProbabilities, grid: GridConfig) -> ValueGrid:
    """Backward monotone sweep for the jump-diffusion HJB (d <= 2)."""
    return _sweep(spec, zeta, grid, max_dim=2)


@dataclass(eq=False)
class FeedbackPolicy:
    """Per-step maximizer of the scheme's one-step objective at the particle state."""

    value: ValueGrid
    spec: GeneratorSpec

    def indices(self, t, x, m):
        tg = self.value.time_grid
        i = int(np.argmin(np.abs(tg - t)))
        if tg[i] > t + 1e-12:
            i -= 1
        if i >= tg.size - 1:
            return np.zeros(x.shape[0], dtype=int)
        cand = _candidates(self.spec, self.value.values[i + 1], -self.value.half_width, self.value.h,
                           tg[i], tg[i + 1] - tg[i], m, x)
        return np.argmax(cand, axis=1)


@dataclass(eq=False)
class ShiftedFeedback:
    """Optimal feedback with the control index shifted (clipped to the set)."""

    base: FeedbackPolicy
    shift: int

    def indices(self, t, x, m):
        C = self.base.spec.controls.size
        return np.clip(self.base.indices(t, x, m) + self.shift, 0, C - 1)


@dataclass(frozen=True)
class DeviationConfig:
    starts: tuple  # (s, xi) pairs
    n_particles: int = 2000
    dt: Optional[float] = None
    seed: int = 7


@dataclass
class DeviationReport:
    max_gap: float
    max_excess: float  # max of (gap - 3 SE)
    gaps: np.ndarray   # (n_starts, n_policies)
    std_errs: np.ndarray
    values: np.ndarray


def expected_payoff(spec, policy, zeta, start, config: DeviationConfig):
    """Monte-Carlo mean and SE of sigma(Y_T, zeta_T) + int g from (s, xi)."""
    from detlimit.simulator import SimConfig, simulate

    s, xi = start
    dt = config.dt or float(zeta.time_grid[1] - zeta.time_grid[0])
    m0 = EmpiricalMeasure.dirac(xi)
    ens = simulate(spec, policy, zeta, m0, SimConfig(config.n_particles, dt, config.seed), start_time=s)
    k = ens.start_index
    pay = np.asarray(spec.terminal(ens.x[:, -1], zeta[-1]), float) + ens.z[:, -1] - ens.z[:, k]
    return float(pay.mean()), float(pay.std(ddof=1) / np.sqrt(pay.size))


def check_deviation(V: ValueGrid, spec: GeneratorSpec, zeta: FlowOfProbabilities,
                    policies: Sequence, config: DeviationConfig) -> DeviationReport:
    """Largest sampled excess of a policy's expected payoff over the value."""
    if not policies:
        raise ValueError("check_deviation needs at least one policy")
    S, P = len(config.starts), len(policies)
    gaps, ses, vals = np.zeros((S, P)), np.zeros((S, P)), np.zeros(S)
    for a, (s, xi) in enumerate(config.starts):
        vals[a] = evaluate(V, s, xi)
        for b, pol in enumerate(policies):
            mean, se = expected_payoff(spec, pol, zeta, (s, xi), config)
            gaps[a, b], ses[a, b] = mean - vals[a], se
    return DeviationReport(float(gaps.max()), float((gaps - 3 * ses).max()), gaps, ses, vals)


def policy_dictionary(spec: GeneratorSpec, value: ValueGrid, size: int, seed: int = 0) -> list:
    """Constant controls, shifted optimal feedbacks and random open-loop switchings."""
    from detlimit.dynamics import PiecewiseControl, random_piecewise_controls

    tg = value.time_grid
    C = spec.controls.size
    base = FeedbackPolicy(value, spec)
    out = [PiecewiseControl.constant(tg, j) for j in range(min(C, size // 2))]
    shifts = [s for k in range(1, C) for s in (k, -k)]
    out += [ShiftedFeedback(base, s) for s in shifts[: max(0, min(10, size - len(out)))]]
    rng = np.random.default_rng(seed)
    out += random_piecewise_controls(tg, C, size - len(out), 0, rng)
    return out[:size]
