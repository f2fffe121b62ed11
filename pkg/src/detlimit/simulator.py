"""Particle simulation of controlled jump-diffusions and martingale residuals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from detlimit.dynamics import ControlPolicy
from detlimit.errors import NumericalError, ValidationError
from detlimit.generator import (GeneratorSpec, TestFunction, apply_generator, diffusion_matrix,
                                jump_atoms, small_jump_compensator, sqrt_psd)
from detlimit.measures import EmpiricalMeasure, FlowOfProbabilities

MAX_JUMP_PROBABILITY = 0.5


@dataclass(frozen=True)
class SimConfig:
    n_particles: int
    dt: float
    seed: int = 0
    horizon: Optional[float] = None  # needed only when no flow is given


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    time_grid: np.ndarray
    x: np.ndarray          # (N, nt, d)
    z: np.ndarray          # (N, nt) accumulated running payoff
    controls: np.ndarray   # (N, nt - 1) indices into the control set
    jumps: np.ndarray      # (N, nt - 1) True where some atom fired
    control_points: np.ndarray
    seed: int
    dt: float
    start_index: int = 0

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def controls_used(self) -> np.ndarray:
        return self.control_points[self.controls]

    def law_at(self, i: int) -> EmpiricalMeasure:
        return EmpiricalMeasure.uniform(self.x[:, i, :])


def simulation_grid(zeta: Optional[FlowOfProbabilities], dt: float, horizon: Optional[float] = None) -> np.ndarray:
    """Refine the flow grid so every flow interval holds an integer number of steps."""
    if zeta is None:
        if horizon is None:
            raise ValidationError("a horizon is required without a flow")
        n = int(round(horizon / dt))
        if abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
            raise ValidationError("dt must divide the horizon")
        return np.linspace(0.0, horizon, n + 1)
    pieces = []
    for a, b in zip(zeta.time_grid[:-1], zeta.time_grid[1:]):
        r = int(round((b - a) / dt))
        if r < 1 or abs(r * dt - (b - a)) > 1e-9 * max(1.0, b - a):
            raise ValidationError(f"dt={dt} does not divide the flow spacing {b - a}")
        pieces.append(np.linspace(a, b, r + 1)[:-1])
    pieces.append(zeta.time_grid[-1:])
    return np.concatenate(pieces)


def sample_initial(m0: EmpiricalMeasure, n: int, seed: int) -> np.ndarray:
    """Inverse-CDF draws with replacement according to the weights."""
    rng = np.random.default_rng([seed, 0])
    cdf = np.cumsum(m0.weights)
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return m0.points[np.minimum(idx, m0.size - 1)].copy()


def simulate(spec: GeneratorSpec, policy: ControlPolicy, zeta: Optional[FlowOfProbabilities],
             m0: EmpiricalMeasure, config: SimConfig, start_time: float = 0.0,
             initial_states: Optional[np.ndarray] = None) -> PathEnsemble:
    """Euler-Maruyama with Bernoulli jump thinning.

    Coefficients see ``zeta`` frozen at the left flow node; with ``zeta=None``
    they see the ensemble's own empirical law (interacting particles). Each
    step draws from its own stream keyed by (seed, step), so particle i's
    noise does not depend on how many particles follow it.
    """
    if m0.dim != spec.dim:
        raise ValidationError("initial measure dimension does not match the generator")
    tg = simulation_grid(zeta, config.dt, config.horizon)
    nt, N, d = tg.size, config.n_particles, spec.dim
    start = int(np.argmin(np.abs(tg - start_time)))
    U = spec.controls.points
    x = np.empty((N, nt, d))
    z = np.zeros((N, nt))
    ctrl = np.zeros((N, nt - 1), dtype=int)
    jumped = np.zeros((N, nt - 1), dtype=bool)
    x0 = sample_initial(m0, N, config.seed) if initial_states is None else np.asarray(initial_states, float)
    x[:, : start + 1] = x0[:, None, :]
    for k in range(start, nt - 1):
        t, h = tg[k], tg[k + 1] - tg[k]
        y = x[:, k]
        m = zeta[zeta.left_index(t)] if zeta is not None else EmpiricalMeasure.uniform(y)
        idx = np.asarray(policy.indices(t, y, m), dtype=int)
        ctrl[:, k] = idx
        u = U[idx]
        drift = np.asarray(spec.drift(t, y, m, u), float).reshape(N, d)
        if spec.jumps:
            drift = drift - small_jump_compensator(spec, t, y, m, u)
        step = drift * h
        if spec.diffusion is not None:
            root = sqrt_psd(diffusion_matrix(spec, t, y, m, u))
            noise = np.random.default_rng([config.seed, 1, k]).standard_normal((N, d))
            step = step + np.einsum("bij,bj->bi", root, noise) * np.sqrt(h)
        if spec.jumps:
            atoms = jump_atoms(spec, t, y, m, u)
            draws = np.random.default_rng([config.seed, 2, k]).random((N, len(atoms)))
            for j, (rate, disp) in enumerate(atoms):
                p = rate * h
                if np.any(p > MAX_JUMP_PROBABILITY):
                    raise NumericalError(f"jump probability {p.max():.3g} per step exceeds {MAX_JUMP_PROBABILITY}")
                fire = draws[:, j] < p
                jumped[:, k] |= fire
                step = step + fire[:, None] * disp
        x[:, k + 1] = y + step
        g = np.asarray(spec.running(t, y, m, u), float)
        z[:, k + 1] = z[:, k] + g * h
        if not np.all(np.isfinite(x[:, k + 1])) or not np.all(np.isfinite(z[:, k + 1])):
            raise NumericalError(f"non-finite state at t={tg[k + 1]:.6g}")
    return PathEnsemble(tg, x, z, ctrl, jumped, U, config.seed, config.dt, start)


def empirical_flow(ens: PathEnsemble, coarse_grid=None) -> FlowOfProbabilities:
    """Uniform-weight empirical laws at the (coarse) grid nodes."""
    if coarse_grid is None:
        return FlowOfProbabilities.from_particles(ens.time_grid, ens.x)
    coarse = np.asarray(coarse_grid, float)
    idx = np.array([int(np.argmin(np.abs(ens.time_grid - t))) for t in coarse])
    if np.any(np.abs(ens.time_grid[idx] - coarse) > 1e-9):
        raise ValidationError("coarse grid is not a subset of the simulation grid")
    return FlowOfProbabilities.from_particles(coarse, ens.x[:, idx, :])


@dataclass(frozen=True)
class Residual:
    mean: float
    std_err: float


def martingale_residual(ens: PathEnsemble, spec: GeneratorSpec, zeta: Optional[FlowOfProbabilities],
                        phi: TestFunction, s: float, t: float) -> Residual:
    """Sample mean and standard error of phi(Y_t) - phi(Y_s) - sum L phi(Y) dt.

    Coupling test functions take the frozen second argument x2 = Y(s); for
    ``coupling_linear`` the third argument is ``phi.xi`` (default all ones).
    """
    tg = ens.time_grid
    ks, kt = int(np.argmin(np.abs(tg - s))), int(np.argmin(np.abs(tg - t)))
    if not ks < kt:
        raise ValueError("need s < t on the grid")
    ys = ens.x[:, ks]
    x3 = None
    if phi.kind == "coupling_linear":
        x3 = phi.xi if phi.xi is not None else np.ones(spec.dim)
    U = ens.control_points
    acc = np.zeros(ens.size)
    for k in range(ks, kt):
        y = ens.x[:, k]
        m = zeta[zeta.left_index(tg[k])] if zeta is not None else EmpiricalMeasure.uniform(y)
        acc += apply_generator(spec, phi, tg[k], y, m, U[ens.controls[:, k]], x2=ys, x3=x3) * (tg[k + 1] - tg[k])
    r = phi(ens.x[:, kt], ys, x3) - phi(ys, ys, x3) - acc
    return Residual(float(r.mean()), float(r.std(ddof=1) / np.sqrt(r.size)) if r.size > 1 else 0.0)


def dump_ensemble(ens: PathEnsemble, path) -> None:
    """Columnar text: one row per (path, node) with t, x, z, u, jump flag."""
    N, nt, d = ens.x.shape
    k = ens.control_points.shape[1]
    ctrl = np.concatenate([ens.controls, ens.controls[:, -1:]], axis=1) if nt > 1 else np.zeros((N, 1), int)
    jumps = np.concatenate([np.zeros((N, 1), bool), ens.jumps], axis=1)
    cols = [np.repeat(np.arange(N), nt), np.tile(ens.time_grid, N)]
    cols += [ens.x[:, :, j].ravel() for j in range(d)]
    cols.append(ens.z.ravel())
    u = ens.control_points[ctrl]
    cols += [u[:, :, j].ravel() for j in range(k)]
    cols.append(jumps.ravel().astype(int))
    header = " ".join(["path", "t"] + [f"x{j + 1}" for j in range(d)] + ["z"] + [f"u{j + 1}" for j in range(k)] + ["jump"])
    fmt = ["%d", "%.10g"] + ["%.17g"] * (d + 1 + k) + ["%d"]
    np.savetxt(path, np.column_stack(cols), fmt=fmt, header=header, comments="")
