"""Deterministic characteristics: controlled ODEs and accumulated payoff."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from detlimit.errors import NumericalError
from detlimit.generator import ControlSet, GeneratorSpec
from detlimit.measures import EmpiricalMeasure, FlowOfProbabilities


class ControlPolicy(Protocol):
    """Maps (t, states (B, d), law) to indices into the control set."""

    def indices(self, t: float, x: np.ndarray, m: EmpiricalMeasure) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class Trajectory:
    time_grid: np.ndarray
    x: np.ndarray
    z: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", np.asarray(self.z, float))
        if x.shape[0] != len(self.time_grid) or self.z.shape != (len(self.time_grid),):
            raise ValueError("trajectory lengths must match the grid")
        if self.z[self.start_index] != 0.0:
            raise ValueError("z must vanish at the start index")


@dataclass(frozen=True, eq=False)
class PiecewiseControl:
    """Open-loop control: one control index per grid interval."""

    time_grid: np.ndarray
    values: np.ndarray  # indices into the control set, length nt - 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=int)
        if v.shape != (len(self.time_grid) - 1,):
            raise ValueError("one control per interval required")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, time_grid, index: int) -> "PiecewiseControl":
        return cls(time_grid, np.full(len(time_grid) - 1, index))

    def indices(self, t, x, m):
        i = int(np.searchsorted(self.time_grid, t + 1e-12, side="right")) - 1
        i = min(max(i, 0), len(self.values) - 1)
        return np.full(x.shape[0], self.values[i])

    def points(self, controls: ControlSet) -> np.ndarray:
        return controls.points[self.values]


@dataclass(frozen=True, eq=False)
class OpenLoopBundle:
    """One open-loop control per particle; ``values`` has shape (P, nt - 1)."""

    time_grid: np.ndarray
    values: np.ndarray

    def indices(self, t, x, m):
        i = int(np.searchsorted(self.time_grid, t + 1e-12, side="right")) - 1
        return self.values[:, min(max(i, 0), self.values.shape[1] - 1)]


@dataclass(frozen=True)
class ConstantPolicy:
    index: int

    def indices(self, t, x, m):
        return np.full(x.shape[0], self.index)


def _checked(a, what):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite {what} output")
    return a


def hamiltonian(spec: GeneratorSpec, t, x, m, p) -> float:
    """max over the control set of <p, f> + g."""
    return float(_hamiltonian_values(spec, t, x, m, p).max())


def argmax_control(spec: GeneratorSpec, t, x, m, p) -> np.ndarray:
    """A maximizer of <p, f> + g; ties go to the lowest enumeration index."""
    return spec.controls.points[int(np.argmax(_hamiltonian_values(spec, t, x, m, p)))]


def _hamiltonian_values(spec, t, x, m, p):
    U = spec.controls.points
    xb = np.broadcast_to(np.atleast_1d(np.asarray(x, float)), (U.shape[0], spec.dim))
    f = spec.drift(t, xb, m, U).reshape(U.shape[0], spec.dim)
    return f @ np.atleast_1d(np.asarray(p, float)) + spec.running(t, xb, m, U)


def integrate_batch(spec: GeneratorSpec, mu: Optional[FlowOfProbabilities], x0: np.ndarray,
                    policy: ControlPolicy, start_index: int = 0, time_grid=None, weights=None):
    """RK4 for many particles under a (feedback or open-loop) policy.

    The control is frozen over each interval and the flow is frozen at the left
    node. With ``mu=None`` the particles' own empirical law is used (mean-field
    interaction). Returns ``(x (P, nt, d), z (P, nt), controls (P, nt-1))``.
    """
    tg = np.asarray(mu.time_grid if time_grid is None else time_grid, float)
    x0 = np.atleast_2d(np.asarray(x0, float))
    P, d = x0.shape
    nt = tg.size
    U = spec.controls.points
    w = np.full(P, 1.0 / P) if weights is None else weights

    def law(i, xi):
        return mu[i] if mu is not None else EmpiricalMeasure(xi, w)

    x = np.empty((P, nt, d))
    z = np.zeros((P, nt))
    ctrl = np.zeros((P, max(nt - 1, 0)), dtype=int)
    x[:, : start_index + 1] = x0[:, None, :]
    m_cur = law(start_index, x[:, start_index])
    for i in range(start_index, nt - 1):
        t, h = tg[i], tg[i + 1] - tg[i]
        xi = x[:, i]
        idx = np.asarray(policy.indices(t, xi, m_cur), dtype=int)
        ctrl[:, i] = idx
        u = U[idx]

        def f(tt, xx):
            return _checked(spec.drift(tt, xx, m_cur, u), "drift").reshape(P, d)

        k1 = f(t, xi)
        k2 = f(t + h / 2, xi + h / 2 * k1)
        k3 = f(t + h / 2, xi + h / 2 * k2)
        k4 = f(t + h, xi + h * k3)
        x[:, i + 1] = xi + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        m_next = law(i + 1, x[:, i + 1])
        g0 = _checked(spec.running(t, xi, m_cur, u), "running payoff")
        g1 = _checked(spec.running(tg[i + 1], x[:, i + 1], m_next, u), "running payoff")
        z[:, i + 1] = z[:, i] + h / 2 * (g0 + g1)
        m_cur = m_next
    return x, z, ctrl


def integrate_characteristic(spec: GeneratorSpec, mu: FlowOfProbabilities, s: float, xi, v: PiecewiseControl) -> Trajectory:
    """Path (x, z) started from xi at grid time s under the open-loop control v."""
    start = mu.index_of(s)
    if abs(mu.time_grid[start] - s) > 1e-9:
        raise ValueError("s must lie on the time grid")
    x, z, _ = integrate_batch(spec, mu, np.atleast_1d(np.asarray(xi, float))[None, :], v, start)
    return Trajectory(mu.time_grid, x[0], z[0], start)


def a_priori_bound(xi_norm, M: float, T: float, sup_sigma: float) -> float:
    """Gronwall bound (|xi| + MT + MT sup s(mu)) e^{MT} on characteristic norms."""
    return float((xi_norm + M * T + M * T * sup_sigma) * np.exp(M * T))


def random_piecewise_controls(time_grid, n_controls: int, count: int, start_index: int, rng) -> list:
    """Seeded piecewise-constant controls with random switching times."""
    nt = len(time_grid)
    out = []
    for _ in range(count):
        n_int = nt - 1 - start_index
        # log-uniform piece counts: coarse switchings reach the extremes, fine ones fill in
        pieces = min(int(2.0 ** rng.uniform(0.0, np.log2(max(n_int, 1)) + 1e-12)), max(n_int, 1))
        cuts = np.sort(rng.choice(np.arange(1, n_int), size=min(pieces - 1, max(n_int - 1, 0)), replace=False)) if n_int > 1 else []
        bounds = np.concatenate(([0], cuts, [n_int])).astype(int)
        vals = np.zeros(nt - 1, dtype=int)
        for a, b in zip(bounds[:-1], bounds[1:]):
            vals[start_index + a:start_index + b] = rng.integers(0, n_controls)
        out.append(PiecewiseControl(time_grid, vals))
    return out


def reachable_cloud(spec: GeneratorSpec, mu: FlowOfProbabilities, s: float, xi, n_controls: int, seed: int = 0) -> list:
    """Trajectories from (s, xi) for constant controls plus random switchings."""
    if n_controls < 1:
        raise ValueError("n_controls must be >= 1")
    start = mu.index_of(s)
    C = spec.controls.size
    controls = [PiecewiseControl.constant(mu.time_grid, j) for j in range(min(n_controls, C))]
    rng = np.random.default_rng(seed)
    controls += random_piecewise_controls(mu.time_grid, C, n_controls - len(controls), start, rng)
    policy = OpenLoopBundle(mu.time_grid, np.stack([v.values for v in controls]))
    x0 = np.tile(np.atleast_1d(np.asarray(xi, float)), (len(controls), 1))
    x, z, _ = integrate_batch(spec, mu, x0, policy, start)
    return [Trajectory(mu.time_grid, x[i], z[i], start) for i in range(len(controls))]
