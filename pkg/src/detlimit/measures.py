"""Finite probability measures on R^d and on path space, with W2 distances."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

WEIGHT_TOL = 1e-12
EXACT_ASSIGNMENT_LIMIT = 512


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted particle cloud; ``points`` has shape (n, d)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("points must be a nonempty (n, d) array")
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.shape[0] != pts.shape[0]:
            raise ValueError("one weight per point required")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL * max(1.0, pts.shape[0] * 1e-4):
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, x) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :], np.ones(1))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @cached_property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.size, rtol=0, atol=1e-15))

    @cached_property
    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    @cached_property
    def second_moment(self) -> float:
        return float(self.weights @ np.einsum("ij,ij->i", self.points, self.points))

    @property
    def sigma(self) -> float:
        """Square root of the second moment."""
        return float(np.sqrt(self.second_moment))


def second_moment(m: EmpiricalMeasure) -> float:
    value = m.second_moment
    if not np.isfinite(value):
        raise ValueError("second moment is not finite")
    return value


@dataclass(frozen=True, eq=False)
class FlowOfProbabilities:
    time_grid: np.ndarray
    measures: tuple

    def __post_init__(self):
        tg = np.asarray(self.time_grid, dtype=float)
        if tg.ndim != 1 or tg.size < 1:
            raise ValueError("time grid must be a nonempty 1-D array")
        if tg[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(tg) <= 0):
            raise ValueError("time grid must be strictly increasing")
        measures = tuple(self.measures)
        if len(measures) != tg.size:
            raise ValueError("one measure per time node required")
        if len({m.dim for m in measures}) != 1:
            raise ValueError("all measures must share dim")
        object.__setattr__(self, "time_grid", _frozen(tg))
        object.__setattr__(self, "measures", measures)

    @classmethod
    def constant(cls, time_grid, m: EmpiricalMeasure) -> "FlowOfProbabilities":
        return cls(time_grid, (m,) * len(time_grid))

    @classmethod
    def from_particles(cls, time_grid, x: np.ndarray, weights=None) -> "FlowOfProbabilities":
        """Build from a particle array of shape (P, nt, d)."""
        P = x.shape[0]
        w = np.full(P, 1.0 / P) if weights is None else weights
        return cls(time_grid, tuple(EmpiricalMeasure(x[:, i, :], w) for i in range(x.shape[1])))

    @property
    def horizon(self) -> float:
        return float(self.time_grid[-1])

    @property
    def dim(self) -> int:
        return self.measures[0].dim

    def __len__(self) -> int:
        return len(self.measures)

    def __getitem__(self, i: int) -> EmpiricalMeasure:
        return self.measures[i]

    def index_of(self, t: float) -> int:
        """Nearest grid node to ``t``."""
        if t < -1e-12 or t > self.horizon + 1e-12:
            raise ValueError(f"t={t} outside [0, {self.horizon}]")
        return int(np.argmin(np.abs(self.time_grid - t)))

    def at(self, t: float) -> EmpiricalMeasure:
        return self.measures[self.index_of(t)]

    def left_index(self, t: float) -> int:
        """Index of the last node not after ``t`` (coefficients freeze the flow there)."""
        i = int(np.searchsorted(self.time_grid, t + 1e-12, side="right")) - 1
        return min(max(i, 0), len(self.measures) - 1)


@dataclass(frozen=True, eq=False)
class PathMeasure:
    """Weighted trajectories (x(.), z(.)) on a shared time grid.

    ``x`` has shape (P, nt, d) and ``z`` has shape (P, nt).
    """

    time_grid: np.ndarray
    x: np.ndarray
    z: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        tg = np.asarray(self.time_grid, dtype=float)
        if x.ndim != 3 or z.shape != x.shape[:2] or x.shape[1] != tg.size:
            raise ValueError("inconsistent path array shapes")
        w = np.full(x.shape[0], 1.0 / x.shape[0]) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (x.shape[0],) or np.any(w < 0) or abs(w.sum() - 1) > 1e-12 * max(1.0, w.size * 1e-4):
            raise ValueError("path weights must be nonnegative and sum to 1")
        for name, value in (("time_grid", tg), ("x", x), ("z", z), ("weights", w)):
            object.__setattr__(self, name, _frozen(value))

    @classmethod
    def from_trajectories(cls, trajectories: Sequence, weights=None) -> "PathMeasure":
        tg = trajectories[0].time_grid
        for tr in trajectories:
            if tr.time_grid.shape != tg.shape or not np.allclose(tr.time_grid, tg, rtol=0, atol=1e-12):
                raise ValueError("trajectories must share one time grid")
        x = np.stack([tr.x for tr in trajectories])
        z = np.stack([tr.z for tr in trajectories])
        return cls(tg, x, z, weights)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def trajectories(self) -> list:
        from detlimit.dynamics import Trajectory

        return [Trajectory(self.time_grid, self.x[i], self.z[i]) for i in range(self.size)]

    def sup_second_moment(self) -> float:
        """Integral of sup_t ||w(t)||^2 over the path measure (x and z)."""
        sq = np.einsum("ptd,ptd->pt", self.x, self.x) + self.z**2
        return float(self.weights @ sq.max(axis=1))


def pushforward_at(chi: PathMeasure, t: float) -> EmpiricalMeasure:
    """x-marginal of ``chi`` at the grid node nearest ``t``."""
    T = chi.time_grid[-1]
    if t < -1e-12 or t > T + 1e-12:
        raise ValueError(f"t={t} outside [0, {T}]")
    i = int(np.argmin(np.abs(chi.time_grid - t)))
    return EmpiricalMeasure(chi.x[:, i, :], chi.weights)


# --- Wasserstein-2 -----------------------------------------------------------


def _w2_exact1d(m1: EmpiricalMeasure, m2: EmpiricalMeasure) -> float:
    # Quantile coupling on the merged CDF breakpoints handles arbitrary weights.
    o1 = np.argsort(m1.points[:, 0], kind="stable")
    o2 = np.argsort(m2.points[:, 0], kind="stable")
    x1, w1 = m1.points[o1, 0], m1.weights[o1]
    x2, w2 = m2.points[o2, 0], m2.weights[o2]
    if m1.size == m2.size and m1.is_uniform and m2.is_uniform:
        return float(np.sqrt(np.mean((x1 - x2) ** 2)))
    c1 = np.cumsum(w1)
    c2 = np.cumsum(w2)
    c1[-1] = c2[-1] = 1.0
    levels = np.union1d(c1, c2)
    mass = np.diff(np.concatenate(([0.0], levels)))
    i1 = np.minimum(np.searchsorted(c1, levels, side="left"), x1.size - 1)
    i2 = np.minimum(np.searchsorted(c2, levels, side="left"), x2.size - 1)
    return float(np.sqrt(max(mass @ (x1[i1] - x2[i2]) ** 2, 0.0)))


def _sq_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _assignment_value(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(max(cost[rows, cols].mean(), 0.0)))


def _sinkhorn_cost(a, b, C, eps, iters=2000, tol=1e-10):
    """Entropic OT cost <pi, C> with log-domain Sinkhorn and eps annealing."""
    la, lb = np.log(a), np.log(b)
    scale = max(float(C.max()), 1e-300)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    e = scale
    while True:
        e = max(e / 4.0, eps)
        for _ in range(iters):
            f_new = -e * logsumexp((g[None, :] - C) / e + lb[None, :], axis=1)
            g_new = -e * logsumexp((f_new[:, None] - C) / e + la[:, None], axis=0)
            delta = max(np.abs(f_new - f).max(), np.abs(g_new - g).max())
            f, g = f_new, g_new
            if delta < tol * scale:
                break
        if e == eps:
            break
    logpi = (f[:, None] + g[None, :] - C) / eps + la[:, None] + lb[None, :]
    pi = np.exp(logpi)
    return float((pi * C).sum())


def entropic_w2(m1: EmpiricalMeasure, m2: EmpiricalMeasure, eps: float) -> tuple[float, float]:
    """Debiased entropic estimate of W2 and a tolerance on it.

    Returns ``(value, tol)``; the tolerance is the a-priori entropic bias bound
    ``sqrt(eps * d * log(e * diam^2 / eps))`` capped at the value scale.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if m1.dim != m2.dim:
        raise ValueError("dimension mismatch")
    C12 = _sq_cost(m1.points, m2.points)
    C11 = _sq_cost(m1.points, m1.points)
    C22 = _sq_cost(m2.points, m2.points)
    a, b = m1.weights, m2.weights
    keep_a, keep_b = a > 0, b > 0
    a, b = a[keep_a], b[keep_b]
    C12, C11, C22 = C12[np.ix_(keep_a, keep_b)], C11[np.ix_(keep_a, keep_a)], C22[np.ix_(keep_b, keep_b)]
    s = _sinkhorn_cost(a, b, C12, eps) - 0.5 * _sinkhorn_cost(a, a, C11, eps) - 0.5 * _sinkhorn_cost(b, b, C22, eps)
    diam2 = max(float(C12.max()), eps)
    tol = float(np.sqrt(eps * m1.dim * np.log(np.e * diam2 / eps)))
    return float(np.sqrt(max(s, 0.0))), tol


def wasserstein2(m1: EmpiricalMeasure, m2: EmpiricalMeasure, method: str = "auto", eps: float = 1e-3) -> float:
    """W2 distance between two clouds.

    ``method`` is one of ``exact1d``, ``assignment``, ``entropic`` or ``auto``
    (exact1d in 1-D, assignment up to 512 uniform points, entropic otherwise).
    """
    if m1.dim != m2.dim:
        raise ValueError(f"dimension mismatch: {m1.dim} vs {m2.dim}")
    if method == "auto":
        if m1.dim == 1:
            method = "exact1d"
        elif (m1.size == m2.size and m1.is_uniform and m2.is_uniform
              and m1.size <= EXACT_ASSIGNMENT_LIMIT):
            method = "assignment"
        else:
            method = "entropic"
    if method == "exact1d":
        if m1.dim != 1:
            raise ValueError("exact1d requires d = 1")
        return _w2_exact1d(m1, m2)
    if method == "assignment":
        if m1.size != m2.size:
            raise ValueError("assignment requires equal particle counts")
        if not (m1.is_uniform and m2.is_uniform):
            raise ValueError("assignment requires uniform weights")
        return _assignment_value(_sq_cost(m1.points, m2.points))
    if method == "entropic":
        return entropic_w2(m1, m2, eps)[0]
    raise ValueError(f"unknown method {method!r}")


def w2_brute_force(m1: EmpiricalMeasure, m2: EmpiricalMeasure) -> float:
    """Minimum over all permutations; for tiny uniform clouds only."""
    n = m1.size
    C = _sq_cost(m1.points, m2.points)
    best = min(C[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))
    return float(np.sqrt(best))


def path_w2(chi1: PathMeasure, chi2: PathMeasure) -> float:
    """W2 on path space with ground cost sup_t ||w1(t) - w2(t)|| over (x, z)."""
    if chi1.size != chi2.size:
        raise ValueError("path_w2 requires equal path counts")
    if chi1.time_grid.shape != chi2.time_grid.shape or not np.allclose(chi1.time_grid, chi2.time_grid, atol=1e-12):
        raise ValueError("path measures must share a time grid")
    n = chi1.size
    if not (np.allclose(chi1.weights, 1.0 / n, atol=1e-15) and np.allclose(chi2.weights, 1.0 / n, atol=1e-15)):
        raise ValueError("path_w2 requires uniform weights")
    w1 = np.concatenate([chi1.x, chi1.z[:, :, None]], axis=2)
    w2 = np.concatenate([chi2.x, chi2.z[:, :, None]], axis=2)
    cost = np.empty((n, n))
    for i in range(n):
        diff = w1[i][None, :, :] - w2
        cost[i] = np.einsum("ptd,ptd->pt", diff, diff).max(axis=1)
    return _assignment_value(cost)


def sup_w2(flow1: FlowOfProbabilities, flow2: FlowOfProbabilities, method: str = "auto") -> float:
    """max over shared nodes of W2(flow1[t], flow2[t])."""
    if len(flow1) != len(flow2):
        raise ValueError("flows must share a time grid")
    return max(wasserstein2(a, b, method) for a, b in zip(flow1.measures, flow2.measures))
