"""Levy-Khintchine generators with finite-activity jump measures.

Coefficient maps are vectorized: they receive ``t`` (float), ``x`` of shape
(B, d), the current law ``m`` (an :class:`EmpiricalMeasure`) and ``u`` of
shape (B, k), and return arrays with leading batch dimension B.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from detlimit.errors import NumericalError
from detlimit.measures import EmpiricalMeasure

Coefficient = Callable[[float, np.ndarray, EmpiricalMeasure, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Finite discretization of the (compact) control space."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.size == 0:
            raise ValueError("control set must be nonempty")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("control set has duplicate points")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @classmethod
    def grid(cls, low, high, count) -> "ControlSet":
        """Tensor grid; scalars give a 1-D grid."""
        low, high, count = np.atleast_1d(low), np.atleast_1d(high), np.atleast_1d(count)
        axes = [np.linspace(lo, hi, int(c)) for lo, hi, c in zip(low, high, count)]
        return cls(np.array(list(itertools.product(*axes))))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def index_nearest(self, u) -> int:
        d = np.linalg.norm(self.points - np.atleast_1d(u)[None, :], axis=1)
        return int(np.argmin(d))


@dataclass(frozen=True)
class JumpAtom:
    """One atom of the jump measure: rate * delta_{displacement}."""

    rate: Coefficient
    displacement: Coefficient

    @classmethod
    def constant(cls, rate: float, displacement) -> "JumpAtom":
        if rate < 0:
            raise ValueError("jump rate must be nonnegative")
        y = np.atleast_1d(np.asarray(displacement, dtype=float))
        return cls(
            rate=lambda t, x, m, u, _r=float(rate): np.full(x.shape[0], _r),
            displacement=lambda t, x, m, u, _y=y: np.broadcast_to(_y, x.shape),
        )


@dataclass(frozen=True)
class GeneratorSpec:
    """The data (G, f, nu, g, sigma, U) of a controlled generator plus payoffs.

    ``diffusion`` returns matrices of shape (B, d, d); ``None`` means G = 0.
    ``terminal`` has signature ``(x, m) -> (B,)``.
    """

    dim: int
    controls: ControlSet
    drift: Coefficient
    running: Coefficient
    terminal: Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]
    diffusion: Optional[Coefficient] = None
    jumps: tuple = ()
    name: str = "generator"

    @property
    def is_deterministic(self) -> bool:
        return self.diffusion is None and not self.jumps

    def deterministic_part(self) -> "GeneratorSpec":
        """Same drift and payoffs with diffusion and jumps removed."""
        return replace(self, diffusion=None, jumps=(), name=self.name + "/det")


def _batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return (x.reshape(1, d) if single else x), single


def _controls_batch(u, B):
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = u.reshape(1, 1)
    elif u.ndim == 1:
        u = u[None, :]
    return np.broadcast_to(u, (B, u.shape[1]))


def diffusion_matrix(spec: GeneratorSpec, t, x, m, u) -> np.ndarray:
    if spec.diffusion is None:
        return np.zeros((x.shape[0], spec.dim, spec.dim))
    return np.asarray(spec.diffusion(t, x, m, u), dtype=float).reshape(x.shape[0], spec.dim, spec.dim)


def jump_atoms(spec: GeneratorSpec, t, x, m, u):
    """List of (rates (B,), displacements (B, d)) per atom."""
    return [
        (np.asarray(a.rate(t, x, m, u), dtype=float).reshape(x.shape[0]),
         np.asarray(a.displacement(t, x, m, u), dtype=float).reshape(x.shape[0], spec.dim))
        for a in spec.jumps
    ]


def sqrt_psd(G: np.ndarray) -> np.ndarray:
    """Batched symmetric square root of PSD matrices (B, d, d)."""
    if G.shape[1] == 1:
        if np.any(G < -1e-12):
            raise NumericalError("diffusion matrix is not PSD")
        return np.sqrt(np.maximum(G, 0.0))
    if not np.allclose(G, np.swapaxes(G, 1, 2), atol=1e-12):
        raise NumericalError("diffusion matrix is not symmetric")
    vals, vecs = np.linalg.eigh(G)
    if np.any(vals < -1e-12):
        raise NumericalError("diffusion matrix is not PSD")
    return np.einsum("bij,bj,bkj->bik", vecs, np.sqrt(np.maximum(vals, 0.0)), vecs)


def _total_noise(spec, t, x, m, u):
    out = np.trace(diffusion_matrix(spec, t, x, m, u), axis1=1, axis2=2).copy()
    for rate, y in jump_atoms(spec, t, x, m, u):
        out += rate * np.einsum("bd,bd->b", y, y)
    return out


def _effective_drift(spec, t, x, m, u):
    out = np.array(spec.drift(t, x, m, u), dtype=float).reshape(x.shape[0], spec.dim)
    for rate, y in jump_atoms(spec, t, x, m, u):
        big = np.linalg.norm(y, axis=1) > 1.0
        out += (rate * big)[:, None] * y
    return out


def small_jump_compensator(spec, t, x, m, u) -> np.ndarray:
    """sum over atoms with ||y|| <= 1 of rate * y; shape (B, d)."""
    out = np.zeros((x.shape[0], spec.dim))
    for rate, y in jump_atoms(spec, t, x, m, u):
        small = np.linalg.norm(y, axis=1) <= 1.0
        out += (rate * small)[:, None] * y
    return out


def total_noise(spec: GeneratorSpec, t, x, m, u):
    """trace(G) + integral of ||y||^2 against the jump measure."""
    xb, single = _batch(x, spec.dim)
    out = _total_noise(spec, t, xb, m, _controls_batch(u, xb.shape[0]))
    return float(out[0]) if single else out


def effective_drift(spec: GeneratorSpec, t, x, m, u):
    """f plus the mean of the jumps leaving the unit ball."""
    xb, single = _batch(x, spec.dim)
    out = _effective_drift(spec, t, xb, m, _controls_batch(u, xb.shape[0]))
    return out[0] if single else out


@dataclass(frozen=True)
class TestFunction:
    """Member of the closed family with exact generator action.

    ``linear``: <xi, x>; ``shifted_quadratic``: ||x - xi||^2;
    ``coupling_quadratic``: ||x1 - x2||^2; ``coupling_linear``: <x1 - x2, x3>.
    The generator acts on the first argument only.
    """

    __test__ = False

    kind: str
    xi: Optional[np.ndarray] = None

    KINDS = ("linear", "shifted_quadratic", "coupling_quadratic", "coupling_linear")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unsupported test function kind {self.kind!r}")
        if self.kind in ("linear", "shifted_quadratic"):
            if self.xi is None:
                raise ValueError(f"{self.kind} requires xi")
            object.__setattr__(self, "xi", np.atleast_1d(np.asarray(self.xi, dtype=float)))

    @classmethod
    def linear(cls, xi) -> "TestFunction":
        return cls("linear", xi)

    @classmethod
    def shifted_quadratic(cls, xi) -> "TestFunction":
        return cls("shifted_quadratic", xi)

    def __call__(self, x1, x2=None, x3=None):
        x1 = np.atleast_2d(x1)
        if self.kind == "linear":
            return x1 @ self.xi
        if self.kind == "shifted_quadratic":
            diff = x1 - self.xi
        elif self.kind == "coupling_quadratic":
            diff = x1 - np.atleast_2d(x2)
        else:
            return np.einsum("bd,bd->b", x1 - np.atleast_2d(x2), np.broadcast_to(x3, x1.shape))
        return np.einsum("bd,bd->b", diff, diff)


def apply_generator(spec: GeneratorSpec, phi: TestFunction, t, x, m, u, x2=None, x3=None):
    """Exact action of the generator on ``phi`` in its first argument."""
    if not isinstance(phi, TestFunction):
        raise TypeError("phi must be a TestFunction")
    xb, single = _batch(x, spec.dim)
    ub = _controls_batch(u, xb.shape[0])
    b = _effective_drift(spec, t, xb, m, ub)
    if phi.kind == "linear":
        out = b @ phi.xi
    elif phi.kind == "coupling_linear":
        if x3 is None:
            raise ValueError("coupling_linear requires x3")
        out = np.einsum("bd,bd->b", b, np.broadcast_to(np.asarray(x3, float), b.shape))
    else:
        if phi.kind == "shifted_quadratic":
            anchor = phi.xi
        elif x2 is None:
            raise ValueError("coupling_quadratic requires x2")
        else:
            anchor = np.asarray(x2, float)
        diff = xb - np.broadcast_to(anchor, xb.shape)
        out = _total_noise(spec, t, xb, m, ub) + 2.0 * np.einsum("bd,bd->b", b, diff)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class SamplePoint:
    t: float
    x: np.ndarray
    m: EmpiricalMeasure
    u: np.ndarray


def make_sample(times, xs, measures, controls: ControlSet) -> list:
    """Cartesian product sample of (t, x, m, u) with every control point."""
    return [
        SamplePoint(float(t), np.atleast_1d(np.asarray(x, float)), m, u)
        for t in times for x in xs for m in measures for u in controls.points
    ]


def epsilon_estimate(family: Sequence[GeneratorSpec], limit: GeneratorSpec, sample: Sequence) -> list:
    """Sampled convergence rates: max(noise ratio, drift ratio^2), clamped to 1."""
    if not sample:
        raise ValueError("epsilon_estimate needs a nonempty sample")
    eps = []
    for spec in family:
        worst = 0.0
        for p in sample:
            sp = p if isinstance(p, SamplePoint) else SamplePoint(*p)
            x = np.atleast_1d(np.asarray(sp.x, float))
            s2 = sp.m.second_moment
            noise = total_noise(spec, sp.t, x, sp.m, sp.u) / (1.0 + x @ x + s2)
            gap = effective_drift(spec, sp.t, x, sp.m, sp.u) - effective_drift(limit, sp.t, x, sp.m, sp.u)
            drift = np.linalg.norm(gap) / (1.0 + np.linalg.norm(x) + np.sqrt(s2))
            worst = max(worst, noise, drift**2)
        eps.append(min(1.0, float(worst)))
    return eps


@dataclass
class GrowthAudit:
    M: float
    max_drift_ratio: float
    max_noise_ratio: float
    min_diffusion_eigenvalue: float
    sample_size: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = (self.max_drift_ratio <= self.M and self.max_noise_ratio <= self.M
                       and self.min_diffusion_eigenvalue >= -1e-12)


def growth_audit(spec: GeneratorSpec, M: float, sample: Sequence, limit: Optional[GeneratorSpec] = None) -> GrowthAudit:
    """Check ||b|| <= M(1+|x|+s(m)), Sigma <= M(1+|x|^2+s^2(m)) and G PSD on a sample.

    When ``limit`` is given its drift is audited against the same bound.
    """
    drift_ratio = noise_ratio = 0.0
    min_eig = np.inf
    for p in sample:
        sp = p if isinstance(p, SamplePoint) else SamplePoint(*p)
        x = np.atleast_1d(np.asarray(sp.x, float))
        s2 = sp.m.second_moment
        lin = 1.0 + np.linalg.norm(x) + np.sqrt(s2)
        drift_ratio = max(drift_ratio, np.linalg.norm(effective_drift(spec, sp.t, x, sp.m, sp.u)) / lin)
        if limit is not None:
            drift_ratio = max(drift_ratio, np.linalg.norm(effective_drift(limit, sp.t, x, sp.m, sp.u)) / lin)
        noise_ratio = max(noise_ratio, abs(total_noise(spec, sp.t, x, sp.m, sp.u)) / (1.0 + x @ x + s2))
        G = diffusion_matrix(spec, sp.t, x[None, :], sp.m, _controls_batch(sp.u, 1))[0]
        if not np.allclose(G, G.T, atol=1e-12):
            min_eig = -np.inf
        else:
            min_eig = min(min_eig, float(np.linalg.eigvalsh(G).min()))
    return GrowthAudit(M, float(drift_ratio), float(noise_ratio), float(min_eig), len(sample))
