"""Scenario files: limit data, the n-indexed family rule and numerics.

Scenarios are YAML mappings. Every section is optional and falls back to
the built-in reference scenario (1-D crowd aversion with vanishing
Brownian noise). Schema, with defaults::

    name: reference
    dim: 1
    horizon: 1.0
    controls: {low: -1, high: 1, count: 21}
    drift: {A: 0, B: 1, c: 0, mean_weight: 0}       # f = A x + B u + c + w mean(m)
    running: {control_cost: 0.5, crowd: 0.5, mean_weight: 1.0, target: 0}
    terminal: {kind: crowd, weight: 1.0, mean_weight: 1.0, target: 0}
        # kind crowd: -w |x - a mean(m) - target|^2 ; abs: -w |x - target| ; linear: <coef, x>
    initial: {low: -1, high: 1, count: 2001}         # equispaced cloud (tensor grid for d > 1)
    family:
      n_list: [1, 2, 4, 8, 16, 32]
      diffusion: {scale: 1.0, power: 1.0}            # G^n = scale n^-power I ; null for none
      jumps: []                                      # [{rate, displacement, rate_power, size_power}]
      initial_shift: {size: 0.0, power: 1.0}         # m0^n = m0 translated by size n^-power
    numerics: {n_particles: 10000, dt: 0.005, h: 0.01, half_width: null, seed: 0,
               tol: 0.001, damping: 0.7, max_iter: 30, minimax_tol: null}
    constants: {M: 1.0, K: 0.0}
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from detlimit.equilibrium import SolverConfig
from detlimit.errors import ValidationError
from detlimit.generator import ControlSet, GeneratorSpec, JumpAtom
from detlimit.measures import EmpiricalMeasure

DEFAULTS = {
    "name": "reference",
    "dim": 1,
    "horizon": 1.0,
    "controls": {"low": -1.0, "high": 1.0, "count": 21},
    "drift": {"A": 0.0, "B": 1.0, "c": 0.0, "mean_weight": 0.0},
    "running": {"control_cost": 0.5, "crowd": 0.5, "mean_weight": 1.0, "target": 0.0},
    "terminal": {"kind": "crowd", "weight": 1.0, "mean_weight": 1.0, "target": 0.0, "coef": 1.0},
    "initial": {"low": -1.0, "high": 1.0, "count": 2001},
    "family": {
        "n_list": [1, 2, 4, 8, 16, 32],
        "diffusion": {"scale": 1.0, "power": 1.0},
        "jumps": [],
        "initial_shift": {"size": 0.0, "power": 1.0},
    },
    "numerics": {"n_particles": 10_000, "dt": 0.005, "h": 0.01, "half_width": None, "seed": 0,
                 "tol": 1e-3, "damping": 0.7, "max_iter": 30, "minimax_tol": None},
    "constants": {"M": 1.0, "K": 0.0},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ValidationError(f"unknown scenario key '{path}{k}'")
        if isinstance(base[k], dict) and v is not None:
            if not isinstance(v, dict):
                raise ValidationError(f"scenario key '{path}{k}' must be a mapping")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _matrix(v, d, what):
    a = np.asarray(v, float)
    if a.ndim == 0:
        return a * np.eye(d)
    if a.shape != (d, d):
        raise ValidationError(f"{what} must be a scalar or a {d}x{d} matrix")
    return a


def _vector(v, d, what):
    a = np.asarray(v, float)
    if a.ndim == 0:
        return np.full(d, float(a))
    if a.shape != (d,):
        raise ValidationError(f"{what} must be a scalar or a length-{d} vector")
    return a


@dataclass(frozen=True, eq=False)
class Scenario:
    raw: dict
    limit: GeneratorSpec
    initial: EmpiricalMeasure
    n_list: tuple
    solver: SolverConfig
    M: float
    K: float
    family_rule: Callable[[int], GeneratorSpec]
    initial_rule: Callable[[int], EmpiricalMeasure]
    minimax_tol: Optional[float] = None

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def dim(self) -> int:
        return self.limit.dim

    @property
    def horizon(self) -> float:
        return self.solver.horizon

    def member(self, n: int) -> GeneratorSpec:
        return self.family_rule(n)

    def initial_for(self, n: int) -> EmpiricalMeasure:
        return self.initial_rule(n)

    def with_numerics(self, **over) -> "Scenario":
        """Copy with numeric overrides (None values ignored)."""
        raw = copy.deepcopy(self.raw)
        raw["numerics"].update({k: v for k, v in over.items() if v is not None})
        return build_scenario(raw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def build_scenario(data: Optional[dict] = None) -> Scenario:
    """Validate a scenario mapping and build the limit generator and family."""
    raw = _merge(DEFAULTS, data or {})
    d = int(raw["dim"])
    if d < 1:
        raise ValidationError("dim must be >= 1")
    T = float(raw["horizon"])
    if T <= 0:
        raise ValidationError("horizon must be positive")

    c = raw["controls"]
    controls = ControlSet.grid(_vector(c["low"], d, "controls.low"), _vector(c["high"], d, "controls.high"),
                               np.broadcast_to(np.atleast_1d(c["count"]), (d,)))
    if controls.dim != d:
        raise ValidationError("control dimension must equal the state dimension")

    dr = raw["drift"]
    A, B = _matrix(dr["A"], d, "drift.A"), _matrix(dr["B"], d, "drift.B")
    c0, w_drift = _vector(dr["c"], d, "drift.c"), float(dr["mean_weight"])

    def drift(t, x, m, u):
        return x @ A.T + u @ B.T + c0 + w_drift * m.mean

    r = raw["running"]
    cc, crowd, w_run = float(r["control_cost"]), float(r["crowd"]), float(r["mean_weight"])
    tgt_run = _vector(r["target"], d, "running.target")

    def running(t, x, m, u):
        dev = x - w_run * m.mean - tgt_run
        return -cc * np.einsum("bi,bi->b", u, u) - crowd * np.einsum("bi,bi->b", dev, dev)

    te = raw["terminal"]
    kind, wt = te["kind"], float(te["weight"])
    tgt = _vector(te["target"], d, "terminal.target")
    if kind == "crowd":
        a = float(te["mean_weight"])

        def terminal(x, m):
            dev = x - a * m.mean - tgt
            return -wt * np.einsum("bi,bi->b", dev, dev)
    elif kind == "abs":
        def terminal(x, m):
            return -wt * np.linalg.norm(x - tgt, axis=1)
    elif kind == "linear":
        coef = _vector(te["coef"], d, "terminal.coef")

        def terminal(x, m):
            return x @ coef
    else:
        raise ValidationError(f"unknown terminal kind '{kind}'")

    limit = GeneratorSpec(d, controls, drift, running, terminal, name=raw["name"])

    fam = raw["family"]
    n_list = tuple(int(n) for n in fam["n_list"])
    if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])) or n_list[0] < 1:
        raise ValidationError("family.n_list must be a nonempty increasing list of positive integers")
    diff = fam["diffusion"]
    jumps = fam["jumps"] or []
    for j in jumps:
        if not {"rate", "displacement"} <= set(j):
            raise ValidationError("each jump needs 'rate' and 'displacement'")

    def family_rule(n: int) -> GeneratorSpec:
        diffusion = None
        if diff is not None and float(diff["scale"]) != 0.0:
            var = float(diff["scale"]) * n ** (-float(diff.get("power", 1.0)))
            G = var * np.eye(d)

            def diffusion(t, x, m, u, _G=G):
                return np.broadcast_to(_G, (x.shape[0], d, d))
        atoms = tuple(
            JumpAtom.constant(float(j["rate"]) * n ** float(j.get("rate_power", 0.0)),
                              _vector(j["displacement"], d, "jump displacement") * n ** (-float(j.get("size_power", 1.0))))
            for j in jumps)
        return GeneratorSpec(d, controls, drift, running, terminal, diffusion, atoms, name=f"{raw['name']}/n={n}")

    ini = raw["initial"]
    count = int(ini["count"])
    if count < 1:
        raise ValidationError("initial.count must be positive")
    lo, hi = _vector(ini["low"], d, "initial.low"), _vector(ini["high"], d, "initial.high")
    axes = [np.linspace(lo[i], hi[i], count) for i in range(d)]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    m0 = EmpiricalMeasure.uniform(pts)
    shift = fam["initial_shift"]

    def initial_rule(n: int) -> EmpiricalMeasure:
        s = float(shift["size"]) * n ** (-float(shift.get("power", 1.0)))
        return m0 if s == 0.0 else EmpiricalMeasure.uniform(pts + s)

    nu = raw["numerics"]
    solver = SolverConfig(horizon=T, dt=float(nu["dt"]), h=float(nu["h"]),
                          half_width=None if nu["half_width"] is None else float(nu["half_width"]),
                          n_particles=int(nu["n_particles"]), seed=int(nu["seed"]), max_iter=int(nu["max_iter"]),
                          damping=float(nu["damping"]), tol=float(nu["tol"]), growth_M=float(raw["constants"]["M"]))
    n_steps = T / solver.dt
    if abs(n_steps - round(n_steps)) > 1e-9 * n_steps:
        raise ValidationError("numerics.dt must divide the horizon")
    mt = nu["minimax_tol"]
    return Scenario(raw, limit, m0, n_list, solver, float(raw["constants"]["M"]), float(raw["constants"]["K"]),
                    family_rule, initial_rule, None if mt is None else float(mt))


def reference_scenario(**numerics) -> Scenario:
    """The built-in reference scenario, optionally with numeric overrides."""
    return build_scenario({"numerics": numerics} if numerics else None)


def load_scenario(path) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"scenario file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"malformed scenario file {p}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ValidationError(f"scenario file {p} must contain a mapping")
    return build_scenario(data)
