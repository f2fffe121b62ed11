"""Acceptance criteria, one test per criterion, each announcing a PASS/FAIL line."""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from detlimit.dynamics import PiecewiseControl, integrate_batch
from detlimit.equilibrium import (along_path_residuals, solve_minimax_mfg, solve_stochastic_mfg,
                                  verify_minimax)
from detlimit.generator import ControlSet, GeneratorSpec, TestFunction, apply_generator, effective_drift, total_noise
from detlimit.measures import (EmpiricalMeasure, FlowOfProbabilities, PathMeasure, path_w2, pushforward_at,
                               wasserstein2, w2_brute_force)
from detlimit.scenario import reference_scenario
from detlimit.simulator import SimConfig, martingale_residual, simulate
from detlimit.study import run_bounds_audit, run_convergence_study
from detlimit.value import (DeviationConfig, FeedbackPolicy, GridConfig, check_deviation, evaluate,
                            expected_payoff, policy_dictionary, solve_deterministic_value, solve_stochastic_value)
from helpers import const_diffusion, jump, make_spec


# 1 -----------------------------------------------------------------------------


def test_criterion_01_wasserstein(announce):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_perm = worst_1d = 0.0
    for _ in range(50):
        a = EmpiricalMeasure.uniform(rng.normal(size=(4, 2)))
        b = EmpiricalMeasure.uniform(rng.normal(size=(4, 2)))
        worst_perm = max(worst_perm, abs(wasserstein2(a, b, "assignment") - w2_brute_force(a, b)))
        a1 = EmpiricalMeasure.uniform(rng.normal(size=(7, 1)))
        b1 = EmpiricalMeasure.uniform(rng.normal(size=(7, 1)) * 2 + 1)
        worst_1d = max(worst_1d, abs(wasserstein2(a1, b1, "exact1d") - wasserstein2(a1, b1, "assignment")))
    elapsed = time.perf_counter() - t0
    ok = worst_perm <= 1e-9 and worst_1d <= 1e-9 and elapsed < 5
    announce("criterion 1 (W2 correctness)", ok,
             f"assignment-vs-brute {worst_perm:.2e}, exact1d-vs-assignment {worst_1d:.2e}, {elapsed:.2f}s")
    assert ok


# 2 -----------------------------------------------------------------------------


def test_criterion_02_path_marginal_bound(announce):
    rng = np.random.default_rng(2)
    tg = np.linspace(0, 1, 6)
    worst = np.inf
    for _ in range(20):
        P = int(rng.integers(2, 7))
        chis = []
        for _ in range(2):
            x = np.cumsum(rng.normal(size=(P, tg.size, 2)), axis=1)
            z = np.cumsum(rng.normal(size=(P, tg.size)), axis=1)
            z -= z[:, :1]
            chis.append(PathMeasure(tg, x, z))
        pw = path_w2(*chis)
        for t in tg:
            worst = min(worst, pw - wasserstein2(pushforward_at(chis[0], t), pushforward_at(chis[1], t), "assignment"))
    ok = worst >= -1e-9
    announce("criterion 2 (path-marginal bound)", ok, f"min slack {worst:.3e}")
    assert ok


# 3 -----------------------------------------------------------------------------


def test_criterion_03_generator_identities(announce):
    rng = np.random.default_rng(3)
    d = 3
    A = rng.normal(size=(d, d))
    spec = make_spec(
        dim=d,
        drift=lambda t, x, m, u: x @ A.T + u,
        diffusion=lambda t, x, m, u: np.einsum("bi,bj->bij", x, x) + np.eye(d),
        jumps=[jump(0.7, [0.3, -0.2, 0.5]), jump(0.4, [1.5, 0.0, -1.0])],
        controls=ControlSet(rng.normal(size=(3, d))),
    )
    worst = 0.0
    for _ in range(100):
        x1, x2, x3 = rng.normal(size=(3, d))
        u = spec.controls.points[rng.integers(0, 3)]
        m = EmpiricalMeasure.uniform(rng.normal(size=(5, d)))
        t = float(rng.random())
        S, b = total_noise(spec, t, x1, m, u), effective_drift(spec, t, x1, m, u)
        q = apply_generator(spec, TestFunction("coupling_quadratic"), t, x1, m, u, x2=x2)
        lin = apply_generator(spec, TestFunction("coupling_linear"), t, x1, m, u, x3=x3)
        exp_q = S + 2 * b @ (x1 - x2)
        exp_l = b @ x3
        worst = max(worst, abs(q - exp_q) / (1 + abs(exp_q)), abs(lin - exp_l) / (1 + abs(exp_l)))
    ok = worst <= 1e-12
    announce("criterion 3 (generator identities)", ok, f"max relative deviation {worst:.2e}")
    assert ok


# 4 -----------------------------------------------------------------------------


def _residual_case(spec, dt, phi, N=20_000, T=0.5):
    ens = simulate(spec, _Const(), None, EmpiricalMeasure.uniform(np.array([[0.3], [-0.2], [0.8]])),
                   SimConfig(N, dt, seed=11, horizon=T))
    return martingale_residual(ens, spec, None, phi, 0.0, T), ens


class _Const:
    def indices(self, t, x, m):
        return np.zeros(x.shape[0], dtype=int)


def _bias_bound(spec, ens, dt, T):
    """Per-step Euler bias of the quadratic residual is at most (|f - comp| + J)^2 dt^2,
    with J = sum rate |y|; |f| is taken along the simulated paths."""
    F = 0.0
    for k in range(ens.time_grid.size - 1):
        y = ens.x[:, k]
        F = max(F, float(np.abs(spec.drift(0.0, y, EmpiricalMeasure.uniform(y), None)).max()))
    J = sum(a.rate(0, np.zeros((1, 1)), None, None)[0] * np.abs(a.displacement(0, np.zeros((1, 1)), None, None)).max()
            for a in spec.jumps)
    return (F + 2 * J) ** 2 * dt * T


def test_criterion_04_martingale_residuals(announce):
    t0 = time.perf_counter()
    ou = lambda t, x, m, u: 0.5 - 0.8 * x + 0.3 * m.mean
    specs = {
        "brownian": make_spec(drift=ou, diffusion=const_diffusion([[0.4]])),
        "jumps": make_spec(drift=ou, jumps=[jump(2.0, [0.5]), jump(0.5, [-1.5])]),
        "deterministic": make_spec(drift=ou),
    }
    dt, T = 1e-3, 0.5
    ok = True
    lines = []
    for name, spec in specs.items():
        for phi in (TestFunction.linear([1.0]), TestFunction.shifted_quadratic([0.2])):
            r, ens = _residual_case(spec, dt, phi, T=T)
            bias = 0.0 if phi.kind == "linear" else _bias_bound(spec, ens, dt, T)
            good = abs(r.mean) <= 3 * r.std_err + bias + 1e-12
            ok &= good
            lines.append(f"{name}/{phi.kind}: |mean|={abs(r.mean):.2e} 3SE={3 * r.std_err:.2e} bias<={bias:.2e}")
    det = specs["deterministic"]
    phi = TestFunction.shifted_quadratic([0.2])
    b1 = _residual_case(det, 2e-3, phi, T=T)[0].mean
    b2 = _residual_case(det, 1e-3, phi, T=T)[0].mean
    ratio = abs(b1) / abs(b2)
    elapsed = time.perf_counter() - t0
    ok = ok and ratio >= 1.8 and elapsed < 120
    announce("criterion 4 (martingale residuals)", ok,
             f"deterministic bias halving ratio {ratio:.3f}, {elapsed:.1f}s; " + "; ".join(lines))
    assert ok


# 5 -----------------------------------------------------------------------------


def test_criterion_05_moment_bounds(announce):
    sc = reference_scenario()
    rep = run_bounds_audit(sc, 4)
    ok = rep.C1_ok and rep.C3_ok and rep.max_second_moment <= 1.1 * rep.C1
    announce("criterion 5 (moment bounds, n=4)", ok,
             f"max s2={rep.max_second_moment:.4f} <= C1={rep.C1:.4g}; "
             f"max E|Y_t|^2/(1+E|Y_s|^2)={rep.moment_growth_ratio:.4f} <= C3={rep.C3:.4g}")
    assert ok


# 6 -----------------------------------------------------------------------------


def _eikonal_error(h, dt):
    spec = GeneratorSpec(1, ControlSet.grid(-1, 1, 21), lambda t, x, m, u: u,
                         lambda t, x, m, u: np.zeros(x.shape[0]), lambda x, m: -np.abs(x[:, 0]))
    tg = np.linspace(0, 1, int(round(1 / dt)) + 1)
    flow = FlowOfProbabilities.constant(tg, EmpiricalMeasure.dirac([0.0]))
    V = solve_deterministic_value(spec, flow, GridConfig(2.0, h))
    exact = -np.maximum(0, np.abs(V.axis)[None, :] - (1 - tg)[:, None])
    return float(np.abs(V.values - exact).max())


def test_criterion_06_deterministic_value_oracle(announce):
    t0 = time.perf_counter()
    e_fine = _eikonal_error(1 / 200, 1 / 200)
    elapsed = time.perf_counter() - t0
    e_coarse = _eikonal_error(1 / 100, 1 / 100)
    # Feet of the optimal controls land on lattice nodes when h = dt, so the scheme
    # is exact; an error already at round-off at both resolutions cannot shrink further.
    exact = max(e_coarse, e_fine) <= 1e-12
    ratio = e_coarse / e_fine if e_fine > 0 else np.inf
    ok = e_fine <= 2 * (2 / 200) and e_coarse <= 2 * (2 / 100) and (ratio >= 1.8 or exact) and elapsed < 30
    announce("criterion 6 (deterministic value oracle)", ok,
             f"err(1/100)={e_coarse:.2e} err(1/200)={e_fine:.2e} ratio={ratio:.2f} "
             f"{'(exact at round-off) ' if exact else ''}{elapsed:.2f}s")
    assert ok


# 7 -----------------------------------------------------------------------------


def test_criterion_07_stochastic_value_oracle(announce):
    d, h, dt = 2, 0.05, 0.01
    spec = make_spec(dim=d, diffusion=const_diffusion(0.5 * np.eye(d)), terminal=lambda x, m: x[:, 0])
    tg = np.linspace(0, 1, 101)
    zeta = FlowOfProbabilities.constant(tg, EmpiricalMeasure.dirac(np.zeros(d)))
    V = solve_stochastic_value(spec, zeta, GridConfig(2.5, h))
    grid_err = float(np.abs(V.values - V.nodes()[:, 0].reshape(V.values.shape[1:])[None]).max())
    mc_ok = True
    worst_z = 0.0
    for s, xi in [(0.0, [0.3, -0.4]), (0.5, [-1.0, 0.2]), (0.9, [1.2, 1.2])]:
        mean, se = expected_payoff(spec, _Const(), zeta, (s, np.array(xi)), DeviationConfig((), 4000, dt, seed=3))
        gap = abs(mean - evaluate(V, s, xi))
        worst_z = max(worst_z, gap / se)
        mc_ok &= gap <= 3 * se
    ok = grid_err <= 3 * (h + dt) and mc_ok
    announce("criterion 7 (stochastic value oracle)", ok,
             f"max |V - x1| on grid {grid_err:.2e} (tol {3 * (h + dt):.2f}); Monte-Carlo max gap {worst_z:.2f} SE")
    assert ok


# 8 -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def reference():
    return reference_scenario()


@pytest.fixture(scope="module")
def minimax_reference(reference):
    return solve_minimax_mfg(reference.limit, reference.initial, reference.solver)


def test_criterion_08_minimax_self_consistency(announce, reference, minimax_reference):
    sol = minimax_reference
    cfg = reference.solver
    tol = 3 * (cfg.h + cfg.dt)
    rep = verify_minimax(sol, reference.limit, tol)
    # corrupt the path starting at the right edge: full speed away from the crowd
    chi = sol.traj_measure
    j = int(np.argmax(chi.x[:, 0, 0]))
    up = PiecewiseControl.constant(chi.time_grid, reference.limit.controls.index_nearest([1.0]))
    x, z, _ = integrate_batch(reference.limit, sol.flow, chi.x[j:j + 1, 0], up)
    X, Z = chi.x.copy(), chi.z.copy()
    X[j], Z[j] = x[0], z[0]
    bad = type(sol)(sol.kind, sol.value, sol.flow, sol.initial, PathMeasure(chi.time_grid, X, Z, chi.weights),
                    None, sol.reference_flow, sol.diagnostics)
    gap = float(along_path_residuals(bad, reference.limit)[j].max())
    ok = sol.converged and rep.passed and gap >= 10 * tol
    announce("criterion 8 (minimax self-consistency)", ok,
             f"converged={sol.converged}, along-path residual {rep.along_path_gap:.2e} <= {tol:.3f}, "
             f"initial {rep.initial_gap:.1e}, pushforward {rep.pushforward_gap:.1e}, corrupted gap {gap:.3f}")
    assert ok


# 9 -----------------------------------------------------------------------------


def test_criterion_09_deviation_inequality(announce, reference):
    spec = reference.member(4)
    sol = solve_stochastic_mfg(spec, reference.initial, reference.solver)
    cfg = reference.solver
    tol = 3 * (cfg.h + cfg.dt)
    zeta = sol.reference_flow
    policies = policy_dictionary(spec, sol.value, 50, seed=9)
    starts = ((0.0, np.array([0.0])), (0.0, np.array([0.8])), (0.5, np.array([-0.6])))
    dev_cfg = DeviationConfig(starts, n_particles=2000, seed=21)
    dev = check_deviation(sol.value, spec, zeta, policies, dev_cfg)
    opt = FeedbackPolicy(sol.value, spec)
    attain = []
    for s, xi in starts:
        mean, se = expected_payoff(spec, opt, zeta, (s, xi), dev_cfg)
        attain.append((abs(mean - evaluate(sol.value, s, xi)), se))
    ok_dev = bool(np.all(dev.gaps <= 3 * dev.std_errs + tol))
    ok_att = all(g <= 3 * se + tol for g, se in attain)
    ok = sol.converged and len(policies) == 50 and ok_dev and ok_att
    announce("criterion 9 (deviation inequality)", ok,
             f"max_gap {dev.max_gap:.3e} (max gap - 3SE {dev.max_excess:.3e}, tol {tol:.3f}); "
             f"optimal policy gaps " + ", ".join(f"{g:.3e}+-{se:.1e}" for g, se in attain))
    assert ok


# 10 ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def study(reference, minimax_reference, tmp_path_factory):
    t0 = time.perf_counter()
    rep = run_convergence_study(reference, tmp_path_factory.mktemp("study"), minimax=minimax_reference)
    return rep, time.perf_counter() - t0


def test_criterion_10_decrease(announce, study):
    rep, elapsed = study
    w2, ve = rep.column("sup_w2"), rep.column("value_error")
    ok = w2[-1] <= w2[0] / 3 and ve[-1] <= ve[0] / 3 and elapsed < 20 * 60
    announce("criterion 10a (sup-W2 and value error fall to 1/3 of n=1)", ok,
             f"sup_w2 {w2[0]:.4f} -> {w2[-1]:.4f}; value_error {ve[0]:.4f} -> {ve[-1]:.4f}; {elapsed:.0f}s")
    assert ok


def test_criterion_10_noise_floor(announce, study):
    rep, _ = study
    w2, ve = rep.column("sup_w2"), rep.column("value_error")
    ok = w2[-1] <= 3 * rep.noise_floor_w2 and ve[-1] <= 3 * rep.noise_floor_value
    announce("criterion 10b (final entries within 3x two-seed noise floor)", ok,
             f"sup_w2 {w2[-1]:.4f} vs 3x floor {3 * rep.noise_floor_w2:.4f}; "
             f"value_error {ve[-1]:.4f} vs 3x floor {3 * rep.noise_floor_value:.4f}")
    assert ok


def test_criterion_10_coupled_distance(announce, study):
    rep, _ = study
    eps, cd = rep.column("eps"), rep.column("coupled_distance")
    ratios = cd / eps
    C = float(np.exp(np.log(ratios).mean()))  # one constant for all n (geometric mean fit)
    ok = bool(np.all(cd <= 2 * C * eps)) and bool(np.all(np.isfinite(ratios)))
    announce("criterion 10c (coupled distance <= C eps^n)", ok,
             f"fitted C={C:.3f}; ratios " + ", ".join(f"{r:.3f}" for r in ratios))
    assert ok


# 11 ----------------------------------------------------------------------------


def test_criterion_11_reproducibility(announce, tmp_path):
    scen = tmp_path / "s.yaml"
    scen.write_text("name: repro\ninitial: {count: 201}\nfamily: {n_list: [1, 4]}\n"
                    "numerics: {n_particles: 1500, dt: 0.02, h: 0.04, seed: 5}\n")
    outs = []
    for threads in ("1", "1", "4"):
        out = tmp_path / f"run{len(outs)}"
        env = dict(os.environ, OMP_NUM_THREADS=threads, OPENBLAS_NUM_THREADS=threads, MKL_NUM_THREADS=threads)
        res = subprocess.run([sys.executable, "-m", "detlimit", "converge", "--scenario", str(scen), "--out", str(out)],
                             env=env, capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        outs.append(out)
    files = ["convergence.csv"] + [f"plots/{p.name}" for p in sorted((outs[0] / "plots").iterdir())]
    same = all((outs[0] / f).read_bytes() == (o / f).read_bytes() for o in outs[1:] for f in files)
    announce("criterion 11 (byte-identical CSV across runs and thread counts)", same,
             f"{len(files)} files compared over 3 runs (threads 1, 1, 4)")
    assert same
