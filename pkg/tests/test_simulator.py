import numpy as np
import pytest

from detlimit.dynamics import ConstantPolicy
from detlimit.errors import NumericalError, ValidationError
from detlimit.generator import TestFunction
from detlimit.measures import EmpiricalMeasure, FlowOfProbabilities
from detlimit.simulator import (SimConfig, dump_ensemble, empirical_flow, martingale_residual, sample_initial,
                                simulate, simulation_grid)
from helpers import const_diffusion, jump, make_spec

ORIGIN = EmpiricalMeasure.dirac([0.0])


def run(spec, n=20_000, dt=0.01, T=1.0, seed=3, m0=ORIGIN):
    return simulate(spec, ConstantPolicy(0), None, m0, SimConfig(n, dt, seed, T))


def test_brownian_variance():
    ens = run(make_spec(diffusion=const_diffusion([[0.5]])))
    y = ens.x[:, -1, 0]
    # Var of the sample variance of a Gaussian is 2 sigma^4 / (n - 1)
    assert abs(y.var(ddof=1) - 0.5) <= 4 * np.sqrt(2 * 0.25 / (y.size - 1))
    assert abs(y.mean()) <= 4 * np.sqrt(0.5 / y.size)


def test_small_jumps_are_compensated_and_large_are_not():
    small = run(make_spec(jumps=[jump(3.0, [0.5])]), dt=0.005)
    large = run(make_spec(jumps=[jump(0.5, [2.0])]), dt=0.005)
    ys, yl = small.x[:, -1, 0], large.x[:, -1, 0]
    assert abs(ys.mean()) <= 4 * ys.std() / np.sqrt(ys.size)
    assert abs(yl.mean() - 1.0) <= 4 * yl.std() / np.sqrt(yl.size)
    # Poisson variance rate * |y|^2 * T, up to the Bernoulli thinning correction
    assert ys.var() == pytest.approx(3.0 * 0.25, rel=0.05)


def test_jump_probability_limit():
    with pytest.raises(NumericalError):
        run(make_spec(jumps=[jump(100.0, [0.1])]), n=10, dt=0.01)


def test_same_seed_same_paths_and_prefix_stability():
    spec = make_spec(diffusion=const_diffusion([[1.0]]), jumps=[jump(1.0, [0.3])])
    m0 = EmpiricalMeasure.uniform(np.linspace(-1, 1, 11)[:, None])
    a = run(spec, n=500, m0=m0)
    b = run(spec, n=500, m0=m0)
    c = run(spec, n=1000, m0=m0)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.x, c.x[:500])
    assert not np.array_equal(a.x, run(spec, n=500, m0=m0, seed=4).x)


def test_sample_initial_respects_weights():
    m0 = EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([0.2, 0.8]))
    draws = sample_initial(m0, 50_000, 0)[:, 0]
    assert draws.mean() == pytest.approx(0.8, abs=0.01)


def test_simulation_grid_refines_flow_nodes():
    flow = FlowOfProbabilities.constant(np.linspace(0, 1, 5), ORIGIN)
    tg = simulation_grid(flow, 0.05)
    assert tg.size == 21 and np.isin(flow.time_grid, tg).all()
    with pytest.raises(ValidationError):
        simulation_grid(flow, 0.07)
    with pytest.raises(ValidationError):
        simulation_grid(None, 0.1)


def test_empirical_flow_on_coarse_grid():
    ens = run(make_spec(drift=lambda t, x, m, u: np.ones_like(x)), n=4, dt=0.1)
    fl = empirical_flow(ens, [0.0, 0.5, 1.0])
    assert fl[1].mean[0] == pytest.approx(0.5)
    with pytest.raises(ValidationError):
        empirical_flow(ens, [0.0, 0.55])


def test_deterministic_linear_residual_is_exactly_zero():
    spec = make_spec(drift=lambda t, x, m, u: 0.3 - x + 0.5 * m.mean)
    ens = run(spec, n=50, m0=EmpiricalMeasure.uniform(np.array([[0.0], [1.0]])))
    r = martingale_residual(ens, spec, None, TestFunction.linear([1.0]), 0.0, 1.0)
    assert abs(r.mean) < 1e-13


def test_coupling_residual_has_zero_mean_under_frozen_flow():
    spec = make_spec(drift=lambda t, x, m, u: m.mean - x, diffusion=const_diffusion([[0.2]]))
    tg = np.linspace(0, 1, 101)
    zeta = FlowOfProbabilities.constant(tg, EmpiricalMeasure.dirac([0.5]))
    ens = simulate(spec, ConstantPolicy(0), zeta, ORIGIN, SimConfig(20_000, 0.01, 1))
    r = martingale_residual(ens, spec, zeta, TestFunction("coupling_linear"), 0.2, 0.8)
    assert abs(r.mean) <= 3 * r.std_err + 1e-3


def test_dump_has_header_and_rows(tmp_path):
    ens = run(make_spec(), n=3, dt=0.5)
    dump_ensemble(ens, tmp_path / "e.txt")
    lines = (tmp_path / "e.txt").read_text().splitlines()
    assert lines[0].split() == ["path", "t", "x1", "z", "u1", "jump"]
    assert len(lines) == 1 + 3 * 3
