"""Command line entry point.

Exit codes: 0 success, 1 invalid input (bad arguments, missing or malformed
files), 2 numerical failure or a failed verification.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from detlimit.dynamics import ConstantPolicy
from detlimit.equilibrium import (free_control_index, load_solution, save_solution, solve_minimax_mfg,
                                  solve_stochastic_mfg, verify_minimax, verify_probabilistic)
from detlimit.errors import NumericalError, ValidationError
from detlimit.scenario import build_scenario, load_scenario
from detlimit.simulator import SimConfig, dump_ensemble, simulate
from detlimit.study import run_bounds_audit, run_convergence_study
from detlimit.value import DeviationConfig, policy_dictionary

OUT_ENV = "DETLIMIT_OUT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="detlimit", description="Mean field games near their deterministic limit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", required=True, help="YAML scenario file")
        sp.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./results)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--particles", type=int)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--grid-h", type=float)

    sp = sub.add_parser("simulate", help="interacting particles under the free control")
    common(sp)
    sp.add_argument("--n", type=int, help="family index (default: first of n_list)")
    sp = sub.add_parser("solve-mfg", help="stochastic MFG for one family member")
    common(sp)
    sp.add_argument("--n", type=int)
    common(sub.add_parser("solve-minimax", help="first-order (limit) MFG"))
    sp = sub.add_parser("verify", help="check a saved solution")
    common(sp, scenario=False)
    sp.add_argument("--solution", required=True)
    sp.add_argument("--tol", type=float, help="default 3 (h + dt)")
    sp.add_argument("--policies", type=int, default=20)
    common(sub.add_parser("converge", help="convergence study over the family"))
    sp = sub.add_parser("audit-bounds", help="moment and closeness bounds for one family member")
    common(sp)
    sp.add_argument("--n", type=int)
    return p


def _scenario(args):
    sc = load_scenario(args.scenario)
    return sc.with_numerics(seed=args.seed, n_particles=args.particles, dt=args.dt, h=args.grid_h)


def _out(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "results")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pick_n(sc, n):
    if n is None:
        return sc.n_list[0]
    if n < 1:
        raise ValidationError("--n must be positive")
    return n


def _cmd_simulate(args) -> str:
    sc = _scenario(args)
    n = _pick_n(sc, args.n)
    spec = sc.member(n)
    cfg = sc.solver
    ens = simulate(spec, ConstantPolicy(free_control_index(spec)), None, sc.initial_for(n),
                   SimConfig(cfg.n_particles, cfg.dt, cfg.seed, cfg.horizon))
    out = _out(args)
    dump_ensemble(ens, out / f"ensemble_n{n}.txt")
    return f"simulate: n={n} particles={ens.size} steps={ens.time_grid.size - 1} -> {out}"


def _save_with_scenario(sol, sc, out: Path, extra: dict):
    save_solution(sol, out)
    (out / "scenario.yaml").write_text(sc.to_yaml())
    (out / "meta.json").write_text(json.dumps(extra, indent=2, sort_keys=True))


def _cmd_solve_mfg(args) -> str:
    sc = _scenario(args)
    n = _pick_n(sc, args.n)
    sol = solve_stochastic_mfg(sc.member(n), sc.initial_for(n), sc.solver)
    out = _out(args)
    _save_with_scenario(sol, sc, out, {"n": n})
    inc = sol.diagnostics["increments"][-1]
    return f"solve-mfg: n={n} converged={sol.converged} iterations={sol.diagnostics['iterations']} last_increment={inc:.3e} -> {out}"


def _cmd_solve_minimax(args) -> str:
    sc = _scenario(args)
    sol = solve_minimax_mfg(sc.limit, sc.initial, sc.solver)
    out = _out(args)
    _save_with_scenario(sol, sc, out, {"n": None})
    return f"solve-minimax: converged={sol.converged} iterations={sol.diagnostics['iterations']} -> {out}"


def _cmd_verify(args) -> tuple[str, bool]:
    d = Path(args.solution)
    if not d.is_dir():
        raise ValidationError(f"solution directory not found: {d}")
    if not (d / "scenario.yaml").exists():
        raise ValidationError(f"no scenario.yaml in {d}")
    import yaml

    sc = build_scenario(yaml.safe_load((d / "scenario.yaml").read_text()))
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    sol = load_solution(d)
    tol = args.tol if args.tol is not None else 3 * (sol.value.h + float(sol.diagnostics.get("dt", sc.solver.dt)))
    if sol.kind == "minimax":
        rep = verify_minimax(sol, sc.limit, tol)
        lines = {"initial": rep.initial_gap, "pushforward": rep.pushforward_gap, "along_path": rep.along_path_gap}
    else:
        n = meta.get("n") or sc.n_list[0]
        spec = sc.member(n)
        pol = policy_dictionary(spec, sol.value, args.policies, seed=0)
        d0 = sc.dim
        starts = ((0.0, np.zeros(d0)), (0.5 * sc.horizon, 0.5 * np.ones(d0)))
        rep = verify_probabilistic(sol, spec, pol, tol, DeviationConfig(starts))
        lines = {"achieved": rep.achieved_gap, "flow": rep.flow_gap, "deviation": rep.deviation_excess}
    (Path(d) / "verify.json").write_text(json.dumps({**lines, "tol": tol, "passed": rep.passed}, indent=2, sort_keys=True))
    body = " ".join(f"{k}={v:.3e}" for k, v in lines.items())
    return f"verify: {sol.kind} {'PASS' if rep.passed else 'FAIL'} tol={tol:.3e} {body}", rep.passed


def _cmd_converge(args) -> str:
    sc = _scenario(args)
    out = _out(args)
    rep = run_convergence_study(sc, out)
    (out / "scenario.yaml").write_text(sc.to_yaml())
    last = rep.rows[-1]
    return (f"converge: {len(rep.rows)} rows, last n={last.n} sup_w2={last.sup_w2:.3e} "
            f"value_error={last.value_error:.3e} floor={rep.noise_floor_w2:.3e} -> {out / 'convergence.csv'}")


def _cmd_audit(args) -> tuple[str, bool]:
    sc = _scenario(args)
    n = _pick_n(sc, args.n)
    rep = run_bounds_audit(sc, n)
    out = _out(args)
    (out / f"bounds_n{n}.json").write_text(json.dumps(rep.as_dict(), indent=2, sort_keys=True))
    return (f"audit-bounds: n={n} {'PASS' if rep.passed else 'FAIL'} C1={rep.C1:.3e} "
            f"max_s2={rep.max_second_moment:.3e} C3={rep.C3:.3e} ratio={rep.moment_growth_ratio:.3e}", rep.passed)


COMMANDS = {
    "simulate": _cmd_simulate, "solve-mfg": _cmd_solve_mfg, "solve-minimax": _cmd_solve_minimax,
    "verify": _cmd_verify, "converge": _cmd_converge, "audit-bounds": _cmd_audit,
}


def cli_dispatch(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        result = COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    ok = True
    if isinstance(result, tuple):
        result, ok = result
    print(result)
    return 0 if ok else 2


def main() -> None:
    sys.exit(cli_dispatch())
