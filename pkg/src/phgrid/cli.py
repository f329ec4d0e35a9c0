"""Command-line front end: simulate, certify, solve, plot.

Exit codes: 0 success, 1 validation, 2 solver failure, 3 certification
failure.  Every failure prints one stderr line of the form
``phgrid: [<category>] <message>`` so callers can branch on the
bracketed category without parsing prose.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import eip, plots, sim
from .config import ConfigError, load_scenario

_EXIT = {"validation": 1, "solver": 2, "certification": 3}


class _Failure(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _scenario(source: str):
    try:
        return load_scenario(source)
    except ConfigError as exc:
        raise _Failure("validation", str(exc))


# -- simulate ---------------------------------------------------------------

def _settle_fmt(value) -> str:
    return "unsettled" if value is None else f"{value:.4f}"


def _cmd_simulate(args) -> int:
    sc = _scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        traj = sim.integrate(sc)
    except sim.IntegrationError as exc:
        raise _Failure("solver", str(exc))

    lyapunov = {"verdict": "not-evaluated", "segments": []}
    h_mg = None
    try:
        h_mg, reports = eip.storage_series(traj)
        bad = sum(len(rep.violations) for (_seg, rep) in reports)
        lyapunov["verdict"] = "non-increasing" if bad == 0 \
            else f"{bad} increasing steps"
        for (seg, rep) in reports:
            lyapunov["segments"].append({
                "t_start": seg[0], "t_end": seg[1],
                "H_start": float(rep.H[0]), "H_end": float(rep.H[-1]),
                "violations": int(len(rep.violations)),
                "tolerance": rep.tolerance,
            })
    except (eip.NoEquilibriumError, eip.CertificationError) as exc:
        lyapunov["verdict"] = f"not-evaluated ({exc})"

    csv_path = out / "trajectory.csv"
    csv_path.write_text(sim.write_csv(traj, h_mg))

    metrics: dict = {"scenario": sc.name, "horizon": sc.horizon,
                     "samples": traj.n_samples, "lyapunov": lyapunov,
                     "dgus": {}}
    bands = sim.settling_metrics(traj, band=args.band)
    for i, rows in bands.items():
        ref = sc.graph.dgus[i].controller.ref
        end_err = traj.dgu_voltage(i)[-1] - ref.vec
        metrics["dgus"][str(i)] = {
            "end_error_V": [float(end_err[0]), float(end_err[1])],
            "windows": [{
                "t_start": m.t_start, "t_end": m.t_end,
                "active": m.active,
                "settle_s": m.settle_time,
                "max_deviation_V": m.max_deviation,
                "overshoot_V": m.overshoot,
            } for m in rows],
        }
    balance = eip.coupling_supply_balance(traj)
    metrics["supply_imbalance_max"] = float(balance.max())
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")

    figures = plots.render_all(csv_path, out)

    print(f"scenario {sc.name}: {traj.n_samples} samples over "
          f"{sc.horizon:g} s")
    print(f"Lyapunov: {lyapunov['verdict']}")
    for i, rows in bands.items():
        parts = ", ".join(
            f"[{m.t_start:g},{m.t_end:g}] "
            + ("inactive" if not m.active else
               f"settle {_settle_fmt(m.settle_time)} s "
               f"overshoot {m.overshoot:.1f} V")
            for m in rows)
        print(f"  unit {i}: {parts}")
    print(f"wrote {csv_path}, {out / 'metrics.json'}, "
          + ", ".join(str(p) for p in figures))
    return 0


# -- check-eip --------------------------------------------------------------

def _scenario_loads(sc) -> list:
    """Every static draw in the scenario: (label, node, LoadModel)."""
    out = []
    for i in sorted(sc.graph.dgus):
        lm = sc.graph.dgus[i].plant.local_load
        if lm is not None:
            out.append((f"local@dgu{i}", i, lm))
    for j in sorted(sc.graph.load_nodes):
        out.append((f"node{j}", j, sc.graph.load_nodes[j]))
    return out


def _cmd_check_eip(args) -> int:
    sc = _scenario(args.scenario)
    v0 = sc.v0_nominal
    # Default: certify at the nominal amplitude.  The ZIP amplitude
    # conditions are genuinely amplitude-dependent (constant-power terms
    # dominate at low voltage), so a wide default interval would fail
    # loads that are perfectly well behaved around their operating point;
    # interval verdicts are opt-in via the flags.
    if args.vmin is None and args.vmax is None:
        v_hat = v0
        desc = f"at nominal amplitude {v0:g} V"
    else:
        vmin = args.vmin if args.vmin is not None else v0
        vmax = args.vmax if args.vmax is not None else v0
        if vmin <= 0 or vmax <= 0:
            raise _Failure("validation", "--vmin/--vmax must be positive")
        if vmin == vmax:
            v_hat = vmin
            desc = f"at amplitude {vmin:g} V"
        else:
            v_hat = (vmin, vmax)
            desc = (f"over amplitudes [{min(vmin, vmax):g}, "
                    f"{max(vmin, vmax):g}] V")
    rows = _scenario_loads(sc)
    if not rows:
        print("scenario has no loads")
        return 0
    print(f"certifying {desc}")
    print(f"{'load':<12} {'node':>4} {'kind':>4}  "
          f"{'classification':<14} {'margin_a':>12} {'margin_b':>14}")
    all_passive = True
    for (label, node, lm) in rows:
        verdict = eip.certify_load(lm, v_hat)
        w = verdict.witness
        print(f"{label:<12} {node:>4} {lm.kind:>4}  "
              f"{verdict.classification:<14} "
              f"{w['margin_a']:>12.6g} {w['margin_b']:>14.6g}")
        all_passive &= verdict.passive
    if not all_passive:
        raise _Failure("certification",
                       "at least one load is not certified passive")
    return 0


# -- equilibrium ------------------------------------------------------------

def _cmd_equilibrium(args) -> int:
    sc = _scenario(args.scenario)
    at = sc.horizon if args.at is None else args.at
    active, loads, refs = sim.schedule_at(sc, at)
    try:
        eq = eip.solve_equilibrium(sc.graph, active,
                                   v0_nominal=sc.v0_nominal,
                                   load_overrides=loads,
                                   ref_overrides=refs)
    except eip.NoEquilibriumError as exc:
        raise _Failure("solver", str(exc))
    model = eq.model
    print(f"configuration at t={at:g} s: active units "
          f"{sorted(active)}; residual {eq.residual:.3e}")
    print(f"{'node':>4} {'Vd (V)':>14} {'Vq (V)':>14}")
    for node in model.graph.member_nodes():
        v = model.node_voltage(eq.x, node)
        print(f"{node:>4} {v[0]:>14.6f} {v[1]:>14.6f}")
    print(f"{'unit':>4} {'Itd (A)':>14} {'Itq (A)':>14}")
    for i in model.layout.dgu_ids:
        cur = model.dgu_current(eq.x, i)
        flag = "" if i in active else "  (out)"
        print(f"{i:>4} {cur[0]:>14.6f} {cur[1]:>14.6f}{flag}")
    if not eq.commands_interior:
        print("note: steady command touches a saturation limit")
    return 0


# -- plot -------------------------------------------------------------------

def _cmd_plot(args) -> int:
    csv = Path(args.csv)
    if not csv.exists():
        raise _Failure("validation", f"no such file: {csv}")
    try:
        paths = plots.render_all(csv, args.out)
    except ValueError as exc:
        raise _Failure("validation", str(exc))
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


# -- driver -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="phgrid",
        description="Simulation and passivity certification of "
                    "inverter-based AC grids in the dq frame.")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate",
                        help="run a scenario; write CSV, metrics, figures")
    ps.add_argument("scenario", help="scenario file or preset name")
    ps.add_argument("--out", required=True, help="output directory")
    ps.add_argument("--band", type=float, default=2.0,
                    help="settling band in volts (default 2)")
    ps.set_defaults(func=_cmd_simulate)

    pc = sub.add_parser("check-eip",
                        help="certify every load (at V0, or over a range)")
    pc.add_argument("scenario")
    pc.add_argument("--vmin", type=float, default=None,
                    help="lower amplitude bound in V (default: V0)")
    pc.add_argument("--vmax", type=float, default=None,
                    help="upper amplitude bound in V (default: V0)")
    pc.set_defaults(func=_cmd_check_eip)

    pe = sub.add_parser("equilibrium",
                        help="Newton-solve the steady state of a scenario")
    pe.add_argument("scenario")
    pe.add_argument("--at", type=float, default=None,
                    help="configuration time (default: horizon end)")
    pe.set_defaults(func=_cmd_equilibrium)

    pp = sub.add_parser("plot",
                        help="render figures from a trajectory CSV")
    pp.add_argument("csv")
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=_cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Failure as exc:
        print(f"phgrid: [{exc.category}] {exc}", file=sys.stderr)
        return _EXIT[exc.category]
    except (ValueError, OSError) as exc:
        print(f"phgrid: [validation] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
