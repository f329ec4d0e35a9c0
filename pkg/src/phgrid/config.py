"""Scenario files: a single JSON document describing grid and experiment.

Sections: ``base`` (V0 in volts, f0 in hertz, horizon, active DGUs),
``dgus``, ``loads``, ``lines``, ``events``, ``solver``, ``output``.  All
numbers are SI units except the per-unit ``refs_pu`` pairs, which are
scaled by ``base.V0`` at load time.  Exact key names are normative; see
the README schema table.  Loading validates everything and reports the
offending field path; a loaded scenario re-serialized and re-loaded
yields an identical object graph (structural equality over all arrays).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .components import (DguParams, ExpParams, LineParams, LoadModel,
                         ZipParams)
from .controllers import (IdaPbcGains, PiGains, SaturationLimits,
                          VoltageReference, pi_gains_from_scalars)
from .network import ControllerSpec, DguSpec, LineSpec, MicrogridGraph
from .presets import PRESETS
from .sim import Event, Scenario, SolverSettings


class ConfigError(ValueError):
    """Scenario document rejected; the message names the field path."""


def _ctx(path: str, msg: str) -> ConfigError:
    return ConfigError(f"{path}: {msg}")


def _need(d: dict, key: str, path: str):
    if key not in d:
        raise _ctx(f"{path}.{key}", "missing required key")
    return d[key]


def _num(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise _ctx(path, f"expected a number, got {v!r}")
    return float(v)


def _pair(v, path: str) -> tuple:
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise _ctx(path, f"expected a [d, q] pair, got {v!r}")
    return (_num(v[0], f"{path}[0]"), _num(v[1], f"{path}[1]"))


def _matrix2(v, path: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.shape != (2, 2):
        raise _ctx(path, f"expected a 2x2 matrix, got shape {arr.shape}")
    return arr


def _load_model(d: dict, path: str) -> LoadModel:
    kind = _need(d, "kind", path)
    params = _need(d, "params", path)
    v_floor = _num(d.get("v_floor", 0.0), f"{path}.v_floor")
    try:
        if kind == "zip":
            p = ZipParams(**{k: _num(params[k], f"{path}.params.{k}")
                             for k in ("Y_p", "Y_q", "I_p", "I_q",
                                       "P_p", "P_q")})
        elif kind == "exp":
            p = ExpParams(**{k: _num(params[k], f"{path}.params.{k}")
                             for k in ("P0", "Q0", "n_p", "n_q", "V0")})
        else:
            raise _ctx(f"{path}.kind", f"unknown load kind {kind!r}")
    except KeyError as exc:
        raise _ctx(f"{path}.params", f"missing key {exc.args[0]!r}")
    c_j = d.get("C_j")
    if c_j is not None:
        c_j = _num(c_j, f"{path}.C_j")
    try:
        return LoadModel(kind=kind, params=p, C_j=c_j, v_floor=v_floor)
    except ValueError as exc:
        raise _ctx(path, str(exc))


def _controller(d: dict, path: str, ref: VoltageReference,
                plant: DguParams) -> ControllerSpec:
    kind = _need(d, "controller", path)
    limits = None
    if d.get("saturation") is not None:
        sd, sq = _pair(d["saturation"], f"{path}.saturation")
        try:
            limits = SaturationLimits(Vd_sat=sd, Vq_sat=sq)
        except ValueError as exc:
            raise _ctx(f"{path}.saturation", str(exc))
    if kind == "none":
        return ControllerSpec(kind="none", ref=ref, limits=limits)
    gains = _need(d, "gains", path)
    gp = f"{path}.gains"
    try:
        if kind == "ida_pbc":
            a = _pair(_need(gains, "alpha", gp), f"{gp}.alpha")
            nu = _pair(_need(gains, "nu", gp), f"{gp}.nu")
            ki = _pair(_need(gains, "kI", gp), f"{gp}.kI")
            return ControllerSpec(
                kind=kind, ref=ref, limits=limits,
                ida_gains=IdaPbcGains(alpha11=a[0], alpha22=a[1],
                                      nu11=nu[0], nu22=nu[1],
                                      kI1=ki[0], kI2=ki[1]))
        if kind == "pi":
            if "K_P" in gains:          # scalar shorthand
                pg = pi_gains_from_scalars(
                    _num(gains["K_P"], f"{gp}.K_P"),
                    _num(gains["K_I"], f"{gp}.K_I"), plant,
                    proportional_sign=_num(
                        gains.get("proportional_sign", -1.0),
                        f"{gp}.proportional_sign"))
            else:
                pg = PiGains(K11=_matrix2(_need(gains, "K11", gp),
                                          f"{gp}.K11"),
                             K12=_matrix2(_need(gains, "K12", gp),
                                          f"{gp}.K12"),
                             K13=_matrix2(_need(gains, "K13", gp),
                                          f"{gp}.K13"))
            return ControllerSpec(kind=kind, ref=ref, limits=limits,
                                  pi_gains=pg)
    except ValueError as exc:
        raise _ctx(gp, str(exc))
    raise _ctx(f"{path}.controller", f"unknown controller kind {kind!r}")


def scenario_from_dict(doc: dict) -> Scenario:
    base = _need(doc, "base", "")
    v0 = _num(_need(base, "V0", "base"), "base.V0")
    f0 = _num(_need(base, "f0", "base"), "base.f0")
    horizon = _num(_need(base, "horizon", "base"), "base.horizon")
    omega0 = 2.0 * np.pi * f0
    name = base.get("name", "scenario")

    dgus: dict = {}
    seen_ids: set = set()
    for k, d in enumerate(doc.get("dgus", [])):
        path = f"dgus[{k}]"
        label = d.get("id", f"dgu{k}")
        if label in seen_ids:
            raise _ctx(f"{path}.id", f"duplicate id {label!r}")
        seen_ids.add(label)
        node = _need(d, "node", path)
        if node in dgus:
            raise _ctx(f"{path}.node", f"duplicate DGU node {node}")
        filt = _need(d, "filter", path)
        local = d.get("local_load")
        try:
            plant = DguParams(
                R_t=_num(_need(filt, "R_t", f"{path}.filter"),
                         f"{path}.filter.R_t"),
                L_t=_num(_need(filt, "L_t", f"{path}.filter"),
                         f"{path}.filter.L_t"),
                C_t=_num(_need(filt, "C_t", f"{path}.filter"),
                         f"{path}.filter.C_t"),
                omega0=omega0,
                local_load=(_load_model(local, f"{path}.local_load")
                            if local is not None else None),
            )
        except ValueError as exc:
            raise _ctx(f"{path}.filter", str(exc))
        d_pu, q_pu = _pair(_need(d, "refs_pu", path), f"{path}.refs_pu")
        ref = VoltageReference(Vd_ref=d_pu * v0, Vq_ref=q_pu * v0)
        dgus[node] = DguSpec(node=node, plant=plant,
                             controller=_controller(d, path, ref, plant))

    load_nodes: dict = {}
    for k, d in enumerate(doc.get("loads", [])):
        path = f"loads[{k}]"
        label = d.get("id", f"load{k}")
        if label in seen_ids:
            raise _ctx(f"{path}.id", f"duplicate id {label!r}")
        seen_ids.add(label)
        node = _need(d, "node", path)
        if node in load_nodes or node in dgus:
            raise _ctx(f"{path}.node", f"duplicate member node {node}")
        load_nodes[node] = _load_model(d, path)

    lines: dict = {}
    for k, d in enumerate(doc.get("lines", [])):
        path = f"lines[{k}]"
        lid = _need(d, "id", path)
        if lid in lines:
            raise _ctx(f"{path}.id", f"duplicate line id {lid}")
        per_km = _need(d, "per_km", path)
        try:
            params = LineParams(
                r_per_km=_num(_need(per_km, "r", f"{path}.per_km"),
                              f"{path}.per_km.r"),
                l_per_km=_num(_need(per_km, "l", f"{path}.per_km"),
                              f"{path}.per_km.l"),
                c_per_km=_num(_need(per_km, "c", f"{path}.per_km"),
                              f"{path}.per_km.c"),
                length=_num(_need(d, "length", path), f"{path}.length"),
            )
        except ValueError as exc:
            raise _ctx(f"{path}.per_km", str(exc))
        lines[lid] = LineSpec(tail=_need(d, "from", path),
                              head=_need(d, "to", path), params=params)

    try:
        graph = MicrogridGraph(dgus=dgus, load_nodes=load_nodes,
                               lines=lines)
    except ValueError as exc:
        raise ConfigError(f"graph: {exc}")

    events = []
    for k, d in enumerate(doc.get("events", [])):
        path = f"events[{k}]"
        t = _num(_need(d, "t", path), f"{path}.t")
        kind = _need(d, "kind", path)
        try:
            if kind in ("plug_in", "plug_out"):
                events.append(Event(time=t, kind=kind,
                                    target=_need(d, "dgu", path)))
            elif kind == "load_scale":
                events.append(Event(
                    time=t, kind=kind, target=_need(d, "node", path),
                    factor=_num(_need(d, "factor", path),
                                f"{path}.factor")))
            elif kind == "ref_change":
                d_pu, q_pu = _pair(_need(d, "refs_pu", path),
                                   f"{path}.refs_pu")
                events.append(Event(
                    time=t, kind=kind, target=_need(d, "dgu", path),
                    ref=VoltageReference(Vd_ref=d_pu * v0,
                                         Vq_ref=q_pu * v0)))
            else:
                raise _ctx(f"{path}.kind", f"unknown event kind {kind!r}")
        except ValueError as exc:
            raise _ctx(path, str(exc))

    sd = doc.get("solver", {})
    try:
        solver = SolverSettings(
            method=sd.get("method", "trapezoid"),
            h=_num(sd.get("h", 1e-5), "solver.h"),
            newton_tol=_num(sd.get("newton_tol", 1e-10),
                            "solver.newton_tol"),
            h_min=_num(sd.get("h_min", 1e-8), "solver.h_min"),
            log_decimation=int(sd.get("log_decimation", 100)),
        )
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}")

    active = base.get("active_dgus")
    active = frozenset(active) if active is not None else frozenset(dgus)
    start = base.get("start", "equilibrium")
    try:
        return Scenario(graph=graph, horizon=horizon, v0_nominal=v0,
                        active_dgus=active, events=tuple(events),
                        solver=solver, start=start, name=name)
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}")


def _load_to_dict(lm: LoadModel) -> dict:
    if lm.kind == "zip":
        p = {k: getattr(lm.params, k)
             for k in ("Y_p", "Y_q", "I_p", "I_q", "P_p", "P_q")}
    else:
        p = {k: getattr(lm.params, k)
             for k in ("P0", "Q0", "n_p", "n_q", "V0")}
    out = {"kind": lm.kind, "params": p, "v_floor": lm.v_floor}
    if lm.C_j is not None:
        out["C_j"] = lm.C_j
    return out


def scenario_to_dict(sc: Scenario) -> dict:
    v0 = sc.v0_nominal
    graph = sc.graph
    doc: dict = {
        "base": {
            "V0": v0,
            "f0": next(iter(graph.dgus.values())).plant.omega0
            / (2.0 * np.pi) if graph.dgus else 50.0,
            "horizon": sc.horizon,
            "active_dgus": sorted(sc.active_dgus),
            "start": sc.start,
            "name": sc.name,
        },
        "dgus": [], "loads": [], "lines": [], "events": [],
        "solver": {
            "method": sc.solver.method, "h": sc.solver.h,
            "newton_tol": sc.solver.newton_tol, "h_min": sc.solver.h_min,
            "log_decimation": sc.solver.log_decimation,
        },
        "output": {"csv": "trajectory.csv", "metrics": "metrics.json"},
    }
    for node in sorted(graph.dgus):
        spec = graph.dgus[node]
        ctl = spec.controller
        entry: dict = {
            "id": f"dgu{node}", "node": node,
            "filter": {"R_t": spec.plant.R_t, "L_t": spec.plant.L_t,
                       "C_t": spec.plant.C_t},
            "controller": ctl.kind,
            "refs_pu": [ctl.ref.Vd_ref / v0, ctl.ref.Vq_ref / v0],
        }
        if ctl.kind == "ida_pbc":
            g = ctl.ida_gains
            entry["gains"] = {"alpha": [g.alpha11, g.alpha22],
                              "nu": [g.nu11, g.nu22],
                              "kI": [g.kI1, g.kI2]}
        elif ctl.kind == "pi":
            g = ctl.pi_gains
            entry["gains"] = {"K11": g.K11.tolist(),
                              "K12": g.K12.tolist(),
                              "K13": g.K13.tolist()}
        if ctl.limits is not None:
            entry["saturation"] = [ctl.limits.Vd_sat, ctl.limits.Vq_sat]
        if spec.plant.local_load is not None:
            entry["local_load"] = _load_to_dict(spec.plant.local_load)
        doc["dgus"].append(entry)
    for node in sorted(graph.load_nodes):
        entry = {"id": f"load{node}", "node": node}
        entry.update(_load_to_dict(graph.load_nodes[node]))
        doc["loads"].append(entry)
    for lid in sorted(graph.lines):
        ls = graph.lines[lid]
        doc["lines"].append({
            "id": lid, "from": ls.tail, "to": ls.head,
            "length": ls.params.length,
            "per_km": {"r": ls.params.r_per_km, "l": ls.params.l_per_km,
                       "c": ls.params.c_per_km},
        })
    for e in sc.events:
        entry = {"t": e.time, "kind": e.kind}
        if e.kind in ("plug_in", "plug_out"):
            entry["dgu"] = e.target
        elif e.kind == "load_scale":
            entry["node"] = e.target
            entry["factor"] = e.factor
        else:
            entry["dgu"] = e.target
            entry["refs_pu"] = [e.ref.Vd_ref / v0, e.ref.Vq_ref / v0]
        doc["events"].append(entry)
    return doc


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(
        json.dumps(scenario_to_dict(sc), indent=2, sort_keys=True) + "\n")


def load_scenario(source) -> Scenario:
    """Load from a preset name or a JSON scenario file path."""
    if isinstance(source, str) and source in PRESETS:
        return PRESETS[source]()
    p = Path(source)
    if not p.exists():
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(
            f"{source!r} is neither a scenario file nor a preset "
            f"(known presets: {known})")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be an object")
    return scenario_from_dict(doc)


def scenarios_equal(a, b) -> bool:
    """Structural equality over the full object graph, arrays included."""
    return _eq(a, b)


def _eq(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, np.ndarray):
        return a.shape == b.shape and bool(np.array_equal(a, b))
    if isinstance(a, dict):
        return (a.keys() == b.keys()
                and all(_eq(a[k], b[k]) for k in a))
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_eq(x, y) for x, y in zip(a, b))
    if isinstance(a, frozenset):
        return a == b
    if hasattr(a, "__dataclass_fields__"):
        return all(_eq(getattr(a, f), getattr(b, f))
                   for f in a.__dataclass_fields__)
    return a == b
