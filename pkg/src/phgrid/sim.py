"""Closed-loop network assembly, fixed-step integration, and metrics.

The stacked state holds, in sorted-id order, six states per DGU node
(flux d/q, charge d/q, two integrator states), two charge states per
lone-standing load node, and two flux states per line.  The only
nonlinearities are the static load sinks and the command saturation; the
vector field is assembled as

    dx/dt = A x + b + G sat(U x + c) - (load sinks)

where A carries plants, lines, coupling, and integrator dynamics, and the
affine pair (U, c) evaluates every active controller at once.  DGU plants
are built with their *effective* capacitance (filter C_t plus half the
capacitance of every incident line); controllers see physical voltages but
are parameterized with the nominal C_t only.
"""
from __future__ import annotations

import dataclasses
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import controllers as ctrl
from .components import (SingularVoltageError, build_dgu_phs,
                         build_line_phs, build_load_node_phs,
                         effective_capacitances)
from .network import MicrogridGraph, apply_topology_event, build_coupling


class IntegrationError(RuntimeError):
    """Integration aborted; ``kind`` is 'stiff-failure' or 'domain-exit'."""

    def __init__(self, kind: str, time: float, detail: str):
        super().__init__(f"{kind} at t={time:.6f} s: {detail}")
        self.kind = kind
        self.time = time
        self.detail = detail


@dataclass(frozen=True)
class Event:
    """Scheduled discrete change: plug_in/plug_out (DGU node id),
    load_scale (member node id + factor), ref_change (DGU node id + ref)."""

    time: float
    kind: str
    target: int
    factor: float | None = None
    ref: ctrl.VoltageReference | None = None

    def __post_init__(self):
        if self.kind not in ("plug_in", "plug_out", "load_scale",
                             "ref_change"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == "load_scale":
            if self.factor is None or self.factor <= 0:
                raise ValueError("load_scale needs a positive factor")
        if self.kind == "ref_change" and self.ref is None:
            raise ValueError("ref_change needs a new reference")

    def describe(self) -> str:
        if self.kind == "load_scale":
            return f"load_scale node={self.target} factor={self.factor:g}"
        if self.kind == "ref_change":
            return (f"ref_change dgu={self.target} "
                    f"ref=({self.ref.Vd_ref:g},{self.ref.Vq_ref:g})")
        return f"{self.kind} dgu={self.target}"


@dataclass(frozen=True)
class SolverSettings:
    method: str = "trapezoid"       # or "rk4" (explicit cross-check)
    h: float = 1e-5                 # s, fixed step
    newton_tol: float = 1e-10       # relative inner tolerance
    h_min: float = 1e-8             # s, smallest split step before failing
    log_decimation: int = 100       # keep every k-th sample

    def __post_init__(self):
        if self.method not in ("trapezoid", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.h > 0 and self.h_min > 0 and self.h_min <= self.h):
            raise ValueError("need h > 0 and 0 < h_min <= h")
        if self.log_decimation < 1:
            raise ValueError("log_decimation must be >= 1")


@dataclass(frozen=True)
class Scenario:
    """A complete experiment: grid, timeline, solver, nominal voltage.

    ``start`` picks the default initial state when none is given
    explicitly: ``"equilibrium"`` (Newton-solved steady state of the
    initial configuration -- transients are then purely event-driven),
    ``"presync"`` (each active unit holds its own reference at the
    standalone steady state, lines de-energized), or ``"flat"`` (every
    node at (V0, 0), all currents and integrators zero).  Cold starts
    energize kiloampere line flows from nothing and swing the nodes by
    kilovolts; they are kept for stress testing.
    """

    graph: MicrogridGraph
    horizon: float
    v0_nominal: float
    active_dgus: frozenset = frozenset()
    events: tuple = ()
    solver: SolverSettings = SolverSettings()
    initial_state: np.ndarray | None = None
    start: str = "equilibrium"
    name: str = "scenario"

    def __post_init__(self):
        if self.start not in ("equilibrium", "presync", "flat"):
            raise ValueError(f"unknown start mode {self.start!r}")
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ValueError("events must be sorted by time")
        if times and (times[0] < 0 or times[-1] > self.horizon):
            raise ValueError("events must lie inside the horizon")
        for e in self.events:
            if e.kind in ("plug_in", "plug_out", "ref_change"):
                if e.target not in self.graph.dgus:
                    raise ValueError(f"event targets unknown DGU {e.target}")
            elif e.target not in self.graph.member_nodes():
                raise ValueError(f"event targets unknown node {e.target}")
        for dgu in self.active_dgus:
            if dgu not in self.graph.dgus:
                raise ValueError(f"active set names unknown DGU {dgu}")


# ---------------------------------------------------------------------------
# State layout and assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StateLayout:
    dgu_ids: tuple
    load_ids: tuple
    line_ids: tuple
    n: int
    dgu_plant: dict          # dgu id -> slice (4 states)
    dgu_ctrl: dict           # dgu id -> slice (2 states)
    load_state: dict         # load node id -> slice (2 states)
    line_state: dict         # line id -> slice (2 states)

    @classmethod
    def for_graph(cls, graph: MicrogridGraph) -> "StateLayout":
        dgu_ids = tuple(sorted(graph.dgus))
        load_ids = tuple(sorted(graph.load_nodes))
        line_ids = tuple(sorted(graph.lines))
        dgu_plant, dgu_ctrl, load_state, line_state = {}, {}, {}, {}
        off = 0
        for i in dgu_ids:
            dgu_plant[i] = slice(off, off + 4)
            dgu_ctrl[i] = slice(off + 4, off + 6)
            off += 6
        for j in load_ids:
            load_state[j] = slice(off, off + 2)
            off += 2
        for l in line_ids:
            line_state[l] = slice(off, off + 2)
            off += 2
        return cls(dgu_ids, load_ids, line_ids, off,
                   dgu_plant, dgu_ctrl, load_state, line_state)


class NetworkModel:
    """Static per-graph data: layout, effective plants, coupling map."""

    def __init__(self, graph: MicrogridGraph, v0_nominal: float):
        self.graph = graph
        self.v0 = v0_nominal
        self.layout = StateLayout.for_graph(graph)
        self.lumped = effective_capacitances(graph)
        self.coupling = build_coupling(graph)

        # Effective plant parameter records (C_t enlarged by line legs).
        self.plant_eff: dict = {}
        for i, spec in graph.dgus.items():
            self.plant_eff[i] = dataclasses.replace(
                spec.plant, C_t=spec.plant.C_t + self.lumped[i])
        self.load_caps = {j: self.lumped[j] + (lm.C_j or 0.0)
                          for j, lm in graph.load_nodes.items()}

        self.dgu_phs = {i: build_dgu_phs(p)
                        for i, p in self.plant_eff.items()}
        omega0 = next(iter(graph.dgus.values())).plant.omega0 \
            if graph.dgus else 2 * math.pi * 50.0
        self.omega0 = omega0
        self.load_phs = {j: build_load_node_phs(self.load_caps[j], omega0)
                         for j in graph.load_nodes}
        self.line_phs = {l: build_line_phs(s.params, omega0)
                         for l, s in graph.lines.items()}

    # -- convenience extractors ------------------------------------------

    def node_voltage(self, x: np.ndarray, node) -> np.ndarray:
        lay = self.layout
        if node in lay.dgu_plant:
            q = x[lay.dgu_plant[node]][2:4]
            return q / self.plant_eff[node].C_t
        q = x[lay.load_state[node]]
        return q / self.load_caps[node]

    def dgu_current(self, x: np.ndarray, dgu) -> np.ndarray:
        phi = x[self.layout.dgu_plant[dgu]][:2]
        return phi / self.plant_eff[dgu].L_t

    def line_current(self, x: np.ndarray, line) -> np.ndarray:
        phi = x[self.layout.line_state[line]]
        return phi / self.graph.lines[line].params.L_l

    def default_initial_state(self) -> np.ndarray:
        """Flat start: de-energized inductors, every node at (V0, 0)."""
        x = np.zeros(self.layout.n)
        flat = np.array([self.v0, 0.0])
        for i in self.layout.dgu_ids:
            x[self.layout.dgu_plant[i]][2:4] = self.plant_eff[i].C_t * flat
        for j in self.layout.load_ids:
            x[self.layout.load_state[j]] = self.load_caps[j] * flat
        return x

    def presync_initial_state(self, active) -> np.ndarray:
        """Black start with pre-synchronized converters.

        Each active DGU begins holding its own voltage reference at the
        standalone zero-load steady state (the condition a unit reaches
        by self-regulating before its breaker closes).  Uncontrolled
        nodes sit flat at (V0, 0); lines start de-energized.
        """
        x = self.default_initial_state()
        lay = self.layout
        for i in lay.dgu_ids:
            spec = self.graph.dgus[i]
            if i not in active or spec.controller.kind == "none":
                continue
            phi, ctrl = standalone_steady(spec, spec.controller.ref)
            ref = spec.controller.ref
            sl = lay.dgu_plant[i]
            x[sl.start:sl.start + 2] = phi
            x[sl.start + 2:sl.stop] = self.plant_eff[i].C_t * np.array(
                [ref.Vd_ref, ref.Vq_ref])
            x[lay.dgu_ctrl[i]] = ctrl
        return x

    def stacked_ports(self, x: np.ndarray):
        """Interaction outputs z and inputs d = Phi z for the full grid."""
        z = np.zeros(self.coupling.Phi.shape[0])
        for node in self.graph.member_nodes():
            z[self.coupling.slices[node]] = self.node_voltage(x, node)
        for l in self.layout.line_ids:
            i_line = self.line_current(x, l)
            sl = self.coupling.slices[l]
            z[sl.start:sl.start + 2] = i_line
            z[sl.start + 2:sl.stop] = -i_line
        return z, self.coupling.Phi @ z


def standalone_steady(spec, ref):
    """Steady state of one disconnected DGU regulating its own filter cap.

    With no load and no lines attached, holding V = ref requires the
    filter current that feeds the capacitor's dq rotation,
    I* = omega0*C_t*(-Vq*, Vd*), and the matching converter command.
    Returns (flux, controller state) in nominal parameters -- the unit
    cannot know the extra line capacitance it will meet on the bus.
    For IDA-PBC the feedforward part of the law reproduces the required
    command exactly, so the integrators rest at zero; for PI the
    integrator must hold the whole command and is solved from the gain
    blocks.  Uncontrolled units have nothing to synchronize.
    """
    p = spec.plant
    w0 = p.omega0
    vs = np.array([ref.Vd_ref, ref.Vq_ref])
    i_star = w0 * p.C_t * np.array([-vs[1], vs[0]])
    ctl = spec.controller
    if ctl.kind == "ida_pbc":
        return p.L_t * i_star, np.zeros(2)
    if ctl.kind == "pi":
        u_star = np.array([
            p.R_t * i_star[0] - w0 * p.L_t * i_star[1] + vs[0],
            p.R_t * i_star[1] + w0 * p.L_t * i_star[0] + vs[1]])
        g = ctl.pi_gains
        ctrl = np.linalg.solve(g.K13, u_star - g.K11 @ vs - g.K12 @ i_star)
        return p.L_t * i_star, ctrl
    return np.zeros(2), np.zeros(2)


def bumpless_sync(spec, ref, v_bus: np.ndarray):
    """Converter state for closing the breaker onto a live bus.

    Standard synchronization: the unit matches the bus voltage before
    closing, so at the closure instant its capacitor sits at ``v_bus``,
    its filter carries the matching standalone current, and its command
    equals what holds that condition steady -- no voltage or command
    discontinuity, only the reference mismatch left for the integral
    action to walk out.  Returns (flux, controller state) for the
    running controller whose setpoint is ``ref``.
    """
    p = spec.plant
    w0 = p.omega0
    vf = np.asarray(v_bus, dtype=float)
    i_f = w0 * p.C_t * np.array([-vf[1], vf[0]])
    phi = p.L_t * i_f
    ctl = spec.controller
    if ctl.kind == "ida_pbc":
        g = ctl.ida_gains
        vs = np.array([ref.Vd_ref, ref.Vq_ref])
        # The command the law must emit is the one holding (vf, i_f)
        # steady; with the sync current the amplitude-shaping term sees
        # only the reference/bus rotation mismatch.
        s_d = ((g.nu11 + g.kI1 * p.L_t) * (vf[0] - vs[0])
               - (g.alpha11 / g.nu11) * w0 * p.C_t * (vs[1] - vf[1])) \
            / (g.alpha11 * g.kI1)
        s_q = ((g.nu22 + g.kI2 * p.L_t) * (vf[1] - vs[1])
               + (g.alpha22 / g.nu22) * w0 * p.C_t * (vs[0] - vf[0])) \
            / (g.alpha22 * g.kI2)
        return phi, np.array([s_d, s_q])
    if ctl.kind == "pi":
        # PI carries no setpoint feedforward in the command itself, so
        # syncing is exactly the standalone steady state at the bus
        # voltage.
        u_f = np.array([
            p.R_t * i_f[0] - w0 * p.L_t * i_f[1] + vf[0],
            p.R_t * i_f[1] + w0 * p.L_t * i_f[0] + vf[1]])
        g = ctl.pi_gains
        ctrl = np.linalg.solve(g.K13, u_f - g.K11 @ vf - g.K12 @ i_f)
        return phi, ctrl
    return np.zeros(2), np.zeros(2)


class SinkBank:
    """All static load draws of one configuration, evaluated in one shot.

    Sites are (node, charge-row pair, capacitance, LoadModel); the
    vectorized pipeline reproduces :func:`~phgrid.components.load_current`
    site by site (asserted in the tests).
    """

    def __init__(self, nodes, rows, caps, loads):
        self.nodes = tuple(nodes)
        self.rows = np.asarray(rows, dtype=int).reshape(-1, 2)
        self.caps = np.asarray(caps, dtype=float)
        self.loads = tuple(loads)
        self.floors = np.array([lm.v_floor for lm in loads], dtype=float)
        zi = [k for k, lm in enumerate(loads) if lm.kind == "zip"]
        ei = [k for k, lm in enumerate(loads) if lm.kind == "exp"]
        self._zi = np.array(zi, dtype=int)
        self._ei = np.array(ei, dtype=int)
        zcol = lambda name: np.array(  # noqa: E731
            [getattr(loads[k].params, name) for k in zi], dtype=float)
        ecol = lambda name: np.array(  # noqa: E731
            [getattr(loads[k].params, name) for k in ei], dtype=float)
        self._z_yp, self._z_ip, self._z_pp = (zcol("Y_p"), zcol("I_p"),
                                              zcol("P_p"))
        self._z_yq, self._z_iq, self._z_pq = (zcol("Y_q"), zcol("I_q"),
                                              zcol("P_q"))
        n_p, n_q, v0 = ecol("n_p"), ecol("n_q"), ecol("V0")
        self._e_xp = n_p - 2.0
        self._e_xq = n_q - 2.0
        self._e_kp = ecol("P0") / v0**n_p
        self._e_kq = ecol("Q0") / v0**n_q

    def __len__(self):
        return len(self.loads)

    def voltages(self, x: np.ndarray) -> np.ndarray:
        return x[self.rows] / self.caps[:, None]

    def currents(self, x: np.ndarray) -> np.ndarray:
        V = self.voltages(x)
        vhat = np.hypot(V[:, 0], V[:, 1])
        low = vhat <= self.floors
        if np.any(low):
            k = int(np.argmax(low))
            raise SingularVoltageError(
                f"load at node {self.nodes[k]}: amplitude {vhat[k]:.3f} V "
                f"is at or below the floor {self.floors[k]:g} V")
        gp = np.empty_like(vhat)
        gq = np.empty_like(vhat)
        if len(self._zi):
            inv = 1.0 / vhat[self._zi]
            gp[self._zi] = (self._z_pp * inv + self._z_ip) * inv + self._z_yp
            gq[self._zi] = (self._z_pq * inv + self._z_iq) * inv + self._z_yq
        if len(self._ei):
            ve = vhat[self._ei]
            gp[self._ei] = self._e_kp * ve**self._e_xp
            gq[self._ei] = self._e_kq * ve**self._e_xq
        out = np.empty_like(V)
        out[:, 0] = gp * V[:, 0] + gq * V[:, 1]
        out[:, 1] = gp * V[:, 1] - gq * V[:, 0]
        return out


@dataclass(frozen=True, eq=False)
class Assembly:
    """Vector field dx/dt = A x + b + (commands) - (load sinks) for one
    active set and one load/reference table."""

    model: NetworkModel
    active_dgus: frozenset
    loads: dict                  # node id -> LoadModel currently in force
    refs: dict                   # dgu id -> VoltageReference in force
    A: np.ndarray
    b: np.ndarray
    U: np.ndarray                # (2 n_dgu, n) pre-saturation commands
    c: np.ndarray                # (n_dgu, 2)
    sat_bound: np.ndarray        # (n_dgu, 2), +inf when unlimited
    flux_rows: np.ndarray        # (n_dgu, 2) row indices receiving u
    active_mask: np.ndarray      # (n_dgu,) bool
    sinks: SinkBank

    def commands(self, x: np.ndarray):
        """Pre- and post-saturation VSI commands plus per-DGU clamp flags."""
        nd = len(self.model.layout.dgu_ids)
        u_pre = (self.U @ x).reshape(nd, 2) + self.c
        u_pre = np.where(self.active_mask[:, None], u_pre, 0.0)
        u_post = np.clip(u_pre, -self.sat_bound, self.sat_bound)
        sat = np.any(u_post != u_pre, axis=1)
        return u_pre, u_post, sat

    def sink_currents(self, x: np.ndarray) -> np.ndarray:
        """Stacked load currents (n_sites, 2)."""
        if len(self.sinks) == 0:
            return np.zeros((0, 2))
        return self.sinks.currents(x)

    def f(self, x: np.ndarray) -> np.ndarray:
        dx = self.A @ x + self.b
        _, u_post, _ = self.commands(x)
        # row indices are unique per fancy-indexed update
        dx[self._flux_flat] += u_post.ravel()
        if len(self.sinks):
            dx[self._sink_flat] -= self.sinks.currents(x).ravel()
        return dx

    @property
    def _flux_flat(self) -> np.ndarray:
        return self.flux_rows.ravel()

    @property
    def _sink_flat(self) -> np.ndarray:
        return self.sinks.rows.ravel()

    def energy_rate_parts(self, x: np.ndarray):
        """(dH/dt, dissipated power, control power y^T u) summed over the
        grid; the interconnection exchanges cancel by skew symmetry."""
        model = self.model
        lay = model.layout
        dx = self.f(x)
        dHdt = 0.0
        dissipation = 0.0
        control_power = 0.0
        _, u_post, _ = self.commands(x)
        for k, i in enumerate(lay.dgu_ids):
            phs = model.dgu_phs[i]
            xs, dxs = x[lay.dgu_plant[i]], dx[lay.dgu_plant[i]]
            co = phs.Q @ xs
            dHdt += co @ dxs
            dissipation += co @ (phs.R @ co)
            if self.active_mask[k]:
                control_power += (phs.G.T @ co) @ u_post[k]
        for j in lay.load_ids:
            phs = model.load_phs[j]
            xs, dxs = x[lay.load_state[j]], dx[lay.load_state[j]]
            dHdt += (phs.Q @ xs) @ dxs
        for l in lay.line_ids:
            phs = model.line_phs[l]
            xs, dxs = x[lay.line_state[l]], dx[lay.line_state[l]]
            co = phs.Q @ xs
            dHdt += co @ dxs
            dissipation += co @ (phs.R @ co)
        if len(self.sinks):
            V = self.sinks.voltages(x)
            dissipation += float(np.sum(V * self.sinks.currents(x)))
        return dHdt, dissipation, control_power


def _controller_row(model: NetworkModel, dgu: int, spec, ref) -> tuple:
    """Affine command map u = U_loc x + c for one DGU (full-state row)."""
    lay = model.layout
    n = lay.n
    U = np.zeros((2, n))
    plant = model.graph.dgus[dgu].plant          # nominal parameters
    c_eff = model.plant_eff[dgu].C_t             # converts charge -> volts
    w0, Lt, Ct, Rt = plant.omega0, plant.L_t, plant.C_t, plant.R_t
    ps, cs = lay.dgu_plant[dgu], lay.dgu_ctrl[dgu]
    i_cols = [ps.start, ps.start + 1]            # flux -> current /L_t
    v_cols = [ps.start + 2, ps.start + 3]        # charge -> voltage /C_eff
    c = np.zeros(2)
    if spec.kind == "ida_pbc":
        g = spec.ida_gains
        # d axis
        U[0, i_cols[0]] += (g.alpha11 / g.nu11 + Rt) / Lt
        U[0, i_cols[1]] += -w0 * Lt / Lt
        U[0, v_cols[0]] += (-g.nu11 + 1.0 - g.kI1 * Lt) / c_eff
        U[0, cs.start] += g.alpha11 * g.kI1
        c[0] = (g.alpha11 / g.nu11 * w0 * Ct * ref.Vq_ref
                + g.nu11 * ref.Vd_ref + g.kI1 * Lt * ref.Vd_ref)
        # q axis
        U[1, i_cols[1]] += (g.alpha22 / g.nu22 + Rt) / Lt
        U[1, i_cols[0]] += w0 * Lt / Lt
        U[1, v_cols[1]] += (-g.nu22 + 1.0 - g.kI2 * Lt) / c_eff
        U[1, cs.start + 1] += g.alpha22 * g.kI2
        c[1] = (-g.alpha22 / g.nu22 * w0 * Ct * ref.Vd_ref
                + g.nu22 * ref.Vq_ref + g.kI2 * Lt * ref.Vq_ref)
    elif spec.kind == "pi":
        g = spec.pi_gains
        for r in range(2):
            U[r, v_cols[0]] += g.K11[r, 0] / c_eff
            U[r, v_cols[1]] += g.K11[r, 1] / c_eff
            U[r, i_cols[0]] += g.K12[r, 0] / Lt
            U[r, i_cols[1]] += g.K12[r, 1] / Lt
            U[r, cs.start] += g.K13[r, 0]
            U[r, cs.start + 1] += g.K13[r, 1]
    return U, c


def build_assembly(model: NetworkModel, active_dgus: frozenset,
                   load_overrides: dict | None = None,
                   ref_overrides: dict | None = None) -> Assembly:
    """Assemble the closed-loop field for one discrete configuration."""
    graph, lay = model.graph, model.layout
    n = lay.n
    load_overrides = load_overrides or {}
    ref_overrides = ref_overrides or {}

    loads: dict = {}
    for j, lm in graph.load_nodes.items():
        loads[j] = load_overrides.get(j, lm)
    for i, spec in graph.dgus.items():
        local = load_overrides.get(i, spec.plant.local_load)
        if local is not None:
            loads[i] = local
    refs = {i: ref_overrides.get(i, spec.controller.ref)
            for i, spec in graph.dgus.items()}

    A = np.zeros((n, n))
    b = np.zeros(n)

    # Plant, load-node, and line linear blocks.
    for i in lay.dgu_ids:
        phs = model.dgu_phs[i]
        sl = lay.dgu_plant[i]
        A[sl, sl] = (phs.J - phs.R) @ phs.Q
    for j in lay.load_ids:
        phs = model.load_phs[j]
        sl = lay.load_state[j]
        A[sl, sl] = phs.J @ phs.Q
    for l in lay.line_ids:
        phs = model.line_phs[l]
        sl = lay.line_state[l]
        A[sl, sl] = (phs.J - phs.R) @ phs.Q

    # Interconnection: dx += D (Phi (Z x)) folded into A.
    ports = model.coupling.Phi.shape[0]
    Z = np.zeros((ports, n))
    D = np.zeros((n, ports))
    for node in graph.member_nodes():
        psl = model.coupling.slices[node]
        if node in lay.dgu_plant:
            ssl = lay.dgu_plant[node]
            cap = model.plant_eff[node].C_t
            qrows = [ssl.start + 2, ssl.start + 3]
        else:
            ssl = lay.load_state[node]
            cap = model.load_caps[node]
            qrows = [ssl.start, ssl.start + 1]
        Z[psl.start, qrows[0]] = 1.0 / cap
        Z[psl.start + 1, qrows[1]] = 1.0 / cap
        D[qrows[0], psl.start] = 1.0
        D[qrows[1], psl.start + 1] = 1.0
    for l in lay.line_ids:
        psl = model.coupling.slices[l]
        ssl = lay.line_state[l]
        L_l = graph.lines[l].params.L_l
        Z[psl.start, ssl.start] = 1.0 / L_l
        Z[psl.start + 1, ssl.start + 1] = 1.0 / L_l
        Z[psl.start + 2, ssl.start] = -1.0 / L_l
        Z[psl.start + 3, ssl.start + 1] = -1.0 / L_l
        D[ssl.start, psl.start] = 1.0
        D[ssl.start, psl.start + 2] = -1.0
        D[ssl.start + 1, psl.start + 1] = 1.0
        D[ssl.start + 1, psl.start + 3] = -1.0
    A += D @ model.coupling.Phi @ Z

    # Controllers: integrator dynamics in A/b, command maps in U/c.
    nd = len(lay.dgu_ids)
    U = np.zeros((2 * nd, n))
    c = np.zeros((nd, 2))
    sat_bound = np.full((nd, 2), np.inf)
    flux_rows = np.zeros((nd, 2), dtype=int)
    active_mask = np.zeros(nd, dtype=bool)
    for k, i in enumerate(lay.dgu_ids):
        spec = graph.dgus[i].controller
        ps, cs = lay.dgu_plant[i], lay.dgu_ctrl[i]
        flux_rows[k] = (ps.start, ps.start + 1)
        active = i in active_dgus
        active_mask[k] = active
        if not active:
            A[ps.start:ps.start + 2, :] = 0.0      # branch removed
            continue
        if spec.kind == "none":
            continue
        ref = refs[i]
        c_eff = model.plant_eff[i].C_t
        vrows = (ps.start + 2, ps.start + 3)
        sign = 1.0 if spec.kind == "ida_pbc" else -1.0
        # ida: d/dt s = V - V*;  pi: d/dt v = V* - V
        A[cs.start, vrows[0]] = sign / c_eff
        A[cs.start + 1, vrows[1]] = sign / c_eff
        b[cs.start:cs.stop] = -sign * ref.vec
        U_loc, c_loc = _controller_row(model, i, spec, ref)
        U[2 * k:2 * k + 2] = U_loc
        c[k] = c_loc
        if spec.limits is not None:
            sat_bound[k] = (spec.limits.Vd_sat, spec.limits.Vq_sat)

    # Load sink sites (lone nodes and DGU-local loads).
    sink_nodes, sink_rows, sink_caps, sink_loads = [], [], [], []
    for node, lm in sorted(loads.items()):
        if node in lay.dgu_plant:
            sl = lay.dgu_plant[node]
            sink_rows.append((sl.start + 2, sl.start + 3))
            sink_caps.append(model.plant_eff[node].C_t)
        else:
            sl = lay.load_state[node]
            sink_rows.append((sl.start, sl.start + 1))
            sink_caps.append(model.load_caps[node])
        sink_nodes.append(node)
        sink_loads.append(lm)

    return Assembly(
        model=model, active_dgus=frozenset(active_dgus), loads=loads,
        refs=refs, A=A, b=b, U=U, c=c, sat_bound=sat_bound,
        flux_rows=flux_rows, active_mask=active_mask,
        sinks=SinkBank(sink_nodes, sink_rows, sink_caps, sink_loads),
    )


def assemble_vector_field(graph: MicrogridGraph, active_dgus: frozenset,
                          v0_nominal: float):
    """Convenience wrapper: (t, x) -> dx/dt for a fixed configuration."""
    model = NetworkModel(graph, v0_nominal)
    asm = build_assembly(model, active_dgus)
    return model, asm, (lambda t, x: asm.f(x))


# ---------------------------------------------------------------------------
# Trajectory container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventMarker:
    time: float
    description: str
    sample_index: int


@dataclass(eq=False)
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    u_pre: np.ndarray            # (ns, n_dgu, 2)
    u_post: np.ndarray
    sat: np.ndarray              # (ns, n_dgu) bool
    model: NetworkModel
    events: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    # segments: (t_start, t_end, active_dgus, loads, refs) per event-free span

    def __post_init__(self):
        if np.any(np.diff(self.t) < 0):
            raise ValueError("sample times must be monotone")

    @property
    def n_samples(self) -> int:
        return len(self.t)

    def dgu_voltage(self, dgu) -> np.ndarray:
        sl = self.model.layout.dgu_plant[dgu]
        return self.x[:, sl.start + 2:sl.start + 4] \
            / self.model.plant_eff[dgu].C_t

    def node_voltage(self, node) -> np.ndarray:
        if node in self.model.layout.dgu_plant:
            return self.dgu_voltage(node)
        sl = self.model.layout.load_state[node]
        return self.x[:, sl] / self.model.load_caps[node]

    def dgu_current(self, dgu) -> np.ndarray:
        sl = self.model.layout.dgu_plant[dgu]
        return self.x[:, sl.start:sl.start + 2] \
            / self.model.plant_eff[dgu].L_t

    def line_current(self, line) -> np.ndarray:
        sl = self.model.layout.line_state[line]
        return self.x[:, sl] / self.model.graph.lines[line].params.L_l

    def window(self, t0: float, t1: float) -> tuple:
        """Sample index range [i0, i1) covering t0 <= t <= t1.

        Event times carry two samples (pre- and post-event state at the
        same t).  A window opening at an event starts at the post-event
        sample and a window closing at one ends at the pre-event sample,
        so each segment sees exactly its own states.
        """
        i0 = int(np.searchsorted(self.t, t0 + 1e-12, side="left"))
        if i0 >= 1 and abs(self.t[i0 - 1] - t0) <= 1e-12:
            i0 -= 1
        i1 = int(np.searchsorted(self.t, t1 - 1e-12, side="left"))
        if i1 < self.t.size and self.t[i1] <= t1 + 1e-12:
            i1 += 1
        return i0, i1


# ---------------------------------------------------------------------------
# Integrators
# ---------------------------------------------------------------------------

class _TrapezoidStepper:
    """Implicit trapezoidal rule with a reused LU-factored Newton matrix."""

    MAX_NEWTON = 12

    def __init__(self, asm: Assembly, settings: SolverSettings):
        self.asm = asm
        self.tol = settings.newton_tol
        self._lu = None
        self._lu_h = None
        self._typ = np.maximum(np.abs(asm.model.default_initial_state()),
                               1e-3)

    def invalidate(self):
        self._lu = None

    def _refresh(self, x: np.ndarray, h: float):
        n = x.size
        J = np.empty((n, n))
        f0 = self.asm.f(x)
        for j in range(n):
            step = 1e-7 * max(abs(x[j]), self._typ[j])
            xp = x.copy()
            xp[j] += step
            J[:, j] = (self.asm.f(xp) - f0) / step
        self._lu = lu_factor(np.eye(n) - 0.5 * h * J)
        self._lu_h = h

    def step(self, t: float, x: np.ndarray, h: float,
             f_x: np.ndarray | None = None) -> tuple:
        """One trapezoidal step; returns (x_next, f(x_next))."""
        fn = self.asm.f(x) if f_x is None else f_x
        y = x + h * fn
        if self._lu is None or self._lu_h != h:
            self._refresh(x, h)
        refreshed = False
        for it in range(self.MAX_NEWTON):
            fy = self.asm.f(y)
            r = y - x - 0.5 * h * (fn + fy)
            dy = lu_solve(self._lu, r)
            y = y - dy
            scale = max(float(np.max(np.abs(y))), 1.0)
            if float(np.max(np.abs(dy))) <= self.tol * scale:
                # fy is one update stale; the O(J dy) slip is far below
                # the step's truncation error
                return y, fy
            if it >= 4 and not refreshed:
                self._refresh(y, h)
                refreshed = True
        raise IntegrationError(
            "stiff-failure", t,
            f"Newton did not converge within {self.MAX_NEWTON} iterations "
            f"at step size {h:g}")

    def step_adaptive(self, t: float, x: np.ndarray, h: float,
                      h_min: float, f_x=None) -> tuple:
        """Step with halving on Newton failure, down to h_min."""
        sub = h
        while True:
            try:
                if sub >= h:
                    return self.step(t, x, h, f_x)
                steps = int(round(h / sub))
                y, fy = x, f_x
                tt = t
                for _ in range(steps):
                    y, fy = self.step(tt, y, sub, fy)
                    tt += sub
                return y, fy
            except IntegrationError:
                self.invalidate()
                sub /= 2.0
                if sub < h_min:
                    raise


def _rk4_step(asm: Assembly, t: float, x: np.ndarray, h: float):
    k1 = asm.f(x)
    k2 = asm.f(x + 0.5 * h * k1)
    k3 = asm.f(x + 0.5 * h * k2)
    k4 = asm.f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# Event application and the main loop
# ---------------------------------------------------------------------------

def apply_event(model: NetworkModel, x: np.ndarray, active: frozenset,
                load_overrides: dict, ref_overrides: dict,
                event: Event) -> frozenset:
    """Mutate state/overrides for one event; returns the new active set.

    Plug events delegate validation to the network layer.  Plugging out
    freezes the converter branch: flux and integrator states are zeroed
    and stay zero; the node keeps its capacitance, local load, and
    lines, with the bus voltage continuous.  Plugging in closes the
    breaker on a unit synchronized to the live bus (``bumpless_sync``):
    voltage and command are continuous at the closure instant and the
    integral action then walks the node from its floating value to the
    reference.
    """
    lay = model.layout
    if event.kind in ("plug_in", "plug_out"):
        active, _ = apply_topology_event(model.graph, active,
                                         event.kind, event.target)
        ps, cs = lay.dgu_plant[event.target], lay.dgu_ctrl[event.target]
        spec = model.graph.dgus[event.target]
        if event.kind == "plug_in" and spec.controller.kind != "none":
            ref = ref_overrides.get(event.target, spec.controller.ref)
            v_bus = x[ps.start + 2:ps.stop] / model.plant_eff[event.target].C_t
            phi, ctrl = bumpless_sync(spec, ref, v_bus)
            x[ps.start:ps.start + 2] = phi
            x[cs] = ctrl
        else:
            x[ps.start:ps.start + 2] = 0.0
            x[cs] = 0.0
        return active
    if event.kind == "load_scale":
        node = event.target
        load_overrides[node] = _scale_base(
            model.graph, load_overrides, node).scaled(event.factor)
        return active
    # ref_change
    ref_overrides[event.target] = event.ref
    return active


def _scale_base(graph: MicrogridGraph, load_overrides: dict, node):
    """Current load at a node: the latest override, else the graph's."""
    if node in load_overrides:
        return load_overrides[node]
    if node in graph.load_nodes:
        return graph.load_nodes[node]
    spec = graph.dgus.get(node)
    if spec is not None and spec.plant.local_load is not None:
        return spec.plant.local_load
    raise ValueError(f"no load at node {node} to scale")


def schedule_at(scenario: Scenario, t: float) -> tuple:
    """Active set and parameter overrides in force at time t.

    Replays the event list up to and including t without touching any
    state, so an equilibrium can be solved for the configuration a
    simulation would be in at that moment.
    Returns (active set, load overrides, ref overrides).
    """
    active = frozenset(scenario.active_dgus)
    loads: dict = {}
    refs: dict = {}
    for e in scenario.events:
        if e.time > t + 1e-12:
            break
        if e.kind in ("plug_in", "plug_out"):
            active, _ = apply_topology_event(scenario.graph, active,
                                             e.kind, e.target)
        elif e.kind == "load_scale":
            loads[e.target] = _scale_base(
                scenario.graph, loads, e.target).scaled(e.factor)
        else:
            refs[e.target] = e.ref
    return active, loads, refs


def integrate(scenario: Scenario) -> Trajectory:
    """Run the scheduled experiment and log the decimated trajectory.

    Events are applied between steps, exactly at their times (the step
    straddling an event is split).  The state is logged right before and
    right after each event so discontinuities stay visible.
    """
    model = NetworkModel(scenario.graph, scenario.v0_nominal)
    s = scenario.solver
    if scenario.initial_state is not None:
        x = scenario.initial_state.copy()
    elif scenario.start == "equilibrium":
        from .eip import solve_equilibrium  # deferred: eip imports sim
        eq = solve_equilibrium(scenario.graph, scenario.active_dgus,
                               v0_nominal=scenario.v0_nominal)
        x = eq.x.copy()
    elif scenario.start == "presync":
        x = model.presync_initial_state(scenario.active_dgus)
    else:
        x = model.default_initial_state()
    if x.shape != (model.layout.n,):
        raise ValueError(
            f"initial state must be {(model.layout.n,)}, got {x.shape}")
    active = frozenset(scenario.active_dgus)
    load_overrides: dict = {}
    ref_overrides: dict = {}

    t_log, x_log, upre_log, upost_log, sat_log = [], [], [], [], []
    markers: list = []
    segments: list = []

    def log(t, asm):
        u_pre, u_post, sat = asm.commands(x)
        t_log.append(t)
        x_log.append(x.copy())
        upre_log.append(u_pre)
        upost_log.append(u_post)
        sat_log.append(sat)

    # Group events by time and build the segment boundaries.
    boundaries: list = []
    for e in scenario.events:
        if not boundaries or e.time > boundaries[-1][0]:
            boundaries.append((e.time, [e]))
        else:
            boundaries[-1][1].append(e)

    asm = build_assembly(model, active, load_overrides, ref_overrides)
    stepper = _TrapezoidStepper(asm, s)
    log(0.0, asm)

    t = 0.0
    step_count = 0
    f_x = asm.f(x)
    for t_end, events_here in boundaries + [(scenario.horizon, [])]:
        seg_start = t
        if t_end > t + 1e-15:
            n_steps = max(1, int(round((t_end - t) / s.h)))
            h_seg = (t_end - t) / n_steps
            for k in range(n_steps):
                try:
                    if s.method == "trapezoid":
                        x, f_x = stepper.step_adaptive(t, x, h_seg,
                                                       s.h_min, f_x)
                    else:
                        x = _rk4_step(asm, t, x, h_seg)
                        f_x = None
                except SingularVoltageError as exc:
                    raise IntegrationError("domain-exit", t, str(exc))
                t = seg_start + (k + 1) * h_seg
                step_count += 1
                if step_count % s.log_decimation == 0:
                    log(t, asm)
            if t_log[-1] != t:
                log(t, asm)
        segments.append((seg_start, t_end, active,
                         dict(asm.loads), dict(asm.refs)))
        for e in events_here:
            active = apply_event(model, x, active, load_overrides,
                                 ref_overrides, e)
            markers.append(EventMarker(e.time, e.describe(), len(t_log)))
        if events_here:
            asm = build_assembly(model, active, load_overrides,
                                 ref_overrides)
            stepper = _TrapezoidStepper(asm, s)
            f_x = asm.f(x)
            log(t, asm)

    return Trajectory(
        t=np.array(t_log), x=np.array(x_log),
        u_pre=np.array(upre_log), u_post=np.array(upost_log),
        sat=np.array(sat_log), model=model,
        events=markers, segments=segments,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowMetrics:
    """Per-DGU response inside one event-free window."""

    t_start: float
    t_end: float
    active: bool
    settle_time: float | None        # None = never settled in the window
    max_deviation: float             # literal max |dV| over the window, V
    overshoot: float                 # crossing overshoot, V (see docstring)


def _crossing_overshoot(err: np.ndarray, band: float) -> float:
    """Largest excursion past zero after the error first changes sign.

    For a trajectory approaching its reference from one side, this is the
    classic overshoot: deviation on the far side of the reference.  An
    error already inside ``band`` at the window start counts all deviation.
    """
    e0 = err[0]
    if abs(e0) <= band:
        return float(np.max(np.abs(err)))
    sign0 = 1.0 if e0 > 0 else -1.0
    crossed = np.nonzero(sign0 * err < 0.0)[0]
    if len(crossed) == 0:
        return 0.0
    return float(np.max(-sign0 * err[crossed[0]:], initial=0.0))


def settling_metrics(traj: Trajectory, band: float,
                     refs: dict | None = None) -> dict:
    """Settle time and overshoot per DGU per event-free window.

    settle_time: first instant after the window start beyond which both
    voltage-error components stay within ``band`` until the window end.
    max_deviation: the literal max of |dV_d|, |dV_q| over the window.
    overshoot: the crossing overshoot (per axis, then the max).

    Resolution is the logging grid; metrics are exact on the samples.
    """
    out: dict = {i: [] for i in traj.model.layout.dgu_ids}
    for (t0, t1, active_set, _loads, seg_refs) in traj.segments:
        i0, i1 = traj.window(t0, t1)
        if i1 - i0 < 2:
            continue
        tt = traj.t[i0:i1]
        for dgu in traj.model.layout.dgu_ids:
            ref = (refs or seg_refs)[dgu]
            dV = traj.dgu_voltage(dgu)[i0:i1] - ref.vec
            err = np.max(np.abs(dV), axis=1)
            active = dgu in active_set
            if not active:
                out[dgu].append(WindowMetrics(t0, t1, False, None,
                                              float(np.max(err)), 0.0))
                continue
            outside = np.nonzero(err > band)[0]
            if len(outside) == 0:
                settle = 0.0
            elif outside[-1] == len(err) - 1:
                settle = None
            else:
                settle = float(tt[outside[-1] + 1] - t0)
            overshoot = max(_crossing_overshoot(dV[:, 0], band),
                            _crossing_overshoot(dV[:, 1], band))
            out[dgu].append(WindowMetrics(t0, t1, True, settle,
                                          float(np.max(err)), overshoot))
    return out


def settling_after_event(traj: Trajectory, dgu, t_event: float,
                         band: float) -> float | None:
    """Settling time of one DGU's voltage after the event at ``t_event``.

    The clock starts at the event and stops at the first instant from
    which the error stays inside ``band`` through the end of that
    event-free window.  A response whose budget outlasts its window
    (still outside the band when the next event fires) keeps the clock
    running into the following windows, so later small disturbances
    count against it — the conservative direction.  Returns 0.0 for a
    unit in band for its entire first window, and None if the horizon
    arrives first or the unit is unplugged along the way.
    """
    settle = None
    for (t0, t1, active_set, _loads, seg_refs) in traj.segments:
        if t1 <= t_event + 1e-12:
            continue
        if dgu not in active_set:
            return None
        i0, i1 = traj.window(max(t0, t_event), t1)
        if i1 - i0 < 2:
            continue
        tt = traj.t[i0:i1]
        ref = seg_refs[dgu]
        dV = traj.dgu_voltage(dgu)[i0:i1] - ref.vec
        err = np.max(np.abs(dV), axis=1)
        outside = np.nonzero(err > band)[0]
        if len(outside) == 0:
            if settle is None:
                settle = max(0.0, float(tt[0] - t_event))
            return settle
        if outside[-1] < len(err) - 1:
            return float(tt[outside[-1] + 1] - t_event)
        settle = None            # out of band at the window end
    return None


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def write_csv(traj: Trajectory, h_mg: np.ndarray | None = None) -> str:
    """Render the trajectory in the delimited text format.

    One row per sample: time, every member node voltage pair, every DGU
    filter current / command pair and saturation flag, every line current
    pair, and the composite storage column (NaN when not supplied).
    Event markers appear as comment lines at their position in time;
    reference comment lines precede the header so plots can rebuild
    voltage errors from the file alone.
    """
    model = traj.model
    lay = model.layout
    buf = io.StringIO()
    for dgu in lay.dgu_ids:
        ref = model.graph.dgus[dgu].controller.ref
        buf.write(f"# ref dgu{dgu} {ref.Vd_ref:.10g} {ref.Vq_ref:.10g}\n")
    cols = ["t"]
    for node in model.graph.member_nodes():
        cols += [f"node{node}.Vd", f"node{node}.Vq"]
    for dgu in lay.dgu_ids:
        cols += [f"dgu{dgu}.Itd", f"dgu{dgu}.Itq",
                 f"dgu{dgu}.ud", f"dgu{dgu}.uq", f"dgu{dgu}.sat"]
    for line in lay.line_ids:
        cols += [f"line{line}.Id", f"line{line}.Iq"]
    cols.append("H_MG")
    buf.write(", ".join(cols) + "\n")

    node_v = {node: traj.node_voltage(node)
              for node in model.graph.member_nodes()}
    dgu_i = {d: traj.dgu_current(d) for d in lay.dgu_ids}
    line_i = {l: traj.line_current(l) for l in lay.line_ids}
    if h_mg is None:
        h_mg = np.full(traj.n_samples, np.nan)

    pending = sorted(traj.events, key=lambda m: m.sample_index)
    ev_idx = 0
    for k in range(traj.n_samples):
        while ev_idx < len(pending) and pending[ev_idx].sample_index == k:
            m = pending[ev_idx]
            buf.write(f"# event t={m.time:g} {m.description}\n")
            ev_idx += 1
        row = [f"{traj.t[k]:.9f}"]
        for node in model.graph.member_nodes():
            row += [f"{node_v[node][k, 0]:.6f}", f"{node_v[node][k, 1]:.6f}"]
        for j, d in enumerate(lay.dgu_ids):
            row += [f"{dgu_i[d][k, 0]:.6f}", f"{dgu_i[d][k, 1]:.6f}",
                    f"{traj.u_post[k, j, 0]:.6f}",
                    f"{traj.u_post[k, j, 1]:.6f}",
                    "1" if traj.sat[k, j] else "0"]
        for l in lay.line_ids:
            row += [f"{line_i[l][k, 0]:.6f}", f"{line_i[l][k, 1]:.6f}"]
        row.append(f"{h_mg[k]:.9g}")
        buf.write(", ".join(row) + "\n")
    for m in pending[ev_idx:]:
        buf.write(f"# event t={m.time:g} {m.description}\n")
    return buf.getvalue()
