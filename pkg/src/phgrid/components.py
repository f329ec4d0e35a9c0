"""Concrete subsystem models: DGU plant, static load node, power line.

All three are assembled into the canonical :class:`~phgrid.phs.LinearIsoPhs`
form.  Loads additionally carry a nonlinear voltage-dependent current sink
which the network derivative assembly subtracts from the node charge
balance; it is the only nonlinearity in the whole model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .phs import LinearIsoPhs


class SingularVoltageError(ValueError):
    """Node voltage amplitude left the load model's validity domain."""


@dataclass(frozen=True)
class ZipParams:
    """Static ZIP load: admittance (S), current (A), power (W / var) terms.

    One coefficient triple per axis; all six are nonnegative.
    """

    Y_p: float
    Y_q: float
    I_p: float
    I_q: float
    P_p: float
    P_q: float

    def __post_init__(self):
        for name in ("Y_p", "Y_q", "I_p", "I_q", "P_p", "P_q"):
            if getattr(self, name) < 0:
                raise ValueError(f"ZIP coefficient {name} must be >= 0")

    def scaled(self, factor: float) -> "ZipParams":
        """All six coefficients multiplied by ``factor`` (load step)."""
        if factor <= 0:
            raise ValueError("scale factor must be > 0")
        return ZipParams(*(factor * getattr(self, f)
                           for f in ("Y_p", "Y_q", "I_p", "I_q", "P_p", "P_q")))


@dataclass(frozen=True)
class ExpParams:
    """Static exponential load: P = P0 (V/V0)^n_p, Q = Q0 (V/V0)^n_q."""

    P0: float          # nominal active power, W
    Q0: float          # nominal reactive power, var
    n_p: float         # active-power voltage exponent
    n_q: float         # reactive-power voltage exponent
    V0: float          # nominal voltage amplitude, V

    def __post_init__(self):
        if self.P0 < 0 or self.Q0 < 0:
            raise ValueError("EXP nominal powers must be >= 0")
        if self.V0 <= 0:
            raise ValueError("EXP nominal voltage must be > 0")

    def scaled(self, factor: float) -> "ExpParams":
        """P0 and Q0 multiplied by ``factor`` (load step)."""
        if factor <= 0:
            raise ValueError("scale factor must be > 0")
        return ExpParams(factor * self.P0, factor * self.Q0,
                         self.n_p, self.n_q, self.V0)


@dataclass(frozen=True)
class LoadModel:
    """A ZIP or EXP current sink, optionally with its node capacitance.

    ``C_j`` is the lumped line-leg capacitance of a lone-standing load node
    (filled in by the graph builder); it stays ``None`` for local loads that
    sit at a generation-unit node.  ``v_floor`` is the amplitude below which
    the 1/V terms are considered out of domain (set to 1e-3 of the nominal
    voltage by the scenario loader).
    """

    kind: str                       # "zip" | "exp"
    params: ZipParams | ExpParams = field()
    C_j: float | None = None        # F, lone-standing nodes only
    v_floor: float = 0.0            # V

    def __post_init__(self):
        if self.kind not in ("zip", "exp"):
            raise ValueError(f"unknown load kind {self.kind!r}")
        want = ZipParams if self.kind == "zip" else ExpParams
        if not isinstance(self.params, want):
            raise ValueError(f"{self.kind} load needs {want.__name__}")
        if self.C_j is not None and self.C_j <= 0:
            raise ValueError("node capacitance must be > 0")

    def scaled(self, factor: float) -> "LoadModel":
        return LoadModel(self.kind, self.params.scaled(factor),
                         self.C_j, self.v_floor)


@dataclass(frozen=True)
class DguParams:
    """VSI output filter: series R_t, L_t and shunt C_t, plus grid frequency.

    ``local_load`` is an optional static load supplied directly at the DGU
    node (drawn from the same capacitor).
    """

    R_t: float                      # Ohm
    L_t: float                      # H
    C_t: float                      # F
    omega0: float                   # rad/s
    local_load: LoadModel | None = None

    def __post_init__(self):
        for name in ("R_t", "L_t", "C_t", "omega0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DGU parameter {name} must be > 0")


@dataclass(frozen=True)
class LineParams:
    """Per-km line constants and length; series values scale with length."""

    r_per_km: float                 # Ohm/km
    l_per_km: float                 # H/km
    c_per_km: float                 # F/km
    length: float                   # km

    def __post_init__(self):
        for name in ("r_per_km", "l_per_km", "c_per_km", "length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"line parameter {name} must be > 0")

    @property
    def R_l(self) -> float:
        return self.r_per_km * self.length

    @property
    def L_l(self) -> float:
        return self.l_per_km * self.length

    @property
    def C_l(self) -> float:
        return self.c_per_km * self.length


def build_dgu_phs(p: DguParams) -> LinearIsoPhs:
    """DGU plant in flux/charge coordinates [L_t I_d, L_t I_q, C V_d, C V_q].

    The VSI voltage command enters the flux rows (G); the interaction
    current from the network enters the charge rows (K).
    """
    w = p.omega0
    J = np.array([
        [0.0,        w * p.L_t, -1.0,       0.0],
        [-w * p.L_t, 0.0,        0.0,      -1.0],
        [1.0,        0.0,        0.0,       w * p.C_t],
        [0.0,        1.0,       -w * p.C_t, 0.0],
    ])
    R = np.diag([p.R_t, p.R_t, 0.0, 0.0])
    G = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    K = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    Q = np.diag([1.0 / p.L_t, 1.0 / p.L_t, 1.0 / p.C_t, 1.0 / p.C_t])
    return LinearIsoPhs(J=J, R=R, G=G, K=K, Q=Q)


def build_load_node_phs(C_j: float, omega0: float) -> LinearIsoPhs:
    """Lone-standing load node: two charge states, lossless rotation.

    The nonlinear sink is *not* part of the linear structure; the derivative
    assembly subtracts ``load_current`` from the charge balance.
    """
    if C_j <= 0:
        raise ValueError("node capacitance must be > 0")
    J = np.array([[0.0, omega0 * C_j], [-omega0 * C_j, 0.0]])
    return LinearIsoPhs(
        J=J,
        R=np.zeros((2, 2)),
        G=np.zeros((2, 0)),
        K=np.eye(2),
        Q=np.diag([1.0 / C_j, 1.0 / C_j]),
    )


def build_line_phs(p: LineParams, omega0: float) -> LinearIsoPhs:
    """Series RL branch of the pi-model line, flux states [L_l I_d, L_l I_q].

    Interaction input is the stacked pair of terminal voltages
    [V_tail; V_head]; K = [I, -I] applies the voltage difference and mirrors
    the branch current into z = [I_line; -I_line].
    """
    L_l, R_l = p.L_l, p.R_l
    J = np.array([[0.0, omega0 * L_l], [-omega0 * L_l, 0.0]])
    K = np.hstack([np.eye(2), -np.eye(2)])
    return LinearIsoPhs(
        J=J,
        R=np.diag([R_l, R_l]),
        G=np.zeros((2, 0)),
        K=K,
        Q=np.diag([1.0 / L_l, 1.0 / L_l]),
    )


def load_current(load: LoadModel, V_dq) -> np.ndarray:
    """Voltage-dependent sink current (A, A) drawn by a static load.

    ZIP evaluates the quadratic polynomial in the amplitude; EXP evaluates
    the power-law branch.  Both map the active/reactive power pair (P, Q) at
    the present amplitude onto dq currents via

        I_d = (P V_d + Q V_q) / Vhat^2,   I_q = (P V_q - Q V_d) / Vhat^2.

    Raises :class:`SingularVoltageError` when the amplitude is at or below
    the load's validity floor.
    """
    V = np.asarray(V_dq, dtype=float)
    v_hat = math.hypot(V[0], V[1])
    if v_hat <= load.v_floor or v_hat == 0.0:
        raise SingularVoltageError(
            f"voltage amplitude {v_hat:g} V is outside the load model domain "
            f"(floor {load.v_floor:g} V)")
    if load.kind == "zip":
        z = load.params
        gp = z.P_p / v_hat**2 + z.I_p / v_hat + z.Y_p
        gq = z.P_q / v_hat**2 + z.I_q / v_hat + z.Y_q
    else:
        e = load.params
        gp = e.P0 * v_hat**(e.n_p - 2.0) / e.V0**e.n_p
        gq = e.Q0 * v_hat**(e.n_q - 2.0) / e.V0**e.n_q
    return np.array([gp * V[0] + gq * V[1], gp * V[1] - gq * V[0]])


def effective_capacitances(graph) -> dict:
    """Lumped line-leg capacitance per member node: sum of C_l/2 incident.

    This is only the line contribution; a DGU node's plant capacitance is
    C_t plus this value, a lone-standing load node's capacitance is exactly
    this value (and must therefore be positive, else its charge state would
    be degenerate).
    """
    sums: dict = {node: 0.0 for node in graph.member_nodes()}
    for line in graph.lines.values():
        half = line.params.C_l / 2.0
        sums[line.tail] += half
        sums[line.head] += half
    for node_id in graph.load_nodes:
        if sums[node_id] == 0.0:
            raise ValueError(
                f"load node {node_id} has no incident lines: "
                "its capacitance would be zero")
    return sums
