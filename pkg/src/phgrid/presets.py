"""Built-in benchmark: a medium-voltage islanded feeder with six DGUs.

Eleven member nodes on a 20 kV dq grid: converter-interfaced DGUs at
nodes 1-6 (node 1 runs the PI voltage controller, nodes 2-6 the
passivity-based one), lone-standing loads at nodes 7-11.  ZIP loads sit at
nodes 1, 2, 4, 5, 7, 8 (the first four as DGU-local loads) and exponential
loads at 9-11.  Twelve RLC lines close two meshes.  The scheduled
experiment plugs DGU 5 in at t = 4 s and raises the demands at nodes 5
and 8 by half at t = 5 s and t = 6 s.
"""
from __future__ import annotations

import math

from .components import (DguParams, ExpParams, LineParams, LoadModel,
                         ZipParams)
from .controllers import (IdaPbcGains, SaturationLimits, VoltageReference,
                          pi_gains_from_scalars)
from .network import ControllerSpec, DguSpec, LineSpec, MicrogridGraph
from .sim import Event, Scenario, SolverSettings

V0_NOMINAL = 20e3            # V, amplitude base for the per-unit references
F0_NOMINAL = 50.0            # Hz
OMEGA0 = 2.0 * math.pi * F0_NOMINAL

#: converter output filter, identical for all six DGUs
FILTER_R_T = 0.1             # Ohm
FILTER_L_T = 1.8e-3          # H
FILTER_C_T = 25e-6           # F

#: three-phase cable constants per km.  The grid model is balanced, so
#: only the positive-sequence values enter any computation; the
#: zero-sequence row is kept for reference/completeness.
LINE_POSITIVE_SEQUENCE = {"r": 0.343, "l": 0.875e-3, "c": 151.7e-9}
LINE_ZERO_SEQUENCE = {"r": 0.817, "l": 5.087e-3, "c": 151.7e-9}

#: minimum load-voltage amplitude before the static draw is considered
#: out of its domain (V)
LOAD_VOLTAGE_FLOOR = 20.0

#: per-unit voltage references (d, q) per DGU node
REFS_PU = {
    1: (0.90, 0.55),
    2: (0.85, 0.60),
    3: (0.80, 0.65),
    4: (0.75, 0.70),
    5: (0.70, 0.75),
    6: (0.65, 0.80),
}

#: ZIP coefficients per node: (Y siemens, I ampere, P watt), equal on both
#: axes (reactive values in the matching var units)
ZIP_COEFFS = {
    1: (75e-6, 0.300, 6000.0),
    2: (97.5e-6, 0.390, 7800.0),
    4: (51.96e-6, 0.208, 4157.0),
    5: (80.8e-6, 0.323, 6464.0),
    7: (51.96e-6, 0.208, 4157.0),
    8: (58.48e-6, 0.234, 4679.0),
}

#: exponential-load nominal powers per node (P0 = Q0, exponents 1.5)
EXP_POWERS = {9: 50900.0, 10: 72800.0, 11: 80000.0}
EXP_EXPONENT = 1.5

#: line id -> (tail node, head node, length km)
EDGES = {
    12: (1, 7, 2.8),
    13: (7, 2, 4.4),
    14: (2, 8, 0.6),
    15: (8, 3, 0.6),
    16: (2, 5, 1.3),
    17: (8, 9, 0.5),
    18: (9, 4, 0.3),
    19: (3, 6, 1.5),
    20: (4, 10, 0.8),
    21: (10, 5, 0.3),
    22: (5, 11, 1.7),
    23: (11, 6, 0.2),
}

#: command clamp per axis (V); generous enough to stay inactive in the
#: nominal run (steady commands peak near 23.7 kV at DGU 2, which exports
#: through two lines)
SATURATION_V = 30e3

IDA_ALPHA = -5.0
IDA_NU = 1.0
IDA_KI = 100.0
PI_KP = 1000.0
PI_KI = 1000.0


def zip_load(node: int) -> LoadModel:
    y, i, p = ZIP_COEFFS[node]
    return LoadModel(
        kind="zip",
        params=ZipParams(Y_p=y, Y_q=y, I_p=i, I_q=i, P_p=p, P_q=p),
        v_floor=LOAD_VOLTAGE_FLOOR,
    )


def exp_load(node: int) -> LoadModel:
    s = EXP_POWERS[node]
    return LoadModel(
        kind="exp",
        params=ExpParams(P0=s, Q0=s, n_p=EXP_EXPONENT, n_q=EXP_EXPONENT,
                         V0=V0_NOMINAL),
        v_floor=LOAD_VOLTAGE_FLOOR,
    )


def feeder1_graph() -> MicrogridGraph:
    """The full eleven-node feeder with controllers and loads attached."""
    dgus = {}
    for node, (d_pu, q_pu) in REFS_PU.items():
        plant = DguParams(
            R_t=FILTER_R_T, L_t=FILTER_L_T, C_t=FILTER_C_T, omega0=OMEGA0,
            local_load=zip_load(node) if node in ZIP_COEFFS else None,
        )
        ref = VoltageReference(Vd_ref=d_pu * V0_NOMINAL,
                               Vq_ref=q_pu * V0_NOMINAL)
        limits = SaturationLimits(Vd_sat=SATURATION_V, Vq_sat=SATURATION_V)
        if node == 1:
            controller = ControllerSpec(
                kind="pi", ref=ref, limits=limits,
                pi_gains=pi_gains_from_scalars(PI_KP, PI_KI, plant),
            )
        else:
            controller = ControllerSpec(
                kind="ida_pbc", ref=ref, limits=limits,
                ida_gains=IdaPbcGains(alpha11=IDA_ALPHA, alpha22=IDA_ALPHA,
                                      nu11=IDA_NU, nu22=IDA_NU,
                                      kI1=IDA_KI, kI2=IDA_KI),
            )
        dgus[node] = DguSpec(node=node, plant=plant, controller=controller)

    load_nodes = {node: zip_load(node) for node in (7, 8)}
    load_nodes.update({node: exp_load(node) for node in (9, 10, 11)})

    lines = {}
    for line_id, (tail, head, km) in EDGES.items():
        lines[line_id] = LineSpec(
            tail=tail, head=head,
            params=LineParams(r_per_km=LINE_POSITIVE_SEQUENCE["r"],
                              l_per_km=LINE_POSITIVE_SEQUENCE["l"],
                              c_per_km=LINE_POSITIVE_SEQUENCE["c"],
                              length=km),
        )
    return MicrogridGraph(dgus=dgus, load_nodes=load_nodes, lines=lines)


def cigre_feeder1(horizon: float = 7.0,
                  solver: SolverSettings | None = None) -> Scenario:
    """The scheduled seven-second experiment on the feeder.

    DGU 5 starts disconnected and plugs in at t = 4 s; the demands at
    nodes 5 (DGU-local) and 8 (lone-standing) rise by 50% at t = 5 s and
    t = 6 s.  All other DGUs are active from t = 0, starting at the
    solved closed-loop equilibrium of that five-unit topology (the
    ``"equilibrium"`` start mode).
    """
    graph = feeder1_graph()
    events = []
    if horizon >= 4.0:
        events.append(Event(time=4.0, kind="plug_in", target=5))
    if horizon >= 5.0:
        events.append(Event(time=5.0, kind="load_scale", target=5,
                            factor=1.5))
    if horizon >= 6.0:
        events.append(Event(time=6.0, kind="load_scale", target=8,
                            factor=1.5))
    return Scenario(
        graph=graph,
        horizon=horizon,
        v0_nominal=V0_NOMINAL,
        active_dgus=frozenset({1, 2, 3, 4, 6}),
        events=tuple(events),
        solver=solver if solver is not None else SolverSettings(),
        name="cigre-feeder1",
    )


PRESETS = {"cigre-feeder1": cigre_feeder1}
