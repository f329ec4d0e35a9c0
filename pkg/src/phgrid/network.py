"""Microgrid graph and the power-preserving interconnection map.

The grid is a bipartite digraph: member nodes (generation units and
lone-standing loads) on one side, lines on the other.  Each line runs from a
tail member to a head member; its positive current direction is tail->head.
The coupling map routes stacked interaction outputs z to stacked interaction
inputs d through an exactly skew-symmetric selector matrix, so the network
exchanges power without creating or destroying it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .components import DguParams, LineParams
from .controllers import (IdaPbcGains, PiGains, SaturationLimits,
                          VoltageReference)


@dataclass(frozen=True)
class ControllerSpec:
    """Per-DGU controller selection: kind in {"ida_pbc", "pi", "none"}."""

    kind: str
    ref: VoltageReference
    ida_gains: IdaPbcGains | None = None
    pi_gains: PiGains | None = None
    limits: SaturationLimits | None = None

    def __post_init__(self):
        if self.kind not in ("ida_pbc", "pi", "none"):
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if self.kind == "ida_pbc" and self.ida_gains is None:
            raise ValueError("ida_pbc controller needs gains")
        if self.kind == "pi" and self.pi_gains is None:
            raise ValueError("pi controller needs gains")


@dataclass(frozen=True)
class DguSpec:
    node: int
    plant: DguParams
    controller: ControllerSpec


@dataclass(frozen=True)
class LineSpec:
    tail: int
    head: int
    params: LineParams


@dataclass(frozen=True)
class MicrogridGraph:
    """Immutable grid description.

    dgus:  member node id -> DguSpec
    load_nodes: member node id -> LoadModel (lone-standing loads)
    lines: line id -> LineSpec (tail/head are member node ids)
    """

    dgus: dict = field(default_factory=dict)
    load_nodes: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)

    def __post_init__(self):
        members = set(self.dgus) | set(self.load_nodes)
        if set(self.dgus) & set(self.load_nodes):
            raise ValueError("a node cannot be both DGU and lone load")
        for lid, line in self.lines.items():
            if lid in members:
                raise ValueError(f"line id {lid} collides with a member node")
            if line.tail == line.head:
                raise ValueError(f"line {lid} is a self-loop")
            for end in (line.tail, line.head):
                if end not in members:
                    raise ValueError(
                        f"line {lid} endpoint {end} is not a member node")
        if members and not self._weakly_connected():
            raise ValueError("grid graph is not weakly connected")

    def member_nodes(self) -> list:
        return sorted(set(self.dgus) | set(self.load_nodes))

    def line_ids(self) -> list:
        return sorted(self.lines)

    def incident_lines(self, node) -> list:
        return [lid for lid, line in sorted(self.lines.items())
                if node in (line.tail, line.head)]

    def _weakly_connected(self) -> bool:
        members = self.member_nodes()
        if len(members) <= 1:
            return True
        adj: dict = {m: set() for m in members}
        for line in self.lines.values():
            adj[line.tail].add(line.head)
            adj[line.head].add(line.tail)
        seen = {members[0]}
        stack = [members[0]]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == len(members)


class TopologyEventError(ValueError):
    """Plug event that contradicts the current active set."""


class DanglingLineError(ValueError):
    """A line whose far end is inactive has no defined terminal voltage."""


@dataclass(frozen=True, eq=False)
class CouplingMap:
    """Skew-symmetric selector matrix d = Phi z over stacked ports.

    ``slices`` maps each subsystem id (member node id or line id) to its
    slice in the stacked port vectors.  Member ports are 2-dim (node
    voltage out, net line current in); line ports are 4-dim (terminal
    voltages in, mirrored branch current out).
    """

    Phi: np.ndarray
    slices: dict

    def port_slice(self, subsystem_id):
        return self.slices[subsystem_id]


def build_coupling(graph: MicrogridGraph,
                   active_nodes=None) -> CouplingMap:
    """Assemble Phi from the line orientations; pure +/-1 selectors.

    For member node k:  d_k = -sum(I_l over lines leaving k)
                              +sum(I_l over lines entering k)
    For line l (a->b):  d_l = [V_a; V_b]

    ``active_nodes`` restricts which member nodes participate (default:
    all).  Lines keep zero rows when either endpoint is inactive — but any
    such line is an error, because its far-end voltage is undefined.
    """
    members = graph.member_nodes()
    if active_nodes is None:
        active_nodes = set(members)
    else:
        active_nodes = set(active_nodes)

    slices: dict = {}
    offset = 0
    for node in members:
        slices[node] = slice(offset, offset + 2)
        offset += 2
    for lid in graph.line_ids():
        slices[lid] = slice(offset, offset + 4)
        offset += 4

    Phi = np.zeros((offset, offset))
    eye = np.eye(2)
    for lid in graph.line_ids():
        line = graph.lines[lid]
        if line.tail not in active_nodes or line.head not in active_nodes:
            missing = [e for e in (line.tail, line.head)
                       if e not in active_nodes]
            raise DanglingLineError(
                f"line {lid} endpoint(s) {missing} inactive: far-end "
                "voltage undefined")
        ls = slices[lid]
        ts, hs = slices[line.tail], slices[line.head]
        first = slice(ls.start, ls.start + 2)    # carries z_l[:2] = +I_line
        second = slice(ls.start + 2, ls.stop)    # carries z_l[2:] = -I_line
        # Tail node sources the branch current, head node receives it; both
        # read the current off the mirrored line output so every block pairs
        # with its transpose across the diagonal.
        Phi[ts, first] = -eye     # d_tail += -I_line
        Phi[hs, second] = -eye    # d_head += -(-I_line) = +I_line
        Phi[first, ts] = eye      # d_line[:2] = V_tail
        Phi[second, hs] = eye     # d_line[2:] = V_head
    return CouplingMap(Phi=Phi, slices=slices)


def coupling_inputs(cmap: CouplingMap, z: np.ndarray) -> np.ndarray:
    """Stacked interaction inputs d = Phi z."""
    z = np.asarray(z, dtype=float)
    if z.shape != (cmap.Phi.shape[0],):
        raise ValueError(
            f"stacked output must be {(cmap.Phi.shape[0],)}, got {z.shape}")
    return cmap.Phi @ z


def apply_topology_event(graph: MicrogridGraph, active_dgus: frozenset,
                         kind: str, dgu: int):
    """Plug a DGU's converter branch in or out of the network.

    Only the VSI + filter branch joins or leaves: the node capacitor, any
    local load, and the incident lines stay energized, so an unplugged DGU
    node keeps behaving as an (uncontrolled) load node and the coupling
    map's structure is unchanged.  Returns the new active set and the
    rebuilt coupling map.
    """
    if dgu not in graph.dgus:
        raise TopologyEventError(f"no DGU at node {dgu}")
    active = bool(dgu in active_dgus)
    if kind == "plug_in":
        if active:
            raise TopologyEventError(f"DGU {dgu} is already connected")
        new_active = frozenset(active_dgus | {dgu})
    elif kind == "plug_out":
        if not active:
            raise TopologyEventError(f"DGU {dgu} is already disconnected")
        new_active = frozenset(active_dgus - {dgu})
    else:
        raise TopologyEventError(f"unknown topology event {kind!r}")
    return new_active, build_coupling(graph)
