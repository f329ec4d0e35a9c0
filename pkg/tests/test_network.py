"""Graph validation and the power-preserving coupling map."""
import numpy as np
import pytest

from phgrid.components import LoadModel, ZipParams
from phgrid.controllers import VoltageReference
from phgrid.network import (ControllerSpec, CouplingMap, DanglingLineError,
                            DguSpec, LineSpec, MicrogridGraph,
                            TopologyEventError, apply_topology_event,
                            build_coupling, coupling_inputs)
from phgrid.presets import feeder1_graph

from conftest import ida_gains, line_params, make_plant, zip_load_1


def spec_at(node: int) -> DguSpec:
    ctl = ControllerSpec(kind="ida_pbc",
                         ref=VoltageReference(16000.0, 13000.0),
                         ida_gains=ida_gains())
    return DguSpec(node=node, plant=make_plant(), controller=ctl)


class TestControllerSpec:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown controller kind"):
            ControllerSpec(kind="mpc", ref=VoltageReference(1.0, 0.0))

    def test_missing_gains(self):
        with pytest.raises(ValueError, match="needs gains"):
            ControllerSpec(kind="ida_pbc", ref=VoltageReference(1.0, 0.0))
        with pytest.raises(ValueError, match="needs gains"):
            ControllerSpec(kind="pi", ref=VoltageReference(1.0, 0.0))

    def test_uncontrolled_kind_allowed(self):
        ControllerSpec(kind="none", ref=VoltageReference(1.0, 0.0))


class TestGraphValidation:
    def test_node_cannot_be_dgu_and_load(self):
        with pytest.raises(ValueError, match="both DGU and lone load"):
            MicrogridGraph(dgus={1: spec_at(1)},
                           load_nodes={1: zip_load_1()}, lines={})

    def test_line_id_collision_with_member(self):
        with pytest.raises(ValueError, match="collides"):
            MicrogridGraph(
                dgus={1: spec_at(1), 2: spec_at(2)},
                load_nodes={},
                lines={2: LineSpec(1, 2, line_params(1.0))})

    def test_self_loop_rejected(self):
        with pytest.raises(ValueError, match="self-loop"):
            MicrogridGraph(dgus={1: spec_at(1)}, load_nodes={},
                           lines={9: LineSpec(1, 1, line_params(1.0))})

    def test_unknown_endpoint_rejected(self):
        with pytest.raises(ValueError, match="not a member node"):
            MicrogridGraph(dgus={1: spec_at(1)}, load_nodes={},
                           lines={9: LineSpec(1, 42, line_params(1.0))})

    def test_disconnected_graph_rejected(self):
        with pytest.raises(ValueError, match="connected"):
            MicrogridGraph(dgus={1: spec_at(1), 2: spec_at(2)},
                           load_nodes={}, lines={})

    def test_incidence_queries(self):
        g = feeder1_graph()
        assert g.member_nodes() == list(range(1, 12))
        assert g.line_ids() == list(range(12, 24))
        assert g.incident_lines(7) == [12, 13]
        assert g.incident_lines(5) == [16, 21, 22]


class TestCouplingMap:
    def test_benchmark_dimensions(self):
        # 11 member nodes x 2 ports + 12 lines x 4 ports = 70; each line
        # populates 4 off-diagonal 2x2 blocks.
        cmap = build_coupling(feeder1_graph())
        assert cmap.Phi.shape == (70, 70)
        n = cmap.Phi.shape[0]
        blocks = sum(
            1 for i in range(0, n, 2) for j in range(0, n, 2)
            if np.any(cmap.Phi[i:i + 2, j:j + 2] != 0.0))
        assert blocks == 48

    def test_exact_skew_symmetry(self):
        cmap = build_coupling(feeder1_graph())
        assert np.all(cmap.Phi + cmap.Phi.T == 0.0), (
            "coupling matrix must be skew to the last bit")

    def test_power_conservation(self):
        # z . (Phi z) = 0 identically: the network neither makes nor eats
        # power, for any port values whatsoever.
        cmap = build_coupling(feeder1_graph())
        rng = np.random.default_rng(8)
        for _ in range(100):
            z = rng.normal(scale=1e4, size=cmap.Phi.shape[0])
            assert abs(z @ coupling_inputs(cmap, z)) < 1e-6 * (z @ z)

    def test_current_routing_single_line(self, dgu_load_graph):
        # One line 3 -> 7:  node 3 sources I_line, node 7 receives it,
        # and the line reads both terminal voltages.
        cmap = build_coupling(dgu_load_graph)
        z = np.zeros(cmap.Phi.shape[0])
        z[cmap.port_slice(3)] = [16000.0, 13000.0]       # V at node 3
        z[cmap.port_slice(7)] = [15800.0, 12900.0]       # V at node 7
        z[cmap.port_slice(12)] = [30.0, -5.0, -30.0, 5.0]  # +/- I_line
        d = coupling_inputs(cmap, z)
        np.testing.assert_array_equal(d[cmap.port_slice(3)], [-30.0, 5.0])
        np.testing.assert_array_equal(d[cmap.port_slice(7)], [30.0, -5.0])
        np.testing.assert_array_equal(
            d[cmap.port_slice(12)], [16000.0, 13000.0, 15800.0, 12900.0])

    def test_wrong_length_rejected(self, dgu_load_graph):
        cmap = build_coupling(dgu_load_graph)
        with pytest.raises(ValueError, match="stacked output"):
            coupling_inputs(cmap, np.zeros(3))

    def test_dangling_line_rejected(self, two_dgu_graph):
        with pytest.raises(DanglingLineError, match="inactive"):
            build_coupling(two_dgu_graph, active_nodes={2})

    def test_net_current_sums_over_incident_lines(self):
        """Node 5 of the benchmark touches lines 16 (into 5), 21 (into 5)
        and 22 (out of 5): d_5 = I_16 + I_21 - I_22."""
        g = feeder1_graph()
        cmap = build_coupling(g)
        rng = np.random.default_rng(55)
        z = rng.normal(scale=100.0, size=cmap.Phi.shape[0])
        # impose the mirror structure z_l = [I; -I] that line outputs obey
        for lid in g.line_ids():
            sl = cmap.port_slice(lid)
            z[sl.start + 2:sl.stop] = -z[sl.start:sl.start + 2]
        d = coupling_inputs(cmap, z)
        i16 = z[cmap.port_slice(16)][:2]
        i21 = z[cmap.port_slice(21)][:2]
        i22 = z[cmap.port_slice(22)][:2]
        np.testing.assert_allclose(d[cmap.port_slice(5)], i16 + i21 - i22,
                                   rtol=1e-12)


class TestTopologyEvents:
    def test_plug_in_adds_member(self):
        g = feeder1_graph()
        active, cmap = apply_topology_event(g, frozenset({1, 2, 3, 4, 6}),
                                            "plug_in", 5)
        assert active == frozenset({1, 2, 3, 4, 5, 6})
        assert isinstance(cmap, CouplingMap)

    def test_plug_in_twice_rejected(self):
        g = feeder1_graph()
        with pytest.raises(TopologyEventError, match="already connected"):
            apply_topology_event(g, frozenset({1, 5}), "plug_in", 5)

    def test_plug_out_unknown_dgu(self):
        g = feeder1_graph()
        with pytest.raises(TopologyEventError, match="no DGU"):
            apply_topology_event(g, frozenset({1}), "plug_out", 7)

    def test_plug_out_inactive_rejected(self):
        g = feeder1_graph()
        with pytest.raises(TopologyEventError, match="already disconnected"):
            apply_topology_event(g, frozenset({1, 2}), "plug_out", 5)
