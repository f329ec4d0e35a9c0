"""Subsystem models: filter, line, load node, and the static load sinks.

Frozen numbers below are hand derivations from the benchmark constants,
e.g. the ZIP conductance at nominal amplitude 20 kV:
    g = P/Vhat^2 + I/Vhat + Y = 6000/4e8 + 0.3/2e4 + 75e-6 = 1.05e-4 S
so a flat-at-nominal node draws exactly 2.1 A on the d axis.
"""
import math

import numpy as np
import pytest

from phgrid.components import (DguParams, ExpParams, LineParams, LoadModel,
                               SingularVoltageError, ZipParams,
                               build_dgu_phs, build_line_phs,
                               build_load_node_phs, effective_capacitances,
                               load_current)
from phgrid.phs import interaction_output, validate_phs
from phgrid.presets import feeder1_graph

from conftest import OMEGA0, line_params, make_plant


class TestZipLoad:
    def test_nominal_draw_node1(self):
        # Benchmark node-1 coefficients at a flat 20 kV d-axis voltage.
        load = LoadModel("zip", ZipParams(75e-6, 75e-6, 0.3, 0.3,
                                          6000.0, 6000.0))
        I = load_current(load, (20000.0, 0.0))
        np.testing.assert_allclose(I, [2.1, -2.1], rtol=1e-12,
                                   err_msg="ZIP draw at nominal amplitude")

    def test_rotation_preserves_magnitude(self):
        """The sink depends on V only through its amplitude and direction,
        so rotating V rotates I without changing |I|."""
        load = LoadModel("zip", ZipParams(75e-6, 75e-6, 0.3, 0.3,
                                          6000.0, 6000.0))
        base = load_current(load, (20000.0, 0.0))
        rng = np.random.default_rng(77)
        for _ in range(50):
            th = rng.uniform(0.0, 2.0 * math.pi)
            V = 20000.0 * np.array([math.cos(th), math.sin(th)])
            I = load_current(load, V)
            assert np.hypot(*I) == pytest.approx(np.hypot(*base), rel=1e-12)

    def test_active_power_is_p_v_dot_i(self):
        # V.I must recover P(Vhat) = P_p + I_p Vhat + Y_p Vhat^2.
        z = ZipParams(75e-6, 75e-6, 0.3, 0.3, 6000.0, 6000.0)
        load = LoadModel("zip", z)
        for vhat in (12000.0, 20000.0, 27500.0):
            V = np.array([vhat * 0.6, vhat * 0.8])
            I = load_current(load, V)
            P = z.P_p + z.I_p * vhat + z.Y_p * vhat**2
            assert float(V @ I) == pytest.approx(P, rel=1e-12), (
                f"active power mismatch at amplitude {vhat}")

    def test_scaling_multiplies_all_six(self):
        z = ZipParams(80.8e-6, 80.8e-6, 0.323, 0.323, 6464.0, 6464.0)
        s = z.scaled(1.5)
        assert s.Y_p == pytest.approx(1.212e-4)
        assert s.I_p == pytest.approx(0.4845)
        assert s.P_p == pytest.approx(9696.0)

    def test_negative_coefficient_rejected(self):
        with pytest.raises(ValueError, match="must be >= 0"):
            ZipParams(-1e-6, 0.0, 0.0, 0.0, 0.0, 0.0)

    def test_floor_raises(self):
        load = LoadModel("zip", ZipParams(75e-6, 75e-6, 0.3, 0.3,
                                          6000.0, 6000.0), v_floor=20.0)
        with pytest.raises(SingularVoltageError):
            load_current(load, (10.0, 0.0))
        with pytest.raises(SingularVoltageError):
            load_current(load, (0.0, 0.0))


class TestExpLoad:
    def test_nominal_draw_node9(self):
        # P0 = Q0 = 50.9 kW, exponents 1.5: at V0 the draw is P0/V0 = 2.545 A
        # on each axis (with the q-axis sign from the reactive term).
        load = LoadModel("exp", ExpParams(50900.0, 50900.0, 1.5, 1.5, 20e3))
        I = load_current(load, (20000.0, 0.0))
        np.testing.assert_allclose(I, [2.545, -2.545], rtol=1e-12)

    def test_power_law_exponent(self):
        # Halving the amplitude scales P by (1/2)^1.5.
        load = LoadModel("exp", ExpParams(50900.0, 0.0, 1.5, 1.5, 20e3))
        V_half = (10000.0, 0.0)
        I = load_current(load, V_half)
        P = float(np.array(V_half) @ I)
        assert P == pytest.approx(50900.0 * 0.5**1.5, rel=1e-12)

    def test_scaled_touches_only_powers(self):
        e = ExpParams(72800.0, 72800.0, 1.5, 1.5, 20e3)
        s = e.scaled(1.5)
        assert s.P0 == pytest.approx(109200.0)
        assert s.n_p == 1.5 and s.V0 == 20e3

    def test_kind_params_mismatch_rejected(self):
        with pytest.raises(ValueError, match="needs ExpParams"):
            LoadModel("exp", ZipParams(0, 0, 0, 0, 0, 0))


class TestDguPlant:
    def test_structure_is_valid_phs(self):
        phs = build_dgu_phs(make_plant())
        assert validate_phs(phs) == []
        assert (phs.n, phs.m_u, phs.m_d) == (4, 2, 2)

    def test_rotation_blocks(self):
        # omega0 L_t = 100*pi*1.8e-3, omega0 C_t = 100*pi*25e-6.
        phs = build_dgu_phs(make_plant())
        assert phs.J[0, 1] == pytest.approx(0.5654866776, rel=1e-9)
        assert phs.J[2, 3] == pytest.approx(0.007853981634, rel=1e-9)
        assert phs.R[0, 0] == 0.1 and phs.R[2, 2] == 0.0

    def test_derivative_matches_circuit_equations(self):
        """Expand (J-R)Qx row-by-row: the flux rows must read
        L dI/dt = -R_t I + omega0 L J2 I - V + u, the charge rows
        C dV/dt = I + omega0 C J2 V + d."""
        p = make_plant()
        phs = build_dgu_phs(p)
        rng = np.random.default_rng(11)
        for _ in range(25):
            I = rng.normal(scale=100.0, size=2)
            V = rng.normal(scale=1e4, size=2)
            u = rng.normal(scale=1e4, size=2)
            d = rng.normal(scale=10.0, size=2)
            x = np.concatenate([p.L_t * I, p.C_t * V])
            xdot = (phs.J - phs.R) @ (phs.Q @ x) + phs.G @ u + phs.K @ d
            want_flux = np.array([
                -p.R_t * I[0] + p.omega0 * p.L_t * I[1] - V[0] + u[0],
                -p.R_t * I[1] - p.omega0 * p.L_t * I[0] - V[1] + u[1]])
            want_charge = np.array([
                I[0] + p.omega0 * p.C_t * V[1] + d[0],
                I[1] - p.omega0 * p.C_t * V[0] + d[1]])
            np.testing.assert_allclose(xdot[:2], want_flux, rtol=1e-12)
            np.testing.assert_allclose(xdot[2:], want_charge, rtol=1e-12)

    def test_parameter_positivity(self):
        with pytest.raises(ValueError, match="L_t"):
            DguParams(R_t=0.1, L_t=0.0, C_t=25e-6, omega0=OMEGA0)


class TestLine:
    def test_series_values_scale_with_length(self):
        # 2.8 km of 0.343 Ohm/km, 0.875 mH/km, 151.7 nF/km.
        p = line_params(2.8)
        assert p.R_l == pytest.approx(0.9604, rel=1e-12)
        assert p.L_l == pytest.approx(2.45e-3, rel=1e-12)
        assert p.C_l == pytest.approx(4.2476e-7, rel=1e-12)

    def test_structure(self):
        phs = build_line_phs(line_params(1.3), OMEGA0)
        assert validate_phs(phs) == []
        assert (phs.n, phs.m_u, phs.m_d) == (2, 0, 4)
        np.testing.assert_array_equal(phs.K,
                                      [[1.0, 0.0, -1.0, 0.0],
                                       [0.0, 1.0, 0.0, -1.0]])

    def test_interaction_mirrors_branch_current(self):
        # z = K^T Q x = [I_line; -I_line]: what the tail injects, the head
        # receives.
        p = line_params(1.3)
        phs = build_line_phs(p, OMEGA0)
        I = np.array([42.0, -7.0])
        z = interaction_output(phs, p.L_l * I)
        np.testing.assert_allclose(z, [42.0, -7.0, -42.0, 7.0], rtol=1e-12)

    def test_voltage_difference_drives_flux(self):
        p = line_params(1.3)
        phs = build_line_phs(p, OMEGA0)
        d = np.array([1000.0, 0.0, 400.0, 0.0])   # V_tail, V_head stacked
        xdot = phs.K @ d
        np.testing.assert_allclose(xdot, [600.0, 0.0])


class TestLoadNode:
    def test_structure(self):
        phs = build_load_node_phs(5.4612e-7, OMEGA0)
        assert validate_phs(phs) == []
        assert (phs.n, phs.m_u, phs.m_d) == (2, 0, 2)

    def test_rejects_nonpositive_capacitance(self):
        with pytest.raises(ValueError):
            build_load_node_phs(0.0, OMEGA0)


class TestEffectiveCapacitance:
    def test_benchmark_node7(self):
        # Node 7 hangs between the 2.8 km and 4.4 km feeders:
        # (2.8 + 4.4) * 151.7e-9 / 2 = 5.4612e-7 F.
        caps = effective_capacitances(feeder1_graph())
        assert caps[7] == pytest.approx(5.4612e-7, rel=1e-12)

    def test_benchmark_dgu3_line_leg(self):
        # DGU node 3 sees lines of 0.6 km and 1.5 km: the line-leg sum is
        # 1.59285e-7 F (the plant adds its own 25 uF on top).
        caps = effective_capacitances(feeder1_graph())
        assert caps[3] == pytest.approx(1.59285e-7, rel=1e-12)

    def test_isolated_load_node_rejected(self):
        # A lone-standing load node with no line legs would have zero
        # capacitance — its charge state would be degenerate.
        from phgrid.network import MicrogridGraph
        load = LoadModel("zip", ZipParams(75e-6, 75e-6, 0.3, 0.3,
                                          6000.0, 6000.0))
        orphan = MicrogridGraph(dgus={}, load_nodes={7: load}, lines={})
        with pytest.raises(ValueError, match="no incident lines"):
            effective_capacitances(orphan)
