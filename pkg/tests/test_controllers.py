"""Voltage controller laws, gain construction, and the PI certificate.

The standalone steady-state command is the main frozen oracle here.  For a
DGU holding its own node at the reference with no network draw, the filter
current must exactly feed the capacitor rotation,

    I* = omega0 C_t (-Vq*, Vd*),

and the command must cancel the series impedance drop:

    u*_d = R_t I*_d - omega0 L_t I*_q + Vd*
    u*_q = R_t I*_q + omega0 L_t I*_d + Vq*

With the benchmark filter (0.1 Ohm, 1.8 mH, 25 uF, 50 Hz) and the node-1
reference (18 kV, 11 kV):

    I*  = (-86.393798, 141.371669) A
    u*d = -8.639380 - 79.943796 + 18000 = 17911.416825 V
    u*q = 14.137167 - 48.854542 + 11000 = 10965.282625 V
"""
import numpy as np
import pytest

from phgrid.controllers import (ControllerState, IdaPbcGains, PiGains,
                                SaturationLimits, VoltageReference,
                                certify_pi_gains, closed_loop_dgu_equilibrium,
                                ida_integrator_derivative, ida_pbc_output,
                                pi_closed_loop_matrix, pi_gains_from_scalars,
                                pi_integrator_derivative, pi_output,
                                pi_storage, saturate, PI_CERT_REL_TOL)

from conftest import ida_gains, make_plant

REF1 = VoltageReference(Vd_ref=18000.0, Vq_ref=11000.0)


class TestParameterValidation:
    def test_ida_gains_signs(self):
        with pytest.raises(ValueError, match="alpha"):
            IdaPbcGains(5.0, -5.0, 1.0, 1.0, 100.0, 100.0)
        with pytest.raises(ValueError, match="nu"):
            IdaPbcGains(-5.0, -5.0, 0.0, 1.0, 100.0, 100.0)
        with pytest.raises(ValueError, match="kI"):
            IdaPbcGains(-5.0, -5.0, 1.0, 1.0, 100.0, -1.0)

    def test_pi_gain_blocks_must_be_2x2(self):
        with pytest.raises(ValueError, match="K12"):
            PiGains(K11=np.eye(2), K12=np.eye(3), K13=np.eye(2))

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError, match="nonzero"):
            VoltageReference(0.0, 0.0)

    def test_saturation_limits_positive(self):
        with pytest.raises(ValueError):
            SaturationLimits(Vd_sat=-1.0, Vq_sat=30e3)


class TestSteadyState:
    def test_standalone_equilibrium_state(self):
        plant = make_plant()
        x = closed_loop_dgu_equilibrium(REF1, np.zeros(2), plant)
        I = x[:2] / plant.L_t
        V = x[2:] / plant.C_t
        np.testing.assert_allclose(I, [-86.393798, 141.371669], atol=5e-7)
        np.testing.assert_allclose(V, [18000.0, 11000.0], rtol=1e-12)

    def test_steady_draw_shifts_current_rows_only(self):
        plant = make_plant()
        draw = np.array([12.0, -3.0])
        x0 = closed_loop_dgu_equilibrium(REF1, np.zeros(2), plant)
        x1 = closed_loop_dgu_equilibrium(REF1, draw, plant)
        np.testing.assert_allclose((x1 - x0)[:2], plant.L_t * draw)
        np.testing.assert_array_equal((x1 - x0)[2:], [0.0, 0.0])

    def test_ida_command_at_equilibrium_is_feedforward(self):
        """At the standalone steady state with zeroed integrators every
        error term vanishes, leaving the impedance feedforward."""
        plant = make_plant()
        x = closed_loop_dgu_equilibrium(REF1, np.zeros(2), plant)
        u = ida_pbc_output(ida_gains(), plant, x, REF1, ControllerState())
        np.testing.assert_allclose(u, [17911.416825, 10965.282625],
                                   atol=5e-6)

    def test_ida_integrator_frozen_at_reference(self):
        plant = make_plant()
        x = closed_loop_dgu_equilibrium(REF1, np.zeros(2), plant)
        np.testing.assert_allclose(
            ida_integrator_derivative(x, REF1, plant), [0.0, 0.0],
            atol=1e-12)


class TestIdaPbcLaw:
    def test_integral_term_scaling(self):
        # u responds to the raw error integral through alpha * kI.
        plant = make_plant()
        gains = ida_gains()
        x = closed_loop_dgu_equilibrium(REF1, np.zeros(2), plant)
        cs = ControllerState(kappa_e=np.array([2.0, -1.0]))
        u0 = ida_pbc_output(gains, plant, x, REF1, ControllerState())
        u1 = ida_pbc_output(gains, plant, x, REF1, cs)
        np.testing.assert_allclose(
            u1 - u0,
            [gains.alpha11 * gains.kI1 * 2.0,
             gains.alpha22 * gains.kI2 * -1.0], rtol=1e-12)

    def test_voltage_error_terms(self):
        # Pure voltage offset dV: du = -nu dV - kI L_t dV on each axis.
        plant = make_plant()
        gains = ida_gains()
        x = closed_loop_dgu_equilibrium(REF1, np.zeros(2), plant)
        dx = np.array([0.0, 0.0, plant.C_t * 100.0, 0.0])
        u0 = ida_pbc_output(gains, plant, x, REF1, ControllerState())
        u1 = ida_pbc_output(gains, plant, x + dx, REF1, ControllerState())
        # measured-voltage feedforward contributes +100, the error terms
        # -nu11*100 and -kI1*L_t*100.
        want_d = 100.0 - gains.nu11 * 100.0 - gains.kI1 * plant.L_t * 100.0
        assert u1[0] - u0[0] == pytest.approx(want_d, rel=1e-12)
        assert u1[1] == pytest.approx(u0[1], rel=1e-12)


class TestPiLaw:
    def test_gain_blocks_from_benchmark_scalars(self):
        # K_P = K_I = 1000 with the 1.8 mH filter:
        #   K11 = (1 - 1000 * 1.8e-3) I = -0.8 I
        #   K13 = 1000 I
        #   K12 = [[0.1, -2 w0 L_t], [2 w0 L_t, 0.1]] - 1001 I
        plant = make_plant()
        g = pi_gains_from_scalars(1000.0, 1000.0, plant)
        np.testing.assert_allclose(g.K11, -0.8 * np.eye(2), rtol=1e-12)
        np.testing.assert_allclose(g.K13, 1000.0 * np.eye(2), rtol=1e-12)
        np.testing.assert_allclose(
            g.K12,
            [[-1000.9, -1.130973355], [1.130973355, -1000.9]], atol=5e-9)

    def test_sign_flipped_variant(self):
        plant = make_plant()
        g = pi_gains_from_scalars(1000.0, 1000.0, plant,
                                  proportional_sign=+1.0)
        np.testing.assert_allclose(g.K11, 2.8 * np.eye(2), rtol=1e-12)

    def test_output_is_linear_combination(self):
        plant = make_plant()
        g = pi_gains_from_scalars(1000.0, 1000.0, plant)
        rng = np.random.default_rng(303)
        for _ in range(30):
            x = rng.normal(scale=1.0, size=4) * np.array(
                [plant.L_t, plant.L_t, plant.C_t, plant.C_t]) * 1e4
            v = rng.normal(scale=100.0, size=2)
            u = pi_output(g, plant, x, ControllerState(v=v))
            I = x[:2] / plant.L_t
            V = x[2:] / plant.C_t
            np.testing.assert_allclose(u, g.K11 @ V + g.K12 @ I + g.K13 @ v,
                                       rtol=1e-12)

    def test_integrator_derivative_sign(self):
        # PI integrates the *negated* error: v' = V* - V.
        z = np.array([17990.0, 11020.0])
        np.testing.assert_allclose(pi_integrator_derivative(REF1, z),
                                   [10.0, -20.0], rtol=1e-12)


class TestPiCertificate:
    def test_benchmark_gains_certify(self):
        plant = make_plant()
        cert = certify_pi_gains(pi_gains_from_scalars(1000.0, 1000.0, plant),
                                plant)
        assert cert.certified, (
            f"benchmark PI gains failed the passivity certificate "
            f"(defect {cert.rel_defect:g}, family {cert.family})")
        assert cert.stable, "certified loop must also be Hurwitz"
        assert cert.rel_defect <= PI_CERT_REL_TOL

    def test_sign_flipped_gains_rejected(self):
        plant = make_plant()
        cert = certify_pi_gains(
            pi_gains_from_scalars(1000.0, 1000.0, plant,
                                  proportional_sign=+1.0), plant)
        assert not cert.certified, (
            "destabilizing proportional sign must not certify")
        assert not cert.stable

    def test_certified_storage_is_a_dissipation_witness(self):
        """1/2 e' P e must be non-increasing along the autonomous closed
        loop: e^T (F^T P + P F) e <= defect for random shifted states."""
        plant = make_plant()
        g = pi_gains_from_scalars(1000.0, 1000.0, plant)
        cert = certify_pi_gains(g, plant)
        F = pi_closed_loop_matrix(g, plant)
        S = F.T @ cert.P + cert.P @ F
        bound = PI_CERT_REL_TOL * np.linalg.norm(S, 2)
        rng = np.random.default_rng(1963)
        for _ in range(500):
            e = rng.normal(size=6)
            e /= np.linalg.norm(e)
            assert e @ S @ e <= bound, (
                f"storage derivative positive along e={e}")

    def test_storage_charge_block_pinned(self):
        plant = make_plant()
        P = pi_storage(np.eye(4), plant)
        np.testing.assert_allclose(P[0:2, 0:2], np.eye(2) / plant.C_t)
        assert np.all(P[0:2, 2:] == 0.0)


class TestSaturation:
    def test_clamp_and_flag(self):
        lim = SaturationLimits(Vd_sat=100.0, Vq_sat=50.0)
        u, hit = saturate(np.array([150.0, -20.0]), lim)
        np.testing.assert_array_equal(u, [100.0, -20.0])
        assert hit

    def test_interior_command_untouched(self):
        lim = SaturationLimits(Vd_sat=100.0, Vq_sat=50.0)
        u, hit = saturate(np.array([99.0, -50.0]), lim)
        np.testing.assert_array_equal(u, [99.0, -50.0])
        assert not hit

    def test_negative_clamp(self):
        lim = SaturationLimits(Vd_sat=100.0, Vq_sat=50.0)
        u, hit = saturate(np.array([-150.0, 60.0]), lim)
        np.testing.assert_array_equal(u, [-100.0, 50.0])
        assert hit


def test_controller_state_copy_is_deep():
    cs = ControllerState(kappa_e=np.array([1.0, 2.0]), v=np.array([3.0, 4.0]))
    dup = cs.copy()
    dup.kappa_e[0] = 99.0
    assert cs.kappa_e[0] == 1.0, "copy must not alias the integrator arrays"
