"""Decentralized DGU voltage controllers.

Two controller families act on the VSI voltage command:

* an interconnection-and-damping-assignment (IDA-PBC) law with integral
  action, which shapes the closed loop into a desired port-Hamiltonian
  system and rejects piecewise-constant network currents, and
* a multivariable PI state feedback on the permuted state
  [C_t V; L_t I; v], certified passive at configuration time by an
  eigenvalue check on the closed-loop matrix.

Controllers always use the *nominal* filter parameters; the simulated plant
may carry a larger effective capacitance from lumped line legs, which is
precisely the parameter-robustness scenario the integral actions absorb.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .components import DguParams

# Verdict threshold for the passivity certificate: largest eigenvalue of the
# symmetric closed-loop form, relative to its spectral norm.  The structured
# storage below reaches ~1e-13 for stabilizing gains, while sign-flipped
# (destabilizing) gains land around 1e-3, so the threshold separates the two
# by many orders of magnitude.
PI_CERT_REL_TOL = 1e-5

@dataclass(frozen=True)
class IdaPbcGains:
    """Damping (alpha < 0), interconnection (nu > 0), integral (kI > 0)."""

    alpha11: float
    alpha22: float
    nu11: float
    nu22: float
    kI1: float
    kI2: float

    def __post_init__(self):
        if not (self.alpha11 < 0 and self.alpha22 < 0):
            raise ValueError("damping gains alpha must be negative")
        if not (self.nu11 > 0 and self.nu22 > 0):
            raise ValueError("interconnection gains nu must be positive")
        if not (self.kI1 > 0 and self.kI2 > 0):
            raise ValueError("integral gains kI must be positive")


@dataclass(frozen=True, eq=False)
class PiGains:
    """Gain blocks of the multivariable PI law u = K11 V + K12 I + K13 v.

    The blocks are the physical gains, i.e. already divided by the storage
    scalings C_t and L_t.  Passivity of the closed loop is *not* checked at
    construction — run :func:`certify_pi_gains` at configuration time.
    """

    K11: np.ndarray
    K12: np.ndarray
    K13: np.ndarray

    def __post_init__(self):
        for name in ("K11", "K12", "K13"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (2, 2):
                raise ValueError(f"{name} must be 2x2, got {m.shape}")
            object.__setattr__(self, name, m)


@dataclass(frozen=True)
class VoltageReference:
    """dq voltage setpoint (V); the zero vector is not a valid reference."""

    Vd_ref: float
    Vq_ref: float

    def __post_init__(self):
        if self.Vd_ref == 0.0 and self.Vq_ref == 0.0:
            raise ValueError("voltage reference must be nonzero")

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.Vd_ref, self.Vq_ref])


@dataclass
class ControllerState:
    """Integrator memory, one 2-vector per controller kind.

    ``kappa_e`` holds the raw voltage-error integral of the IDA-PBC law,
    int (V - V*) dt; the gain scaling is applied inside the output law so
    gains may change online without rescaling the state.  ``v`` holds the
    PI integral of (V* - V).  Both start at zero on controller activation.
    """

    kappa_e: np.ndarray = field(default_factory=lambda: np.zeros(2))
    v: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def copy(self) -> "ControllerState":
        return ControllerState(self.kappa_e.copy(), self.v.copy())


@dataclass(frozen=True)
class SaturationLimits:
    """Symmetric per-axis bounds on the VSI voltage command (V)."""

    Vd_sat: float
    Vq_sat: float

    def __post_init__(self):
        if self.Vd_sat <= 0 or self.Vq_sat <= 0:
            raise ValueError("saturation limits must be positive")


def _unpack_dgu_state(x, plant: DguParams):
    """Split a flux/charge state into currents (A) and voltages (V)."""
    x = np.asarray(x, dtype=float)
    I = x[:2] / plant.L_t
    V = x[2:] / plant.C_t
    return I, V


def ida_pbc_output(gains: IdaPbcGains, plant: DguParams, x,
                   ref: VoltageReference,
                   cs: ControllerState) -> np.ndarray:
    """IDA-PBC voltage command with integral action (V, V).

    Six terms per axis: damping-shaped current error, voltage-error
    proportional term, resistive/cross-coupling/measured-voltage
    feedforward, and the two integral-action terms read from ``cs``.
    """
    I, V = _unpack_dgu_state(x, plant)
    w0, Lt, Ct, Rt = plant.omega0, plant.L_t, plant.C_t, plant.R_t
    s = cs.kappa_e  # raw integral of (V - V*)
    ud = (gains.alpha11 / gains.nu11 * (I[0] + w0 * Ct * ref.Vq_ref)
          - gains.nu11 * (V[0] - ref.Vd_ref)
          + Rt * I[0] - w0 * Lt * I[1] + V[0]
          + gains.alpha11 * gains.kI1 * s[0]
          + gains.kI1 * Lt * (ref.Vd_ref - V[0]))
    uq = (gains.alpha22 / gains.nu22 * (I[1] - w0 * Ct * ref.Vd_ref)
          - gains.nu22 * (V[1] - ref.Vq_ref)
          + Rt * I[1] + w0 * Lt * I[0] + V[1]
          + gains.alpha22 * gains.kI2 * s[1]
          + gains.kI2 * Lt * (ref.Vq_ref - V[1]))
    return np.array([ud, uq])


def ida_integrator_derivative(x, ref: VoltageReference,
                              plant: DguParams) -> np.ndarray:
    """d/dt of the stored integrand: [V_d - V_d*, V_q - V_q*]."""
    _, V = _unpack_dgu_state(x, plant)
    return V - ref.vec


def pi_output(gains: PiGains, plant: DguParams, x,
              cs: ControllerState) -> np.ndarray:
    """PI voltage command K11 V + K12 I + K13 v (V, V)."""
    I, V = _unpack_dgu_state(x, plant)
    return gains.K11 @ V + gains.K12 @ I + gains.K13 @ cs.v


def pi_integrator_derivative(ref: VoltageReference, z) -> np.ndarray:
    """d/dt v = [V_d* - V_d, V_q* - V_q] for node voltage z."""
    return ref.vec - np.asarray(z, dtype=float)


def saturate(u, lim: SaturationLimits) -> tuple[np.ndarray, bool]:
    """Clamp each command component to its interval; flag any clamping."""
    u = np.asarray(u, dtype=float)
    bounds = np.array([lim.Vd_sat, lim.Vq_sat])
    clamped = np.clip(u, -bounds, bounds)
    return clamped, bool(np.any(clamped != u))


def closed_loop_dgu_equilibrium(ref: VoltageReference, I_Z_bar,
                                plant: DguParams) -> np.ndarray:
    """Steady flux/charge state under a constant network current draw.

    The voltage rows always sit at C_t V*; the current rows supply the
    capacitor rotation plus the steady draw:
    [L_t(-w0 C_t Vq* + Izd), L_t(w0 C_t Vd* + Izq), C_t Vd*, C_t Vq*].
    """
    I_Z_bar = np.asarray(I_Z_bar, dtype=float)
    w0ct = plant.omega0 * plant.C_t
    return np.array([
        plant.L_t * (-w0ct * ref.Vq_ref + I_Z_bar[0]),
        plant.L_t * (w0ct * ref.Vd_ref + I_Z_bar[1]),
        plant.C_t * ref.Vd_ref,
        plant.C_t * ref.Vq_ref,
    ])


# ---------------------------------------------------------------------------
# PI closed loop and passivity certificate
# ---------------------------------------------------------------------------

def pi_closed_loop_matrix(gains: PiGains, plant: DguParams) -> np.ndarray:
    """Closed-loop matrix F on the shifted state [C V; L_t I; v].

    Uses the capacitance carried by ``plant`` — pass the nominal parameters
    for gain certification, or the effective (line-lumped) ones to study the
    true network-embedded loop.
    """
    w0, Lt, Ct, Rt = plant.omega0, plant.L_t, plant.C_t, plant.R_t
    rot = np.array([[0.0, w0], [-w0, 0.0]])
    A22 = np.array([[-Rt / Lt, w0], [-w0, -Rt / Lt]])
    F = np.zeros((6, 6))
    F[0:2, 0:2] = rot
    F[0:2, 2:4] = np.eye(2) / Lt
    F[2:4, 0:2] = -(np.eye(2) - gains.K11) / Ct
    F[2:4, 2:4] = A22 + gains.K12 / Lt
    F[2:4, 4:6] = gains.K13
    F[4:6, 0:2] = -np.eye(2) / Ct
    return F


def pi_storage(P22: np.ndarray, plant: DguParams) -> np.ndarray:
    """Assemble the 6x6 storage P = blkdiag(I/C, P22).

    The upper-left block is pinned to 1/C times identity so that the storage
    derivative matches the shifted supply rate exactly (the interaction
    enters the charge rows and the interaction output is the voltage error).
    """
    P = np.zeros((6, 6))
    P[0:2, 0:2] = np.eye(2) / plant.C_t
    P[2:6, 2:6] = P22
    return P


def _structured_p22(gains: PiGains, plant: DguParams) -> np.ndarray | None:
    """Closed-form storage block for scalar gain blocks.

    Derived by forcing the off-diagonal blocks of F^T P + P F to vanish,
    which leaves only an irreducible grid-frequency skew residual.  Only
    defined when K11 and K13 are scalar multiples of the identity.
    """
    k11 = gains.K11[0, 0]
    if not (np.allclose(gains.K11, k11 * np.eye(2))
            and np.allclose(gains.K13, gains.K13[0, 0] * np.eye(2))):
        return None
    kappa = k11 - 1.0
    if kappa == 0.0:
        return None
    p_bb = 1.0 / kappa**2 + 1.0 / (abs(kappa) * plant.L_t)
    P22 = np.zeros((4, 4))
    P22[0:2, 0:2] = p_bb * np.eye(2)
    P22[0:2, 2:4] = np.eye(2) / kappa
    P22[2:4, 0:2] = np.eye(2) / kappa
    P22[2:4, 2:4] = np.eye(2)
    return P22


@dataclass(frozen=True, eq=False)
class PiCertificate:
    """Outcome of the configuration-time PI passivity check.

    ``certified`` is True when some positive-definite storage in the
    searched family makes F^T P + P F negative semidefinite within
    :data:`PI_CERT_REL_TOL`.  ``P`` is the best storage found (used by the
    Lyapunov monitor), ``rel_defect`` its largest eigenvalue relative to the
    spectral norm, and ``family`` which candidate family produced it.
    """

    certified: bool
    P: np.ndarray
    rel_defect: float
    family: str
    stable: bool
    eigenvalues: np.ndarray


def certify_pi_gains(gains: PiGains, plant: DguParams,
                     grid_points: int = 25) -> PiCertificate:
    """Search storages making the PI closed loop provably dissipative.

    Scans the diagonal family P22 = Diag[p_I, p_I, p_v, p_v] over a log grid
    p in [1e-6, 1e6], plus a structured closed-form candidate, and keeps the
    storage with the smallest relative positive defect of F^T P + P F.
    """
    F = pi_closed_loop_matrix(gains, plant)
    eig_f = np.linalg.eigvals(F)
    stable = bool(np.all(eig_f.real < 0))

    best_P = None
    best_rel = np.inf
    best_family = "none"

    def consider(P22: np.ndarray, family: str) -> None:
        nonlocal best_P, best_rel, best_family
        if np.linalg.eigvalsh(P22)[0] <= 0:
            return
        P = pi_storage(P22, plant)
        S = F.T @ P + P @ F
        scale = np.linalg.norm(S, 2)
        rel = np.linalg.eigvalsh(S)[-1] / scale if scale > 0 else 0.0
        if rel < best_rel:
            best_P, best_rel, best_family = P, rel, family

    grid = np.logspace(-6.0, 6.0, grid_points)
    for p_i in grid:
        for p_v in grid:
            consider(np.diag([p_i, p_i, p_v, p_v]), "diagonal-scan")

    structured = _structured_p22(gains, plant)
    if structured is not None:
        consider(structured, "structured")

    certified = bool(best_rel <= PI_CERT_REL_TOL)
    return PiCertificate(
        certified=certified,
        P=best_P if best_P is not None else pi_storage(np.eye(4), plant),
        rel_defect=float(best_rel),
        family=best_family,
        stable=stable,
        eigenvalues=eig_f,
    )


def pi_gains_from_scalars(K_P: float, K_I: float, plant: DguParams,
                          proportional_sign: float = -1.0) -> PiGains:
    """Build the gain blocks from scalar proportional/integral constants.

    ``proportional_sign=-1`` yields K11 = (1 - K_P L_t) I, the stabilizing
    (negative) voltage feedback; ``+1`` yields the sign-flipped variant
    (1 + K_P L_t) I, which certification rejects as destabilizing.
    """
    w0, Lt, Rt = plant.omega0, plant.L_t, plant.R_t
    K11 = (1.0 + proportional_sign * K_P * Lt) * np.eye(2)
    K13 = K_I * np.eye(2)
    K12 = (np.array([[Rt, -2.0 * w0 * Lt], [2.0 * w0 * Lt, Rt]])
           - K13 * (1.0 / K_P + 1.0))
    return PiGains(K11=K11, K12=K12, K13=K13)
