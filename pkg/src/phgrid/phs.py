"""Input-state-output port-Hamiltonian (ISO-PHS) building blocks.

Every electrical subsystem in this package — inverter-fed generation unit,
static load node, transmission line — is stored in one canonical linear form

    dx/dt = (J - R) Q x + G u + K d
    y     = G^T Q x        (control port)
    z     = K^T Q x        (interconnection port)

with quadratic energy H(x) = 1/2 (x - x_ref)^T Q (x - x_ref).  States are
fluxes (Wb) and charges (C); the energy matrix Q carries inverse inductances
and capacitances so that the co-state Q x recovers currents (A) and
voltages (V).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Relative eigenvalue tolerances guarding the semidefinite checks against
# round-off on assembled matrices.
PSD_TOL = 1e-12
PD_TOL = 1e-12

# Entries allowed in the input/interaction selector matrices G and K.
_SELECTOR_ENTRIES = (-1.0, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class LinearIsoPhs:
    """Linear ISO-PHS (J, R, G, K, Q) with state dimension ``n``.

    J : (n, n) interconnection matrix, exactly skew-symmetric
    R : (n, n) dissipation matrix, symmetric positive semidefinite
    G : (n, m_u) control-input selector
    K : (n, m_d) interaction-input selector
    Q : (n, n) energy matrix (1/H and 1/F on the diagonal), positive definite
    """

    J: np.ndarray
    R: np.ndarray
    G: np.ndarray
    K: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        for name in ("J", "R", "G", "K", "Q"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float))

    @property
    def n(self) -> int:
        return self.J.shape[0]

    @property
    def m_u(self) -> int:
        return self.G.shape[1]

    @property
    def m_d(self) -> int:
        return self.K.shape[1]


@dataclass(frozen=True, eq=False)
class QuadraticHamiltonian:
    """H(x) = 1/2 (x - x_ref)^T Q (x - x_ref); x_ref = None means no shift."""

    Q: np.ndarray
    x_ref: np.ndarray | None = field(default=None)

    def value(self, x: np.ndarray) -> float:
        e = np.asarray(x, dtype=float)
        if self.x_ref is not None:
            e = e - self.x_ref
        return 0.5 * float(e @ self.Q @ e)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return costate(self.Q, x, self.x_ref)


def _check_dimensions(phs: LinearIsoPhs) -> None:
    n = phs.J.shape[0]
    if phs.J.shape != (n, n):
        raise ValueError(f"J must be square, got {phs.J.shape}")
    for name, want in (("R", (n, n)), ("Q", (n, n))):
        got = getattr(phs, name).shape
        if got != want:
            raise ValueError(f"{name} must be {want}, got {got}")
    for name in ("G", "K"):
        m = getattr(phs, name)
        if m.ndim != 2 or m.shape[0] != n:
            raise ValueError(f"{name} must have {n} rows, got shape {m.shape}")


def validate_phs(phs: LinearIsoPhs) -> list[str]:
    """Check the structural ISO-PHS invariants and report violations.

    Returns a list of human-readable violation messages (empty when the
    model is valid).  A dimension mismatch is a malformed input, not an
    invariant violation, and raises ``ValueError`` instead.
    """
    _check_dimensions(phs)
    report: list[str] = []

    skew = phs.J + phs.J.T
    if np.any(skew != 0.0):
        i, j = np.unravel_index(np.argmax(np.abs(skew)), skew.shape)
        report.append(
            f"J is not skew-symmetric: (J + J^T)[{i},{j}] = {skew[i, j]:g}")

    if np.any(phs.R != phs.R.T):
        report.append("R is not symmetric")
    else:
        eig_r = np.linalg.eigvalsh(phs.R)
        lam_max = max(eig_r[-1], 0.0)
        if eig_r[0] < -PSD_TOL * lam_max:
            report.append(
                f"R is not positive semidefinite: min eigenvalue {eig_r[0]:g}")

    if np.any(phs.Q != phs.Q.T):
        report.append("Q is not symmetric")
    else:
        eig_q = np.linalg.eigvalsh(phs.Q)
        if eig_q[0] <= PD_TOL * abs(eig_q[-1]):
            report.append(
                f"Q is not positive definite: min eigenvalue {eig_q[0]:g}")

    for name in ("G", "K"):
        m = getattr(phs, name)
        bad = ~np.isin(m, _SELECTOR_ENTRIES)
        if np.any(bad):
            i, j = np.argwhere(bad)[0]
            report.append(
                f"{name} has a non-selector entry: {name}[{i},{j}] = {m[i, j]:g}"
                " (allowed: -1, 0, 1)")

    return report


def costate(Q: np.ndarray, x: np.ndarray,
            x_ref: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the (shifted) Hamiltonian: Q (x - x_ref).

    For a generation unit ordered [L_t I_d, L_t I_q, C V_d, C V_q] the
    unshifted co-state is exactly [I_d, I_q, V_d, V_q].
    """
    x = np.asarray(x, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"Q shape {Q.shape} does not match state {x.shape}")
    if x_ref is not None:
        x = x - np.asarray(x_ref, dtype=float)
    return Q @ x


def phs_derivative(phs: LinearIsoPhs, x: np.ndarray, u: np.ndarray,
                   d: np.ndarray) -> np.ndarray:
    """State derivative (J - R) Q x + G u + K d."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    if x.shape != (phs.n,):
        raise ValueError(f"state must be {(phs.n,)}, got {x.shape}")
    if u.shape != (phs.m_u,):
        raise ValueError(f"control input must be {(phs.m_u,)}, got {u.shape}")
    if d.shape != (phs.m_d,):
        raise ValueError(
            f"interaction input must be {(phs.m_d,)}, got {d.shape}")
    return (phs.J - phs.R) @ (phs.Q @ x) + phs.G @ u + phs.K @ d


def control_output(phs: LinearIsoPhs, x: np.ndarray) -> np.ndarray:
    """Control-port output y = G^T Q x."""
    return phs.G.T @ (phs.Q @ np.asarray(x, dtype=float))


def interaction_output(phs: LinearIsoPhs, x: np.ndarray,
                       x_ref: np.ndarray | None = None) -> np.ndarray:
    """Interaction-port output z = K^T Q (x - x_ref)."""
    return phs.K.T @ costate(phs.Q, x, x_ref)


def supply_rate(z: np.ndarray, d: np.ndarray, z_ref: np.ndarray,
                d_ref: np.ndarray) -> float:
    """Shifted supply rate (d - d_ref)^T (z - z_ref) in watts."""
    z = np.asarray(z, dtype=float)
    d = np.asarray(d, dtype=float)
    z_ref = np.asarray(z_ref, dtype=float)
    d_ref = np.asarray(d_ref, dtype=float)
    if not (z.shape == d.shape == z_ref.shape == d_ref.shape):
        raise ValueError("supply_rate arguments must share one shape")
    return float((d - d_ref) @ (z - z_ref))
