"""Equilibrium-independent passivity certificates, network equilibria, and
the composite Lyapunov monitor.

Load certification uses closed-form amplitude conditions; network
equilibria come from a damped Newton iteration on the assembled
closed-loop field; the monitor sums shifted per-subsystem storages and
flags any inter-sample increase beyond the discretization tolerance.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import phs as phsmod
from .components import (ExpParams, LoadModel, SingularVoltageError,
                         ZipParams, load_current)
from .controllers import certify_pi_gains
from .network import MicrogridGraph
from .sim import Assembly, NetworkModel, Trajectory, build_assembly

STRICTLY_EIP = "strictly_eip"
EIP = "eip"
NOT_CERTIFIED = "not_certified"

#: amplitudes checked across an interval, endpoints included
INTERVAL_GRID = 101


class CertificationError(RuntimeError):
    """A required passivity/storage certificate could not be produced."""


class NoEquilibriumError(RuntimeError):
    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class EipVerdict:
    classification: str          # strictly_eip | eip | not_certified
    witness: dict

    @property
    def strict(self) -> bool:
        return self.classification == STRICTLY_EIP

    @property
    def passive(self) -> bool:
        return self.classification in (STRICTLY_EIP, EIP)


def _amplitude_grid(v_hat, n_grid: int) -> np.ndarray:
    if np.isscalar(v_hat):
        if v_hat <= 0:
            raise ValueError("amplitude must be positive")
        return np.array([float(v_hat)])
    lo, hi = float(v_hat[0]), float(v_hat[1])
    if lo <= 0 or hi <= 0:
        raise ValueError("interval endpoints must be positive")
    if hi < lo:
        lo, hi = hi, lo
    return np.geomspace(lo, hi, n_grid)


def check_zip_eip(p: ZipParams, v_hat, n_grid: int = INTERVAL_GRID
                  ) -> EipVerdict:
    """Amplitude conditions for a ZIP draw to be a strictly monotone sink.

    Condition (a):  Y_p + I_p / (2 V̂)  >  0
    Condition (b):  Y_p² V̂⁴ + Y_p I_p V̂³
                      >  ¼ I_q V̂² + (I_p P_p + I_q P_q) V̂ + (P_p² + P_q²)

    The quarter term on the right is dimensionally odd (a squared
    coefficient would match the rest); it is used exactly as written and
    the witness also reports the squared-coefficient alternative so both
    readings can be compared.  Over an interval the conditions are checked
    on ``n_grid`` log-spaced amplitudes including both endpoints.
    """
    grid = _amplitude_grid(v_hat, n_grid)
    a_lhs = p.Y_p + p.I_p / (2.0 * grid)
    b_lhs = p.Y_p**2 * grid**4 + p.Y_p * p.I_p * grid**3
    term_iq = 0.25 * p.I_q * grid**2
    b_rhs = (term_iq + (p.I_p * p.P_p + p.I_q * p.P_q) * grid
             + (p.P_p**2 + p.P_q**2))
    ka = int(np.argmin(a_lhs))
    kb = int(np.argmin(b_lhs - b_rhs))
    witness = {
        "amplitudes_checked": len(grid),
        "worst_a_amplitude": float(grid[ka]),
        "cond_a_lhs": float(a_lhs[ka]),
        "worst_b_amplitude": float(grid[kb]),
        "cond_b_lhs": float(b_lhs[kb]),
        "cond_b_rhs": float(b_rhs[kb]),
        "margin_a": float(a_lhs[ka]),
        "margin_b": float(b_lhs[kb] - b_rhs[kb]),
        "rhs_term_iq_as_written": float(term_iq[kb]),
        "rhs_term_iq_squared_reading": float(0.25 * p.I_q**2 * grid[kb]**2),
    }
    good = bool(np.all(a_lhs > 0.0) and np.all(b_lhs > b_rhs))
    return EipVerdict(STRICTLY_EIP if good else NOT_CERTIFIED, witness)


def check_exp_eip(p: ExpParams, v_hat, n_grid: int = INTERVAL_GRID
                  ) -> EipVerdict:
    """Amplitude conditions for an exponential load draw.

    Condition (a):  n_p P0 > 0
    Condition (b):  4 (n_p − 1) P0² (V̂/V0)^{2 n_p}
                      >  (n_q − 2)² Q0² (V̂/V0)^{2 n_q}
    """
    grid = _amplitude_grid(v_hat, n_grid)
    ratio = grid / p.V0
    a_lhs = p.n_p * p.P0
    b_lhs = 4.0 * (p.n_p - 1.0) * p.P0**2 * ratio**(2.0 * p.n_p)
    b_rhs = (p.n_q - 2.0)**2 * p.Q0**2 * ratio**(2.0 * p.n_q)
    kb = int(np.argmin(b_lhs - b_rhs))
    witness = {
        "amplitudes_checked": len(grid),
        "cond_a_lhs": float(a_lhs),
        "worst_b_amplitude": float(grid[kb]),
        "cond_b_lhs": float(b_lhs[kb]),
        "cond_b_rhs": float(b_rhs[kb]),
        "margin_a": float(a_lhs),
        "margin_b": float(b_lhs[kb] - b_rhs[kb]),
    }
    good = bool(a_lhs > 0.0 and np.all(b_lhs > b_rhs))
    return EipVerdict(STRICTLY_EIP if good else NOT_CERTIFIED, witness)


def certify_load(load: LoadModel, v_hat, n_grid: int = INTERVAL_GRID
                 ) -> EipVerdict:
    if load.kind == "zip":
        return check_zip_eip(load.params, v_hat, n_grid)
    return check_exp_eip(load.params, v_hat, n_grid)


def monotonicity_probe(load: LoadModel, V1, V2) -> float:
    """(V1 − V2)ᵀ (I(V1) − I(V2)) in watts; positive for a monotone sink.

    A randomized falsifier for the closed-form verdicts: any certified
    load producing a nonpositive probe in its certified amplitude range
    exposes a bug in the conditions or in the draw model.
    """
    V1 = np.asarray(V1, dtype=float)
    V2 = np.asarray(V2, dtype=float)
    dI = load_current(load, V1) - load_current(load, V2)
    return float((V1 - V2) @ dI)


def lti_phs_eip_class(phs: "phsmod.LinearIsoPhs") -> EipVerdict:
    """Classify a validated linear port-Hamiltonian block.

    Positive-definite energy with positive-semidefinite dissipation gives
    passivity against any equilibrium; strictly positive dissipation
    upgrades the verdict.
    """
    report = phsmod.validate_phs(phs)
    if report:
        raise ValueError("invalid PHS: " + "; ".join(report))
    eig_r = np.linalg.eigvalsh(0.5 * (phs.R + phs.R.T))
    eig_q = np.linalg.eigvalsh(0.5 * (phs.Q + phs.Q.T))
    witness = {"min_eig_R": float(eig_r[0]), "max_eig_R": float(eig_r[-1]),
               "min_eig_Q": float(eig_q[0])}
    strict = eig_r[0] > 1e-12 * max(1.0, float(eig_r[-1]))
    return EipVerdict(STRICTLY_EIP if strict else EIP, witness)


# ---------------------------------------------------------------------------
# Network equilibrium
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class NetworkEquilibrium:
    x: np.ndarray               # full stacked state, frozen coords included
    d: np.ndarray               # steady coupling inputs (port stacking)
    z: np.ndarray               # steady interaction outputs
    residual: float             # ∞-norm of the field at x
    scale: float                # residual normalization (ω0·max|x|)
    active_dgus: frozenset
    assembly: Assembly
    commands_interior: bool = True   # steady commands inside their clamps

    @property
    def model(self) -> NetworkModel:
        return self.assembly.model


def _free_coordinate_mask(asm: Assembly) -> np.ndarray:
    """True for coordinates solved by Newton; plugged-out converter flux
    and every idle integrator slot stay frozen at zero."""
    lay = asm.model.layout
    mask = np.ones(lay.n, dtype=bool)
    for k, i in enumerate(lay.dgu_ids):
        ps, cs = lay.dgu_plant[i], lay.dgu_ctrl[i]
        if not asm.active_mask[k]:
            mask[ps.start:ps.start + 2] = False
            mask[cs] = False
        elif asm.model.graph.dgus[i].controller.kind == "none":
            mask[cs] = False
    return mask


def default_equilibrium_guess(asm: Assembly) -> np.ndarray:
    """Nodes at their reference (controlled) or nominal voltage, branches
    de-energized, integrators at zero."""
    model = asm.model
    x = model.default_initial_state()
    for i in model.layout.dgu_ids:
        spec = model.graph.dgus[i]
        if spec.controller.kind != "none":
            ref = asm.refs[i]
            sl = model.layout.dgu_plant[i]
            x[sl.start + 2:sl.start + 4] = model.plant_eff[i].C_t * ref.vec
    return x


def solve_equilibrium(source, active_dgus: frozenset,
                      warm_start: np.ndarray | None = None, *,
                      v0_nominal: float | None = None,
                      load_overrides: dict | None = None,
                      ref_overrides: dict | None = None,
                      max_iter: int = 50,
                      tol_scale: float | None = None
                      ) -> NetworkEquilibrium:
    """Newton solve of the stationary closed-loop network.

    ``source`` is a MicrogridGraph (requires ``v0_nominal``) or a built
    NetworkModel.  The Jacobian is central finite differences with a
    1e-6 relative step; steps are damped by Armijo backtracking on the
    residual norm.  Convergence requires the residual ∞-norm to fall
    below 1e-8·scale where scale = max(1, ω0·max|x|) — the natural
    magnitude of the field at unit-scale states.  Domain exits (a load
    voltage collapsing below its floor) are treated as infinite residual
    during backtracking and reported if unrecoverable.
    """
    if isinstance(source, NetworkModel):
        model = source
    else:
        if v0_nominal is None:
            raise ValueError("v0_nominal is required with a bare graph")
        model = NetworkModel(source, v0_nominal)
    if not active_dgus:
        raise ValueError("active set must be nonempty")
    asm = build_assembly(model, frozenset(active_dgus),
                         load_overrides, ref_overrides)
    # Root-find on the unclamped loop: a steady state that holds the
    # references requires interior commands anyway, and the clamp's flat
    # regions would make integrator columns of the Jacobian vanish.
    sat_bound = asm.sat_bound
    asm = dataclasses.replace(
        asm, sat_bound=np.full_like(asm.sat_bound, np.inf))
    mask = _free_coordinate_mask(asm)
    x = (warm_start.copy() if warm_start is not None
         else default_equilibrium_guess(asm))
    x[~mask] = 0.0

    typ = np.maximum(np.abs(model.default_initial_state()), 1e-3)

    def residual(v: np.ndarray) -> np.ndarray:
        xf = x.copy()
        xf[mask] = v
        return asm.f(xf)[mask]

    v = x[mask].copy()
    try:
        r = residual(v)
    except SingularVoltageError as exc:
        raise NoEquilibriumError(f"domain exit at initial guess: {exc}")

    def scale_for(v: np.ndarray) -> float:
        return max(1.0, model.omega0 * float(np.max(np.abs(v))))

    tol_factor = 1e-8 if tol_scale is None else tol_scale
    nfree = int(mask.sum())
    typ_free = typ[mask]
    for it in range(max_iter):
        scale = scale_for(v)
        if float(np.max(np.abs(r))) < tol_factor * scale:
            break
        J = np.empty((nfree, nfree))
        for j in range(nfree):
            step = 1e-6 * max(abs(v[j]), typ_free[j])
            vp, vm = v.copy(), v.copy()
            vp[j] += step
            vm[j] -= step
            try:
                J[:, j] = (residual(vp) - residual(vm)) / (2.0 * step)
            except SingularVoltageError as exc:
                raise NoEquilibriumError(
                    f"domain exit while differencing: {exc}")
        try:
            dv = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise NoEquilibriumError(
                f"singular Jacobian at iteration {it}: {exc}",
                residual=float(np.max(np.abs(r))))
        phi0 = float(r @ r)
        t = 1.0
        while True:
            try:
                r_new = residual(v + t * dv)
                phi1 = float(r_new @ r_new)
            except SingularVoltageError:
                phi1 = math.inf
            if phi1 <= (1.0 - 1e-4 * t) * phi0 or phi1 < 1e-300:
                break
            t *= 0.5
            if t < 1e-12:
                raise NoEquilibriumError(
                    "line search stalled (no descent direction)",
                    residual=float(np.max(np.abs(r))))
        v = v + t * dv
        r = r_new
    else:
        raise NoEquilibriumError(
            f"no convergence in {max_iter} iterations",
            residual=float(np.max(np.abs(r))))

    x[mask] = v
    res_inf = float(np.max(np.abs(asm.f(x))))
    # consistency: integral action pins every controlled node to its ref
    for k, i in enumerate(model.layout.dgu_ids):
        spec = model.graph.dgus[i]
        if not asm.active_mask[k] or spec.controller.kind == "none":
            continue
        verr = model.node_voltage(x, i) - asm.refs[i].vec
        if float(np.max(np.abs(verr))) > 1e-6:
            raise NoEquilibriumError(
                f"equilibrium voltage of DGU {i} off its reference by "
                f"{float(np.max(np.abs(verr))):.3e} V", residual=res_inf)
    z, d = model.stacked_ports(x)
    u_pre, _, _ = asm.commands(x)
    interior = bool(np.all(np.abs(u_pre) <= sat_bound))
    return NetworkEquilibrium(x=x, d=d, z=z, residual=res_inf,
                              scale=scale_for(x[mask]),
                              active_dgus=frozenset(active_dgus),
                              assembly=asm, commands_interior=interior)


# ---------------------------------------------------------------------------
# Composite Lyapunov monitor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LyapunovReport:
    t: np.ndarray
    H: np.ndarray
    dH: np.ndarray               # H[k+1] - H[k]
    tolerance: float             # allowed per-step increase
    violations: np.ndarray       # sample indices with dH above tolerance

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0


def _dgu_storage(model: NetworkModel, dgu: int, dx_plant: np.ndarray,
                 dx_ctrl: np.ndarray, active: bool, cert_cache: dict
                 ) -> np.ndarray:
    """Shifted storage of one DGU node over all samples (vectorized)."""
    spec = model.graph.dgus[dgu]
    c_eff = model.plant_eff[dgu].C_t
    dq = dx_plant[:, 2:4]
    if not active:
        # converter branch removed: the node is a bare capacitor
        return 0.5 * np.sum(dq * dq, axis=1) / c_eff
    kind = spec.controller.kind
    Lt = spec.plant.L_t
    if kind == "ida_pbc":
        g = spec.controller.ida_gains
        dphi = dx_plant[:, :2]
        ds = dx_ctrl
        kvec = np.array([g.kI1, g.kI2])
        kappa = dphi + Lt * ds * kvec
        nu = np.array([g.nu11, g.nu22])
        return 0.5 * (np.sum(kappa * kappa / (Lt * nu), axis=1)
                      + np.sum(dq * dq, axis=1) / c_eff
                      + np.sum(kvec * ds * ds, axis=1))
    if kind == "pi":
        if dgu not in cert_cache:
            cert = certify_pi_gains(spec.controller.pi_gains, spec.plant)
            if not cert.certified:
                raise CertificationError(
                    f"no decrescent storage certified for the PI gains of "
                    f"DGU {dgu} (best defect {cert.rel_defect:.3e})")
            cert_cache[dgu] = cert.P[2:, 2:]
        P22 = cert_cache[dgu]
        # permuted coordinates: charge, flux, integral state
        xhat = np.hstack([dx_plant[:, 2:4], dx_plant[:, :2], dx_ctrl])
        H = 0.5 * np.sum(xhat[:, :2] ** 2, axis=1) / c_eff
        tail = xhat[:, 2:]
        H += 0.5 * np.einsum("ki,ij,kj->k", tail, P22, tail)
        return H
    # uncontrolled but active: open-loop filter + capacitor energy
    dphi = dx_plant[:, :2]
    return 0.5 * (np.sum(dphi * dphi, axis=1) / Lt
                  + np.sum(dq * dq, axis=1) / c_eff)


def lyapunov_monitor(traj: Trajectory, eq: NetworkEquilibrium,
                     t_start: float | None = None,
                     t_end: float | None = None,
                     rel_tol: float = 1e-6) -> LyapunovReport:
    """Composite shifted storage along an event-free trajectory window.

    Per sample, sums the per-DGU storages (integral-augmented coordinates
    for the passivating controller, the certified quadratic form for PI),
    plain capacitor energy for load nodes, and magnetic energy for lines,
    all shifted to ``eq``.  A per-step increase beyond
    ``rel_tol · H(window start)`` (plus a tiny absolute floor for windows
    starting at the equilibrium itself) is reported as a violation.

    Raises ValueError if the window spans an event or its active set does
    not match the equilibrium's.
    """
    t0 = traj.t[0] if t_start is None else t_start
    t1 = traj.t[-1] if t_end is None else t_end
    for m in traj.events:
        if t0 + 1e-12 < m.time < t1 - 1e-12:
            raise ValueError(
                f"window [{t0:g}, {t1:g}] spans event at t={m.time:g}; "
                "the equilibrium is only valid between events")
    seg = None
    for (s0, s1, act, _loads, _refs) in traj.segments:
        if s0 <= t0 + 1e-12 and t1 - 1e-12 <= s1:
            seg = (s0, s1, act)
            break
    if seg is not None and seg[2] != eq.active_dgus:
        raise ValueError("equilibrium active set does not match the window")

    i0, i1 = traj.window(t0, t1)
    model = traj.model
    lay = model.layout
    cert_cache: dict = {}

    def total_storage(dX):
        H = np.zeros(dX.shape[0])
        for i in lay.dgu_ids:
            ps, cs = lay.dgu_plant[i], lay.dgu_ctrl[i]
            H += _dgu_storage(model, i, dX[:, ps], dX[:, cs],
                              i in eq.active_dgus, cert_cache)
        for j in lay.load_ids:
            sl = lay.load_state[j]
            H += 0.5 * np.sum(dX[:, sl] ** 2, axis=1) / model.load_caps[j]
        for l in lay.line_ids:
            sl = lay.line_state[l]
            L_l = model.graph.lines[l].params.L_l
            H += 0.5 * np.sum(dX[:, sl] ** 2, axis=1) / L_l
        return H

    H = total_storage(traj.x[i0:i1] - eq.x)
    dH = np.diff(H)
    # A window that starts at (or numerically at) the equilibrium makes the
    # relative term vanish, so the floor scales with the storage the same
    # quadratic form assigns to the operating point itself: solver noise in
    # the state enters H through that scale, not through max(H).
    h_op = float(total_storage(eq.x[np.newaxis, :])[0])
    tol = (rel_tol * float(H[0])
           + 1e-12 * max(1.0, float(np.max(H, initial=0.0)), h_op))
    violations = np.nonzero(dH > tol)[0]
    return LyapunovReport(t=traj.t[i0:i1], H=H, dH=dH, tolerance=tol,
                          violations=violations)


def segment_equilibria(traj: Trajectory) -> list:
    """One Newton equilibrium per event-free segment of a trajectory,
    warm-started from the segment's final sample."""
    out = []
    for (t0, t1, active, loads, refs) in traj.segments:
        i0, i1 = traj.window(t0, t1)
        warm = traj.x[i1 - 1].copy()
        eq = solve_equilibrium(traj.model, active, warm_start=warm,
                               load_overrides=loads, ref_overrides=refs)
        out.append(eq)
    return out


def storage_series(traj: Trajectory, equilibria: list | None = None
                   ) -> tuple:
    """Stitched composite-storage column plus per-segment monitor reports.

    Returns (H_MG over all samples, list of (segment, LyapunovReport)).
    """
    equilibria = equilibria if equilibria is not None \
        else segment_equilibria(traj)
    h_mg = np.full(traj.n_samples, np.nan)
    reports = []
    for (seg, eq) in zip(traj.segments, equilibria):
        t0, t1 = seg[0], seg[1]
        rep = lyapunov_monitor(traj, eq, t0, t1)
        i0, i1 = traj.window(t0, t1)
        h_mg[i0:i1] = rep.H
        reports.append((seg, rep))
    return h_mg, reports


def coupling_supply_balance(traj: Trajectory) -> np.ndarray:
    """Per-sample relative imbalance of the summed interaction supplies.

    The interconnection is power-preserving, so Σ zᵢᵀdᵢ must vanish; the
    imbalance is normalized by the total circulating interaction power
    Σ |zᵢᵀdᵢ| (floored at 1 W to keep the quiescent samples meaningful).
    """
    model = traj.model
    out = np.empty(traj.n_samples)
    slices = list(model.coupling.slices.values())
    for k in range(traj.n_samples):
        z, d = model.stacked_ports(traj.x[k])
        total = sum(float(z[sl] @ d[sl]) for sl in slices)
        scale = sum(abs(float(z[sl] @ d[sl])) for sl in slices)
        out[k] = abs(total) / max(scale, 1.0)
    return out
