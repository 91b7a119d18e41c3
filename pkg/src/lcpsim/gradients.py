"""Reverse-mode gradients over step tapes, plus a finite-difference audit.

The backward pass walks a tape's segments in reverse, pulling vector-
Jacobian products through each propagation and response map.  Contact force
sensitivities come from implicit differentiation of the active class system
(classes held fixed at the recorded assignment, one-sided at boundaries).
Each recorded impact chains its time-of-impact sensitivity into the
preceding sub-interval and into the final remainder, whose duration is the
outer dt minus all impact times.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import collision, mechanics
from .dual import Dual, partial, value
from .lcp import LcpProblem, LcpSolution
from .mechanics import SystemState
from .stepping import CSegment, PSegment, StepOptions, StepTape, simulate_trajectory

GRAZING_RTOL = 1e-9
BOUNDARY_MARGIN = 1e-7


class GrazingContact(Exception):
    """Approach speed too small for a well-conditioned TOI gradient."""


# ---------------------------------------------------------------------------
# LCP solution sensitivities

def lcp_gradients(problem: LcpProblem, solution: LcpSolution):
    """Directional derivative of the contact force at a fixed class assignment.

    Returns ``df(dA, db)`` mapping perturbations of the problem data to the
    force perturbation.  Rows in C/F keep zero residual, H/L forces stay
    slaved to their normal, N forces stay zero; this is the one-sided
    derivative of the recorded assignment.
    """
    classes = solution.classes
    fmap = problem.friction_index_map
    n = problem.dim
    f = solution.f

    def fold_cols(mat):
        out = mat.copy()
        for i, cls in enumerate(classes):
            if cls == "H":
                out[:, fmap[i].normal] += fmap[i].mu * out[:, i]
            elif cls == "L":
                out[:, fmap[i].normal] -= fmap[i].mu * out[:, i]
        return out

    active = [i for i, cls in enumerate(classes) if cls in ("C", "F")]
    act = np.asarray(active, dtype=int)
    block = fold_cols(problem.A)[np.ix_(active, active)] if active else None

    def df(dA, db):
        out = np.zeros(n)
        if active:
            rhs = -np.asarray(db, dtype=float)[act]
            if dA is not None:
                dAf = fold_cols(np.asarray(dA, dtype=float))
                rhs -= dAf[np.ix_(active, active)] @ f[act]
            out[act] = np.linalg.solve(block, rhs)
        for i, cls in enumerate(classes):
            if cls == "H":
                out[i] = fmap[i].mu * out[fmap[i].normal]
            elif cls == "L":
                out[i] = -fmap[i].mu * out[fmap[i].normal]
        return out

    return df


def class_boundary_margin(problem: LcpProblem, solution: LcpSolution) -> float:
    """Distance of the solution from the nearest class boundary.

    Small margins mean the gradient is one-sided and finite differences may
    straddle a kink.
    """
    fmap = problem.friction_index_map
    f, a = solution.f, solution.a
    margin = np.inf
    for i, cls in enumerate(solution.classes):
        if cls == "C":
            margin = min(margin, abs(f[i]))
        elif cls == "N":
            margin = min(margin, abs(a[i]))
        elif fmap[i].mu == 0.0:
            # zero-friction rows carry zero force on both sides of every
            # boundary, so no gradient discontinuity exists there
            continue
        elif cls == "F":
            bound = fmap[i].mu * f[fmap[i].normal]
            margin = min(margin, bound - abs(f[i]))
        else:  # H or L
            margin = min(margin, abs(a[i]))
    return float(margin)


# ---------------------------------------------------------------------------
# TOI sensitivities

def toi_gradients(model, t_record):
    """(d toi/dq, d toi/dqd) for a recorded impact query.

    The impact time t* is the root of the frozen-feature gap along the
    configuration ray q + t qd, so by implicit differentiation

        d t*/dq  = -grad_gap / (grad_gap . qd),
        d t*/dqd = t* times that,

    with the gap gradient evaluated at the impact configuration.  Raises
    GrazingContact when the approach speed is too small to divide by.
    """
    qd = np.asarray(t_record.qd, dtype=float)
    q_toi = [float(x) for x in np.asarray(t_record.q, dtype=float) + t_record.toi * qd]
    dof = len(q_toi)
    dg = np.zeros(dof)
    for i in range(dof):
        q_seeded = list(q_toi)
        q_seeded[i] = Dual(q_toi[i], 1.0)
        _, _, g = collision.contact_rows(model, q_seeded, t_record.contact)
        dg[i] = partial(g)
    rate = float(dg @ qd)
    scale = GRAZING_RTOL * (1.0 + float(np.linalg.norm(qd)))
    if rate >= -scale:
        raise GrazingContact(f"gap rate {rate:.3e} too close to zero")
    ddtc_dq = -dg / rate
    return ddtc_dq, t_record.toi * ddtc_dq


# ---------------------------------------------------------------------------
# segment pullbacks

def _p_pullback(model, seg: PSegment, gq2, gv2):
    dof = model.dof
    q, v, tau, dt = seg.q, seg.qd, seg.tau, seg.dt
    M = mechanics.mass_matrix(model, q)
    Minv = np.linalg.inv(M)
    c = mechanics.coriolis(model, q, v)
    ext = tau - c
    dM_dq, dM_dm = mechanics.mass_matrix_partials(model, q)
    dc_dq, dc_dqd, dc_dm = mechanics.bias_partials(model, q, v)
    nm = len(dM_dm)

    has_contacts = seg.contacts is not None and len(seg.contacts)
    if has_contacts:
        J = seg.contacts.jacobian
        f = seg.solution.f
        dJ = collision.jacobian_partials(model, q, seg.contacts.contacts)
        MinvJT = Minv @ J.T
        Minv_ext = Minv @ ext
        u = v + dt * Minv_ext
        dfdx = lcp_gradients(seg.problem, seg.solution)
        z = dt * ext + J.T @ f
    else:
        z = dt * ext
    Minv_z = Minv @ z

    Dq = np.zeros((dof, dof))
    Dv = np.zeros((dof, dof))
    for i in range(dof):
        col = -Minv @ (dM_dq[i] @ Minv_z) + Minv @ (-dt * dc_dq[:, i])
        if has_contacts:
            dMinvJT = -Minv @ (dM_dq[i] @ MinvJT) + Minv @ dJ[i].T
            dA = dJ[i] @ MinvJT + J @ dMinvJT
            du = dt * (-Minv @ (dM_dq[i] @ Minv_ext) - Minv @ dc_dq[:, i])
            db = dJ[i] @ u + J @ du
            dfv = dfdx(dA, db)
            col += Minv @ (dJ[i].T @ f + J.T @ dfv)
        Dq[:, i] = col
        colv = Minv @ (-dt * dc_dqd[:, i])
        if has_contacts:
            e = np.zeros(dof)
            e[i] = 1.0
            db = J @ (e - dt * (Minv @ dc_dqd[:, i]))
            colv += Minv @ (J.T @ dfdx(None, db))
        colv[i] += 1.0
        Dv[:, i] = colv

    Dtau = dt * Minv.copy()
    if has_contacts:
        for i in range(dof):
            db = dt * (J @ Minv[:, i])
            Dtau[:, i] += Minv @ (J.T @ dfdx(None, db))

    Dm = np.zeros((dof, nm))
    for j in range(nm):
        col = -Minv @ (dM_dm[j] @ Minv_z) + Minv @ (-dt * dc_dm[:, j])
        if has_contacts:
            dMinvJT = -Minv @ (dM_dm[j] @ MinvJT)
            dA = J @ dMinvJT
            du = dt * (-Minv @ (dM_dm[j] @ Minv_ext) - Minv @ dc_dm[:, j])
            db = J @ du
            col += Minv @ (J.T @ dfdx(dA, db))
        Dm[:, j] = col

    ddt = Minv @ ext
    if has_contacts:
        db = J @ Minv_ext
        ddt = ddt + Minv @ (J.T @ dfdx(None, db))

    S = float(gq2 @ v + gv2 @ ddt)
    gq_in = gq2 + gv2 @ Dq
    gv_in = dt * gq2 + gv2 @ Dv
    return gq_in, gv_in, gv2 @ Dtau, gv2 @ Dm, S


def _c_pullback(model, seg: CSegment, gq2, gv2):
    dof = model.dof
    q, v = seg.q, seg.qd
    M = mechanics.mass_matrix(model, q)
    Minv = np.linalg.inv(M)
    dM_dq, dM_dm = mechanics.mass_matrix_partials(model, q)
    nm = len(dM_dm)
    J = seg.contacts.jacobian
    f = seg.solution.f
    dJ = collision.jacobian_partials(model, q, seg.contacts.contacts)
    MinvJT = Minv @ J.T
    E = 1.0 + seg.eps_rows
    dfdx = lcp_gradients(seg.problem, seg.solution)
    z = J.T @ f
    Minv_z = Minv @ z

    Dq = np.zeros((dof, dof))
    Dv = np.zeros((dof, dof))
    for i in range(dof):
        dMinvJT = -Minv @ (dM_dq[i] @ MinvJT) + Minv @ dJ[i].T
        dA = dJ[i] @ MinvJT + J @ dMinvJT
        db = E * (dJ[i] @ v)
        dfv = dfdx(dA, db)
        Dq[:, i] = -Minv @ (dM_dq[i] @ Minv_z) + Minv @ (dJ[i].T @ f + J.T @ dfv)
        dbv = E * J[:, i]
        colv = Minv @ (J.T @ dfdx(None, dbv))
        colv[i] += 1.0
        Dv[:, i] = colv

    Dm = np.zeros((dof, nm))
    for j in range(nm):
        dA = J @ (-Minv @ (dM_dm[j] @ MinvJT))
        Dm[:, j] = -Minv @ (dM_dm[j] @ Minv_z) + Minv @ (J.T @ dfdx(dA, np.zeros(2 * len(seg.contacts))))

    gq_in = gq2 + gv2 @ Dq
    gv_in = gv2 @ Dv
    return gq_in, gv_in, gv2 @ Dm


# ---------------------------------------------------------------------------
# tape walk

@dataclass
class GradientBundle:
    dq: np.ndarray
    dqd: np.ndarray
    dtau: np.ndarray
    dm: np.ndarray
    ddt: float
    warnings: list = field(default_factory=list)


def backward(tape: StepTape, seed_q, seed_qd) -> GradientBundle:
    """Accumulate d(loss)/d(inputs) over one outer step.

    ``seed_q``/``seed_qd`` are d(loss)/d(final q, qd).  Impact times chain
    into both their own sub-interval and the final remainder (which shrinks
    when an impact happens later).
    """
    model = tape.model
    gq = np.array(seed_q, dtype=float)
    gv = np.array(seed_qd, dtype=float)
    dof = model.dof
    nm = 2 * len(model.dynamic_bodies())
    gtau = np.zeros(dof)
    gm = np.zeros(nm)
    warnings = []
    segs = tape.segments
    p_indices = [i for i, s in enumerate(segs) if isinstance(s, PSegment)]
    last_p = p_indices[-1] if p_indices else None
    S_last = 0.0
    for i in reversed(range(len(segs))):
        seg = segs[i]
        if isinstance(seg, CSegment):
            gq, gv, dm_c = _c_pullback(model, seg, gq, gv)
            gm += dm_c
            continue
        gq_in, gv_in, dtau_c, dm_c, S = _p_pullback(model, seg, gq, gv)
        if i == last_p:
            S_last = S
        gq, gv = gq_in, gv_in
        gtau += dtau_c
        gm += dm_c
        nxt = segs[i + 1] if i + 1 < len(segs) else None
        if isinstance(nxt, CSegment) and nxt.t_record is not None:
            W = S - S_last
            try:
                dtoi_dq, dtoi_dv = toi_gradients(model, nxt.t_record)
                gq = gq + W * dtoi_dq
                gv = gv + W * dtoi_dv
            except GrazingContact as exc:
                warnings.append(f"segment {i}: {exc}; TOI gradient unavailable")
    bundle = GradientBundle(dq=gq, dqd=gv, dtau=gtau, dm=gm, ddt=S_last, warnings=warnings)
    if not (np.all(np.isfinite(bundle.dq)) and np.all(np.isfinite(bundle.dqd))):
        raise FloatingPointError("non-finite gradient")
    return bundle


def backward_trajectory(tapes, seed_q, seed_qd) -> GradientBundle:
    """Chain per-step bundles across a multi-step trajectory.

    tau and dt are treated as shared across steps, so their sensitivities
    accumulate; state gradients flow backward through every step.
    """
    gq = np.array(seed_q, dtype=float)
    gv = np.array(seed_qd, dtype=float)
    gtau = None
    gm = None
    gdt = 0.0
    warnings = []
    for tape in reversed(tapes):
        bundle = backward(tape, gq, gv)
        gq, gv = bundle.dq, bundle.dqd
        gtau = bundle.dtau if gtau is None else gtau + bundle.dtau
        gm = bundle.dm if gm is None else gm + bundle.dm
        gdt += bundle.ddt
        warnings.extend(bundle.warnings)
    return GradientBundle(dq=gq, dqd=gv, dtau=gtau, dm=gm, ddt=gdt, warnings=warnings)


def tapes_near_boundary(tapes, margin: float = BOUNDARY_MARGIN) -> bool:
    """True when any recorded step sits on a gradient-discontinuity boundary.

    Two kinds are flagged: an LCP solution within ``margin`` of a class
    boundary, and a touching contact with near-zero approach speed (a
    resting contact, which sits on the touch/separate mode boundary and
    makes some state gradients one-sided).
    """
    for tape in tapes:
        for seg in tape.segments:
            problem = getattr(seg, "problem", None)
            if problem is not None and seg.solution is not None:
                if class_boundary_margin(problem, seg.solution) < margin:
                    return True
            contacts = getattr(seg, "contacts", None)
            if contacts is not None and len(contacts):
                v_rel = contacts.jacobian @ seg.qd
                for j, c in enumerate(contacts.contacts):
                    if abs(c.gap) < margin and abs(v_rel[2 * j]) < 1e-5:
                        return True
    return False


# ---------------------------------------------------------------------------
# finite-difference audit

@dataclass
class FdEntry:
    name: str
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class FdReport:
    entries: list
    max_rel_error: float
    boundary_flag: bool
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "entries": [
                {
                    "name": e.name,
                    "analytic": e.analytic,
                    "numeric": e.numeric,
                    "rel_error": e.rel_error,
                }
                for e in self.entries
            ],
            "max_rel_error": self.max_rel_error,
            "boundary_flag": self.boundary_flag,
            "warnings": list(self.warnings),
        }


def _rel_error(a, n):
    return abs(a - n) / (abs(a) + abs(n) + 1e-12)


def finite_difference_check(model, state0: SystemState, tau, dt, steps, loss,
                            params=("q0", "qd0", "tau", "m", "dt"),
                            eps: float = 1e-6,
                            opts: StepOptions | None = None) -> FdReport:
    """Central differences of a scalar loss against the analytic bundle.

    ``loss`` maps a final state to (value, d/dq, d/dqd).  The boundary flag
    marks runs whose recorded LCPs sit close to a class boundary, where the
    analytic gradient is one-sided and the comparison is unreliable.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tau = np.zeros(model.dof) if tau is None else np.asarray(tau, dtype=float)
    states, tapes, _ = simulate_trajectory(model, state0.copy(), tau, dt, steps, opts)
    _, seed_q, seed_qd = loss(states[-1])
    bundle = backward_trajectory(tapes, seed_q, seed_qd)
    boundary = tapes_near_boundary(tapes) or bool(bundle.warnings)

    def run_value(model_run, st, tau_run, dt_run):
        sts, _, _ = simulate_trajectory(model_run, st, tau_run, dt_run, steps, opts)
        return loss(sts[-1])[0]

    entries = []

    def central(name, analytic, plus_fn, minus_fn, h):
        numeric = (plus_fn() - minus_fn()) / (2.0 * h)
        entries.append(FdEntry(name, float(analytic), float(numeric),
                               _rel_error(analytic, numeric)))

    dof = model.dof
    mvec = mechanics.inertial_parameters(model)
    for spec in params:
        if spec == "q0":
            for i in range(dof):
                h = eps * max(1.0, abs(state0.q[i]))
                def plus(i=i, h=h):
                    st = state0.copy(); st.q[i] += h
                    return run_value(model, st, tau, dt)
                def minus(i=i, h=h):
                    st = state0.copy(); st.q[i] -= h
                    return run_value(model, st, tau, dt)
                central(f"q0[{i}]", bundle.dq[i], plus, minus, h)
        elif spec == "qd0":
            for i in range(dof):
                h = eps * max(1.0, abs(state0.qd[i]))
                def plus(i=i, h=h):
                    st = state0.copy(); st.qd[i] += h
                    return run_value(model, st, tau, dt)
                def minus(i=i, h=h):
                    st = state0.copy(); st.qd[i] -= h
                    return run_value(model, st, tau, dt)
                central(f"qd0[{i}]", bundle.dqd[i], plus, minus, h)
        elif spec == "tau":
            for i in range(dof):
                h = eps * max(1.0, abs(tau[i]))
                def plus(i=i, h=h):
                    t2 = tau.copy(); t2[i] += h
                    return run_value(model, state0.copy(), t2, dt)
                def minus(i=i, h=h):
                    t2 = tau.copy(); t2[i] -= h
                    return run_value(model, state0.copy(), t2, dt)
                central(f"tau[{i}]", bundle.dtau[i], plus, minus, h)
        elif spec == "m":
            labels = mechanics.inertial_parameter_labels(model)
            for j in range(len(mvec)):
                h = eps * max(1.0, abs(mvec[j]))
                def plus(j=j, h=h):
                    m2 = mvec.copy(); m2[j] += h
                    return run_value(mechanics.with_inertial_parameters(model, m2),
                                     state0.copy(), tau, dt)
                def minus(j=j, h=h):
                    m2 = mvec.copy(); m2[j] -= h
                    return run_value(mechanics.with_inertial_parameters(model, m2),
                                     state0.copy(), tau, dt)
                central(labels[j], bundle.dm[j], plus, minus, h)
        elif spec == "dt":
            h = eps * max(1.0, abs(dt))
            central("dt", bundle.ddt,
                    lambda h=h: run_value(model, state0.copy(), tau, dt + h),
                    lambda h=h: run_value(model, state0.copy(), tau, dt - h), h)
        else:
            raise ValueError(f"unknown parameter spec {spec!r}")

    worst = max((e.rel_error for e in entries), default=0.0)
    return FdReport(entries=entries, max_rel_error=float(worst),
                    boundary_flag=boundary, warnings=list(bundle.warnings))


def linear_state_loss(wq, wv):
    """Loss(state) = wq . q + wv . qd, with its exact seeds."""
    wq = np.asarray(wq, dtype=float)
    wv = np.asarray(wv, dtype=float)

    def loss(state):
        return float(wq @ state.q + wv @ state.qd), wq.copy(), wv.copy()

    return loss


def target_position_loss(dof_indices, target, weight=10.0):
    """Loss = weight * || q[idxs] - target ||^2 with exact seeds."""
    idxs = list(dof_indices)
    target = np.asarray(target, dtype=float)

    def loss(state):
        p = state.q[idxs]
        diff = p - target
        val = weight * float(diff @ diff)
        gq = np.zeros_like(state.q)
        gq[idxs] = 2.0 * weight * diff
        return val, gq, np.zeros_like(state.qd)

    return loss
