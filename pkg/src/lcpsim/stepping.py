"""Forward dynamics maps with tape recording.

Three maps compose one outer timestep:

* propagation: explicit Euler over a sub-interval, with a contact LCP in
  impulse form (forces are impulses, residuals are post-step contact
  velocities); positions integrate the pre-step velocity;
* collision response: an instantaneous impulse exchange, the dt = 0
  specialization of propagation with restitution folded into b;
* the full step: query continuous collision detection over the remaining
  time, propagate to the earliest impact, respond, repeat.  A substep cap
  ends pathological impact cascades with a discrete-time response fallback.

Every sub-map records a tape segment carrying the inputs and the solved LCP,
which is what the reverse pass consumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import collision, dantzig, mechanics
from .collision import ContactSet, ToiHit, narrow_phase
from .lcp import LcpProblem, LcpSolution
from .mechanics import MechanismModel, SystemState

RESPONSE_APPROACH = 1e-8  # contacts closing slower than this get zero restitution


@dataclass
class StepOptions:
    ccd: bool = True
    substep_cap: int = 16
    slop: float = collision.DEFAULT_SLOP
    legacy_max_step: bool = False


@dataclass
class ToiRecord:
    """State of the collision-detection query that produced a TOI."""

    contact: collision.ContactPoint
    q: np.ndarray
    qd: np.ndarray
    gap: float
    closing_speed: float
    toi: float


@dataclass
class PSegment:
    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    dt: float
    contacts: ContactSet | None
    problem: LcpProblem | None
    solution: LcpSolution | None


@dataclass
class CSegment:
    q: np.ndarray
    qd: np.ndarray
    contacts: ContactSet
    eps_rows: np.ndarray  # per-row restitution factors (tangent rows 0)
    problem: LcpProblem
    solution: LcpSolution
    t_record: ToiRecord | None = None


@dataclass
class StepTape:
    model: MechanismModel
    dt: float
    segments: list = field(default_factory=list)


@dataclass
class StepEvents:
    collisions: int = 0
    tois: list = field(default_factory=list)
    cap_hit: bool = False


@dataclass
class StepResult:
    state: SystemState
    tape: StepTape
    events: StepEvents


def _solve_contact_lcp(model, q, qd, contacts, b, legacy=False):
    M = mechanics.mass_matrix(model, q)
    J = contacts.jacobian
    MinvJT = np.linalg.solve(M, J.T)
    A = J @ MinvJT
    A = 0.5 * (A + A.T)
    problem = LcpProblem(A=A, b=b, friction_pairs=contacts.friction_pairs)
    solution, _ = dantzig.solve(problem, legacy_max_step=legacy)
    return problem, solution


def step_p(model, state: SystemState, tau, dt, *, slop=collision.DEFAULT_SLOP,
           legacy_max_step=False):
    """Collision-free propagation over dt; contacts resolve impulsively.

    qd' = qd + M^-1 (dt (tau - c) + J^T f),  q' = q + dt qd  (old velocity),
    with f from the contact LCP whose b is the contact-space velocity the
    step would produce without contact impulses.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    tau = np.zeros(model.dof) if tau is None else np.asarray(tau, dtype=float)
    q, qd = state.q, state.qd
    M = mechanics.mass_matrix(model, q)
    c = mechanics.coriolis(model, q, qd)
    ext = tau - c
    contacts = narrow_phase(model, q, slop)
    if len(contacts):
        J = contacts.jacobian
        b = J @ (qd + dt * np.linalg.solve(M, ext))
        problem, solution = _solve_contact_lcp(model, q, qd, contacts, b, legacy_max_step)
        z = dt * ext + J.T @ solution.f
    else:
        contacts = None
        problem = solution = None
        z = dt * ext
    qd2 = qd + np.linalg.solve(M, z)
    q2 = q + dt * qd
    seg = PSegment(q=q.copy(), qd=qd.copy(), tau=tau.copy(), dt=float(dt),
                   contacts=contacts, problem=problem, solution=solution)
    return SystemState(q2, qd2, state.t + dt), seg


def collision_response(model, state: SystemState, contacts: ContactSet,
                       t_record: ToiRecord | None = None, *, legacy_max_step=False):
    """Instantaneous impulse response at the current configuration.

    b carries (1 + eps) times the approach velocity on normal rows (zero
    restitution on tangent rows and on resting contacts), so separating
    velocities obey v+ = -eps v- at impacting contacts.
    """
    if not len(contacts):
        raise ValueError("collision response needs at least one contact")
    q, qd = state.q, state.qd
    J = contacts.jacobian
    v_rel = J @ qd
    eps_rows = np.zeros(2 * len(contacts))
    for j in range(len(contacts)):
        if v_rel[2 * j] < -RESPONSE_APPROACH:
            eps_rows[2 * j] = contacts.restitutions[j]
    b = (1.0 + eps_rows) * v_rel
    problem, solution = _solve_contact_lcp(model, q, qd, contacts, b, legacy_max_step)
    M = mechanics.mass_matrix(model, q)
    qd2 = qd + np.linalg.solve(M, J.T @ solution.f)
    seg = CSegment(q=q.copy(), qd=qd.copy(), contacts=contacts, eps_rows=eps_rows,
                   problem=problem, solution=solution, t_record=t_record)
    return SystemState(q.copy(), qd2, state.t), seg


def _has_impact(model, state, contacts, penetrating_only=True):
    if contacts is None or not len(contacts):
        return False
    v_rel = contacts.jacobian @ state.qd
    for j, c in enumerate(contacts.contacts):
        if penetrating_only and c.gap >= 0.0:
            continue
        if v_rel[2 * j] < -RESPONSE_APPROACH:
            return True
    return False


def _discrete_tail(model, state, tau, remaining, opts, tape, events):
    """Step the remainder and respond at the end of the interval (DCD mode)."""
    state, seg = step_p(model, state, tau, remaining, slop=opts.slop,
                        legacy_max_step=opts.legacy_max_step)
    tape.segments.append(seg)
    contacts = narrow_phase(model, state.q, opts.slop)
    if _has_impact(model, state, contacts):
        state, cseg = collision_response(model, state, contacts,
                                         legacy_max_step=opts.legacy_max_step)
        tape.segments.append(cseg)
        events.collisions += 1
    return state


def step_full(model, state: SystemState, tau, dt, opts: StepOptions | None = None) -> StepResult:
    """One outer timestep with TOI backtracking.

    The interval is cut at each impact: propagate to the TOI, respond, and
    continue over the remainder.  With CCD disabled (or once the substep cap
    trips) the remainder is stepped discretely with an end-of-step response.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    opts = opts or StepOptions()
    tape = StepTape(model=model, dt=float(dt))
    events = StepEvents()
    remaining = float(dt)
    while remaining > 1e-15 * dt:
        if not opts.ccd:
            state = _discrete_tail(model, state, tau, remaining, opts, tape, events)
            remaining = 0.0
            break
        if events.collisions >= opts.substep_cap:
            events.cap_hit = True
            state = _discrete_tail(model, state, tau, remaining, opts, tape, events)
            remaining = 0.0
            break
        hit = collision.ccd_toi(model, state, remaining, opts.slop)
        if hit is None:
            state, seg = step_p(model, state, tau, remaining, slop=opts.slop,
                                legacy_max_step=opts.legacy_max_step)
            tape.segments.append(seg)
            remaining = 0.0
            break
        t_rec = ToiRecord(contact=hit.contact, q=state.q.copy(), qd=state.qd.copy(),
                          gap=hit.gap, closing_speed=hit.closing_speed, toi=hit.toi)
        if hit.toi > 0.0:
            state, seg = step_p(model, state, tau, hit.toi, slop=opts.slop,
                                legacy_max_step=opts.legacy_max_step)
            tape.segments.append(seg)
        contacts = narrow_phase(model, state.q, max(opts.slop, 2.0 * collision.TOUCH_GAP))
        if len(contacts):
            state, cseg = collision_response(model, state, contacts, t_record=t_rec,
                                             legacy_max_step=opts.legacy_max_step)
            tape.segments.append(cseg)
        events.collisions += 1
        events.tois.append(hit.toi)
        remaining -= hit.toi
    return StepResult(state=state, tape=tape, events=events)


def replay(tape: StepTape) -> SystemState:
    """Re-run the recorded segments from their stored inputs (determinism check)."""
    state = None
    for seg in tape.segments:
        if isinstance(seg, PSegment):
            state = SystemState(seg.q.copy(), seg.qd.copy())
            state, _ = step_p(tape.model, state, seg.tau, seg.dt)
        else:
            state = SystemState(seg.q.copy(), seg.qd.copy())
            state, _ = collision_response(tape.model, state, seg.contacts, seg.t_record)
    return state


def simulate_trajectory(model, state: SystemState, tau, dt, steps,
                        opts: StepOptions | None = None):
    """Run ``steps`` outer steps; returns (states incl. initial, tapes, events)."""
    states = [state.copy()]
    tapes = []
    all_events = []
    for _ in range(steps):
        result = step_full(model, state, tau, dt, opts)
        state = result.state
        states.append(state.copy())
        tapes.append(result.tape)
        all_events.append(result.events)
    return states, tapes, all_events
