"""Experiment runners: plain simulation, the two-ball strike optimization,
the friction slide and push benchmarks, and the gradient audit.

Runners consume a SceneConfig, produce RunMetrics (machine-readable), and
optionally write a trajectory CSV plus a metrics JSON.  Every recorded
contact LCP is re-validated, so an invalid force solution anywhere in a run
is surfaced in the metrics instead of silently shaping the trajectory.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import collision, gradients, mechanics
from .lcp import validate_solution
from .scenes import SceneConfig, build_scene
from .stepping import StepOptions, step_full

LCP_AUDIT_TOL = 1e-8


@dataclass
class RunMetrics:
    scene: str
    rows: list = field(default_factory=list)       # t, q..., qd...
    min_gaps: list = field(default_factory=list)   # per step boundary (None if no pairs)
    collisions: int = 0
    tois: list = field(default_factory=list)
    cap_hits: int = 0
    lcp_checks: int = 0
    lcp_failures: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def max_penetration(self) -> float:
        gaps = [g for g in self.min_gaps if g is not None]
        return max(0.0, -min(gaps)) if gaps else 0.0

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "steps": len(self.rows) - 1,
            "collisions": self.collisions,
            "tois": self.tois,
            "cap_hits": self.cap_hits,
            "min_gap_per_step": self.min_gaps,
            "max_penetration": self.max_penetration,
            "lcp_checks": self.lcp_checks,
            "lcp_failures": self.lcp_failures,
            "extra": self.extra,
        }


def _audit_tape(tape, metrics: RunMetrics):
    for seg in tape.segments:
        problem = getattr(seg, "problem", None)
        if problem is None or seg.solution is None:
            continue
        metrics.lcp_checks += 1
        if not validate_solution(problem, seg.solution, LCP_AUDIT_TOL).valid:
            metrics.lcp_failures += 1


def _scene_min_gap(model, q):
    g = collision.min_gap(model, q)
    return None if not np.isfinite(g) else float(g)


def _row(state):
    return [state.t, *state.q.tolist(), *state.qd.tolist()]


def write_outputs(metrics: RunMetrics, model, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dof = model.dof
    header = ["t_s"] + [f"q{i}" for i in range(dof)] + [f"qd{i}" for i in range(dof)]
    with open(out / f"{metrics.scene}_trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in metrics.rows:
            writer.writerow([repr(float(x)) for x in row])
    with open(out / f"{metrics.scene}_metrics.json", "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_simulate(cfg: SceneConfig, out_dir=None, ccd=None, legacy_max_step=False) -> RunMetrics:
    """Run the scene and collect per-step rows, gaps, events, and LCP audits."""
    model, state, tau, opts, steps, _ = build_scene(cfg)
    if ccd is not None:
        opts.ccd = ccd
    opts.legacy_max_step = legacy_max_step
    metrics = RunMetrics(scene=cfg.name)
    metrics.rows.append(_row(state))
    metrics.min_gaps.append(_scene_min_gap(model, state.q))
    for _ in range(steps):
        result = step_full(model, state, tau, cfg.dt_s, opts)
        state = result.state
        metrics.rows.append(_row(state))
        metrics.min_gaps.append(_scene_min_gap(model, state.q))
        metrics.collisions += result.events.collisions
        metrics.tois.extend(result.events.tois)
        metrics.cap_hits += int(result.events.cap_hit)
        _audit_tape(result.tape, metrics)
    if out_dir:
        write_outputs(metrics, model, out_dir)
    return metrics


def _loss_from_spec(model, name_to_index, spec):
    kind = spec.get("type", "target_position")
    if kind == "state_linear":
        return gradients.linear_state_loss(spec["wq"], spec["wv"])
    if kind == "target_position":
        body = name_to_index[spec["body"]]
        blk = model.block_of_body(body)
        o = blk[1]
        return gradients.target_position_loss(
            [o, o + 1], spec["target_m"], spec.get("weight", 10.0)
        )
    raise ValueError(f"unknown loss type {kind!r}")


def run_two_ball_optimize(cfg: SceneConfig, out_dir=None) -> RunMetrics:
    """Gradient descent on the striking ball's initial velocity.

    Plain fixed-step descent; the step halves whenever the loss jumps by
    more than 10x (logged in the metrics).  Restitution defaults to 1 in the
    bundled scene: the analytical reference transfer is lossless.
    """
    exp = cfg.experiment
    model, state0, tau, opts, steps, names = build_scene(cfg)
    strike = names[exp.get("strike_body", "blue")]
    o_strike = model.block_of_body(strike)[1]
    target = np.array(exp.get("target_m", [0.3, 0.2]), dtype=float)
    epochs = int(exp.get("epochs", 1000))
    lr = float(exp.get("learning_rate", 0.02))
    stop_error = float(exp.get("error_tol_m", 0.005))
    loss_fn = _loss_from_spec(model, names, {
        "type": "target_position",
        "body": exp.get("target_body", "yellow"),
        "target_m": list(target),
        "weight": exp.get("loss_weight", 10.0),
    })
    target_idx = names[exp.get("target_body", "yellow")]
    o_target = model.block_of_body(target_idx)[1]

    v = state0.qd.copy()
    loss_history = []
    lr_halvings = 0
    prev_loss = None
    best_v = v.copy()

    def rollout(v_init):
        st = mechanics.SystemState(state0.q.copy(), v_init.copy())
        states = [st.copy()]
        tapes = []
        for _ in range(steps):
            result = step_full(model, st, tau, cfg.dt_s, opts)
            st = result.state
            states.append(st.copy())
            tapes.append(result.tape)
        value, seed_q, seed_qd = loss_fn(states[-1])
        return value, states, tapes, seed_q, seed_qd

    final_states = None
    for epoch in range(epochs):
        value, states, tapes, seed_q, seed_qd = rollout(v)
        final_states = states
        loss_history.append(float(value))
        if prev_loss is not None and value > 10.0 * prev_loss:
            lr *= 0.5
            lr_halvings += 1
            v = best_v.copy()
            continue
        if prev_loss is None or value <= min(loss_history):
            best_v = v.copy()
        prev_loss = value
        p_final = states[-1].q[o_target:o_target + 2]
        if float(np.linalg.norm(p_final - target)) <= stop_error:
            break
        bundle = gradients.backward_trajectory(tapes, seed_q, seed_qd)
        grad = bundle.dqd[o_strike:o_strike + 2]
        v[o_strike:o_strike + 2] -= lr * grad

    value, states, tapes, _, _ = rollout(v)
    final_states = states
    p_final = states[-1].q[o_target:o_target + 2]
    err = float(np.linalg.norm(p_final - target))
    metrics = RunMetrics(scene=cfg.name)
    metrics.rows = [_row(s) for s in final_states]
    metrics.min_gaps = [_scene_min_gap(model, s.q) for s in final_states]
    metrics.extra = {
        "loss_history": loss_history,
        "epochs_run": len(loss_history),
        "final_position_m": p_final.tolist(),
        "target_m": target.tolist(),
        "position_error_m": err,
        "optimized_velocity_mps": v[o_strike:o_strike + 2].tolist(),
        "learning_rate_final": lr,
        "lr_halvings": lr_halvings,
        "restitution_assumed": model.restitution_override,
    }
    if out_dir:
        write_outputs(metrics, model, out_dir)
    return metrics


def _sliding_slope(times_v, dt, mu, g):
    """Least-squares slope of velocity vs step index over full sliding steps."""
    decel = mu * g * dt
    idx = [k for k, v in enumerate(times_v) if v > decel]
    if len(idx) < 3:
        return None, idx
    xs = np.array(idx, dtype=float)
    ys = np.array([times_v[k] for k in idx])
    slope = np.polyfit(xs, ys, 1)[0]
    return float(slope), idx


def run_slide_experiment(cfg: SceneConfig, out_dir=None, legacy_max_step=False) -> RunMetrics:
    """Box decelerating under Coulomb friction; reports the velocity slope."""
    metrics = run_simulate(cfg, legacy_max_step=legacy_max_step)
    model, _, _, _, _, names = build_scene(cfg)
    body = names[cfg.experiment.get("body", "box")]
    o = model.block_of_body(body)[1]
    vx = [row[1 + model.dof + o] for row in metrics.rows[:-1]]
    mu = cfg.friction_override if cfg.friction_override is not None else 0.0
    g = abs(cfg.gravity_mps2[1])
    slope, sliding_idx = _sliding_slope(vx, cfg.dt_s, mu, g)
    expected = -mu * g * cfg.dt_s
    metrics.extra = {
        "velocity_series": vx,
        "sliding_steps": len(sliding_idx),
        "slope_per_step": slope,
        "expected_slope_per_step": expected,
        "slope_rel_error": (abs(slope - expected) / abs(expected)) if slope is not None else None,
    }
    if out_dir:
        write_outputs(metrics, model, out_dir)
    return metrics


def run_push_experiment(cfg: SceneConfig, out_dir=None, legacy_max_step=False) -> RunMetrics:
    """Moving cube hits a resting cube on a frictional floor.

    Emits both velocity series, the sliding-phase deceleration, the impact
    momentum balance, and the per-step LCP validity audit (the multi-contact
    frictional case that defeats the frozen-bound pivot step).
    """
    model, state, tau, opts, steps, names = build_scene(cfg)
    opts.legacy_max_step = legacy_max_step
    mover = names[cfg.experiment.get("mover", "gray")]
    resting = names[cfg.experiment.get("resting", "blue")]
    o_m = model.block_of_body(mover)[1]
    o_r = model.block_of_body(resting)[1]
    mass_m = model.bodies[mover].mass
    mass_r = model.bodies[resting].mass

    metrics = RunMetrics(scene=cfg.name)
    metrics.rows.append(_row(state))
    metrics.min_gaps.append(_scene_min_gap(model, state.q))
    vx_mover = [state.qd[o_m]]
    vx_resting = [state.qd[o_r]]
    impact_momentum_errors = []
    for _ in range(steps):
        result = step_full(model, state, tau, cfg.dt_s, opts)
        for seg in result.tape.segments:
            if hasattr(seg, "eps_rows"):  # response segment: check momentum transfer
                qd_before = seg.qd
                M = mechanics.mass_matrix(model, seg.q)
                dqd = np.linalg.solve(M, seg.contacts.jacobian.T @ seg.solution.f)
                dp = mass_m * dqd[o_m:o_m + 2] + mass_r * dqd[o_r:o_r + 2]
                impact_momentum_errors.append(float(np.abs(dp).max()))
        state = result.state
        metrics.rows.append(_row(state))
        metrics.min_gaps.append(_scene_min_gap(model, state.q))
        metrics.collisions += result.events.collisions
        metrics.tois.extend(result.events.tois)
        metrics.cap_hits += int(result.events.cap_hit)
        _audit_tape(result.tape, metrics)
        vx_mover.append(state.qd[o_m])
        vx_resting.append(state.qd[o_r])
    mu = cfg.friction_override or 0.0
    g = abs(cfg.gravity_mps2[1])
    # pre-impact sliding phase of the mover
    impact_step = next((k for k in range(1, len(vx_resting)) if abs(vx_resting[k]) > 1e-9),
                       len(vx_resting))
    pre = vx_mover[:impact_step]
    slope, _ = _sliding_slope(pre, cfg.dt_s, mu, g)
    metrics.extra = {
        "mover_velocity_series": [float(v) for v in vx_mover],
        "resting_velocity_series": [float(v) for v in vx_resting],
        "impact_step": impact_step,
        "pre_impact_decel_mps2": -slope / cfg.dt_s if slope is not None else None,
        "expected_decel_mps2": mu * g,
        "impact_momentum_error": max(impact_momentum_errors) if impact_momentum_errors else None,
        "final_speeds": [float(abs(vx_mover[-1])), float(abs(vx_resting[-1]))],
    }
    if out_dir:
        write_outputs(metrics, model, out_dir)
    return metrics


def run_gradcheck(cfg: SceneConfig, out_dir=None, ccd=None):
    """Finite-difference audit of the analytic gradients for a scene."""
    exp = cfg.experiment.get("gradcheck", {})
    model, state, tau, opts, steps, names = build_scene(cfg)
    if ccd is not None:
        opts.ccd = ccd
    loss_spec = exp.get("loss", {"type": "state_linear",
                                 "wq": [1.0] * model.dof, "wv": [0.0] * model.dof})
    loss = _loss_from_spec(model, names, loss_spec)
    params = tuple(exp.get("params", ("q0", "qd0", "dt")))
    eps = float(exp.get("eps", 1e-6))
    report = gradients.finite_difference_check(
        model, state, tau, cfg.dt_s, steps, loss, params=params, eps=eps, opts=opts
    )
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{cfg.name}_gradcheck.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
