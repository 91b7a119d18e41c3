import numpy as np
import pytest

from lcpsim import mechanics
from lcpsim.collision import Circle, HalfPlane, box, narrow_phase
from lcpsim.gradients import (
    GrazingContact,
    backward,
    backward_trajectory,
    class_boundary_margin,
    finite_difference_check,
    lcp_gradients,
    linear_state_loss,
    target_position_loss,
    toi_gradients,
)
from lcpsim.lcp import FrictionPair, LcpProblem, LcpSolution
from lcpsim.mechanics import Body, Chain, Material, MechanismModel, SystemState
from lcpsim.stepping import StepOptions, ToiRecord, simulate_trajectory, step_full
from lcpsim import dantzig


class TestLcpGradients:
    def test_clamped_scalar(self):
        p = LcpProblem(A=[[1.0]], b=[-1.0])
        s = LcpSolution(f=[1.0], a=[0.0], classes=("C",))
        df = lcp_gradients(p, s)
        assert abs(df(None, np.array([1.0]))[0] - (-1.0)) < 1e-14

    def test_separated_zero(self):
        p = LcpProblem(A=[[1.0]], b=[2.0])
        s = LcpSolution(f=[0.0], a=[2.0], classes=("N",))
        df = lcp_gradients(p, s)
        assert df(np.array([[0.3]]), np.array([1.0]))[0] == 0.0

    def test_folded_friction_system(self):
        # classes (C, H) with mu=1: the folded 1x1 system has A'00 = 1.2
        p = LcpProblem(A=[[1.0, 0.2], [0.2, 1.0]], b=[-1.0, -3.0],
                       friction_pairs=[FrictionPair(1, 0, 1.0)])
        sol, _ = dantzig.solve(p)
        assert sol.classes == ("C", "H")
        df = lcp_gradients(p, sol)
        out = df(None, np.array([1.0, 0.0]))
        assert abs(out[0] - (-1.0 / 1.2)) < 1e-12
        assert abs(out[1] - out[0]) < 1e-12  # slaved at +mu

    def test_matches_finite_difference_of_solver(self):
        rng = np.random.default_rng(0)
        from lcp_random import random_contact_problem
        checked = 0
        for _ in range(40):
            p = random_contact_problem(rng, int(rng.integers(1, 4)))
            sol, _ = dantzig.solve(p)
            if class_boundary_margin(p, sol) < 1e-4:
                continue
            df = lcp_gradients(p, sol)
            h = 1e-7
            for trial in range(2):
                db = rng.normal(size=p.dim)
                analytic = df(None, db)
                pp = LcpProblem(A=p.A, b=p.b + h * db, friction_pairs=p.friction_pairs)
                pm = LcpProblem(A=p.A, b=p.b - h * db, friction_pairs=p.friction_pairs)
                fp, _ = dantzig.solve(pp)
                fm, _ = dantzig.solve(pm)
                numeric = (fp.f - fm.f) / (2 * h)
                assert np.abs(analytic - numeric).max() < 1e-6
                checked += 1
        assert checked >= 20


class TestToiGradients:
    def _record(self, model, q, qd, dt):
        from lcpsim.collision import ccd_toi
        hit = ccd_toi(model, SystemState(q, qd), dt)
        return ToiRecord(contact=hit.contact, q=np.array(q, dtype=float),
                         qd=np.array(qd, dtype=float), gap=hit.gap,
                         closing_speed=hit.closing_speed, toi=hit.toi)

    def test_falling_ball_partials(self):
        model = MechanismModel(bodies=[
            Body(kind="static", shape=HalfPlane((0.0, 1.0), 0.0)),
            Body(kind="free", mass=1.0, inertia=0.1, shape=Circle(0.5)),
        ])
        rec = self._record(model, [0, 1.0, 0], [0, -1.0, 0], 1.0)
        dq, dv = toi_gradients(model, rec)
        # toi = (y - r)/speed: d toi/dy = 1/speed = 1; d toi/dv_y = gap/speed^2 = 0.5
        assert abs(dq[1] - 1.0) < 1e-9
        assert abs(dv[1] - 0.5) < 1e-9

    def test_homogeneity(self):
        # doubling the velocity halves the impact time
        model = MechanismModel(bodies=[
            Body(kind="static", shape=HalfPlane((0.0, 1.0), 0.0)),
            Body(kind="free", mass=1.0, inertia=0.1, shape=Circle(0.5)),
        ])
        rec = self._record(model, [0, 1.0, 0], [0, -1.0, 0], 1.0)
        dq, dv = toi_gradients(model, rec)
        directional = float(np.dot(dv, rec.qd))
        assert abs(directional - (-rec.toi)) < 1e-9

    def test_matches_finite_difference_circle_circle(self):
        from lcpsim.collision import ccd_toi
        model = MechanismModel(bodies=[
            Body(kind="free", mass=1.0, inertia=0.01, shape=Circle(0.05)),
            Body(kind="free", mass=1.0, inertia=0.01, shape=Circle(0.05)),
        ])
        q = np.array([-0.4, 0.0, 0.0, 0.0, 0.0, 0.0])
        qd = np.array([4.0, -0.1, 0.0, 0.0, 0.0, 0.0])
        rec = self._record(model, q, qd, 0.2)
        dq, dv = toi_gradients(model, rec)
        h = 1e-7
        for i in (0, 1, 3, 4):
            qp = q.copy(); qp[i] += h
            qm = q.copy(); qm[i] -= h
            tp = ccd_toi(model, SystemState(qp, qd), 0.2).toi
            tm = ccd_toi(model, SystemState(qm, qd), 0.2).toi
            assert abs((tp - tm) / (2 * h) - dq[i]) < 1e-4
            vp = qd.copy(); vp[i] += h
            vm = qd.copy(); vm[i] -= h
            tp = ccd_toi(model, SystemState(q, vp), 0.2).toi
            tm = ccd_toi(model, SystemState(q, vm), 0.2).toi
            assert abs((tp - tm) / (2 * h) - dv[i]) < 1e-4

    def test_grazing_raises(self):
        model = MechanismModel(bodies=[
            Body(kind="static", shape=HalfPlane((0.0, 1.0), 0.0)),
            Body(kind="free", mass=1.0, inertia=0.1, shape=Circle(0.5)),
        ])
        contacts = narrow_phase(model, [0, 0.5, 0])
        rec = ToiRecord(contact=contacts.contacts[0], q=np.array([0, 0.5 + 1e-12, 0.0]),
                        qd=np.array([1.0, -1e-10, 0.0]), gap=1e-12,
                        closing_speed=1e-10, toi=0.01)
        with pytest.raises(GrazingContact):
            toi_gradients(model, rec)


class TestBackwardStructure:
    def test_contact_free_is_dp1_dp2(self):
        # unit-seed assembly must reproduce the analytic one-step Jacobian
        model = MechanismModel(
            bodies=[Body(kind="link", mass=1.0, inertia=0.05),
                    Body(kind="link", mass=0.7, inertia=0.03)],
            chains=[Chain(base=(0, 2.0), links=(0, 1), lengths=(0.8, 0.6),
                          com_offsets=(0.6, 0.4))],
            gravity=(0.0, -9.8),
        )
        dof = 2
        q = np.array([0.3, -0.4])
        qd = np.array([0.5, 0.2])
        tau = np.array([0.1, -0.05])
        dt = 0.02
        res = step_full(model, SystemState(q, qd), tau, dt)
        # assemble [d(q',v')/d(q,v)] from unit seeds
        Jac = np.zeros((2 * dof, 2 * dof))
        for i in range(dof):
            seed = np.zeros(dof); seed[i] = 1.0
            b = backward(res.tape, seed, np.zeros(dof))
            Jac[i, :dof] = b.dq
            Jac[i, dof:] = b.dqd
            b = backward(res.tape, np.zeros(dof), seed)
            Jac[dof + i, :dof] = b.dq
            Jac[dof + i, dof:] = b.dqd
        # direct dense Jacobian from the propagation formulas
        M = mechanics.mass_matrix(model, q)
        c = mechanics.coriolis(model, q, qd)
        z = dt * (tau - c)
        ip = mechanics.inertial_partials(model, q, qd, z)
        Minv = np.linalg.inv(M)
        dvdq = ip.dMinv_z_dq + Minv @ (-dt * ip.dc_dq)
        dvdv = np.eye(dof) + Minv @ (-dt * ip.dc_dqd)
        direct = np.zeros((2 * dof, 2 * dof))
        direct[:dof, :dof] = np.eye(dof)            # dq'/dq
        direct[dof:, :dof] = dt * np.eye(dof)       # dq'/dv
        direct[:dof, dof:] = dvdq.T                 # rows are seeds
        direct[dof:, dof:] = dvdv.T
        assert np.abs(Jac - direct).max() <= 1e-10

    def test_position_seed_through_velocity(self):
        model = MechanismModel(bodies=[Body(kind="free", mass=1.5, inertia=0.2)],
                               gravity=(0.0, -10.0))
        res = step_full(model, SystemState([0, 5, 0], [1, 2, 0]), None, 0.1)
        for i in range(3):
            seed = np.zeros(3); seed[i] = 1.0
            b = backward(res.tape, seed, np.zeros(3))
            expect = np.zeros(3); expect[i] = 0.1
            assert np.allclose(b.dq, seed) and np.allclose(b.dqd, expect)

    def test_half_step_chaining_matches_single_step(self):
        # pure drift: one dt step and two dt/2 steps are the same map,
        # so chained bundles must agree
        model = MechanismModel(bodies=[Body(kind="free", mass=1.0, inertia=0.1)],
                               gravity=(0.0, 0.0))
        st = SystemState([0.3, 5.0, 0.1], [1.0, 2.0, -0.4])
        rng = np.random.default_rng(5)
        sq, sv = rng.normal(size=3), rng.normal(size=3)
        _, tapes_one, _ = simulate_trajectory(model, st.copy(), None, 0.1, 1)
        _, tapes_two, _ = simulate_trajectory(model, st.copy(), None, 0.05, 2)
        b1 = backward_trajectory(tapes_one, sq, sv)
        b2 = backward_trajectory(tapes_two, sq, sv)
        assert np.abs(b1.dq - b2.dq).max() <= 1e-8
        assert np.abs(b1.dqd - b2.dqd).max() <= 1e-8
        assert np.abs(b1.dm - b2.dm).max() <= 1e-8

    def test_bounce_height_gradient_sign(self):
        model = MechanismModel(bodies=[
            Body(kind="static", shape=HalfPlane((0.0, 1.0), 0.0), material=Material(1.0, 0.0)),
            Body(kind="free", mass=1.0, inertia=0.1, shape=Circle(0.5),
                 material=Material(1.0, 0.0)),
        ])
        st = SystemState([0, 1.04, 0], [0, -1.0, 0])
        _, tapes, _ = simulate_trajectory(model, st, None, 0.1, 10)
        b = backward_trajectory(tapes, np.array([0, 1.0, 0]), np.zeros(3))
        assert abs(b.dq[1] - (-1.0)) <= 1e-6
        _, tapes_d, _ = simulate_trajectory(model, SystemState([0, 1.04, 0], [0, -1.0, 0]),
                                            None, 0.1, 10, StepOptions(ccd=False))
        bd = backward_trajectory(tapes_d, np.array([0, 1.0, 0]), np.zeros(3))
        assert abs(bd.dq[1] - 1.0) <= 1e-6


class TestFiniteDifferenceCheck:
    def test_ballistic_exact(self):
        model = MechanismModel(bodies=[Body(kind="free", mass=1.0, inertia=0.1)],
                               gravity=(0.0, -10.0))
        st = SystemState([0, 5, 0], [1, 2, 0.3])
        rng = np.random.default_rng(6)
        loss = linear_state_loss(rng.normal(size=3), rng.normal(size=3))
        rep = finite_difference_check(model, st, None, 0.05, 10, loss)
        assert rep.max_rel_error <= 1e-9
        assert not rep.boundary_flag

    def test_one_bounce_within_tolerance(self):
        model = MechanismModel(bodies=[
            Body(kind="static", shape=HalfPlane((0.0, 1.0), 0.0), material=Material(0.8, 0.0)),
            Body(kind="free", mass=1.3, inertia=0.2, shape=Circle(0.4),
                 material=Material(0.8, 0.0)),
        ], gravity=(0.0, -9.8))
        st = SystemState([0.2, 1.5, 0.1], [0.5, -2.0, 0.2])
        rng = np.random.default_rng(7)
        loss = linear_state_loss(rng.normal(size=3), rng.normal(size=3))
        rep = finite_difference_check(model, st, None, 0.05, 8, loss,
                                      params=("q0", "qd0", "tau", "m", "dt"))
        assert rep.max_rel_error <= 1e-4
        assert not rep.boundary_flag

    def test_grazing_scene_is_flagged(self):
        # impact approach speed ~1e-6: eps-size perturbations straddle the
        # hit/miss boundary, so the report must carry the flag
        model = MechanismModel(bodies=[
            Body(kind="static", shape=HalfPlane((0.0, 1.0), 0.0), material=Material(1.0, 0.0)),
            Body(kind="free", mass=1.0, inertia=0.1, shape=Circle(0.5),
                 material=Material(1.0, 0.0)),
        ])
        st = SystemState([0, 0.5 + 5e-7, 0], [1.0, -1e-6, 0])
        loss = linear_state_loss([0, 1.0, 0], [0, 0, 0])
        rep = finite_difference_check(model, st, None, 0.1, 5, loss,
                                      params=("q0",), eps=1e-6)
        assert rep.boundary_flag

    def test_two_ball_strike(self):
        model = MechanismModel(bodies=[
            Body(kind="free", mass=1.0, inertia=0.001, shape=Circle(0.05),
                 material=Material(1.0, 0.0)),
            Body(kind="free", mass=1.0, inertia=0.001, shape=Circle(0.05),
                 material=Material(1.0, 0.0)),
        ], restitution_override=1.0, friction_override=0.0)
        st = SystemState([-0.4, 0, 0, 0, 0, 0], [4.0, -0.1, 0, 0, 0, 0])
        loss = target_position_loss([3, 4], [0.3, 0.2], 10.0)
        rep = finite_difference_check(model, st, None, 0.01, 20, loss,
                                      params=("q0", "qd0", "m", "dt"))
        assert rep.max_rel_error <= 1e-4
