import numpy as np
import pytest

from lcpsim.collision import (
    Circle,
    ConvexPolygon,
    HalfPlane,
    box,
    contact_jacobian,
    contact_rows,
    min_gap,
    narrow_phase,
    pair_distance,
)
from lcpsim.mechanics import Body, Chain, Material, MechanismModel


def floor_circle_model(radius=0.5):
    return MechanismModel(bodies=[
        Body(kind="static", shape=HalfPlane((0.0, 1.0), 0.0), name="floor"),
        Body(kind="free", mass=1.0, inertia=0.1, shape=Circle(radius), name="ball"),
    ], gravity=(0.0, -10.0))


def floor_box_model(hw=0.5, hh=0.5):
    return MechanismModel(bodies=[
        Body(kind="static", shape=HalfPlane((0.0, 1.0), 0.0)),
        Body(kind="free", mass=1.0, inertia=0.2, shape=box(hw, hh)),
    ], gravity=(0.0, -10.0))


class TestShapes:
    def test_circle_needs_positive_radius(self):
        with pytest.raises(ValueError):
            Circle(0.0)

    def test_polygon_must_be_convex_ccw(self):
        with pytest.raises(ValueError):
            ConvexPolygon(((0, 0), (0, 1), (1, 0)))  # cw
        with pytest.raises(ValueError):
            ConvexPolygon(((0, 0), (1, 0)))  # too few

    def test_halfplane_unit_normal(self):
        with pytest.raises(ValueError):
            HalfPlane((0.0, 2.0), 0.0)


class TestNarrowPhase:
    def test_circle_above_floor(self):
        cs = narrow_phase(floor_circle_model(), [0.0, 0.4, 0.0])
        assert len(cs) == 1
        c = cs.contacts[0]
        assert abs(c.gap - (-0.1)) < 1e-12
        assert np.allclose(c.normal, [0.0, 1.0])

    def test_box_resting_two_contacts(self):
        cs = narrow_phase(floor_box_model(), [0.0, 0.5, 0.0])
        assert len(cs) == 2
        assert all(abs(c.gap) < 1e-12 for c in cs.contacts)

    def test_distant_circles_empty(self):
        model = MechanismModel(bodies=[
            Body(kind="free", mass=1.0, inertia=0.1, shape=Circle(1.0)),
            Body(kind="free", mass=1.0, inertia=0.1, shape=Circle(1.0)),
        ])
        cs = narrow_phase(model, [0, 0, 0, 3.0, 0, 0])
        assert len(cs) == 0

    def test_box_box_face_contact(self):
        model = MechanismModel(bodies=[
            Body(kind="free", mass=1.0, inertia=0.2, shape=box(0.5, 0.5)),
            Body(kind="free", mass=1.0, inertia=0.2, shape=box(0.5, 0.5)),
        ])
        cs = narrow_phase(model, [0, 0, 0, 1.0, 0, 0])
        assert len(cs) == 2
        assert all(np.allclose(c.normal, [1.0, 0.0]) for c in cs.contacts)

    def test_deterministic_ordering(self):
        model = floor_box_model()
        a = narrow_phase(model, [0.0, 0.5, 0.0])
        b = narrow_phase(model, [0.0, 0.5, 0.0])
        assert [c.sort_key() for c in a.contacts] == [c.sort_key() for c in b.contacts]

    def test_friction_rows_follow_normals(self):
        cs = narrow_phase(floor_box_model(), [0.0, 0.5, 0.0])
        pairs = cs.friction_pairs
        assert [(p.index, p.normal) for p in pairs] == [(1, 0), (3, 2)]


class TestJacobian:
    def test_circle_on_floor_rows(self):
        model = floor_circle_model()
        cs = narrow_phase(model, [0.0, 0.45, 0.3])
        J = cs.jacobian
        assert np.allclose(J[0], [0.0, 1.0, 0.0], atol=1e-12)
        assert np.allclose(J[1], [1.0, 0.0, 0.5], atol=1e-12)  # lever = radius

    def test_pendulum_tip_row_is_height_gradient(self):
        model = MechanismModel(
            bodies=[Body(kind="static", shape=HalfPlane((0.0, 1.0), 0.0)),
                    Body(kind="link", mass=1.0, inertia=0.01,
                         shape=Circle(0.05, center=(1.0, 0.0)))],
            chains=[Chain(base=(0.0, 1.0), links=(1,), lengths=(1.0,),
                          com_offsets=(0.9,))],
            gravity=(0.0, -9.8),
        )
        q = [-1.1]
        cs = narrow_phase(model, q, slop=0.2)
        assert len(cs) == 1
        h = 1e-7
        _, _, gp = contact_rows(model, [q[0] + h], cs.contacts[0])
        _, _, gm = contact_rows(model, [q[0] - h], cs.contacts[0])
        fd = (gp - gm) / (2 * h)
        assert abs(fd - cs.jacobian[0, 0]) < 1e-6

    def test_zero_force_zero_gradient(self):
        model = floor_circle_model()
        q = [0.0, 0.45, 0.0]
        cs = narrow_phase(model, q)
        _, evaluator = contact_jacobian(model, q, cs.contacts)
        out = evaluator(np.zeros(2 * len(cs)))
        assert np.allclose(out, 0.0)

    @pytest.mark.parametrize("model_fn,q", [
        (floor_circle_model, [0.1, 0.48, 0.6]),
        (floor_box_model, [0.05, 0.49, 0.02]),
    ])
    def test_rows_match_gap_finite_difference(self, model_fn, q):
        model = model_fn()
        cs = narrow_phase(model, q, slop=0.05)
        assert len(cs) >= 1
        h = 1e-7
        for c in cs.contacts:
            for d in range(model.dof):
                qp = list(q)
                qm = list(q)
                qp[d] += h
                qm[d] -= h
                _, _, gp = contact_rows(model, qp, c)
                _, _, gm = contact_rows(model, qm, c)
                fd = (gp - gm) / (2 * h)
                row = contact_rows(model, q, c)[0]
                assert abs(fd - row[d]) < 1e-6

    def test_tangential_row_matches_offset_finite_difference(self):
        # relative tangential velocity: finite-difference the tangential
        # displacement of the witness material points along the motion
        model = floor_circle_model()
        q = np.array([0.0, 0.5, 0.0])
        cs = narrow_phase(model, q, slop=0.05)
        c = cs.contacts[0]
        rng = np.random.default_rng(4)
        for _ in range(5):
            qd = rng.normal(size=3)
            row_n, row_t, _ = contact_rows(model, list(q), c)
            # spinning contributes r*omega to the tangential rate
            expect_t = qd[0] + 0.5 * qd[2]
            assert abs(np.dot(row_t, qd) - expect_t) < 1e-12
            assert abs(np.dot(row_n, qd) - qd[1]) < 1e-12


class TestPairDistance:
    def test_matches_narrow_phase_gaps(self):
        model = floor_circle_model()
        assert abs(pair_distance(model, [0, 0.4, 0], 0, 1) - (-0.1)) < 1e-12
        assert abs(pair_distance(model, [0, 2.0, 0], 0, 1) - 1.5) < 1e-12

    def test_box_box_signed(self):
        model = MechanismModel(bodies=[
            Body(kind="free", mass=1.0, inertia=0.2, shape=box(0.5, 0.5)),
            Body(kind="free", mass=1.0, inertia=0.2, shape=box(0.5, 0.5)),
        ])
        assert abs(pair_distance(model, [0, 0, 0, 2.0, 0, 0], 0, 1) - 1.0) < 1e-12
        assert abs(pair_distance(model, [0, 0, 0, 0.9, 0, 0], 0, 1) - (-0.1)) < 1e-12

    def test_min_gap_empty_scene(self):
        model = MechanismModel(bodies=[Body(kind="free", mass=1.0, inertia=0.1)])
        assert min_gap(model, [0, 0, 0]) == np.inf
