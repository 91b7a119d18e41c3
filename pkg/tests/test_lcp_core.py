import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcp_random import random_contact_problem
from lcpsim.lcp import (
    DimensionMismatch,
    DimensionTooLarge,
    FrictionPair,
    LcpError,
    LcpProblem,
    LcpSolution,
    NoValidAssignment,
    format_problem,
    parse_problem_text,
    residual_gap,
    solve_enumerative,
    solve_pgs,
    validate_solution,
)


class TestProblemInvariants:
    def test_rejects_asymmetric(self):
        with pytest.raises(LcpError):
            LcpProblem(A=[[1.0, 0.5], [0.0, 1.0]], b=[0.0, 0.0])

    def test_rejects_indefinite(self):
        with pytest.raises(LcpError):
            LcpProblem(A=[[1.0, 0.0], [0.0, -1.0]], b=[0.0, 0.0])

    def test_rejects_bad_friction_order(self):
        with pytest.raises(LcpError):
            LcpProblem(A=np.eye(2), b=[0, 0], friction_pairs=[(0, 1, 0.5)])

    def test_rejects_negative_mu(self):
        with pytest.raises(LcpError):
            LcpProblem(A=np.eye(2), b=[0, 0], friction_pairs=[(1, 0, -0.1)])

    def test_rejects_friction_normal_chain(self):
        with pytest.raises(LcpError):
            LcpProblem(A=np.eye(3), b=[0, 0, 0],
                       friction_pairs=[(1, 0, 0.5), (2, 1, 0.5)])


class TestValidate:
    def test_clamped_contact_valid(self):
        p = LcpProblem(A=[[1.0]], b=[-1.0])
        s = LcpSolution(f=[1.0], a=[0.0], classes=("C",))
        assert validate_solution(p, s, 1e-8).valid

    def test_separated_contact_valid(self):
        p = LcpProblem(A=[[1.0]], b=[2.0])
        s = LcpSolution(f=[0.0], a=[2.0], classes=("N",))
        assert validate_solution(p, s, 1e-8).valid

    def test_negative_residual_invalid(self):
        p = LcpProblem(A=[[1.0]], b=[-1.0])
        s = LcpSolution(f=[0.0], a=[-1.0], classes=("N",))
        report = validate_solution(p, s, 1e-8)
        assert not report.valid
        assert any(v.condition == "normal_residual_nonneg" for v in report.violations)

    def test_dimension_mismatch(self):
        p = LcpProblem(A=[[1.0]], b=[-1.0])
        s = LcpSolution(f=[1.0, 0.0], a=[0.0, 0.0], classes=("C", "N"))
        with pytest.raises(DimensionMismatch):
            validate_solution(p, s, 1e-8)

    def test_friction_cone_violation_detected(self):
        p = LcpProblem(A=np.eye(2), b=[-1.0, 0.0], friction_pairs=[(1, 0, 0.5)])
        s = LcpSolution(f=[1.0, 0.9], a=[0.0, 0.9], classes=("C", "H"))
        report = validate_solution(p, s, 1e-8)
        assert not report.valid
        assert any(v.condition == "friction_cone" for v in report.violations)


class TestEnumerative:
    def test_two_clamped(self):
        p = LcpProblem(A=[[2.0, 1.0], [1.0, 2.0]], b=[-1.0, -1.0])
        s = solve_enumerative(p)
        assert np.allclose(s.f, [1.0 / 3.0, 1.0 / 3.0], atol=1e-12)
        assert s.classes == ("C", "C")

    def test_friction_at_upper_bound(self):
        p = LcpProblem(A=np.eye(2), b=[-1.0, -2.0], friction_pairs=[(1, 0, 0.5)])
        s = solve_enumerative(p)
        assert np.allclose(s.f, [1.0, 0.5], atol=1e-12)
        assert s.classes == ("C", "H")

    def test_sliding_couples_into_normal(self):
        p = LcpProblem(A=[[1.0, 0.2], [0.2, 1.0]], b=[-1.0, -3.0],
                       friction_pairs=[(1, 0, 1.0)])
        s = solve_enumerative(p)
        assert np.allclose(s.f, [5.0 / 6.0, 5.0 / 6.0], atol=1e-12)
        assert s.classes == ("C", "H")

    def test_dimension_limit(self):
        p = LcpProblem(A=np.eye(9), b=np.ones(9))
        with pytest.raises(DimensionTooLarge):
            solve_enumerative(p, limit=8)

    def test_random_problems_always_solve(self):
        rng = np.random.default_rng(42)
        for _ in range(150):
            p = random_contact_problem(rng, int(rng.integers(1, 4)),
                                       frictional=bool(rng.integers(0, 2)))
            if p.dim > 6:
                continue
            s = solve_enumerative(p)
            assert validate_solution(p, s, 1e-8).valid
            assert residual_gap(p, s) <= 1e-8 * (1.0 + abs(p.b).max())

    def test_lexicographic_tie_break(self):
        # f = 0, a = 0 satisfies both (C) and (N); C is lexicographically first
        p = LcpProblem(A=[[1.0]], b=[0.0])
        s = solve_enumerative(p)
        assert s.classes == ("C",)


class TestPgs:
    def test_fixed_point(self):
        p = LcpProblem(A=[[1.0]], b=[-1.0])
        s = solve_pgs(p, iters=50)
        assert abs(s.f[0] - 1.0) < 1e-6

    def test_projection_clamps(self):
        p = LcpProblem(A=[[1.0]], b=[2.0])
        s = solve_pgs(p, iters=1)
        assert s.f[0] == 0.0

    def test_converges_to_oracle(self):
        p = LcpProblem(A=[[2.0, 1.0], [1.0, 2.0]], b=[-1.0, -1.0])
        s = solve_pgs(p, iters=200)
        assert np.abs(s.f - np.array([1.0 / 3.0, 1.0 / 3.0])).max() < 1e-5

    def test_bad_arguments(self):
        p = LcpProblem(A=[[1.0]], b=[-1.0])
        with pytest.raises(ValueError):
            solve_pgs(p, iters=0)
        with pytest.raises(ValueError):
            solve_pgs(p, relax=1.5)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_residual_identity(self, seed):
        # returned a always equals A f + b exactly as recomputed
        rng = np.random.default_rng(seed)
        p = random_contact_problem(rng, int(rng.integers(1, 4)))
        s = solve_pgs(p, iters=20)
        assert residual_gap(p, s) <= 1e-12


class TestValidatorSharpness:
    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_perturbed_clamped_force_fails(self, seed):
        rng = np.random.default_rng(seed)
        p = random_contact_problem(rng, int(rng.integers(1, 3)), frictional=False)
        if p.dim > 6:
            return
        s = solve_enumerative(p)
        eps = 1e-3
        for i in range(p.dim):
            # sharp only where the complementarity product responds to f_i
            if s.classes[i] != "C" or s.f[i] * p.A[i, i] < 0.6:
                continue
            f2 = s.f.copy()
            f2[i] += eps
            a2 = p.A @ f2 + p.b
            report = validate_solution(p, LcpSolution(f=f2, a=a2, classes=s.classes),
                                       tol=eps / 2.0)
            assert not report.valid
            assert any(v.condition == "complementarity" for v in report.violations)


class TestProblemFile:
    def test_round_trip(self):
        p = LcpProblem(A=[[1.0, 0.2], [0.2, 1.0]], b=[-1.0, -3.0],
                       friction_pairs=[FrictionPair(1, 0, 1.0)])
        p2 = parse_problem_text(format_problem(p))
        assert np.array_equal(p.A, p2.A)
        assert np.array_equal(p.b, p2.b)
        assert p.friction_pairs == p2.friction_pairs

    def test_parse_errors(self):
        with pytest.raises(ValueError):
            parse_problem_text("")
        with pytest.raises(ValueError):
            parse_problem_text("2\n1 0\n0 1\n1\n")  # short b line
        with pytest.raises(ValueError):
            parse_problem_text("1\n1\n-1\nnonsense 0 0 0\n")
