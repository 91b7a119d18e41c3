"""Linear complementarity problems for contact dynamics.

Convention: a = A f + b with complementarity between f and a.  A normal
index obeys 0 <= f_i, 0 <= a_i, f_i a_i = 0.  A friction index i is tied to
a normal index N(i) and obeys the boxed Coulomb conditions

    |f_i| <= mu f_N(i),   a_i f_i <= 0,   a_i (mu f_N(i) - |f_i|) = 0.

The containers are unit-agnostic: stepping feeds impulses and post-step
contact velocities, collision response feeds restitution terms through b.
Solvers never interpret units.

This module holds the problem/solution types, the condition validator, an
exhaustive class-enumeration solver used as ground truth at small sizes, and
projected Gauss-Seidel as an approximate reference.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

NORMAL_CLASSES = ("C", "N")
FRICTION_CLASSES = ("F", "H", "L")

SYMMETRY_RTOL = 1e-9
EIG_FLOOR = -1e-9


class LcpError(Exception):
    """Base class for LCP construction and solver failures."""


class DimensionMismatch(LcpError):
    pass


class DimensionTooLarge(LcpError):
    pass


class NoValidAssignment(LcpError):
    """No class assignment produced a solution satisfying the conditions."""


class SingularBlock(LcpError):
    """A clamped principal block could not be factored."""


class UnboundedRay(LcpError):
    """No finite blocking step exists; the problem is inconsistent."""


@dataclass(frozen=True)
class FrictionPair:
    """Friction row ``index`` bounded by ``mu`` times the force at ``normal``."""

    index: int
    normal: int
    mu: float


@dataclass
class LcpProblem:
    A: np.ndarray
    b: np.ndarray
    friction_pairs: tuple[FrictionPair, ...] = ()

    def __post_init__(self):
        self.A = np.array(self.A, dtype=float)
        self.b = np.array(self.b, dtype=float)
        self.friction_pairs = tuple(
            p if isinstance(p, FrictionPair) else FrictionPair(*p)
            for p in self.friction_pairs
        )
        _check_problem(self)

    @property
    def dim(self) -> int:
        return len(self.b)

    @property
    def friction_index_map(self) -> dict[int, FrictionPair]:
        return {p.index: p for p in self.friction_pairs}

    @property
    def normal_indices(self) -> list[int]:
        taken = {p.index for p in self.friction_pairs}
        return [i for i in range(self.dim) if i not in taken]


def _check_problem(p: LcpProblem):
    n = p.dim
    if p.A.shape != (n, n):
        raise DimensionMismatch(f"A has shape {p.A.shape}, expected ({n}, {n})")
    scale = 1.0 + (abs(p.A).max() if n else 0.0)
    if n and abs(p.A - p.A.T).max() > SYMMETRY_RTOL * scale:
        raise LcpError("A is not symmetric")
    if n and np.linalg.eigvalsh(0.5 * (p.A + p.A.T)).min() < EIG_FLOOR:
        raise LcpError("A is not positive semidefinite")
    seen = set()
    for pair in p.friction_pairs:
        if not (0 <= pair.index < n and 0 <= pair.normal < n):
            raise LcpError(f"friction pair {pair} out of range")
        if pair.index in seen:
            raise LcpError(f"friction index {pair.index} mapped twice")
        seen.add(pair.index)
        if pair.normal >= pair.index:
            raise LcpError(f"friction pair {pair}: normal index must precede it")
        if pair.mu < 0:
            raise LcpError(f"friction pair {pair}: mu must be nonnegative")
    for pair in p.friction_pairs:
        if pair.normal in seen:
            raise LcpError(f"normal index {pair.normal} is itself a friction index")


@dataclass
class LcpSolution:
    f: np.ndarray
    a: np.ndarray
    classes: tuple[str, ...]

    def __post_init__(self):
        self.f = np.array(self.f, dtype=float)
        self.a = np.array(self.a, dtype=float)
        self.classes = tuple(self.classes)

    @property
    def dim(self) -> int:
        return len(self.f)


def residual_gap(problem: LcpProblem, solution: LcpSolution) -> float:
    """Max-norm of a - (A f + b); should be ~0 for a consistent solution."""
    r = solution.a - (problem.A @ solution.f + problem.b)
    return float(abs(r).max()) if len(r) else 0.0


@dataclass
class Violation:
    index: int
    condition: str
    amount: float


@dataclass
class ValidationReport:
    valid: bool
    worst_violation: float
    tol: float
    violations: list[Violation] = field(default_factory=list)


def _condition_amounts(f, a, fmap):
    """Yield (index, condition, amount) for every complementarity condition.

    Amounts measure how far the exact (tolerance-free) condition is broken;
    they are all >= 0 and a perfect solution scores 0 everywhere.
    """
    n = len(f)
    for i in range(n):
        pair = fmap.get(i)
        if pair is None:
            yield i, "normal_residual_nonneg", max(0.0, -a[i])
            yield i, "normal_force_nonneg", max(0.0, -f[i])
            yield i, "complementarity", abs(f[i] * a[i])
        else:
            bound = pair.mu * f[pair.normal]
            yield i, "friction_cone", max(0.0, abs(f[i]) - bound)
            yield i, "friction_dissipation", max(0.0, a[i] * f[i])
            yield i, "friction_complementarity", max(0.0, abs(a[i]) * (bound - abs(f[i])))


def check_values(f, a, fmap, tol):
    """Worst violation and the list of conditions breaking ``tol``."""
    worst = 0.0
    bad = []
    for idx, cond, amount in _condition_amounts(f, a, fmap):
        if amount > worst:
            worst = amount
        if amount > tol:
            bad.append(Violation(idx, cond, float(amount)))
    return worst, bad


def validate_solution(problem: LcpProblem, solution: LcpSolution, tol: float) -> ValidationReport:
    """Check every sign/complementarity condition of ``solution`` against ``tol``."""
    if solution.dim != problem.dim:
        raise DimensionMismatch(
            f"solution dim {solution.dim} != problem dim {problem.dim}"
        )
    if tol <= 0:
        raise ValueError("tol must be positive")
    worst, bad = check_values(solution.f, solution.a, problem.friction_index_map, tol)
    return ValidationReport(worst <= tol, float(worst), tol, bad)


def solve_for_classes(A, b, fmap, classes):
    """Solve the linear system pinned by a class assignment.

    Rows in C/F keep zero residual, N rows keep zero force, H/L rows are
    slaved to +/- mu times their normal force.  Returns (f, a) or None when
    the active block is singular.
    """
    n = len(b)
    f = np.zeros(n)
    folded = A.copy()
    for i, cls in enumerate(classes):
        if cls == "H":
            pair = fmap[i]
            folded[:, pair.normal] += pair.mu * folded[:, i]
        elif cls == "L":
            pair = fmap[i]
            folded[:, pair.normal] -= pair.mu * folded[:, i]
    active = [i for i, cls in enumerate(classes) if cls in ("C", "F")]
    if active:
        block = folded[np.ix_(active, active)]
        try:
            sol = np.linalg.solve(block, -b[np.asarray(active)])
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        f[active] = sol
    for i, cls in enumerate(classes):
        if cls == "H":
            pair = fmap[i]
            f[i] = pair.mu * f[pair.normal]
        elif cls == "L":
            pair = fmap[i]
            f[i] = -pair.mu * f[pair.normal]
    a = A @ f + b
    return f, a


def solve_enumerative(problem: LcpProblem, limit: int = 8) -> LcpSolution:
    """Ground-truth solver: try every class assignment in lexicographic order.

    Class order is C < N for normal indices and F < H < L for friction
    indices, so ties between valid assignments resolve deterministically.
    Assignments with a singular active block are skipped.
    """
    n = problem.dim
    if n > limit:
        raise DimensionTooLarge(f"dim {n} exceeds enumeration limit {limit}")
    fmap = problem.friction_index_map
    options = [FRICTION_CLASSES if i in fmap else NORMAL_CLASSES for i in range(n)]
    for classes in itertools.product(*options):
        res = solve_for_classes(problem.A, problem.b, fmap, classes)
        if res is None:
            continue
        f, a = res
        worst, _ = check_values(f, a, fmap, tol=1e-8)
        if worst <= 1e-8:
            return LcpSolution(f=f, a=a, classes=classes)
    raise NoValidAssignment(f"no class assignment validates for dim {n}")


def classify_values(problem: LcpProblem, f, a, eps: float = 1e-7) -> tuple[str, ...]:
    """Nearest class labels for approximate (f, a) values."""
    fmap = problem.friction_index_map
    classes = []
    for i in range(problem.dim):
        pair = fmap.get(i)
        if pair is None:
            classes.append("C" if f[i] > eps else "N")
        else:
            bound = max(pair.mu * f[pair.normal], 0.0)
            slack = eps * (1.0 + bound)
            if f[i] >= bound - slack:
                classes.append("H")
            elif f[i] <= -bound + slack:
                classes.append("L")
            else:
                classes.append("F")
    return tuple(classes)


def solve_pgs(problem: LcpProblem, iters: int = 100, relax: float = 1.0) -> LcpSolution:
    """Projected Gauss-Seidel sweeps; approximate reference solver.

    Normal forces project onto [0, inf), friction forces onto the box
    [-mu f_N, +mu f_N] using the current normal values.  Convergence is not
    guaranteed; the last iterate is returned with a recomputed exactly.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not 0.0 < relax <= 1.0:
        raise ValueError("relax must be in (0, 1]")
    A, b = problem.A, problem.b
    fmap = problem.friction_index_map
    n = problem.dim
    f = np.zeros(n)
    for _ in range(iters):
        for i in range(n):
            diag = A[i, i]
            if diag <= 1e-300:
                continue
            ai = A[i] @ f + b[i]
            fi = f[i] - relax * ai / diag
            pair = fmap.get(i)
            if pair is None:
                f[i] = max(0.0, fi)
            else:
                bound = max(pair.mu * f[pair.normal], 0.0)
                f[i] = min(max(fi, -bound), bound)
    a = A @ f + b
    return LcpSolution(f=f, a=a, classes=classify_values(problem, f, a))


def parse_problem_text(text: str) -> LcpProblem:
    """Parse the textual problem format.

    Line 1: n.  Next n lines: rows of A.  Next line: b.  Then zero or more
    lines ``friction <i> <N(i)> <mu>``.
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ValueError("empty problem file")
    try:
        n = int(lines[0])
    except ValueError as exc:
        raise ValueError(f"first line must be the dimension, got {lines[0]!r}") from exc
    if len(lines) < n + 2:
        raise ValueError(f"expected {n} matrix rows plus a b line")
    rows = []
    for k in range(n):
        parts = lines[1 + k].split()
        if len(parts) != n:
            raise ValueError(f"matrix row {k} has {len(parts)} entries, expected {n}")
        rows.append([float(x) for x in parts])
    b_parts = lines[1 + n].split()
    if len(b_parts) != n:
        raise ValueError(f"b line has {len(b_parts)} entries, expected {n}")
    b = [float(x) for x in b_parts]
    pairs = []
    for ln in lines[2 + n:]:
        parts = ln.split()
        if parts[0] != "friction" or len(parts) != 4:
            raise ValueError(f"unrecognized trailing line {ln!r}")
        pairs.append(FrictionPair(int(parts[1]), int(parts[2]), float(parts[3])))
    return LcpProblem(A=np.array(rows), b=np.array(b), friction_pairs=tuple(pairs))


def read_problem(path) -> LcpProblem:
    with open(path) as fh:
        return parse_problem_text(fh.read())


def format_problem(problem: LcpProblem) -> str:
    out = [str(problem.dim)]
    for row in problem.A:
        out.append(" ".join(repr(float(x)) for x in row))
    out.append(" ".join(repr(float(x)) for x in problem.b))
    for pair in problem.friction_pairs:
        out.append(f"friction {pair.index} {pair.normal} {pair.mu!r}")
    return "\n".join(out) + "\n"
