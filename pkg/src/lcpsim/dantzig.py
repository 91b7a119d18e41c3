"""Pivoting LCP solver with moving-bound friction steps and an enumerative fallback.

The drive loop raises one force component at a time, re-solving the clamped
block so maintained rows keep their class, and blocking whenever some row
reaches a class boundary.  Working sets use the usual contact-solver labels:
C (clamped, zero residual) and N (separated, zero force) for normal rows;
F (static friction, force inside the cone), H and L (sliding at the upper or
lower bound) for friction rows.

For friction rows the bound mu * f_N moves while the normal force changes,
so a blocking step measures the distance to the bound against the relative
rate Delta f_i -/+ mu Delta f_N.  The historical step that divides by
Delta f_i alone overshoots or undershoots moving bounds and is kept behind
``legacy_max_step`` as a regression witness.

The drive loop is not guaranteed to terminate for frictional problems.  When
a (driven index, working-set) configuration repeats, or the pivot budget is
exhausted, the solver switches to an enumerative search over class
assignments of the touched indices, ordered by Hamming distance from the
current assignment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations, product

import numpy as np

from .lcp import (
    FRICTION_CLASSES,
    NORMAL_CLASSES,
    LcpProblem,
    LcpSolution,
    NoValidAssignment,
    SingularBlock,
    UnboundedRay,
    check_values,
    solve_for_classes,
)

UPPER = "+"
LOWER = "-"

#: values this close to a class boundary classify onto the boundary class
BOUNDARY_EPS = 1e-10


@dataclass
class WorkingSets:
    """Partition of indices into solver classes plus the untouched remainder."""

    n: int
    cc: set = field(default_factory=set)
    cn: set = field(default_factory=set)
    ccf: set = field(default_factory=set)
    cnh: set = field(default_factory=set)
    cnl: set = field(default_factory=set)

    @property
    def untouched(self) -> set:
        placed = self.cc | self.cn | self.ccf | self.cnh | self.cnl
        return set(range(self.n)) - placed

    def snapshot(self):
        return (
            frozenset(self.cc),
            frozenset(self.cn),
            frozenset(self.ccf),
            frozenset(self.cnh),
            frozenset(self.cnl),
        )

    def class_of(self, i: int) -> str | None:
        for name, members in (
            ("C", self.cc),
            ("N", self.cn),
            ("F", self.ccf),
            ("H", self.cnh),
            ("L", self.cnl),
        ):
            if i in members:
                return name
        return None

    def set_class(self, i: int, cls: str):
        for members in (self.cc, self.cn, self.ccf, self.cnh, self.cnl):
            members.discard(i)
        {"C": self.cc, "N": self.cn, "F": self.ccf, "H": self.cnh, "L": self.cnl}[cls].add(i)

    def classes(self) -> tuple[str, ...]:
        out = []
        for i in range(self.n):
            cls = self.class_of(i)
            if cls is None:
                raise ValueError(f"index {i} is unclassified")
            out.append(cls)
        return tuple(out)

    def check_partition(self, fmap):
        groups = [self.cc, self.cn, self.ccf, self.cnh, self.cnl, self.untouched]
        union = set()
        total = 0
        for g in groups:
            union |= g
            total += len(g)
        if union != set(range(self.n)) or total != self.n:
            raise AssertionError("working sets do not partition the index range")
        for i in self.cc | self.cn:
            if i in fmap:
                raise AssertionError(f"friction index {i} in a normal set")
        for i in self.ccf | self.cnh | self.cnl:
            if i not in fmap:
                raise AssertionError(f"normal index {i} in a friction set")
            if fmap[i].normal in self.untouched:
                raise AssertionError(f"friction index {i} placed before its normal")


@dataclass
class PivotTrace:
    """Ordered pivot record: (driven index, blocking index, step, set hash)."""

    records: list = field(default_factory=list)
    loop_detected: bool = False
    ergodic_resolutions: int = 0

    @property
    def pivot_count(self) -> int:
        return len(self.records)


def solve_df(k: int, sets: WorkingSets, A: np.ndarray) -> np.ndarray:
    """Force increment driving index k while clamped residuals stay zero."""
    n = A.shape[0]
    df = np.zeros(n)
    df[k] = 1.0
    cc = sorted(sets.cc)
    if cc:
        try:
            sol = np.linalg.solve(A[np.ix_(cc, cc)], A[np.asarray(cc), k])
        except np.linalg.LinAlgError as exc:
            raise SingularBlock(f"clamped block {cc} is singular") from exc
        if not np.all(np.isfinite(sol)):
            raise SingularBlock(f"clamped block {cc} is numerically singular")
        df[cc] = -sol
    return df


def solve_df_friction(k, sets: WorkingSets, A, fmap, a_k_sign) -> np.ndarray:
    """Drive increment with H/L columns folded into their normal columns.

    Sliding rows keep f_i = +/- mu f_N, so their force rates are slaved to
    the normal rates; folding accounts for that inside the clamped solve.
    The drive direction follows the sign of the driven residual.
    """
    n = A.shape[0]
    df = np.zeros(n)
    folded = A.copy()
    for i in sorted(sets.cnh):
        pair = fmap[i]
        folded[:, pair.normal] += pair.mu * folded[:, i]
    for i in sorted(sets.cnl):
        pair = fmap[i]
        folded[:, pair.normal] -= pair.mu * folded[:, i]
    drive = 1.0 if a_k_sign < 0 else -1.0
    df[k] = drive
    active = sorted(sets.cc | sets.ccf)
    if active:
        block = folded[np.ix_(active, active)]
        try:
            sol = np.linalg.solve(block, A[np.asarray(active), k])
        except np.linalg.LinAlgError as exc:
            raise SingularBlock(f"active block {active} is singular") from exc
        if not np.all(np.isfinite(sol)):
            raise SingularBlock(f"active block {active} is numerically singular")
        df[active] = -drive * sol
    for i in sorted(sets.cnh):
        pair = fmap[i]
        df[i] = pair.mu * df[pair.normal]
    for i in sorted(sets.cnl):
        pair = fmap[i]
        df[i] = -pair.mu * df[pair.normal]
    return df


def _push(cands, s, idx, boundary=None):
    if not np.isfinite(s) or s < -1e-9:
        return
    cands.append((max(float(s), 0.0), idx, boundary))


def _pick(cands, k):
    if not cands:
        raise UnboundedRay("no finite blocking step")
    # smallest step wins; the driven index loses ties; then smallest index
    return min(cands, key=lambda c: (c[0], 1 if c[1] == k else 0, c[1]))


def max_step(k, f, df, a, da, sets: WorkingSets):
    """Largest step keeping all classes valid; returns (step, blocking index)."""
    cands = []
    for i in sorted(sets.cc):
        if df[i] < 0.0:
            _push(cands, -f[i] / df[i], i)
    for i in sorted(sets.cn):
        if da[i] < 0.0:
            _push(cands, -a[i] / da[i], i)
    if da[k] > 0.0:
        _push(cands, -a[k] / da[k], k)
    s, j, _ = _pick(cands, k)
    return s, j


def _bound_candidates(cands, i, f, df, fmap, legacy):
    """Blocking steps for a friction force approaching its moving cone bound."""
    pair = fmap[i]
    fn = f[pair.normal]
    dfn = df[pair.normal]
    bound = pair.mu * fn
    if legacy:
        # historical form: treats the bound as frozen during the step
        if df[i] > 0.0:
            _push(cands, (bound - f[i]) / df[i], i, UPPER)
        elif df[i] < 0.0:
            _push(cands, (-bound - f[i]) / df[i], i, LOWER)
        return
    den_upper = df[i] - pair.mu * dfn
    if den_upper > 0.0:
        _push(cands, (bound - f[i]) / den_upper, i, UPPER)
    den_lower = df[i] + pair.mu * dfn
    if den_lower < 0.0:
        _push(cands, (-bound - f[i]) / den_lower, i, LOWER)


def max_step_friction(k, f, df, a, da, sets: WorkingSets, fmap, legacy: bool = False):
    """Largest class-preserving step for the frictional drive.

    Returns (step, blocking index, boundary) where boundary marks which cone
    bound a friction force reached (UPPER/LOWER) or None for residual stops.
    """
    cands = []
    for i in sorted(sets.cc):
        if df[i] < 0.0:
            _push(cands, -f[i] / df[i], i)
    for i in sorted(sets.ccf):
        _bound_candidates(cands, i, f, df, fmap, legacy)
    # residual-zero blocks; the eps slack lets rounding noise on the wrong
    # side of zero still produce an immediate (step 0) block
    for i in sorted(sets.cn | sets.cnl):
        if da[i] < 0.0 and a[i] >= -1e-9:
            _push(cands, -a[i] / da[i], i)
    for i in sorted(sets.cnh):
        if da[i] > 0.0 and a[i] <= 1e-9:
            _push(cands, -a[i] / da[i], i)
    if a[k] < 0.0 and da[k] > 0.0:
        _push(cands, -a[k] / da[k], k)
    elif a[k] > 0.0 and da[k] < 0.0:
        _push(cands, -a[k] / da[k], k)
    if k in fmap:
        _bound_candidates(cands, k, f, df, fmap, legacy)
    return _pick(cands, k)


def transit_set(j, sets: WorkingSets, driven: bool = False) -> WorkingSets:
    """Move a blocked index across the C/N boundary (frictionless case)."""
    if j in sets.cc:
        sets.cc.discard(j)
        sets.cn.add(j)
    elif j in sets.cn:
        sets.cn.discard(j)
        sets.cc.add(j)
    elif driven:
        sets.cc.add(j)
    else:
        raise ValueError(f"index {j} is in no set and not the driven index")
    return sets


def transit_set_friction(j, sets: WorkingSets, df, fmap, context=None) -> WorkingSets:
    """Move a blocked or finished index to its neighbor class.

    ``context`` carries which cone bound was hit (UPPER/LOWER) when the
    blocking candidate was a bound hit; for a finishing driven index None
    means it stopped with zero residual.
    """
    if j in sets.cc:
        sets.cc.discard(j)
        sets.cn.add(j)
    elif j in sets.cn:
        sets.cn.discard(j)
        sets.cc.add(j)
    elif j in sets.ccf:
        sets.ccf.discard(j)
        side = context if context in (UPPER, LOWER) else (UPPER if df[j] > 0 else LOWER)
        (sets.cnh if side == UPPER else sets.cnl).add(j)
    elif j in sets.cnh:
        sets.cnh.discard(j)
        sets.ccf.add(j)
    elif j in sets.cnl:
        sets.cnl.discard(j)
        sets.ccf.add(j)
    else:
        # finishing driven index
        if context == UPPER:
            sets.cnh.add(j)
        elif context == LOWER:
            sets.cnl.add(j)
        elif j in fmap:
            sets.ccf.add(j)
        else:
            sets.cc.add(j)
    return sets


def _zone_class(k, f, a, fmap, eps):
    """Class label if (f_k, a_k) already sits in its solution zone, else None.

    Values within ``eps`` of a boundary take the boundary class: C over N,
    bound classes over F.
    """
    pair = fmap.get(k)
    if pair is None:
        if abs(a[k]) <= eps and f[k] >= -eps:
            return "C"
        if abs(f[k]) <= eps and a[k] >= -eps:
            return "N"
        return None
    bound = max(pair.mu * f[pair.normal], 0.0)
    if abs(f[k] - bound) <= eps and a[k] <= eps:
        return "H"
    if abs(f[k] + bound) <= eps and a[k] >= -eps:
        return "L"
    if abs(a[k]) <= eps and abs(f[k]) <= bound + eps:
        return "F"
    return None


def _assignments_by_hamming(current, options):
    """All class assignments ordered by Hamming distance from ``current``.

    Within one distance, flip positions enumerate lexicographically and
    replacement classes follow the class order, so the order is total and
    deterministic.
    """
    m = len(current)
    yield tuple(current)
    for dist in range(1, m + 1):
        for positions in combinations(range(m), dist):
            alternatives = [
                [c for c in options[p] if c != current[p]] for p in positions
            ]
            for combo in product(*alternatives):
                out = list(current)
                for p, c in zip(positions, combo):
                    out[p] = c
                yield tuple(out)


class _Driver:
    def __init__(self, problem: LcpProblem, legacy_max_step, max_pivots, boundary_eps, ergodic_tol):
        self.A = problem.A
        self.b = problem.b
        self.n = problem.dim
        self.fmap = problem.friction_index_map
        self.frictional = bool(self.fmap)
        self.legacy = legacy_max_step
        self.cap = max_pivots if max_pivots is not None else 50 * max(self.n, 1)
        self.eps = boundary_eps
        self.ergodic_tol = ergodic_tol
        self.sets = WorkingSets(self.n)
        self.f = np.zeros(self.n)
        self.a = self.b.copy()
        self.trace = PivotTrace()
        self.seen = set()
        self.ergodic_mode = False

    def run(self):
        for k in range(self.n):
            self.a = self.A @ self.f + self.b
            cls = _zone_class(k, self.f, self.a, self.fmap, self.eps)
            if cls is not None:
                self.sets.set_class(k, cls)
                continue
            if self.ergodic_mode or not self._drive(k):
                self._ergodic(k)
        self.a = self.A @ self.f + self.b
        solution = LcpSolution(f=self.f, a=self.a, classes=self.sets.classes())
        return solution, self.trace

    def _drive(self, k) -> bool:
        while True:
            config = (k, self.sets.snapshot())
            if config in self.seen:
                self.trace.loop_detected = True
                return False
            self.seen.add(config)
            if self.trace.pivot_count >= self.cap:
                self.ergodic_mode = True
                return False
            try:
                if self.frictional:
                    df = solve_df_friction(k, self.sets, self.A, self.fmap, np.sign(self.a[k]))
                else:
                    df = solve_df(k, self.sets, self.A)
                da = self.A @ df
                if self.frictional:
                    s, j, bnd = max_step_friction(
                        k, self.f, df, self.a, da, self.sets, self.fmap, self.legacy
                    )
                else:
                    s, j = max_step(k, self.f, df, self.a, da, self.sets)
                    bnd = None
            except (SingularBlock, UnboundedRay):
                return False
            self.f = self.f + s * df
            self.a = self.A @ self.f + self.b
            self.trace.records.append((k, j, float(s), hash(self.sets.snapshot())))
            if j == k:
                if self.frictional:
                    transit_set_friction(k, self.sets, df, self.fmap, bnd)
                else:
                    transit_set(k, self.sets, driven=True)
                return True
            if self.frictional:
                transit_set_friction(j, self.sets, df, self.fmap, bnd)
            else:
                transit_set(j, self.sets)
            cls = _zone_class(k, self.f, self.a, self.fmap, self.eps)
            if cls is not None:
                self.sets.set_class(k, cls)
                return True

    def _seed_class(self, k) -> str:
        pair = self.fmap.get(k)
        if pair is None:
            return "N" if self.a[k] > 0 else "C"
        if self.a[k] < 0:
            return "H"
        if self.a[k] > 0:
            return "L"
        return "F"

    def _ergodic(self, k):
        """Resolve indices 0..k by enumerating class assignments near the current one."""
        self.trace.ergodic_resolutions += 1
        m = k + 1
        sub_A = self.A[:m, :m]
        sub_b = self.b[:m]
        sub_fmap = {i: p for i, p in self.fmap.items() if i <= k}
        current = [
            self.sets.class_of(i) if self.sets.class_of(i) is not None else self._seed_class(i)
            for i in range(m)
        ]
        options = [
            FRICTION_CLASSES if i in sub_fmap else NORMAL_CLASSES for i in range(m)
        ]
        for classes in _assignments_by_hamming(current, options):
            res = solve_for_classes(sub_A, sub_b, sub_fmap, classes)
            if res is None:
                continue
            fs, asub = res
            worst, _ = check_values(fs, asub, sub_fmap, tol=self.ergodic_tol)
            if worst <= self.ergodic_tol:
                self.f[:m] = fs
                self.f[m:] = 0.0
                for i, cls in enumerate(classes):
                    self.sets.set_class(i, cls)
                self.a = self.A @ self.f + self.b
                return
        raise NoValidAssignment(
            f"enumerative fallback exhausted over {m} touched indices"
        )


def solve(
    problem: LcpProblem,
    *,
    legacy_max_step: bool = False,
    max_pivots: int | None = None,
    boundary_eps: float = BOUNDARY_EPS,
    ergodic_tol: float = 1e-9,
):
    """Solve an LCP by driven pivoting; returns (solution, trace).

    Friction pairs must satisfy N(i) < i so every normal is processed before
    its friction row.  ``legacy_max_step`` swaps in the frozen-bound blocking
    step (regression option; produces invalid solutions on correlated
    frictional problems).
    """
    driver = _Driver(problem, legacy_max_step, max_pivots, boundary_eps, ergodic_tol)
    return driver.run()
