"""Shapes, discrete contact manifolds, contact Jacobians, and continuous
collision detection.

Planar primitives: circles, strictly convex ccw polygons, and static half
planes.  Narrow phase produces contact points with frozen material witness
anchors and a normal recipe, so contact kinematics can be re-evaluated at
perturbed coordinates (dual seeding) with the feature pairing held fixed.

Row layout of the stacked Jacobian: [n1, t1, n2, t2, ...] with each tangent
row immediately after its normal row.  Normals point from body a to body b;
tangents are (n_y, -n_x), so for a floor normal (0, 1) the tangent is (1, 0).

Continuous collision detection linearizes feature motion over the query
window (world feature velocities frozen at the start), solves the resulting
linear/quadratic crossing polynomials in closed form, and refines each
candidate root by bisection on the true pairwise distance along the
configuration ray q + s qd.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import dual, mechanics
from .dual import Dual
from .lcp import FrictionPair

DEFAULT_SLOP = 1e-4
TOUCH_GAP = 1e-6       # gap at or below this counts as touching for CCD
APPROACH_SPEED = 1e-8  # closing speeds slower than this are resting, not impacts
MIN_TOI_FRACTION = 1e-12


@dataclass(frozen=True)
class Circle:
    radius: float
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("circle radius must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))


@dataclass(frozen=True)
class ConvexPolygon:
    vertices: tuple  # ccw, body frame

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        n = len(verts)
        if n < 3:
            raise ValueError("polygon needs at least 3 vertices")
        for k in range(n):
            ax, ay = verts[k]
            bx, by = verts[(k + 1) % n]
            cx, cy = verts[(k + 2) % n]
            cross = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if cross <= 1e-12:
                raise ValueError("polygon must be strictly convex and ccw")


@dataclass(frozen=True)
class HalfPlane:
    """World-frame half plane; only static bodies may carry one."""

    normal: tuple
    offset: float

    def __post_init__(self):
        nx, ny = float(self.normal[0]), float(self.normal[1])
        norm = math.hypot(nx, ny)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError("half-plane normal must be unit length")
        object.__setattr__(self, "normal", (nx, ny))


def box(half_width: float, half_height: float) -> ConvexPolygon:
    w, h = half_width, half_height
    return ConvexPolygon(((-w, -h), (w, -h), (w, h), (-w, h)))


@dataclass
class ContactPoint:
    """One contact with frozen feature recipes.

    Witness recipes per side: ('material', local_point) is a body-frame
    point; ('circle',) is the circle surface point center -/+ r n(q), which
    keeps circle contacts independent of the body's spin; ('proj', anchor)
    marks a face whose raw gap reference is a material anchor on the face
    line and whose force application point is the other witness projected
    onto the face.
    """

    body_a: int
    body_b: int
    point: np.ndarray
    normal: np.ndarray   # unit, from a to b
    gap: float
    tangent: np.ndarray  # (n_y, -n_x)
    feature_a: tuple
    feature_b: tuple
    witness_a: tuple
    witness_b: tuple
    normal_kind: str      # 'const' | 'body_a' | 'body_b' | 'points'
    normal_data: tuple

    def sort_key(self):
        return (
            self.body_a,
            self.body_b,
            self.feature_a,
            self.feature_b,
            round(float(self.point[0]), 9),
            round(float(self.point[1]), 9),
        )


@dataclass
class ContactSet:
    contacts: list
    jacobian: np.ndarray        # (2k, dof)
    mus: np.ndarray             # per contact
    restitutions: np.ndarray    # per contact

    def __len__(self):
        return len(self.contacts)

    @property
    def friction_pairs(self) -> tuple[FrictionPair, ...]:
        return tuple(
            FrictionPair(2 * j + 1, 2 * j, float(self.mus[j]))
            for j in range(len(self.contacts))
        )


# ---------------------------------------------------------------------------
# kinematics of frozen contact features (generic over dual-valued q)

def point_world(model, q, body_index, local):
    (px, py), ang = mechanics.body_frame(model, q, body_index)
    c, s = dual.cos(ang), dual.sin(ang)
    return (
        px + c * local[0] - s * local[1],
        py + s * local[0] + c * local[1],
    )


def world_to_local(model, q, body_index, pw):
    (px, py), ang = mechanics.body_frame(model, q, body_index)
    c, s = math.cos(dual.value(ang)), math.sin(dual.value(ang))
    dx, dy = pw[0] - dual.value(px), pw[1] - dual.value(py)
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def velocity_jacobian_at(model, q, body_index, p):
    """2 x dof jacobian of the body's material-point velocity at world point p.

    Generic over dual q; p may itself be a geometric recipe evaluated at q.
    """
    dof = model.dof
    Jp = [[0.0] * dof, [0.0] * dof]
    blk = model.block_of_body(body_index)
    if blk[0] == "free":
        o = blk[1]
        Jp[0][o] = 1.0
        Jp[1][o + 1] = 1.0
        Jp[0][o + 2] = -(p[1] - q[o + 1])
        Jp[1][o + 2] = p[0] - q[o]
    elif blk[0] == "link":
        ci, pos = blk[1], blk[2]
        joints, _, _, _ = mechanics.chain_kinematics(model, q, ci)
        off = model.chain_offset(ci)
        for j in range(pos + 1):
            Jp[0][off + j] = -(p[1] - joints[j][1])
            Jp[1][off + j] = p[0] - joints[j][0]
    return Jp


def point_kinematics(model, q, body_index, local):
    """World point of a body-frame point and its 2 x dof jacobian."""
    w = point_world(model, q, body_index, local)
    return w, velocity_jacobian_at(model, q, body_index, w)


def _normal_eval(model, q, contact):
    kind = contact.normal_kind
    if kind == "const":
        nx, ny = contact.normal_data
        return nx, ny
    if kind in ("body_a", "body_b"):
        owner = contact.body_a if kind == "body_a" else contact.body_b
        _, ang = mechanics.body_frame(model, q, owner)
        c, s = dual.cos(ang), dual.sin(ang)
        lx, ly = contact.normal_data
        return c * lx - s * ly, s * lx + c * ly
    if kind == "points":
        la, lb = contact.normal_data
        pa = point_world(model, q, contact.body_a, la)
        pb = point_world(model, q, contact.body_b, lb)
        dx, dy = pb[0] - pa[0], pb[1] - pa[1]
        norm = dual.sqrt(dx * dx + dy * dy)
        return dx / norm, dy / norm
    raise ValueError(f"unknown normal recipe {kind!r}")


def _raw_witness(model, q, contact, side, n):
    body = contact.body_a if side == "a" else contact.body_b
    recipe = contact.witness_a if side == "a" else contact.witness_b
    if recipe[0] in ("material", "proj"):
        return point_world(model, q, body, recipe[1])
    # circle surface point along the contact normal
    shape = _shape_of(model, body)
    c = point_world(model, q, body, shape.center)
    sign = shape.radius if side == "a" else -shape.radius
    return (c[0] + sign * n[0], c[1] + sign * n[1])


def contact_rows(model, q, contact):
    """(normal row, tangent row, gap) for one contact, generic over q.

    The gap separates the frozen geometric witnesses along the normal.  Rows
    map qd to relative normal/tangential velocity of each body's material
    point at its witness, so a spinning circle still produces tangential
    surface speed while the contact geometry stays independent of its angle.
    """
    dof = model.dof
    n = _normal_eval(model, q, contact)
    nx, ny = n
    pa = _raw_witness(model, q, contact, "a", n)
    pb = _raw_witness(model, q, contact, "b", n)
    gap = (pb[0] - pa[0]) * nx + (pb[1] - pa[1]) * ny
    pa_app, pb_app = pa, pb
    if contact.witness_a[0] == "proj":
        pa_app = (pb[0] - gap * nx, pb[1] - gap * ny)
    elif contact.witness_b[0] == "proj":
        pb_app = (pa[0] + gap * nx, pa[1] + gap * ny)
    Ja = velocity_jacobian_at(model, q, contact.body_a, pa_app)
    Jb = velocity_jacobian_at(model, q, contact.body_b, pb_app)
    tx, ty = ny, -nx
    row_n = [nx * (Jb[0][d] - Ja[0][d]) + ny * (Jb[1][d] - Ja[1][d]) for d in range(dof)]
    row_t = [tx * (Jb[0][d] - Ja[0][d]) + ty * (Jb[1][d] - Ja[1][d]) for d in range(dof)]
    return row_n, row_t, gap


def contact_jacobian(model, q, contacts):
    """Stacked Jacobian and a directional evaluator for d(J^T f)/dq.

    Returns (J, evaluator); evaluator(f) gives the dof x dof matrix of
    partials of J(q)^T f with f held fixed and feature pairing frozen.
    """
    q = list(q)
    dof = model.dof
    J = np.zeros((2 * len(contacts), dof))
    for j, c in enumerate(contacts):
        row_n, row_t, _ = contact_rows(model, q, c)
        J[2 * j] = row_n
        J[2 * j + 1] = row_t

    def evaluator(f):
        f = np.asarray(f, dtype=float)
        out = np.zeros((dof, dof))
        for i in range(dof):
            qs = dual.seed(q, i)
            for j, c in enumerate(contacts):
                row_n, row_t, _ = contact_rows(model, qs, c)
                for d in range(dof):
                    out[d, i] += dual.partial(row_n[d]) * f[2 * j]
                    out[d, i] += dual.partial(row_t[d]) * f[2 * j + 1]
        return out

    return J, evaluator


def jacobian_partials(model, q, contacts):
    """dJ/dq_i for each coordinate as a list of (2k, dof) matrices."""
    q = list(q)
    dof = model.dof
    out = []
    for i in range(dof):
        qs = dual.seed(q, i)
        dJ = np.zeros((2 * len(contacts), dof))
        for j, c in enumerate(contacts):
            row_n, row_t, _ = contact_rows(model, qs, c)
            dJ[2 * j] = [dual.partial(e) for e in row_n]
            dJ[2 * j + 1] = [dual.partial(e) for e in row_t]
        out.append(dJ)
    return out


def gap_gradient(model, q, contact):
    """(gap, dgap/dq, d(row_n . qd)/dq helper rows) for a frozen contact."""
    q = list(q)
    dof = model.dof
    _, _, gap0 = contact_rows(model, q, contact)
    grad = np.zeros(dof)
    for i in range(dof):
        qs = dual.seed(q, i)
        _, _, g = contact_rows(model, qs, contact)
        grad[i] = dual.partial(g)
    return dual.value(gap0), grad


# ---------------------------------------------------------------------------
# narrow phase

def _shape_of(model, i):
    return model.bodies[i].shape

def _is_static(model, i):
    return model.bodies[i].kind == "static"


def _same_chain(model, i, j):
    bi = model.block_of_body(i)
    bj = model.block_of_body(j)
    return bi[0] == "link" and bj[0] == "link" and bi[1] == bj[1]


def _world_circle(model, q, i):
    shape = _shape_of(model, i)
    cx, cy = point_world(model, q, i, shape.center)
    return np.array([dual.value(cx), dual.value(cy)]), shape.radius


def _world_polygon(model, q, i):
    shape = _shape_of(model, i)
    return [
        np.array([dual.value(px), dual.value(py)])
        for px, py in (point_world(model, q, i, v) for v in shape.vertices)
    ]


def _edge_outward(v1, v2):
    ux, uy = v2[0] - v1[0], v2[1] - v1[1]
    norm = math.hypot(ux, uy)
    return np.array([uy / norm, -ux / norm])


def _mk_contact(model, q, a, b, point, normal, gap, feat_a, feat_b,
                witness_a, witness_b, normal_kind, normal_data):
    """Build a contact; witness recipes use body-frame anchors.

    witness_* is ('material', world_point) / ('proj', world_point) with the
    world point converted to the body frame here, or ('circle',).
    """
    normal = np.asarray(normal, dtype=float)

    def localize(side, recipe):
        if recipe[0] == "circle":
            return ("circle",)
        return (recipe[0], world_to_local(model, q, side, recipe[1]))

    return ContactPoint(
        body_a=a,
        body_b=b,
        point=np.asarray(point, dtype=float),
        normal=normal,
        gap=float(gap),
        tangent=np.array([normal[1], -normal[0]]),
        feature_a=feat_a,
        feature_b=feat_b,
        witness_a=localize(a, witness_a),
        witness_b=localize(b, witness_b),
        normal_kind=normal_kind,
        normal_data=normal_data,
    )


def _circle_circle(model, q, a, b, slop):
    ca, ra = _world_circle(model, q, a)
    cb, rb = _world_circle(model, q, b)
    d = cb - ca
    dist = float(np.hypot(*d))
    if dist < 1e-12:
        return []
    gap = dist - ra - rb
    if gap > slop:
        return []
    n = d / dist
    wa = ca + ra * n
    wb = cb - rb * n
    la = np.asarray(_shape_of(model, a).center, dtype=float)
    lb = np.asarray(_shape_of(model, b).center, dtype=float)
    return [_mk_contact(model, q, a, b, 0.5 * (wa + wb), n, gap, ("c", 0), ("c", 0),
                        ("circle",), ("circle",), "points", (la, lb))]


def _circle_halfplane(model, q, circ, plane, a, b, slop):
    m = np.asarray(_shape_of(model, plane).normal)
    off = _shape_of(model, plane).offset
    c, r = _world_circle(model, q, circ)
    sd = float(m @ c) - off
    gap = sd - r
    if gap > slop:
        return []
    w_circ = c - r * m
    w_plane = c - sd * m
    n = m if a == plane else -m
    if a == plane:
        wa, wb = ("proj", w_plane), ("circle",)
        fa, fb = ("p", 0), ("c", 0)
        mid = 0.5 * (w_plane + w_circ)
    else:
        wa, wb = ("circle",), ("proj", w_plane)
        fa, fb = ("c", 0), ("p", 0)
        mid = 0.5 * (w_circ + w_plane)
    return [_mk_contact(model, q, a, b, mid, n, gap, fa, fb,
                        wa, wb, "const", (float(n[0]), float(n[1])))]


def _circle_polygon(model, q, circ, poly, a, b, slop):
    c, r = _world_circle(model, q, circ)
    verts = _world_polygon(model, q, poly)
    nv = len(verts)
    best_d, best_e = -np.inf, 0
    for e in range(nv):
        m = _edge_outward(verts[e], verts[(e + 1) % nv])
        d = float(m @ (c - verts[e]))
        if d > best_d:
            best_d, best_e = d, e
    local_verts = _shape_of(model, poly).vertices

    def edge_contact(e, closest):
        m = _edge_outward(verts[e], verts[(e + 1) % nv])
        sd = float(m @ (c - closest))
        gap = sd - r
        if gap > slop:
            return []
        w_circ = c - r * m
        n = m if a == poly else -m
        # local edge normal in the polygon frame, pre-signed for a->b
        lv1 = np.asarray(local_verts[e])
        lv2 = np.asarray(local_verts[(e + 1) % nv])
        lu = lv2 - lv1
        lm = np.array([lu[1], -lu[0]]) / np.hypot(*lu)
        if a != poly:
            lm = -lm
        if a == poly:
            wa, wb = ("proj", closest), ("circle",)
            fa, fb = ("e", e), ("c", 0)
        else:
            wa, wb = ("circle",), ("proj", closest)
            fa, fb = ("c", 0), ("e", e)
        kind = "body_a" if a == poly else "body_b"
        return [_mk_contact(model, q, a, b, 0.5 * (closest + w_circ), n, gap, fa, fb,
                            wa, wb, kind, (float(lm[0]), float(lm[1])))]

    if best_d <= 0.0:
        e = best_e
        m = _edge_outward(verts[e], verts[(e + 1) % nv])
        closest = c - best_d * m
        return edge_contact(e, closest)
    v1 = verts[best_e]
    v2 = verts[(best_e + 1) % nv]
    u = v2 - v1
    t = float(u @ (c - v1)) / float(u @ u)
    if 0.0 < t < 1.0:
        return edge_contact(best_e, v1 + t * u)
    vid = best_e if t <= 0.0 else (best_e + 1) % nv
    v = verts[vid]
    delta = c - v
    dist = float(np.hypot(*delta))
    gap = dist - r
    if gap > slop or dist < 1e-12:
        return []
    nd = delta / dist
    n = nd if a == poly else -nd
    w_circ = c - r * nd
    if a == poly:
        wa, wb = ("material", v), ("circle",)
        fa, fb = ("v", vid), ("c", 0)
    else:
        wa, wb = ("circle",), ("material", v)
        fa, fb = ("c", 0), ("v", vid)
    lv = np.asarray(local_verts[vid])
    lc = np.asarray(_shape_of(model, circ).center, dtype=float)
    data = (lv, lc) if a == poly else (lc, lv)
    return [_mk_contact(model, q, a, b, 0.5 * (v + w_circ), n, gap, fa, fb,
                        wa, wb, "points", data)]


def _polygon_halfplane(model, q, poly, plane, a, b, slop):
    m = np.asarray(_shape_of(model, plane).normal)
    off = _shape_of(model, plane).offset
    verts = _world_polygon(model, q, poly)
    out = []
    n = m if a == plane else -m
    for k, v in enumerate(verts):
        sd = float(m @ v) - off
        if sd > slop:
            continue
        w_plane = v - sd * m
        if a == plane:
            wa, wb = ("proj", w_plane), ("material", v)
            fa, fb = ("p", 0), ("v", k)
        else:
            wa, wb = ("material", v), ("proj", w_plane)
            fa, fb = ("v", k), ("p", 0)
        out.append(_mk_contact(model, q, a, b, 0.5 * (v + w_plane), n, sd, fa, fb,
                               wa, wb, "const", (float(n[0]), float(n[1]))))
    return out


def _max_separation(va, vb):
    best, best_e = -np.inf, 0
    for e in range(len(va)):
        m = _edge_outward(va[e], va[(e + 1) % len(va)])
        d = min(float(m @ (w - va[e])) for w in vb)
        if d > best:
            best, best_e = d, e
    return best, best_e


def _clip_segment(points, ids, plane_n, plane_d):
    """Clip a 2-point segment against plane_n . p >= plane_d."""
    d = [float(plane_n @ p) - plane_d for p in points]
    out, out_ids = [], []
    for k in range(2):
        if d[k] >= 0.0:
            out.append(points[k])
            out_ids.append(ids[k])
    if len(out) < 2 and d[0] * d[1] < 0.0:
        t = d[0] / (d[0] - d[1])
        out.append(points[0] + t * (points[1] - points[0]))
        out_ids.append(("x", ids[0][1]))
    return out, out_ids


def _polygon_polygon(model, q, a, b, slop):
    va = _world_polygon(model, q, a)
    vb = _world_polygon(model, q, b)
    sep_a, edge_a = _max_separation(va, vb)
    if sep_a > slop:
        return []
    sep_b, edge_b = _max_separation(vb, va)
    if sep_b > slop:
        return []
    if sep_b > sep_a + 1e-10:
        ref_body, inc_body = b, a
        ref_verts, inc_verts = vb, va
        ref_edge = edge_b
    else:
        ref_body, inc_body = a, b
        ref_verts, inc_verts = va, vb
        ref_edge = edge_a
    nr = len(ref_verts)
    ni = len(inc_verts)
    v1 = ref_verts[ref_edge]
    v2 = ref_verts[(ref_edge + 1) % nr]
    m = _edge_outward(v1, v2)
    u = (v2 - v1) / float(np.hypot(*(v2 - v1)))
    # incident edge: most anti-parallel to the reference normal
    inc_edge = min(
        range(ni),
        key=lambda e: float(_edge_outward(inc_verts[e], inc_verts[(e + 1) % ni]) @ m),
    )
    p1, p2 = inc_verts[inc_edge], inc_verts[(inc_edge + 1) % ni]
    pts = [p1, p2]
    ids = [("v", inc_edge), ("v", (inc_edge + 1) % ni)]
    pts, ids = _clip_segment(pts, ids, u, float(u @ v1))
    if len(pts) < 2:
        return []
    pts, ids = _clip_segment(pts, ids, -u, float(-u @ v2))
    if len(pts) < 2:
        return []
    ref_local = _shape_of(model, ref_body).vertices
    lv1 = np.asarray(ref_local[ref_edge])
    lv2 = np.asarray(ref_local[(ref_edge + 1) % nr])
    lu = lv2 - lv1
    lm = np.array([lu[1], -lu[0]]) / np.hypot(*lu)
    out = []
    for p, fid in zip(pts, ids):
        gap = float(m @ (p - v1))
        if gap > slop:
            continue
        w_ref = p - gap * m
        n = m if a == ref_body else -m
        if a == ref_body:
            wa, wb = ("proj", w_ref), ("material", p)
            fa, fb = ("e", ref_edge), fid
        else:
            wa, wb = ("material", p), ("proj", w_ref)
            fa, fb = fid, ("e", ref_edge)
        lmn = lm if a == ref_body else -lm
        kind = "body_a" if a == ref_body else "body_b"
        out.append(_mk_contact(model, q, a, b, 0.5 * (p + w_ref), n, gap, fa, fb,
                               wa, wb, kind, (float(lmn[0]), float(lmn[1]))))
    return out


_DISPATCH = {
    (Circle, Circle): "cc",
    (Circle, HalfPlane): "ch",
    (Circle, ConvexPolygon): "cp",
    (ConvexPolygon, HalfPlane): "ph",
    (ConvexPolygon, ConvexPolygon): "pp",
    (ConvexPolygon, Circle): "cp",
    (HalfPlane, Circle): "ch",
    (HalfPlane, ConvexPolygon): "ph",
}


def _pair_contacts(model, q, i, j, slop):
    """All contacts between bodies i < j with gap <= slop."""
    sa, sb = _shape_of(model, i), _shape_of(model, j)
    kind = _DISPATCH.get((type(sa), type(sb)))
    if kind is None:
        return []
    if kind == "cc":
        return _circle_circle(model, q, i, j, slop)
    if kind == "ch":
        circ, plane = (i, j) if isinstance(sa, Circle) else (j, i)
        return _circle_halfplane(model, q, circ, plane, i, j, slop)
    if kind == "cp":
        circ, poly = (i, j) if isinstance(sa, Circle) else (j, i)
        return _circle_polygon(model, q, circ, poly, i, j, slop)
    if kind == "ph":
        poly, plane = (i, j) if isinstance(sa, ConvexPolygon) else (j, i)
        return _polygon_halfplane(model, q, poly, plane, i, j, slop)
    if kind == "pp":
        return _polygon_polygon(model, q, i, j, slop)
    return []


def collidable_pairs(model):
    shaped = [i for i in range(len(model.bodies)) if _shape_of(model, i) is not None]
    pairs = []
    for i, j in itertools.combinations(shaped, 2):
        if _is_static(model, i) and _is_static(model, j):
            continue
        if _same_chain(model, i, j):
            continue
        sa, sb = _shape_of(model, i), _shape_of(model, j)
        if isinstance(sa, HalfPlane) and isinstance(sb, HalfPlane):
            continue
        pairs.append((i, j))
    return pairs


def narrow_phase(model, q, slop: float = DEFAULT_SLOP) -> ContactSet:
    """All contacts with gap <= slop, deterministically ordered, with J."""
    q = list(np.asarray(q, dtype=float))
    contacts = []
    for i, j in collidable_pairs(model):
        contacts.extend(_pair_contacts(model, q, i, j, slop))
    contacts.sort(key=ContactPoint.sort_key)
    J, _ = contact_jacobian(model, q, contacts)
    mus = np.array([model.pair_material(c.body_a, c.body_b)[1] for c in contacts])
    eps = np.array([model.pair_material(c.body_a, c.body_b)[0] for c in contacts])
    return ContactSet(contacts=contacts, jacobian=J, mus=mus, restitutions=eps)


# ---------------------------------------------------------------------------
# true pairwise distance (used by CCD refinement and penetration audits)

def _point_segment_distance(p, v1, v2):
    u = v2 - v1
    t = float(u @ (p - v1)) / float(u @ u)
    t = min(max(t, 0.0), 1.0)
    return float(np.hypot(*(p - (v1 + t * u))))


def _polygon_signed_distance(point, verts):
    """Signed distance from a point to a convex polygon boundary (<0 inside)."""
    nv = len(verts)
    best = -np.inf
    for e in range(nv):
        m = _edge_outward(verts[e], verts[(e + 1) % nv])
        best = max(best, float(m @ (point - verts[e])))
    if best <= 0.0:
        return best
    return min(
        _point_segment_distance(point, verts[e], verts[(e + 1) % nv])
        for e in range(nv)
    )


def pair_distance(model, q, i, j) -> float:
    """True signed distance between the shapes of bodies i and j."""
    sa, sb = _shape_of(model, i), _shape_of(model, j)
    kind = _DISPATCH.get((type(sa), type(sb)))
    if kind == "cc":
        ca, ra = _world_circle(model, q, i)
        cb, rb = _world_circle(model, q, j)
        return float(np.hypot(*(cb - ca))) - ra - rb
    if kind == "ch":
        circ, plane = (i, j) if isinstance(sa, Circle) else (j, i)
        m = np.asarray(_shape_of(model, plane).normal)
        c, r = _world_circle(model, q, circ)
        return float(m @ c) - _shape_of(model, plane).offset - r
    if kind == "cp":
        circ, poly = (i, j) if isinstance(sa, Circle) else (j, i)
        c, r = _world_circle(model, q, circ)
        return _polygon_signed_distance(c, _world_polygon(model, q, poly)) - r
    if kind == "ph":
        poly, plane = (i, j) if isinstance(sa, ConvexPolygon) else (j, i)
        m = np.asarray(_shape_of(model, plane).normal)
        off = _shape_of(model, plane).offset
        return min(float(m @ v) - off for v in _world_polygon(model, q, poly))
    if kind == "pp":
        va = _world_polygon(model, q, i)
        vb = _world_polygon(model, q, j)
        sep_a, _ = _max_separation(va, vb)
        sep_b, _ = _max_separation(vb, va)
        sep = max(sep_a, sep_b)
        if sep <= 0.0:
            return sep
        best = np.inf
        for p in va:
            for e in range(len(vb)):
                best = min(best, _point_segment_distance(p, vb[e], vb[(e + 1) % len(vb)]))
        for p in vb:
            for e in range(len(va)):
                best = min(best, _point_segment_distance(p, va[e], va[(e + 1) % len(va)]))
        return best
    return np.inf


def min_gap(model, q) -> float:
    """Smallest pairwise gap in the scene (inf when nothing can collide)."""
    gaps = [pair_distance(model, q, i, j) for i, j in collidable_pairs(model)]
    return min(gaps) if gaps else np.inf


# ---------------------------------------------------------------------------
# continuous collision detection

@dataclass
class ToiHit:
    toi: float
    contact: ContactPoint
    pair: tuple
    gap: float            # gap at the query start
    closing_speed: float  # positive approach speed at the query start


def _shape_aabb(model, q, i):
    s = _shape_of(model, i)
    if isinstance(s, HalfPlane):
        return None
    if isinstance(s, Circle):
        c, r = _world_circle(model, q, i)
        return np.array([c[0] - r, c[1] - r]), np.array([c[0] + r, c[1] + r])
    verts = np.array(_world_polygon(model, q, i))
    return verts.min(axis=0), verts.max(axis=0)


def _swept_aabb(model, q, qd, dt, i):
    a = _shape_aabb(model, q, i)
    if a is None:
        return None
    b = _shape_aabb(model, list(np.asarray(q) + dt * np.asarray(qd)), i)
    return np.minimum(a[0], b[0]) - 1e-3, np.maximum(a[1], b[1]) + 1e-3


def _candidate_pairs(model, q, qd, dt):
    boxes = {}
    out = []
    for i, j in collidable_pairs(model):
        for k in (i, j):
            if k not in boxes:
                boxes[k] = _swept_aabb(model, q, qd, dt, k)
        ba, bb = boxes[i], boxes[j]
        if ba is None or bb is None:
            out.append((i, j))
            continue
        if np.all(ba[0] <= bb[1]) and np.all(bb[0] <= ba[1]):
            out.append((i, j))
    return out


def _quad_roots(a, b, c):
    """Real roots of a t^2 + b t + c = 0, ascending; degenerate-safe."""
    if abs(a) < 1e-14:
        if abs(b) < 1e-14:
            return []
        return [-c / b]
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return []
    s = math.sqrt(disc)
    r1 = (-b - s) / (2.0 * a)
    r2 = (-b + s) / (2.0 * a)
    return sorted((r1, r2))


def _feature_motion(model, q, qd, i):
    """Frozen world positions and velocities of body i's CCD features."""
    s = _shape_of(model, i)
    qd = np.asarray(qd, dtype=float)
    if isinstance(s, Circle):
        w, Jp = point_kinematics(model, q, i, s.center)
        v = np.array([np.dot(Jp[0], qd), np.dot(Jp[1], qd)])
        return [(np.array([w[0], w[1]], dtype=float), v)]
    if isinstance(s, ConvexPolygon):
        out = []
        for vert in s.vertices:
            w, Jp = point_kinematics(model, q, i, vert)
            v = np.array([np.dot(Jp[0], qd), np.dot(Jp[1], qd)])
            out.append((np.array([w[0], w[1]], dtype=float), v))
        return out
    return []


def _cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


def _pair_root_seeds(model, q, qd, dt, i, j):
    """Closed-form crossing times for the linearized feature motion."""
    sa, sb = _shape_of(model, i), _shape_of(model, j)
    kind = _DISPATCH.get((type(sa), type(sb)))
    seeds = []
    if kind == "cc":
        (ca, va), = _feature_motion(model, q, qd, i)
        (cb, vb), = _feature_motion(model, q, qd, j)
        R = sa.radius + sb.radius
        d0 = cb - ca
        dv = vb - va
        seeds += _quad_roots(float(dv @ dv), 2.0 * float(d0 @ dv), float(d0 @ d0) - R * R)
    elif kind == "ch":
        circ, plane = (i, j) if isinstance(sa, Circle) else (j, i)
        m = np.asarray(_shape_of(model, plane).normal)
        off = _shape_of(model, plane).offset
        (c, v), = _feature_motion(model, q, qd, circ)
        rate = float(m @ v)
        if rate != 0.0:
            r = _shape_of(model, circ).radius
            seeds.append((off + r - float(m @ c)) / rate)
    elif kind == "ph":
        poly, plane = (i, j) if isinstance(sa, ConvexPolygon) else (j, i)
        m = np.asarray(_shape_of(model, plane).normal)
        off = _shape_of(model, plane).offset
        for p, v in _feature_motion(model, q, qd, poly):
            rate = float(m @ v)
            if rate != 0.0:
                seeds.append((off - float(m @ p)) / rate)
    elif kind == "cp":
        circ, poly = (i, j) if isinstance(sa, Circle) else (j, i)
        (c, vc), = _feature_motion(model, q, qd, circ)
        r = _shape_of(model, circ).radius
        feats = _feature_motion(model, q, qd, poly)
        nv = len(feats)
        for e in range(nv):
            (p1, w1), (p2, w2) = feats[e], feats[(e + 1) % nv]
            u0 = p2 - p1
            du = w2 - w1
            w0 = c - p1
            dw = vc - w1
            ulen = float(np.hypot(*u0))
            if ulen < 1e-12:
                continue
            # signed distance * |u0|: -cross(u, w) = r * |u0| at touch
            a2 = -_cross2(du, dw)
            a1 = -(_cross2(u0, dw) + _cross2(du, w0))
            a0 = -_cross2(u0, w0)
            seeds += _quad_roots(a2, a1, a0 - r * ulen)
        for p, w in feats:
            d0 = c - p
            dv = vc - w
            seeds += _quad_roots(float(dv @ dv), 2.0 * float(d0 @ dv), float(d0 @ d0) - r * r)
    elif kind == "pp":
        fa = _feature_motion(model, q, qd, i)
        fb = _feature_motion(model, q, qd, j)
        for verts, edges in ((fa, fb), (fb, fa)):
            ne = len(edges)
            for (p, vp) in verts:
                for e in range(ne):
                    (e1, w1), (e2, w2) = edges[e], edges[(e + 1) % ne]
                    u0 = e2 - e1
                    du = w2 - w1
                    w0 = p - e1
                    dw = vp - w1
                    a2 = _cross2(du, dw)
                    a1 = _cross2(u0, dw) + _cross2(du, w0)
                    a0 = _cross2(u0, w0)
                    seeds += _quad_roots(a2, a1, a0)
    return sorted(s for s in seeds if 0.0 <= s <= dt)


def _refine_toi(distance, seed, dt):
    """Bisection on the true distance around a polynomial seed.

    Returns the refined crossing time (positive-gap side) or None when no
    sign change exists near the seed.
    """
    hi = None
    lo = 0.0
    if distance(seed) <= 0.0:
        hi = seed
    else:
        step = max(1e-6 * dt, 1e-12)
        t = seed
        while t < dt:
            t = min(t + step, dt)
            if distance(t) <= 0.0:
                hi = t
                break
            lo = t
            step *= 2.0
        if hi is None:
            return None
    # walk lo back toward a positive sample below hi
    while distance(lo) <= 0.0 and lo > 0.0:
        lo = max(0.0, lo - 0.25 * (hi - lo) - 1e-9 * dt)
    if distance(lo) <= 0.0:
        return None
    tol = MIN_TOI_FRACTION * dt
    for _ in range(80):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if distance(mid) <= 0.0:
            hi = mid
        else:
            lo = mid
    return lo


def _deepest_contact(model, q, i, j, slop):
    cands = _pair_contacts(model, q, i, j, slop)
    if not cands:
        return None
    return min(cands, key=lambda c: (c.gap,) + c.sort_key())


def ccd_toi(model, state, dt, slop: float = DEFAULT_SLOP):
    """Earliest time of impact in (0, dt] along the ray q + s qd, or None.

    A pair already touching (gap <= 1e-6) and approaching reports toi = 0.
    Roots are filtered on feature validity and approach speed; resting or
    separating grazes are left to the discrete contact handling.
    """
    q = list(state.q)
    qd = np.asarray(state.qd, dtype=float)
    best = None
    for pair in _candidate_pairs(model, q, qd, dt):
        i, j = pair
        d0 = pair_distance(model, q, i, j)
        if d0 <= TOUCH_GAP:
            contact = _deepest_contact(model, q, i, j, max(slop, 2.0 * TOUCH_GAP))
            if contact is None:
                continue
            row_n, _, _ = contact_rows(model, q, contact)
            speed = float(np.dot(row_n, qd))
            if speed < -APPROACH_SPEED:
                cand = (0.0, pair, contact, d0, -speed)
                if best is None or (cand[0], cand[1]) < (best[0], best[1]):
                    best = cand
            continue

        def distance(s, i=i, j=j):
            return pair_distance(model, list(np.asarray(q) + s * qd), i, j)

        for seed in _pair_root_seeds(model, q, qd, dt, i, j):
            toi = _refine_toi(distance, seed, dt)
            if toi is None:
                continue
            toi = max(toi, MIN_TOI_FRACTION * dt)
            if toi > dt:
                continue
            q_toi = list(np.asarray(q) + toi * qd)
            contact = _deepest_contact(model, q_toi, i, j, max(slop, 2.0 * TOUCH_GAP))
            if contact is None:
                continue
            row_n, _, _ = contact_rows(model, q_toi, contact)
            speed = float(np.dot(row_n, qd))
            if speed >= -APPROACH_SPEED:
                continue
            cand = (toi, pair, contact, d0, -speed)
            if best is None or (cand[0], cand[1]) < (best[0], best[1]):
                best = cand
            break  # earliest refined root for this pair
    if best is None:
        return None
    toi, pair, contact, gap0, closing = best
    return ToiHit(toi=toi, contact=contact, pair=pair, gap=gap0, closing_speed=closing)
