"""Generalized-coordinate models: free planar bodies and revolute chains.

A free body contributes (x, y, theta) with a constant diag(m, m, I) mass
block and a gravity-only bias.  A serial revolute chain contributes one
relative joint angle per link; its mass matrix and velocity-product terms
come from the planar Lagrangian and are evaluated generically so dual-number
seeding produces the analytic partials the backward pass needs.

Sign convention: dynamics read M qdd = tau - c, so c bundles gravity and
velocity products with the sign that makes unforced motion qdd = -M^-1 c.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dual
from .dual import Dual


@dataclass(frozen=True)
class Material:
    restitution: float = 0.0
    friction: float = 0.0


@dataclass
class Body:
    kind: str  # 'free' | 'link' | 'static'
    mass: float | None = None
    inertia: float | None = None
    shape: object | None = None
    material: Material = field(default_factory=Material)
    name: str = ""


@dataclass
class Chain:
    """Serial revolute chain anchored at a fixed base point.

    ``links`` are indices into the model body list, inboard to outboard.
    Link frames sit at their inboard joint with x along the link; the center
    of mass lies ``com_offsets[i]`` along that axis.
    """

    base: tuple[float, float]
    links: tuple[int, ...]
    lengths: tuple[float, ...]
    com_offsets: tuple[float, ...]


MAX_CHAIN_LINKS = 4


@dataclass
class SystemState:
    q: np.ndarray
    qd: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.q = np.array(self.q, dtype=float)
        self.qd = np.array(self.qd, dtype=float)
        if self.q.shape != self.qd.shape:
            raise ValueError("q and qd must have matching dimension")

    def copy(self) -> "SystemState":
        return SystemState(self.q.copy(), self.qd.copy(), self.t)


@dataclass
class MechanismModel:
    bodies: list[Body]
    chains: list[Chain] = field(default_factory=list)
    gravity: np.ndarray = (0.0, 0.0)
    restitution_override: float | None = None
    friction_override: float | None = None

    def __post_init__(self):
        self.gravity = np.array(self.gravity, dtype=float)
        link_owner = {}
        for ci, chain in enumerate(self.chains):
            nl = len(chain.links)
            if nl == 0 or nl > MAX_CHAIN_LINKS:
                raise ValueError(f"chain {ci} must have 1..{MAX_CHAIN_LINKS} links")
            if not (len(chain.lengths) == len(chain.com_offsets) == nl):
                raise ValueError(f"chain {ci} link arrays disagree in length")
            for pos, bi in enumerate(chain.links):
                if self.bodies[bi].kind != "link":
                    raise ValueError(f"chain {ci} references non-link body {bi}")
                if bi in link_owner:
                    raise ValueError(f"body {bi} appears in two chains")
                link_owner[bi] = (ci, pos)
        for i, body in enumerate(self.bodies):
            if body.kind == "static":
                continue
            if body.kind not in ("free", "link"):
                raise ValueError(f"body {i} has unknown kind {body.kind!r}")
            if body.mass is None or body.mass <= 0:
                raise ValueError(f"body {i} needs a positive mass")
            inertia_floor = 0.0 if body.kind == "link" else 1e-300
            if body.inertia is None or body.inertia < inertia_floor or (
                body.kind == "free" and body.inertia <= 0
            ):
                raise ValueError(f"body {i} needs a valid rotational inertia")
            if body.kind == "link" and i not in link_owner:
                raise ValueError(f"link body {i} belongs to no chain")
            if not 0.0 <= body.material.restitution <= 1.0:
                raise ValueError(f"body {i}: restitution must lie in [0, 1]")
            if body.material.friction < 0.0:
                raise ValueError(f"body {i}: friction must be nonnegative")
        self._link_owner = link_owner
        offset = 0
        self._free_offset = {}
        for i, body in enumerate(self.bodies):
            if body.kind == "free":
                self._free_offset[i] = offset
                offset += 3
        self._chain_offset = {}
        for ci, chain in enumerate(self.chains):
            self._chain_offset[ci] = offset
            offset += len(chain.links)
        self._dof = offset

    @property
    def dof(self) -> int:
        return self._dof

    def block_of_body(self, body_index: int):
        """('free', offset) | ('link', chain index, link position) | ('static', None)."""
        body = self.bodies[body_index]
        if body.kind == "free":
            return ("free", self._free_offset[body_index])
        if body.kind == "link":
            return ("link", *self._link_owner[body_index])
        return ("static", None)

    def chain_offset(self, chain_index: int) -> int:
        return self._chain_offset[chain_index]

    def dynamic_bodies(self) -> list[int]:
        return [i for i, b in enumerate(self.bodies) if b.kind != "static"]

    def pair_material(self, i: int, j: int):
        """Combined (restitution, friction) for a contact between bodies i, j."""
        ma, mb = self.bodies[i].material, self.bodies[j].material
        eps = (
            self.restitution_override
            if self.restitution_override is not None
            else max(ma.restitution, mb.restitution)
        )
        mu = (
            self.friction_override
            if self.friction_override is not None
            else math.sqrt(ma.friction * mb.friction)
        )
        return eps, mu


def inertial_parameters(model: MechanismModel) -> np.ndarray:
    """Concatenated (mass, inertia) per dynamic body; the gradient target."""
    out = []
    for i in model.dynamic_bodies():
        out.extend([model.bodies[i].mass, model.bodies[i].inertia])
    return np.array(out, dtype=float)


def inertial_parameter_labels(model: MechanismModel) -> list[str]:
    labels = []
    for i in model.dynamic_bodies():
        name = model.bodies[i].name or f"body{i}"
        labels.extend([f"mass[{name}]", f"inertia[{name}]"])
    return labels


def with_inertial_parameters(model: MechanismModel, values) -> MechanismModel:
    """Copy of the model with masses/inertias replaced from a flat vector."""
    values = np.asarray(values, dtype=float)
    bodies = [replace(b) for b in model.bodies]
    for slot, i in enumerate(model.dynamic_bodies()):
        bodies[i].mass = float(values[2 * slot])
        bodies[i].inertia = float(values[2 * slot + 1])
    return MechanismModel(
        bodies=bodies,
        chains=list(model.chains),
        gravity=model.gravity.copy(),
        restitution_override=model.restitution_override,
        friction_override=model.friction_override,
    )


def _body_params(model, overrides=None):
    """Per-body (mass, inertia) arrays; ``overrides`` swaps in seeded values."""
    masses = [b.mass for b in model.bodies]
    inertias = [b.inertia for b in model.bodies]
    if overrides is not None:
        for slot, i in enumerate(model.dynamic_bodies()):
            masses[i] = overrides[2 * slot]
            inertias[i] = overrides[2 * slot + 1]
    return masses, inertias


def chain_kinematics(model: MechanismModel, q, chain_index: int):
    """Joint positions, absolute angles, axis vectors and COM points (generic)."""
    chain = model.chains[chain_index]
    off = model.chain_offset(chain_index)
    angles = []
    acc = 0.0
    for i in range(len(chain.links)):
        acc = acc + q[off + i]
        angles.append(acc)
    axes = [(dual.cos(p), dual.sin(p)) for p in angles]
    joints = [(chain.base[0], chain.base[1])]
    for i, (ux, uy) in enumerate(axes):
        px, py = joints[i]
        joints.append((px + chain.lengths[i] * ux, py + chain.lengths[i] * uy))
    coms = [
        (joints[i][0] + chain.com_offsets[i] * axes[i][0],
         joints[i][1] + chain.com_offsets[i] * axes[i][1])
        for i in range(len(chain.links))
    ]
    return joints, angles, axes, coms


def _chain_mass_block(model, q, chain_index, masses, inertias):
    chain = model.chains[chain_index]
    nl = len(chain.links)
    joints, _, _, coms = chain_kinematics(model, q, chain_index)
    M = [[0.0] * nl for _ in range(nl)]
    for i in range(nl):
        mi = masses[chain.links[i]]
        Ii = inertias[chain.links[i]]
        # d(com_i)/dq_k = perp(com_i - joint_k) for k <= i
        levers = [
            (-(coms[i][1] - joints[k][1]), coms[i][0] - joints[k][0])
            for k in range(i + 1)
        ]
        for k in range(i + 1):
            for l in range(k, i + 1):
                term = mi * (levers[k][0] * levers[l][0] + levers[k][1] * levers[l][1]) + Ii
                M[k][l] = M[k][l] + term
                if l != k:
                    M[l][k] = M[l][k] + term
    return M


def _chain_potential(model, q, chain_index, masses):
    chain = model.chains[chain_index]
    gx, gy = model.gravity
    _, _, _, coms = chain_kinematics(model, q, chain_index)
    V = 0.0
    for i in range(len(chain.links)):
        V = V - masses[chain.links[i]] * (gx * coms[i][0] + gy * coms[i][1])
    return V


def _chain_coriolis_block(model, q, qd, chain_index, masses, inertias):
    """Velocity products plus gravity loads from the chain Lagrangian.

    c_k = sum_rl dM_kl/dq_r qd_r qd_l - 1/2 sum_rl dM_rl/dq_k qd_r qd_l + dV/dq_k.
    The partial mass matrices come from an inner dual seeding pass, which
    nests cleanly under any outer seeding of q or qd.
    """
    chain = model.chains[chain_index]
    off = model.chain_offset(chain_index)
    nl = len(chain.links)
    qb = [q[off + i] for i in range(nl)]
    qdb = [qd[off + i] for i in range(nl)]

    # The inner seeding pass must not mix levels with any outer seeding of
    # q or the inertial parameters, so every input is lifted to the inner
    # dual level (epsilon 0) before the seeded coordinate gets epsilon 1.
    lifted_q = [Dual(v, 0.0) for v in q]
    lifted_m = [None if v is None else Dual(v, 0.0) for v in masses]
    lifted_i = [None if v is None else Dual(v, 0.0) for v in inertias]
    dM = []
    dV = []
    for r in range(nl):
        q_seeded = list(lifted_q)
        q_seeded[off + r] = Dual(qb[r], 1.0)
        Mr = _chain_mass_block(model, q_seeded, chain_index, lifted_m, lifted_i)
        dM.append([[dual.partial(e) for e in row] for row in Mr])
        dV.append(dual.partial(_chain_potential(model, q_seeded, chain_index, lifted_m)))

    c = []
    for k in range(nl):
        acc = dV[k]
        for r in range(nl):
            for l in range(nl):
                acc = acc + dM[r][k][l] * qdb[r] * qdb[l]
                acc = acc - 0.5 * dM[k][r][l] * qdb[r] * qdb[l]
        c.append(acc)
    return c


def _mass_matrix_entries(model, q, masses, inertias):
    dof = model.dof
    M = [[0.0] * dof for _ in range(dof)]
    for i, body in enumerate(model.bodies):
        if body.kind == "free":
            o = model._free_offset[i]
            M[o][o] = masses[i]
            M[o + 1][o + 1] = masses[i]
            M[o + 2][o + 2] = inertias[i]
    for ci in range(len(model.chains)):
        o = model.chain_offset(ci)
        block = _chain_mass_block(model, q, ci, masses, inertias)
        for r, row in enumerate(block):
            for cidx, e in enumerate(row):
                M[o + r][o + cidx] = e
    return M


def _coriolis_entries(model, q, qd, masses, inertias):
    dof = model.dof
    gx, gy = model.gravity
    c = [0.0] * dof
    for i, body in enumerate(model.bodies):
        if body.kind == "free":
            o = model._free_offset[i]
            c[o] = -masses[i] * gx
            c[o + 1] = -masses[i] * gy
            c[o + 2] = 0.0
    for ci in range(len(model.chains)):
        o = model.chain_offset(ci)
        block = _chain_coriolis_block(model, q, qd, ci, masses, inertias)
        for r, e in enumerate(block):
            c[o + r] = e
    return c


def mass_matrix(model: MechanismModel, q) -> np.ndarray:
    """Symmetric positive-definite mass matrix, block diagonal per mechanism."""
    masses, inertias = _body_params(model)
    M = _mass_matrix_entries(model, list(q), masses, inertias)
    return np.array(M, dtype=float)


def coriolis(model: MechanismModel, q, qd) -> np.ndarray:
    """Bias vector c with M qdd = tau - c; includes gravity loads."""
    masses, inertias = _body_params(model)
    c = _coriolis_entries(model, list(q), list(qd), masses, inertias)
    return np.array(c, dtype=float)


def mass_matrix_partials(model: MechanismModel, q):
    """(dM/dq_i for each coordinate, dM/dm_j for each inertial parameter)."""
    dof = model.dof
    masses, inertias = _body_params(model)
    dM_dq = []
    for i in range(dof):
        qs = dual.seed(list(q), i)
        M = _mass_matrix_entries(model, qs, masses, inertias)
        dM_dq.append(np.array([[dual.partial(e) for e in row] for row in M]))
    dM_dm = []
    nm = 2 * len(model.dynamic_bodies())
    base = inertial_parameters(model)
    for j in range(nm):
        seeded = [Dual(v, 1.0) if idx == j else v for idx, v in enumerate(base)]
        ms, Is = _body_params(model, overrides=seeded)
        M = _mass_matrix_entries(model, list(q), ms, Is)
        dM_dm.append(np.array([[dual.partial(e) for e in row] for row in M]))
    return dM_dq, dM_dm


@dataclass
class InertialPartials:
    dMinv_z_dq: np.ndarray  # (dof, dof); column i is d(M^-1 z)/dq_i
    dMinv_z_dm: np.ndarray  # (dof, nm)
    dc_dq: np.ndarray       # (dof, dof)
    dc_dqd: np.ndarray      # (dof, dof)
    dc_dm: np.ndarray       # (dof, nm)


def bias_partials(model: MechanismModel, q, qd):
    """(dc/dq, dc/dqd, dc/dm) of the bias vector by dual seeding."""
    dof = model.dof
    q = list(q)
    qd = list(qd)
    masses, inertias = _body_params(model)
    dc_dq = np.zeros((dof, dof))
    for i in range(dof):
        qs = dual.seed(q, i)
        c = _coriolis_entries(model, qs, qd, masses, inertias)
        dc_dq[:, i] = [dual.partial(e) for e in c]
    dc_dqd = np.zeros((dof, dof))
    for i in range(dof):
        qds = dual.seed(qd, i)
        c = _coriolis_entries(model, q, qds, masses, inertias)
        dc_dqd[:, i] = [dual.partial(e) for e in c]
    base = inertial_parameters(model)
    nm = len(base)
    dc_dm = np.zeros((dof, nm))
    for j in range(nm):
        seeded = [Dual(v, 1.0) if idx == j else v for idx, v in enumerate(base)]
        ms, Is = _body_params(model, overrides=seeded)
        c = _coriolis_entries(model, q, qd, ms, Is)
        dc_dm[:, j] = [dual.partial(e) for e in c]
    return dc_dq, dc_dqd, dc_dm


def inertial_partials(model: MechanismModel, q, qd, z) -> InertialPartials:
    """Analytic partials of M^-1 z and of the bias vector.

    Uses d(M^-1 z)/dx = -M^-1 (dM/dx) M^-1 z with one dual seeding pass per
    coordinate / inertial parameter.
    """
    dof = model.dof
    q = list(q)
    z = np.asarray(z, dtype=float)
    masses, inertias = _body_params(model)
    M = np.array(_mass_matrix_entries(model, q, masses, inertias), dtype=float)
    Minv_z = np.linalg.solve(M, z)
    dM_dq, dM_dm = mass_matrix_partials(model, q)

    dMinv_z_dq = np.zeros((dof, dof))
    for i in range(dof):
        dMinv_z_dq[:, i] = -np.linalg.solve(M, dM_dq[i] @ Minv_z)
    nm = len(dM_dm)
    dMinv_z_dm = np.zeros((dof, nm))
    for j in range(nm):
        dMinv_z_dm[:, j] = -np.linalg.solve(M, dM_dm[j] @ Minv_z)

    dc_dq, dc_dqd, dc_dm = bias_partials(model, q, qd)
    return InertialPartials(dMinv_z_dq, dMinv_z_dm, dc_dq, dc_dqd, dc_dm)


def body_frame(model: MechanismModel, q, body_index: int):
    """World pose ((x, y), angle) of a body frame; generic over dual q.

    Free bodies carry their own pose coordinates.  Link frames sit at the
    inboard joint with the cumulative chain angle.  Static bodies are the
    world frame itself.
    """
    kind = model.block_of_body(body_index)
    if kind[0] == "free":
        o = kind[1]
        return (q[o], q[o + 1]), q[o + 2]
    if kind[0] == "link":
        ci, pos = kind[1], kind[2]
        joints, angles, _, _ = chain_kinematics(model, q, ci)
        return joints[pos], angles[pos]
    return (0.0, 0.0), 0.0
