"""Scene files: a JSON document describing bodies, initial state, and run options.

Field names carry units (dt_s, gravity_mps2, mass_kg) so fixtures read
unambiguously.  Parsing is strict: unknown kinds, missing fields, and
malformed shapes raise SceneError with a field path.  A parsed config
serializes back to a canonical document, so load -> save -> load is a
fixpoint.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import collision
from .mechanics import Body, Chain, Material, MechanismModel, SystemState
from .stepping import StepOptions


class SceneError(Exception):
    pass


@dataclass
class BodyConfig:
    name: str
    kind: str                      # 'free' | 'static'
    mass_kg: float | None = None
    inertia_kgm2: float | None = None
    shape: dict | None = None
    material: dict = field(default_factory=lambda: {"restitution": 0.0, "friction": 0.0})
    q0: list | None = None
    qd0: list | None = None


@dataclass
class LinkConfig:
    name: str
    mass_kg: float
    inertia_kgm2: float
    length_m: float
    com_offset_m: float
    shape: dict | None = None
    material: dict = field(default_factory=lambda: {"restitution": 0.0, "friction": 0.0})


@dataclass
class ChainConfig:
    base_m: list
    links: list
    q0: list
    qd0: list


@dataclass
class SceneConfig:
    name: str
    gravity_mps2: list
    dt_s: float
    steps: int
    bodies: list
    chains: list = field(default_factory=list)
    ccd: bool = True
    substep_cap: int = 16
    contact_slop_m: float = collision.DEFAULT_SLOP
    restitution_override: float | None = None
    friction_override: float | None = None
    tau: list | None = None
    experiment: dict = field(default_factory=dict)


def _require(data, key, path):
    if key not in data:
        raise SceneError(f"{path}: missing field {key!r}")
    return data[key]


def _shape_from_dict(data, path):
    if data is None:
        return None
    kind = _require(data, "type", path)
    try:
        if kind == "circle":
            return collision.Circle(
                radius=float(_require(data, "radius", path)),
                center=tuple(data.get("center", (0.0, 0.0))),
            )
        if kind == "polygon":
            return collision.ConvexPolygon(
                vertices=tuple(tuple(v) for v in _require(data, "vertices", path))
            )
        if kind == "box":
            return collision.box(
                float(_require(data, "half_width", path)),
                float(_require(data, "half_height", path)),
            )
        if kind == "halfplane":
            return collision.HalfPlane(
                normal=tuple(_require(data, "normal", path)),
                offset=float(_require(data, "offset", path)),
            )
    except (TypeError, ValueError) as exc:
        raise SceneError(f"{path}: bad shape: {exc}") from exc
    raise SceneError(f"{path}: unknown shape type {kind!r}")


def _shape_to_dict(shape):
    if shape is None:
        return None
    if isinstance(shape, collision.Circle):
        return {"type": "circle", "radius": shape.radius, "center": list(shape.center)}
    if isinstance(shape, collision.ConvexPolygon):
        return {"type": "polygon", "vertices": [list(v) for v in shape.vertices]}
    if isinstance(shape, collision.HalfPlane):
        return {"type": "halfplane", "normal": list(shape.normal), "offset": shape.offset}
    raise SceneError(f"unserializable shape {shape!r}")


def parse_scene(data: dict) -> SceneConfig:
    if not isinstance(data, dict):
        raise SceneError("scene document must be a JSON object")
    path = "scene"
    bodies = []
    names = set()
    for k, bd in enumerate(_require(data, "bodies", path)):
        bpath = f"bodies[{k}]"
        kind = _require(bd, "kind", bpath)
        if kind not in ("free", "static"):
            raise SceneError(f"{bpath}: kind must be 'free' or 'static', got {kind!r}")
        name = bd.get("name", f"body{k}")
        if name in names:
            raise SceneError(f"{bpath}: duplicate body name {name!r}")
        names.add(name)
        shape = bd.get("shape")
        _shape_from_dict(shape, bpath)  # validate now
        if kind == "free":
            q0 = list(bd.get("q0", [0.0, 0.0, 0.0]))
            qd0 = list(bd.get("qd0", [0.0, 0.0, 0.0]))
        else:
            # statics may carry a fixed pose, baked into the shape at build
            q0 = list(bd["q0"]) if "q0" in bd else None
            qd0 = None
        body = BodyConfig(
            name=name,
            kind=kind,
            mass_kg=bd.get("mass_kg"),
            inertia_kgm2=bd.get("inertia_kgm2"),
            shape=shape,
            material=dict(bd.get("material", {"restitution": 0.0, "friction": 0.0})),
            q0=q0,
            qd0=qd0,
        )
        if kind == "free":
            if body.mass_kg is None or body.inertia_kgm2 is None:
                raise SceneError(f"{bpath}: free bodies need mass_kg and inertia_kgm2")
            if len(body.q0) != 3 or len(body.qd0) != 3:
                raise SceneError(f"{bpath}: q0/qd0 must have 3 entries")
        elif body.q0 is not None and len(body.q0) != 3:
            raise SceneError(f"{bpath}: static pose q0 must have 3 entries")
        bodies.append(body)
    chains = []
    for ci, cd in enumerate(data.get("chains", [])):
        cpath = f"chains[{ci}]"
        links = []
        for li, ld in enumerate(_require(cd, "links", cpath)):
            lpath = f"{cpath}.links[{li}]"
            name = ld.get("name", f"chain{ci}_link{li}")
            if name in names:
                raise SceneError(f"{lpath}: duplicate body name {name!r}")
            names.add(name)
            _shape_from_dict(ld.get("shape"), lpath)
            links.append(LinkConfig(
                name=name,
                mass_kg=float(_require(ld, "mass_kg", lpath)),
                inertia_kgm2=float(_require(ld, "inertia_kgm2", lpath)),
                length_m=float(_require(ld, "length_m", lpath)),
                com_offset_m=float(_require(ld, "com_offset_m", lpath)),
                shape=ld.get("shape"),
                material=dict(ld.get("material", {"restitution": 0.0, "friction": 0.0})),
            ))
        q0 = list(_require(cd, "q0", cpath))
        qd0 = list(_require(cd, "qd0", cpath))
        if not (len(q0) == len(qd0) == len(links)):
            raise SceneError(f"{cpath}: q0/qd0 length must match link count")
        chains.append(ChainConfig(base_m=list(_require(cd, "base_m", cpath)),
                                  links=links, q0=q0, qd0=qd0))
    cfg = SceneConfig(
        name=data.get("name", "scene"),
        gravity_mps2=list(_require(data, "gravity_mps2", path)),
        dt_s=float(_require(data, "dt_s", path)),
        steps=int(_require(data, "steps", path)),
        bodies=bodies,
        chains=chains,
        ccd=bool(data.get("ccd", True)),
        substep_cap=int(data.get("substep_cap", 16)),
        contact_slop_m=float(data.get("contact_slop_m", collision.DEFAULT_SLOP)),
        restitution_override=data.get("restitution_override"),
        friction_override=data.get("friction_override"),
        tau=list(data["tau"]) if data.get("tau") is not None else None,
        experiment=dict(data.get("experiment", {})),
    )
    if cfg.dt_s <= 0:
        raise SceneError("scene: dt_s must be positive")
    if cfg.steps < 0:
        raise SceneError("scene: steps must be nonnegative")
    return cfg


def scene_to_dict(cfg: SceneConfig) -> dict:
    out = {
        "name": cfg.name,
        "gravity_mps2": list(cfg.gravity_mps2),
        "dt_s": cfg.dt_s,
        "steps": cfg.steps,
        "ccd": cfg.ccd,
        "substep_cap": cfg.substep_cap,
        "contact_slop_m": cfg.contact_slop_m,
        "restitution_override": cfg.restitution_override,
        "friction_override": cfg.friction_override,
        "tau": cfg.tau,
        "bodies": [],
        "chains": [],
        "experiment": cfg.experiment,
    }
    for b in cfg.bodies:
        bd = {"name": b.name, "kind": b.kind, "material": b.material}
        if b.mass_kg is not None:
            bd["mass_kg"] = b.mass_kg
        if b.inertia_kgm2 is not None:
            bd["inertia_kgm2"] = b.inertia_kgm2
        if b.shape is not None:
            bd["shape"] = _shape_to_dict(_shape_from_dict(b.shape, b.name))
        if b.q0 is not None:
            bd["q0"] = list(b.q0)
        if b.qd0 is not None:
            bd["qd0"] = list(b.qd0)
        out["bodies"].append(bd)
    for c in cfg.chains:
        out["chains"].append({
            "base_m": list(c.base_m),
            "links": [
                {
                    "name": l.name,
                    "mass_kg": l.mass_kg,
                    "inertia_kgm2": l.inertia_kgm2,
                    "length_m": l.length_m,
                    "com_offset_m": l.com_offset_m,
                    "shape": _shape_to_dict(_shape_from_dict(l.shape, l.name)) if l.shape else None,
                    "material": l.material,
                }
                for l in c.links
            ],
            "q0": list(c.q0),
            "qd0": list(c.qd0),
        })
    return out


def load_scene(path) -> SceneConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneError(f"{path}: invalid JSON: {exc}") from exc
    return parse_scene(data)


def save_scene(cfg: SceneConfig, path):
    with open(path, "w") as fh:
        json.dump(scene_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _material_from_dict(d):
    return Material(restitution=float(d.get("restitution", 0.0)),
                    friction=float(d.get("friction", 0.0)))


def _posed_shape(shape, pose):
    """Bake a fixed (x, y, theta) pose into a static body's shape."""
    if shape is None or pose is None:
        return shape
    x, y, th = pose
    import math
    c, s = math.cos(th), math.sin(th)

    def xf(p):
        return (x + c * p[0] - s * p[1], y + s * p[0] + c * p[1])

    if isinstance(shape, collision.Circle):
        return collision.Circle(radius=shape.radius, center=xf(shape.center))
    if isinstance(shape, collision.ConvexPolygon):
        return collision.ConvexPolygon(vertices=tuple(xf(v) for v in shape.vertices))
    n = (c * shape.normal[0] - s * shape.normal[1],
         s * shape.normal[0] + c * shape.normal[1])
    return collision.HalfPlane(normal=n, offset=shape.offset + n[0] * x + n[1] * y)


def build_scene(cfg: SceneConfig):
    """(model, initial state, tau, StepOptions, steps, body name -> index)."""
    bodies = []
    name_to_index = {}
    for b in cfg.bodies:
        name_to_index[b.name] = len(bodies)
        shape = _shape_from_dict(b.shape, b.name)
        if b.kind == "static":
            shape = _posed_shape(shape, b.q0)
        bodies.append(Body(
            kind=b.kind,
            mass=b.mass_kg,
            inertia=b.inertia_kgm2,
            shape=shape,
            material=_material_from_dict(b.material),
            name=b.name,
        ))
    chains = []
    for c in cfg.chains:
        link_ids = []
        for l in c.links:
            name_to_index[l.name] = len(bodies)
            link_ids.append(len(bodies))
            bodies.append(Body(
                kind="link",
                mass=l.mass_kg,
                inertia=l.inertia_kgm2,
                shape=_shape_from_dict(l.shape, l.name),
                material=_material_from_dict(l.material),
                name=l.name,
            ))
        chains.append(Chain(
            base=tuple(c.base_m),
            links=tuple(link_ids),
            lengths=tuple(l.length_m for l in c.links),
            com_offsets=tuple(l.com_offset_m for l in c.links),
        ))
    try:
        model = MechanismModel(
            bodies=bodies,
            chains=chains,
            gravity=np.array(cfg.gravity_mps2, dtype=float),
            restitution_override=cfg.restitution_override,
            friction_override=cfg.friction_override,
        )
    except ValueError as exc:
        raise SceneError(f"scene {cfg.name!r}: {exc}") from exc
    q = np.zeros(model.dof)
    qd = np.zeros(model.dof)
    for b in cfg.bodies:
        if b.kind != "free":
            continue
        blk = model.block_of_body(name_to_index[b.name])
        o = blk[1]
        q[o:o + 3] = b.q0
        qd[o:o + 3] = b.qd0
    for ci, c in enumerate(cfg.chains):
        o = model.chain_offset(ci)
        q[o:o + len(c.links)] = c.q0
        qd[o:o + len(c.links)] = c.qd0
    tau = None
    if cfg.tau is not None:
        tau = np.array(cfg.tau, dtype=float)
        if tau.shape != (model.dof,):
            raise SceneError(f"scene: tau must have {model.dof} entries")
    opts = StepOptions(ccd=cfg.ccd, substep_cap=cfg.substep_cap, slop=cfg.contact_slop_m)
    return model, SystemState(q, qd), tau, opts, cfg.steps, name_to_index
