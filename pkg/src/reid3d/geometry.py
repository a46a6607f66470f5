"""Articulated quadruped model: template, shape basis, kinematics, skinning, projection.

Model space is right-handed with x pointing forward (towards the head),
y pointing down (gravity) and z pointing to the animal's left.  With the
identity root rotation a camera looking down +z therefore sees the right
flank of the animal, head to the right of the image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, ProjectionError

N_SHAPE_MODES = 40

# Hindquarter + back rectangle of the procedural atlas, (u1, v1, u2, v2).
HINDQUARTER_REGION = (0.55, 0.25, 0.95, 0.75)

KEYPOINT_NAMES_16 = (
    "nose", "withers", "hip", "tail_base",
    "shoulder_fl", "shoulder_fr", "hip_rl", "hip_rr",
    "knee_fl", "knee_fr", "knee_rl", "knee_rr",
    "hoof_fl", "hoof_fr", "hoof_rl", "hoof_rr",
)
KEYPOINT_NAMES_8 = (
    "nose", "withers", "hip", "tail_base",
    "hoof_fl", "hoof_fr", "hoof_rl", "hoof_rr",
)

SEMANTIC_MODES = (
    "body_length", "girth", "leg_length", "neck_length",
    "head_size", "tail_length", "leg_thickness", "overall_scale",
)


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    keypoint_ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(np.reshape(self.vertices, (-1, 3))))
        object.__setattr__(self, "faces", _frozen(np.reshape(self.faces, (-1, 3)), np.int64))
        object.__setattr__(self, "uv", _frozen(np.reshape(self.uv, (-1, 2))))
        object.__setattr__(self, "keypoint_ids", _frozen(self.keypoint_ids, np.int64))
        n = len(self.vertices)
        if len(self.uv) != n:
            raise DimensionError(f"uv has {len(self.uv)} rows for {n} vertices")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise DimensionError("face index out of range")
        if self.uv.size and (self.uv.min() < 0.0 or self.uv.max() > 1.0):
            raise ValueError("uv coordinates must lie in [0, 1]")
        if len(set(self.keypoint_ids.tolist())) != len(self.keypoint_ids):
            raise ValueError("keypoint ids must be distinct")
        if self.keypoint_ids.size and self.keypoint_ids.max() >= n:
            raise DimensionError("keypoint id out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces, self.uv, self.keypoint_ids)

    def keypoints(self) -> np.ndarray:
        return self.vertices[self.keypoint_ids]


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int | None
    rest_offset: tuple[float, float, float]


@dataclass(frozen=True)
class Skeleton:
    joints: tuple[Joint, ...]
    skin_weights: np.ndarray  # (V, J), rows sum to one

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        w = _frozen(self.skin_weights)
        object.__setattr__(self, "skin_weights", w)
        roots = [i for i, j in enumerate(self.joints) if j.parent is None]
        if roots != [0]:
            raise ValueError("skeleton needs exactly one root, at index 0")
        for i, j in enumerate(self.joints):
            if j.parent is not None and not 0 <= j.parent < i:
                raise ValueError(f"joint {j.name!r} is not topologically sorted")
        if w.ndim != 2 or w.shape[1] != len(self.joints):
            raise DimensionError("skin weights must be (V, J)")
        if w.size and (w.min() < 0 or np.abs(w.sum(axis=1) - 1.0).max() > 1e-9):
            raise ValueError("skin weights must be non-negative and sum to 1")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def parents(self) -> list[int]:
        return [-1 if j.parent is None else j.parent for j in self.joints]

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for i, j in enumerate(self.joints):
            off = np.asarray(j.rest_offset, float)
            pos[i] = off if j.parent is None else pos[j.parent] + off
        return pos

    def with_rest_positions(self, positions) -> "Skeleton":
        positions = np.asarray(positions, float)
        joints = []
        for i, j in enumerate(self.joints):
            off = positions[i] if j.parent is None else positions[i] - positions[j.parent]
            joints.append(Joint(j.name, j.parent, tuple(float(x) for x in off)))
        return Skeleton(tuple(joints), self.skin_weights)


@dataclass(frozen=True)
class ShapeBasis:
    """Linear displacement modes for vertices and, consistently, joint rest positions."""

    vertex_modes: np.ndarray  # (M, V, 3)
    joint_modes: np.ndarray  # (M, J, 3)
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "vertex_modes", _frozen(self.vertex_modes))
        object.__setattr__(self, "joint_modes", _frozen(self.joint_modes))
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.vertex_modes) != N_SHAPE_MODES or len(self.joint_modes) != N_SHAPE_MODES:
            raise DimensionError(f"shape basis needs exactly {N_SHAPE_MODES} modes")
        if len(self.names) != N_SHAPE_MODES:
            raise DimensionError("one name per mode required")

    @property
    def n_modes(self) -> int:
        return len(self.vertex_modes)


@dataclass(frozen=True)
class Pose:
    root_rotation: np.ndarray  # (3,) axis-angle
    joint_angles: np.ndarray  # (J-1, 3) axis-angle per non-root joint

    def __post_init__(self):
        object.__setattr__(self, "root_rotation", _frozen(np.reshape(self.root_rotation, 3)))
        object.__setattr__(self, "joint_angles", _frozen(np.reshape(self.joint_angles, (-1, 3))))
        if not (np.all(np.isfinite(self.root_rotation)) and np.all(np.isfinite(self.joint_angles))):
            raise ValueError("pose must be finite")

    @classmethod
    def zero(cls, n_joints: int) -> "Pose":
        return cls(np.zeros(3), np.zeros((n_joints - 1, 3)))

    @property
    def n_joints(self) -> int:
        return len(self.joint_angles) + 1

    def all_angles(self) -> np.ndarray:
        return np.vstack([self.root_rotation[None], self.joint_angles])

    def is_canonical(self) -> bool:
        return bool(np.linalg.norm(self.all_angles(), axis=1).max() < np.pi)


@dataclass(frozen=True)
class Camera:
    focal: float
    principal_point: tuple[float, float]
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen(np.reshape(self.translation, 3)))
        object.__setattr__(self, "principal_point", tuple(float(x) for x in self.principal_point))
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if not self.translation[2] > 0:
            raise ValueError("model must be in front of the camera (t_z > 0)")

    def with_translation(self, t) -> "Camera":
        return Camera(self.focal, self.principal_point, t)


@dataclass(frozen=True)
class JointTransforms:
    rotations: np.ndarray  # (J, 3, 3) world rotations
    positions: np.ndarray  # (J, 3) posed joint positions
    rest_positions: np.ndarray  # (J, 3)

    def matrices(self) -> np.ndarray:
        """Rest-relative rigid transforms as (J, 4, 4) homogeneous matrices."""
        j = len(self.rotations)
        g = np.zeros((j, 4, 4))
        g[:, :3, :3] = self.rotations
        g[:, :3, 3] = self.positions - np.einsum("jab,jb->ja", self.rotations, self.rest_positions)
        g[:, 3, 3] = 1.0
        return g


@dataclass(frozen=True)
class QuadrupedModel:
    mesh: Mesh
    skeleton: Skeleton
    basis: ShapeBasis
    parts: np.ndarray = field(repr=False)  # (V,) part label per vertex
    keypoint_names: tuple[str, ...] = ()

    @property
    def n_joints(self) -> int:
        return self.skeleton.n_joints

    def height(self) -> float:
        """Vertical extent of the rest template, in model units."""
        y = self.mesh.vertices[:, 1]
        return float(y.max() - y.min())


# --------------------------------------------------------------------------
# rotations


def hat(w) -> np.ndarray:
    w = np.asarray(w, float)
    k = np.zeros(w.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -w[..., 2], w[..., 1]
    k[..., 1, 0], k[..., 1, 2] = w[..., 2], -w[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -w[..., 1], w[..., 0]
    return k


def _rodrigues_coeffs(theta):
    small = theta < 1e-2
    t2 = theta * theta
    safe = np.where(small, 1.0, theta)
    s, c = np.sin(safe), np.cos(safe)
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, s / safe)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - c) / safe**2)
    # derivatives of a and b with respect to theta, divided by theta
    da = np.where(small, -1 / 3 + t2 / 30, (safe * c - s) / safe**3)
    db = np.where(small, -1 / 12 + t2 / 180, (safe * s - 2 * (1 - c)) / safe**4)
    return a, b, da, db


def rodrigues(w) -> np.ndarray:
    """Axis-angle vector(s) (..., 3) to rotation matrices (..., 3, 3)."""
    w = np.asarray(w, float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _, _ = _rodrigues_coeffs(theta)
    k = hat(w)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues_jacobian(w) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrices and their partials: dR[..., i, :, :] = dR/dw_i."""
    w = np.asarray(w, float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, da, db = _rodrigues_coeffs(theta)
    k = hat(w)
    k2 = k @ k
    r = np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2
    e = hat(np.eye(3))  # (3, 3, 3) generators
    ek = e @ k[..., None, :, :]
    ke = k[..., None, :, :] @ e
    dr = (
        a[..., None, None, None] * e
        + b[..., None, None, None] * (ek + ke)
        + (da[..., None] * w)[..., None, None] * k[..., None, :, :]
        + (db[..., None] * w)[..., None, None] * k2[..., None, :, :]
    )
    return r, dr


# --------------------------------------------------------------------------
# template construction


@dataclass
class TemplateConfig:
    body_length: float = 2.0
    body_height: float = 0.8
    body_width: float = 0.64
    leg_length: float = 1.1
    leg_radius: float = 0.085
    neck_length: float = 0.75
    neck_radius: float = 0.14
    head_length: float = 0.6
    head_radius: float = 0.12
    tail_length: float = 0.6
    tail_radius: float = 0.035
    resolution: int = 24
    joint_count: int = 11
    keypoint_count: int = 16
    basis_seed: int = 0

    def validate(self) -> None:
        for name in ("body_length", "body_height", "body_width", "leg_length", "leg_radius",
                     "neck_length", "neck_radius", "head_length", "head_radius",
                     "tail_length", "tail_radius"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"template.{name} must be positive")
        if self.resolution < 6:
            raise ConfigError("template.resolution must be at least 6")
        if self.joint_count not in (7, 11, 13):
            raise ConfigError("template.joint_count must be one of 7, 11, 13")
        if self.keypoint_count not in (8, 16):
            raise ConfigError("template.keypoint_count must be 8 or 16")

    @classmethod
    def from_json(cls, path) -> "TemplateConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown template fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _smoothstep(e0, e1, x):
    t = np.clip((np.asarray(x, float) - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _frame(direction):
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e2 = np.cross(ref, d)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(d, e2)
    return d, e2, e3


class _Builder:
    def __init__(self):
        self.vertices, self.uv, self.faces = [], [], []
        self.part, self.param = [], []
        self.count = 0

    def grid(self, pos, uv, part, param):
        """Add an (R, S, 3) vertex grid, triangulated as quads between rings."""
        r, s = pos.shape[:2]
        base = self.count
        idx = base + np.arange(r * s).reshape(r, s)
        self.vertices.append(pos.reshape(-1, 3))
        self.uv.append(uv.reshape(-1, 2))
        self.part.append(np.full(r * s, part))
        self.param.append(param.reshape(-1))
        a, b = idx[:-1, :-1], idx[:-1, 1:]
        c, d = idx[1:, :-1], idx[1:, 1:]
        self.faces.append(np.stack([a, c, d], -1).reshape(-1, 3))
        self.faces.append(np.stack([a, d, b], -1).reshape(-1, 3))
        self.count += r * s
        return idx

    def build(self):
        return (np.vstack(self.vertices), np.vstack(self.faces), np.vstack(self.uv),
                np.concatenate(self.part), np.concatenate(self.param))


# part labels
TORSO, NECK, HEAD, TAIL = 0, 1, 2, 3
LEGS = {"fl": 4, "fr": 5, "rl": 6, "rr": 7}
_CELL_V = {NECK: 0, HEAD: 1, TAIL: 2, 4: 3, 5: 4, 6: 5, 7: 6}


def _cell(part, t, s):
    """Atlas cell for non-torso parts: a column at u in [0.01, 0.13]."""
    row = _CELL_V[part]
    u = 0.01 + 0.12 * t
    v = (row + 0.05 + 0.9 * s) / 7.0
    return np.stack([u, v], -1)


def _ellipsoid(b, center, axes, radii, n_a, n_p, part, uv_fn):
    alpha = np.linspace(0.0, np.pi, n_a + 1)
    phi = np.linspace(0.0, 2 * np.pi, n_p + 1)
    al, ph = np.meshgrid(alpha, phi, indexing="ij")
    e1, e_up, e_left = axes
    ra, rb, rc = radii
    rr = np.sin(al)
    pos = (center + (ra * np.cos(al))[..., None] * e1
           + (-rb * rr * np.sin(ph))[..., None] * (-e_up)
           + (rc * rr * np.cos(ph))[..., None] * e_left)
    # pole rings collapse onto one point; keep copies for a clean atlas
    pos[0] = center + ra * e1
    pos[-1] = center - ra * e1
    uv = uv_fn(al / np.pi, ph / (2 * np.pi))
    return b.grid(pos, uv, part, al / np.pi)


def _tube(b, start, direction, length, radius, n_r, n_s, part, rings=None):
    d, e2, e3 = _frame(direction)
    t = np.linspace(0.0, 1.0, n_r + 1) if rings is None else np.asarray(rings)
    phi = np.linspace(0.0, 2 * np.pi, n_s + 1)
    tt, ph = np.meshgrid(t, phi, indexing="ij")
    pos = (np.asarray(start) + (length * tt)[..., None] * d
           + (radius * np.cos(ph))[..., None] * e2 + (radius * np.sin(ph))[..., None] * e3)
    # close the far end with a collapsed ring (a cone cap of zero height)
    cap = np.repeat((np.asarray(start) + length * d)[None, None], n_s + 1, axis=1)
    pos = np.concatenate([pos, cap], 0)
    tcap = np.concatenate([tt, np.ones((1, n_s + 1))], 0)
    phcap = np.concatenate([ph, ph[:1]], 0)
    uv = _cell(part, np.minimum(tcap, 1.0), phcap / (2 * np.pi))
    idx = b.grid(pos, uv, part, tcap)
    return idx, (d, e2, e3)


def _joint_layout(cfg: TemplateConfig):
    """Joint names, parents and rest positions for the configured joint count."""
    a = cfg.body_length / 2
    bh = cfg.body_height / 2
    bw = cfg.body_width / 2
    neck_base = np.array([0.78 * a, -0.35 * bh, 0.0])
    neck_dir = np.array([np.cos(np.radians(55)), -np.sin(np.radians(55)), 0.0])
    head_pos = neck_base + cfg.neck_length * neck_dir
    tail_base = np.array([-0.93 * a, -0.45 * bh, 0.0])
    leg_x = {"fl": 0.6 * a, "fr": 0.6 * a, "rl": -0.6 * a, "rr": -0.6 * a}
    leg_z = {"fl": 0.5 * bw, "fr": -0.5 * bw, "rl": 0.5 * bw, "rr": -0.5 * bw}
    leg_top_y = 0.35 * bh
    ground = bh + cfg.leg_length
    knee_y = leg_top_y + 0.5 * (ground - leg_top_y)

    names, parents, pos = ["root"], [None], [np.zeros(3)]

    def add(name, parent, p):
        names.append(name)
        parents.append(names.index(parent))
        pos.append(np.asarray(p, float))

    rear_parent = "root"
    if cfg.joint_count == 13:
        add("spine", "root", [-0.45 * a, 0.0, 0.0])
        rear_parent = "spine"
    add("neck", "root", neck_base)
    add("head", "neck", head_pos)
    if cfg.joint_count == 13:
        add("tail", "spine", tail_base)
    for leg in ("fl", "fr", "rl", "rr"):
        parent = "root" if leg[0] == "f" else rear_parent
        add(f"upper_{leg}", parent, [leg_x[leg], leg_top_y, leg_z[leg]])
        if cfg.joint_count >= 11:
            add(f"lower_{leg}", f"upper_{leg}", [leg_x[leg], knee_y, leg_z[leg]])
    geo = dict(a=a, bh=bh, bw=bw, neck_base=neck_base, neck_dir=neck_dir, head_pos=head_pos,
               tail_base=tail_base, leg_x=leg_x, leg_z=leg_z, leg_top_y=leg_top_y,
               ground=ground, knee_y=knee_y)
    return names, parents, np.array(pos), geo


def make_template(config: TemplateConfig | None = None) -> QuadrupedModel:
    """Build the procedural mannequin quadruped: mesh with UV atlas, skeleton, shape basis."""
    cfg = config or TemplateConfig()
    cfg.validate()
    names, parents, jpos, g = _joint_layout(cfg)
    jidx = {n: i for i, n in enumerate(names)}
    n = cfg.resolution
    b = _Builder()

    torso_axes = (np.array([1.0, 0, 0]), np.array([0, -1.0, 0]), np.array([0, 0, 1.0]))
    torso = _ellipsoid(
        b, np.zeros(3), torso_axes, (g["a"], g["bh"], g["bw"]), n, n, TORSO,
        lambda s, t: np.stack([0.15 + 0.8 * s, t], -1),
    )
    neck, _ = _tube(b, g["neck_base"] - 0.15 * g["neck_dir"], g["neck_dir"],
                    cfg.neck_length + 0.15, cfg.neck_radius, max(4, n // 4), n // 2, NECK)
    head_dir = np.array([np.cos(np.radians(-40)), np.sin(np.radians(40)), 0.0])
    hd, he2, he3 = _frame(head_dir)
    head_center = g["head_pos"] + 0.5 * cfg.head_length * hd - 0.05 * hd
    head = _ellipsoid(
        b, head_center, (hd, np.array([0, -1.0, 0]), np.array([0, 0, 1.0])),
        (0.5 * cfg.head_length, cfg.head_radius, cfg.head_radius), max(6, n // 3), n // 2, HEAD,
        lambda s, t: _cell(HEAD, s, t),
    )
    tail_dir = np.array([-np.cos(np.radians(60)), np.sin(np.radians(60)), 0.0])
    tail, _ = _tube(b, g["tail_base"], tail_dir, cfg.tail_length, cfg.tail_radius,
                    4, max(6, n // 4), TAIL)
    legs = {}
    for leg, part in LEGS.items():
        top = np.array([g["leg_x"][leg], g["leg_top_y"], g["leg_z"][leg]])
        length = g["ground"] - g["leg_top_y"]
        legs[leg], _ = _tube(b, top, [0, 1.0, 0], length, cfg.leg_radius,
                             max(6, n // 2), max(8, n // 2), part)
    verts, faces, uv, part, param = b.build()
    v = len(verts)

    # skin weights
    w = np.zeros((v, len(names)))
    rear = jidx.get("spine", 0)
    is_t = part == TORSO
    if "spine" in jidx:
        blend = _smoothstep(-0.1 * g["a"], -0.45 * g["a"], verts[:, 0])
        w[is_t, 0] = 1 - blend[is_t]
        w[is_t, rear] = blend[is_t]
    else:
        w[is_t, 0] = 1.0
    m = part == NECK
    tn = param[m]
    wn = _smoothstep(0.1, 0.35, tn)
    wh = _smoothstep(0.85, 1.0, tn)
    w[m, 0] = 1 - wn
    w[m, jidx["neck"]] = wn * (1 - wh)
    w[m, jidx["head"]] = wn * wh
    w[part == HEAD, jidx["head"]] = 1.0
    m = part == TAIL
    w[m, jidx.get("tail", rear)] = 1.0
    knee_t = (g["knee_y"] - g["leg_top_y"]) / (g["ground"] - g["leg_top_y"])
    for leg, p in LEGS.items():
        m = part == p
        t = np.minimum(param[m], 1.0)
        parent = 0 if leg[0] == "f" else rear
        up = jidx[f"upper_{leg}"]
        wu = _smoothstep(0.0, 0.25, t)
        if f"lower_{leg}" in jidx:
            wl = _smoothstep(knee_t - 0.08, knee_t + 0.08, t)
            w[m, jidx[f"lower_{leg}"]] = wu * wl
            w[m, up] = wu * (1 - wl)
        else:
            w[m, up] = wu
        w[m, parent] += 1 - wu
    w /= w.sum(axis=1, keepdims=True)

    # keypoints: camera-facing (-z) side where the choice matters
    def nearest(idx, target):
        cand = np.asarray(idx).reshape(-1)
        d = np.linalg.norm(verts[cand] - target, axis=1)
        return int(cand[np.argmin(d)])

    a, bh = g["a"], g["bh"]
    kp = {
        "nose": int(head[0, 0]),
        "withers": nearest(torso, [0.5 * a, -bh * np.sqrt(1 - 0.25), 0.0]),
        "hip": nearest(torso, [-0.5 * a, -bh * np.sqrt(1 - 0.25), 0.0]),
        "tail_base": nearest(torso, [-0.92 * a, -0.4 * bh, -0.05]),
    }
    for leg in LEGS:
        idx = legs[leg]
        tube_pts = verts[idx[:-1].reshape(-1)]
        y_below = g["bh"] * 0.95
        kp[("shoulder_" if leg[0] == "f" else "hip_") + leg] = nearest(
            idx[:-1], [g["leg_x"][leg], y_below, g["leg_z"][leg] - cfg.leg_radius])
        kp["knee_" + leg] = nearest(
            idx[:-1], [g["leg_x"][leg], g["knee_y"], g["leg_z"][leg] - cfg.leg_radius])
        kp["hoof_" + leg] = int(idx[-1, 0])
        del tube_pts
    kp_names = KEYPOINT_NAMES_16 if cfg.keypoint_count == 16 else KEYPOINT_NAMES_8
    kp_ids = [kp[k] for k in kp_names]

    mesh = Mesh(verts, faces, uv, kp_ids)
    offsets = [jpos[i] if p is None else jpos[i] - jpos[p] for i, p in enumerate(parents)]
    joints = tuple(Joint(nm, p, tuple(float(x) for x in off))
                   for nm, p, off in zip(names, parents, offsets))
    skeleton = Skeleton(joints, w)
    basis = _make_basis(cfg, g, verts, jpos, part)
    return QuadrupedModel(mesh, skeleton, basis, _frozen(part, np.int64), kp_names)


def _shape_fields(cfg, g, rng):
    """Displacement fields as functions of (N, 3) positions and part labels."""
    a, bh = g["a"], g["bh"]
    neck_base, neck_dir = g["neck_base"], g["neck_dir"]
    tail_base = g["tail_base"]
    tail_dir = np.array([-np.cos(np.radians(60)), np.sin(np.radians(60)), 0.0])
    head_c = g["head_pos"]
    belly = 0.6 * bh

    def body_length(p):
        return np.stack([0.1 * p[:, 0], 0 * p[:, 0], 0 * p[:, 0]], -1)

    def girth(p):
        return np.stack([0 * p[:, 0], 0.1 * np.clip(p[:, 1], -bh, bh), 0.1 * p[:, 2]], -1)

    def leg_length(p):
        return np.stack([0 * p[:, 0], 0.15 * np.maximum(0.0, p[:, 1] - belly), 0 * p[:, 0]], -1)

    def along(base, direction, gain):
        def f(p):
            s = np.maximum(0.0, (p - base) @ direction) * _smoothstep(-0.1, 0.1, (p - base) @ direction)
            return gain * s[:, None] * direction
        return f

    def head_size(p):
        r = np.linalg.norm(p - head_c, axis=1)
        wgt = np.exp(-(r / (0.6 * cfg.head_length)) ** 2)
        return 0.15 * wgt[:, None] * (p - head_c)

    def leg_thickness(p):
        out = np.zeros_like(p)
        for leg in LEGS:
            c = np.array([g["leg_x"][leg], 0.0, g["leg_z"][leg]])
            d = p - c
            d[:, 1] = 0.0
            r = np.linalg.norm(d, axis=1)
            wgt = np.exp(-(r / (3 * cfg.leg_radius)) ** 2) * _smoothstep(0.3 * bh, bh, p[:, 1])
            out += 0.2 * wgt[:, None] * d
        return out

    def overall(p):
        return 0.08 * p

    fields = [body_length, girth, leg_length, along(neck_base, neck_dir, 0.15), head_size,
              along(tail_base, tail_dir, 0.2), leg_thickness, overall]
    names = list(SEMANTIC_MODES)
    for m in range(N_SHAPE_MODES - len(fields)):
        k = rng.normal(size=3)
        k *= rng.uniform(0.6, 1.8) / np.linalg.norm(k)
        amp = rng.normal(size=3)
        amp *= 0.03 / np.linalg.norm(amp)
        phase = rng.uniform(0, 2 * np.pi)

        def smooth(p, k=k, amp=amp, phase=phase):
            return np.sin(p @ k + phase)[:, None] * amp

        fields.append(smooth)
        names.append(f"smooth_{m:02d}")
    return fields, names


def _make_basis(cfg, g, verts, jpos, part):
    rng = np.random.default_rng(cfg.basis_seed)
    fields, names = _shape_fields(cfg, g, rng)
    vm = np.stack([f(verts) for f in fields])
    jm = np.stack([f(jpos) for f in fields])
    return ShapeBasis(vm, jm, tuple(names))


# --------------------------------------------------------------------------
# deformation


def _check_beta(basis: ShapeBasis, beta) -> np.ndarray:
    beta = np.asarray(beta, float).reshape(-1)
    if len(beta) != basis.n_modes:
        raise DimensionError(f"expected {basis.n_modes} shape coefficients, got {len(beta)}")
    if not np.all(np.isfinite(beta)):
        raise ValueError("shape coefficients must be finite")
    return beta


def apply_shape(mesh: Mesh, basis: ShapeBasis, beta) -> Mesh:
    beta = _check_beta(basis, beta)
    if basis.vertex_modes.shape[1] != mesh.n_vertices:
        raise DimensionError("shape basis does not match mesh vertex count")
    return mesh.with_vertices(mesh.vertices + np.tensordot(beta, basis.vertex_modes, axes=1))


def shape_skeleton(skeleton: Skeleton, basis: ShapeBasis, beta) -> Skeleton:
    """Move joint rest positions with the same linear shape fields as the vertices."""
    beta = _check_beta(basis, beta)
    if basis.joint_modes.shape[1] != skeleton.n_joints:
        raise DimensionError("shape basis does not match joint count")
    rest = skeleton.rest_positions() + np.tensordot(beta, basis.joint_modes, axes=1)
    return skeleton.with_rest_positions(rest)


def pose_skeleton(skeleton: Skeleton, pose: Pose) -> JointTransforms:
    if pose.n_joints != skeleton.n_joints:
        raise DimensionError(f"pose has {pose.n_joints} joints, skeleton {skeleton.n_joints}")
    local = rodrigues(pose.all_angles())
    rest = skeleton.rest_positions()
    rot = np.zeros_like(local)
    pos = np.zeros_like(rest)
    for i, j in enumerate(skeleton.joints):
        if j.parent is None:
            rot[i], pos[i] = local[i], rest[i]
        else:
            p = j.parent
            rot[i] = rot[p] @ local[i]
            pos[i] = pos[p] + rot[p] @ np.asarray(j.rest_offset)
    return JointTransforms(_frozen(rot), _frozen(pos), _frozen(rest))


def skin_points(points, weights, transforms: JointTransforms) -> np.ndarray:
    rel = points[:, None, :] - transforms.rest_positions[None]  # (V, J, 3)
    moved = np.einsum("jab,vjb->vja", transforms.rotations, rel) + transforms.positions[None]
    return np.einsum("vj,vja->va", weights, moved)


def skin(mesh: Mesh, skeleton: Skeleton, transforms: JointTransforms) -> Mesh:
    if skeleton.skin_weights.shape[0] != mesh.n_vertices:
        raise DimensionError("skin weights do not cover every vertex")
    return mesh.with_vertices(skin_points(mesh.vertices, skeleton.skin_weights, transforms))


def posed_mesh(model: QuadrupedModel, pose: Pose, beta) -> Mesh:
    """Shape, then pose, the template (camera translation not applied)."""
    mesh = apply_shape(model.mesh, model.basis, beta)
    skel = shape_skeleton(model.skeleton, model.basis, beta)
    return skin(mesh, skel, pose_skeleton(skel, pose))


# --------------------------------------------------------------------------
# projection


def to_camera(camera: Camera, points) -> np.ndarray:
    return np.asarray(points, float) + camera.translation


def project(camera: Camera, points) -> np.ndarray:
    """Pinhole projection of model-space point(s) (..., 3) to pixels (..., 2)."""
    pc = to_camera(camera, points)
    z = pc[..., 2]
    if np.any(z <= 0) or not np.all(np.isfinite(z)):
        raise ProjectionError("point at or behind the camera plane")
    cx, cy = camera.principal_point
    return np.stack([cx + camera.focal * pc[..., 0] / z, cy + camera.focal * pc[..., 1] / z], -1)


def project_jacobian(camera: Camera, points) -> np.ndarray:
    """d(pixel)/d(point) for each point, shape (..., 2, 3)."""
    pc = to_camera(camera, points)
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    if np.any(z <= 0):
        raise ProjectionError("point at or behind the camera plane")
    f = camera.focal
    jac = np.zeros(pc.shape[:-1] + (2, 3))
    jac[..., 0, 0] = f / z
    jac[..., 0, 2] = -f * x / z**2
    jac[..., 1, 1] = f / z
    jac[..., 1, 2] = -f * y / z**2
    return jac


# --------------------------------------------------------------------------
# OBJ interchange


def write_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.17g} {v:.17g}" for u, v in mesh.uv]
    lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces]
    if len(mesh.keypoint_ids):
        lines.append("# keypoints " + " ".join(str(int(k)) for k in mesh.keypoint_ids))
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    """Read the `v` / `vt` / `f a/at b/bt c/ct` subset; uv is reindexed per vertex."""
    verts, tex, faces, ftex, kps = [], [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            tex.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError("only triangular faces are supported")
            idx = [p.split("/") for p in parts[1:]]
            faces.append([int(i[0]) - 1 for i in idx])
            ftex.append([int(i[1]) - 1 if len(i) > 1 and i[1] else int(i[0]) - 1 for i in idx])
        elif parts[:2] == ["#", "keypoints"]:
            kps = [int(x) for x in parts[2:]]
    verts = np.array(verts, float).reshape(-1, 3)
    uv = np.zeros((len(verts), 2))
    if tex:
        tex = np.array(tex)
        for f, ft in zip(faces, ftex):
            uv[f] = tex[ft]
    return Mesh(verts, np.array(faces, np.int64).reshape(-1, 3), uv, kps)
