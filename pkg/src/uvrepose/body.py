"""Procedural articulated body: rest mesh, forward kinematics, pinhole camera.

The body is a set of triangulated open cylinders (torso and limb segments) and
a UV sphere head.  World space is y-up and the rest body faces +z.  Every part
owns one rectangular chart in a fixed UV atlas; vertices on cylinder seams and
sphere poles are duplicated so that no triangle straddles two charts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, ProjectionError

PARTS = (
    "head",
    "torso",
    "upper_arm_l",
    "forearm_l",
    "upper_arm_r",
    "forearm_r",
    "thigh_l",
    "shin_l",
    "thigh_r",
    "shin_r",
)
PART_INDEX = {name: i for i, name in enumerate(PARTS)}

# atlas cells (u0, v0, u1, v1); v grows with texture row index
_CELLS = {
    "head": (0.0, 0.0, 0.5, 0.5),
    "torso": (0.5, 0.0, 1.0, 0.5),
    "upper_arm_l": (0.0, 0.5, 0.25, 0.75),
    "forearm_l": (0.25, 0.5, 0.5, 0.75),
    "upper_arm_r": (0.5, 0.5, 0.75, 0.75),
    "forearm_r": (0.75, 0.5, 1.0, 0.75),
    "thigh_l": (0.0, 0.75, 0.25, 1.0),
    "shin_l": (0.25, 0.75, 0.5, 1.0),
    "thigh_r": (0.5, 0.75, 0.75, 1.0),
    "shin_r": (0.75, 0.75, 1.0, 1.0),
}
# one texel of the default 256 atlas on each side -> 2-texel gutter between charts
_GUTTER = 1.0 / 256.0

PART_COLORS = np.array(
    [
        [0.95, 0.80, 0.20],
        [0.85, 0.25, 0.25],
        [0.20, 0.75, 0.30],
        [0.10, 0.55, 0.85],
        [0.30, 0.90, 0.60],
        [0.50, 0.35, 0.90],
        [0.95, 0.55, 0.15],
        [0.80, 0.30, 0.70],
        [0.25, 0.85, 0.85],
        [0.60, 0.60, 0.20],
    ]
)

JOINTS = (
    "neck",
    "shoulder_l",
    "shoulder_r",
    "elbow_l",
    "elbow_r",
    "hip_l",
    "hip_r",
    "knee_l",
    "knee_r",
)

JOINT_LIMITS = {
    "neck": (-1.2, 1.2),
    "shoulder_l": (-1.0, 3.0),
    "shoulder_r": (-1.0, 3.0),
    "elbow_l": (0.0, 2.6),
    "elbow_r": (0.0, 2.6),
    "hip_l": (-0.6, 2.0),
    "hip_r": (-0.6, 2.0),
    "knee_l": (0.0, 2.4),
    "knee_r": (0.0, 2.4),
}

# keypoint names: the pelvis root, every articulated joint, and the head centre
KEYPOINT_NAMES = ("pelvis",) + JOINTS + ("head",)


@dataclass(frozen=True)
class BodyConfig:
    torso_length: float = 0.6
    torso_radius_x: float = 0.17
    torso_radius_z: float = 0.11
    neck_length: float = 0.05
    head_radius: float = 0.14
    upper_arm_length: float = 0.3
    upper_arm_radius: float = 0.05
    forearm_length: float = 0.27
    forearm_radius: float = 0.042
    thigh_length: float = 0.42
    thigh_radius: float = 0.07
    shin_length: float = 0.42
    shin_radius: float = 0.055
    hip_width: float = 0.09
    tessellation: int = 2
    # face rectangle (u0, v0, u1, v1) in head-chart-local coordinates
    face_region: tuple = (0.33, 0.28, 0.67, 0.72)

    def validate(self):
        for name, value in self.__dict__.items():
            if name in ("tessellation", "face_region"):
                continue
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be strictly positive, got {value!r}")
        if int(self.tessellation) != self.tessellation or self.tessellation < 1:
            raise ConfigError(f"tessellation must be a positive integer, got {self.tessellation!r}")
        u0, v0, u1, v1 = self.face_region
        if not (0.0 <= u0 < u1 <= 1.0 and 0.0 <= v0 < v1 <= 1.0):
            raise ConfigError(f"face_region {self.face_region!r} must lie inside [0,1]^2")


@dataclass
class Rig:
    """Joint tree of the rest body.  All pivots and axes are rest-space."""

    pivots: dict
    axes: dict
    parents: dict  # joint -> parent joint (None for children of the pelvis root)
    part_joint: dict  # part -> driving joint (None = rigid with the pelvis)
    head_center: np.ndarray


@dataclass
class Mesh:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int
    uv: np.ndarray  # (N, 2) in [0,1]^2
    face_part: np.ndarray  # (F,) index into PARTS
    vertex_part: np.ndarray | None = None
    rig: Rig | None = None
    face_uv_rect: tuple | None = None

    def with_vertices(self, vertices):
        return replace(self, vertices=vertices)

    @property
    def n_faces(self):
        return len(self.faces)


@dataclass(frozen=True)
class PoseParams:
    angles: dict = field(default_factory=dict)
    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def clamped(self):
        angles = {}
        for name, value in self.angles.items():
            if name not in JOINT_LIMITS:
                raise ConfigError(f"unknown joint {name!r}")
            value = float(value)
            if not np.isfinite(value):
                raise ConfigError(f"joint {name} angle is not finite")
            lo, hi = JOINT_LIMITS[name]
            angles[name] = min(max(value, lo), hi)
        if not np.all(np.isfinite(self.rotation)) or not np.all(np.isfinite(self.translation)):
            raise ConfigError("global rotation/translation must be finite")
        return PoseParams(angles, tuple(map(float, self.rotation)), tuple(map(float, self.translation)))

    def to_json(self):
        return {
            "angles": {k: float(v) for k, v in self.angles.items()},
            "rotation": [float(v) for v in self.rotation],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, data):
        unknown = set(data) - {"angles", "rotation", "translation"}
        if unknown:
            raise ConfigError(f"unknown pose keys: {sorted(unknown)}")
        return cls(
            dict(data.get("angles", {})),
            tuple(data.get("rotation", (0.0, 0.0, 0.0))),
            tuple(data.get("translation", (0.0, 0.0, 0.0))),
        )


@dataclass(frozen=True)
class Camera:
    focal: float = 256.0
    cx: float = 128.0
    cy: float = 128.0
    # camera-to-world rotation (columns are the camera axes in world space) and centre
    rotation: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, -1.0]))
    center: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 2.4]))
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not self.focal > 0:
            raise ConfigError("focal length must be positive")
        if self.width < 16 or self.height < 16:
            raise ConfigError("camera resolution must be at least 16x16")

    def scaled(self, width, height):
        sx, sy = width / self.width, height / self.height
        return replace(self, focal=self.focal * sx, cx=self.cx * sx, cy=self.cy * sy, width=width, height=height)

    def to_json(self):
        return {
            "focal": self.focal,
            "principal_point": [self.cx, self.cy],
            "rotation": np.asarray(self.rotation).tolist(),
            "center": np.asarray(self.center).tolist(),
            "resolution": [self.width, self.height],
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            focal=float(data["focal"]),
            cx=float(data["principal_point"][0]),
            cy=float(data["principal_point"][1]),
            rotation=np.array(data["rotation"], dtype=float),
            center=np.array(data["center"], dtype=float),
            width=int(data["resolution"][0]),
            height=int(data["resolution"][1]),
        )


def orbit_camera(yaw=0.0, pitch=0.0, distance=2.4, target=(0.0, 0.0, 0.0), focal=256.0, size=256):
    """Camera on a sphere around `target`, looking at it with image-y pointing down.

    yaw=0 views the body from the front; yaw=pi from behind.
    """
    target = np.asarray(target, dtype=float)
    forward = -np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
    center = target - distance * forward
    right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return Camera(focal, size / 2.0, size / 2.0, rot, center, size, size)


def _cell(part):
    u0, v0, u1, v1 = _CELLS[part]
    return u0 + _GUTTER, v0 + _GUTTER, u1 - _GUTTER, v1 - _GUTTER


def _grid_faces(rows, cols, offset):
    faces = []
    for i in range(rows):
        for j in range(cols):
            a = offset + i * (cols + 1) + j
            b, c, d = a + 1, a + cols + 1, a + cols + 2
            faces.append((a, c, b))
            faces.append((b, c, d))
    return np.array(faces, dtype=np.int64)


def _orient_outward(vertices, faces, centers):
    """Flip faces whose normal points toward `centers` (per-face interior point)."""
    tri = vertices[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    out = tri.mean(axis=1) - centers
    flip = np.einsum("ij,ij->i", normal, out) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _drop_degenerate(vertices, faces):
    tri = vertices[faces]
    area = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    return faces[area > 1e-12]


def _cylinder(part, top, length, rx, rz, n_around, n_along, downward, offset):
    """Open elliptic cylinder along y.  phi=0 faces +z and maps to the chart's centre column."""
    u0, v0, u1, v1 = _cell(part)
    phi = -np.pi + 2.0 * np.pi * np.arange(n_around + 1) / n_around
    s = np.arange(n_along + 1) / n_along
    ss, pp = np.meshgrid(s, phi, indexing="ij")
    y = top[1] - ss * length if downward else top[1] + (1.0 - ss) * length
    verts = np.stack(
        [top[0] + rx * np.sin(pp), y, top[2] + rz * np.cos(pp)], axis=-1
    ).reshape(-1, 3)
    # exact axis extremes regardless of tessellation
    verts[np.isclose(np.sin(pp).ravel(), 0.0, atol=1e-12), 0] = top[0]
    verts[np.isclose(np.cos(pp).ravel(), 0.0, atol=1e-12), 2] = top[2]
    uv = np.stack(
        [u0 + (pp.ravel() + np.pi) / (2.0 * np.pi) * (u1 - u0), v0 + ss.ravel() * (v1 - v0)], axis=-1
    )
    faces = _grid_faces(n_along, n_around, 0)
    axis_pts = np.stack([np.full(len(verts), top[0]), verts[:, 1], np.full(len(verts), top[2])], axis=-1)
    faces = _orient_outward(verts, faces, axis_pts[faces].mean(axis=1))
    return verts, uv, faces + offset


def _sphere(part, center, radius, n_lat, n_lon, offset):
    u0, v0, u1, v1 = _cell(part)
    theta = np.pi * np.arange(n_lat + 1) / n_lat
    phi = -np.pi + 2.0 * np.pi * np.arange(n_lon + 1) / n_lon
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    st, ct = np.sin(tt), np.cos(tt)
    # snap trig values at the axes so extents are tessellation independent
    st, ct = np.where(np.abs(st) < 1e-12, 0.0, st), np.where(np.abs(ct) < 1e-12, 0.0, ct)
    sp, cp = np.sin(pp), np.cos(pp)
    sp, cp = np.where(np.abs(sp) < 1e-12, 0.0, sp), np.where(np.abs(cp) < 1e-12, 0.0, cp)
    verts = center + radius * np.stack([st * sp, ct, st * cp], axis=-1).reshape(-1, 3)
    uv = np.stack(
        [u0 + (pp.ravel() + np.pi) / (2.0 * np.pi) * (u1 - u0), v0 + tt.ravel() / np.pi * (v1 - v0)], axis=-1
    )
    faces = _drop_degenerate(verts, _grid_faces(n_lat, n_lon, 0))
    faces = _orient_outward(verts, faces, np.broadcast_to(center, (len(faces), 3)))
    return verts, uv, faces + offset


def build_body(config=None):
    """Rest-pose mesh for `config` (defaults if None).  Deterministic."""
    config = config or BodyConfig()
    config.validate()
    level = int(config.tessellation)
    n_around, n_along = 8 * level, 2 * level

    c = config
    shoulder_y = c.torso_length - 0.04 * c.torso_length / 0.6
    shoulder_x = c.torso_radius_x + c.upper_arm_radius
    pivots = {
        "neck": np.array([0.0, c.torso_length, 0.0]),
        "shoulder_l": np.array([shoulder_x, shoulder_y, 0.0]),
        "shoulder_r": np.array([-shoulder_x, shoulder_y, 0.0]),
        "elbow_l": np.array([shoulder_x, shoulder_y - c.upper_arm_length, 0.0]),
        "elbow_r": np.array([-shoulder_x, shoulder_y - c.upper_arm_length, 0.0]),
        "hip_l": np.array([c.hip_width, 0.0, 0.0]),
        "hip_r": np.array([-c.hip_width, 0.0, 0.0]),
        "knee_l": np.array([c.hip_width, -c.thigh_length, 0.0]),
        "knee_r": np.array([-c.hip_width, -c.thigh_length, 0.0]),
    }
    axes = {
        "neck": np.array([0.0, 1.0, 0.0]),
        "shoulder_l": np.array([-1.0, 0.0, 0.0]),
        "shoulder_r": np.array([-1.0, 0.0, 0.0]),
        "elbow_l": np.array([0.0, 0.0, -1.0]),
        "elbow_r": np.array([0.0, 0.0, 1.0]),
        "hip_l": np.array([-1.0, 0.0, 0.0]),
        "hip_r": np.array([-1.0, 0.0, 0.0]),
        "knee_l": np.array([1.0, 0.0, 0.0]),
        "knee_r": np.array([1.0, 0.0, 0.0]),
    }
    parents = {
        "neck": None,
        "shoulder_l": None,
        "shoulder_r": None,
        "elbow_l": "shoulder_l",
        "elbow_r": "shoulder_r",
        "hip_l": None,
        "hip_r": None,
        "knee_l": "hip_l",
        "knee_r": "hip_r",
    }
    part_joint = {
        "head": "neck",
        "torso": None,
        "upper_arm_l": "shoulder_l",
        "forearm_l": "elbow_l",
        "upper_arm_r": "shoulder_r",
        "forearm_r": "elbow_r",
        "thigh_l": "hip_l",
        "shin_l": "knee_l",
        "thigh_r": "hip_r",
        "shin_r": "knee_r",
    }
    head_center = pivots["neck"] + np.array([0.0, c.neck_length + c.head_radius, 0.0])

    pieces = []
    offset = 0

    def add(part, piece):
        nonlocal offset
        verts, uv, faces = piece
        pieces.append((part, verts, uv, faces))
        offset += len(verts)

    add("head", _sphere("head", head_center, c.head_radius, 4 * level, n_around, offset))
    add(
        "torso",
        _cylinder("torso", np.zeros(3), c.torso_length, c.torso_radius_x, c.torso_radius_z, n_around, n_along, False, offset),
    )
    limbs = [
        ("upper_arm_l", "shoulder_l", c.upper_arm_length, c.upper_arm_radius),
        ("forearm_l", "elbow_l", c.forearm_length, c.forearm_radius),
        ("upper_arm_r", "shoulder_r", c.upper_arm_length, c.upper_arm_radius),
        ("forearm_r", "elbow_r", c.forearm_length, c.forearm_radius),
        ("thigh_l", "hip_l", c.thigh_length, c.thigh_radius),
        ("shin_l", "knee_l", c.shin_length, c.shin_radius),
        ("thigh_r", "hip_r", c.thigh_length, c.thigh_radius),
        ("shin_r", "knee_r", c.shin_length, c.shin_radius),
    ]
    for part, joint, length, radius in limbs:
        add(part, _cylinder(part, pivots[joint], length, radius, radius, n_around, n_along, True, offset))

    vertices = np.concatenate([p[1] for p in pieces])
    uv = np.concatenate([p[2] for p in pieces])
    faces = np.concatenate([p[3] for p in pieces])
    face_part = np.concatenate([np.full(len(p[3]), PART_INDEX[p[0]]) for p in pieces])
    vertex_part = np.concatenate([np.full(len(p[1]), PART_INDEX[p[0]]) for p in pieces])

    hu0, hv0, hu1, hv1 = _cell("head")
    fu0, fv0, fu1, fv1 = c.face_region
    face_rect = (
        hu0 + fu0 * (hu1 - hu0),
        hv0 + fv0 * (hv1 - hv0),
        hu0 + fu1 * (hu1 - hu0),
        hv0 + fv1 * (hv1 - hv0),
    )
    rig = Rig(pivots, axes, parents, part_joint, head_center)
    return Mesh(vertices, faces, uv, face_part, vertex_part, rig, face_rect)


def _joint_transforms(rig, angles):
    """Rest-space rigid transform (R, t) of every joint after articulation."""
    out = {}

    def resolve(joint):
        if joint in out:
            return out[joint]
        theta = angles.get(joint, 0.0)
        local = Rotation.from_rotvec(rig.axes[joint] * theta).as_matrix()
        pivot = rig.pivots[joint]
        local_t = pivot - local @ pivot
        parent = rig.parents[joint]
        if parent is None:
            out[joint] = (local, local_t)
        else:
            pr, pt = resolve(parent)
            out[joint] = (pr @ local, pr @ local_t + pt)
        return out[joint]

    for joint in rig.pivots:
        resolve(joint)
    return out


def _global(pose):
    rot = Rotation.from_euler("xyz", pose.rotation).as_matrix()
    return rot, np.asarray(pose.translation, dtype=float)


def pose_body(mesh, pose):
    """Rigid per-part forward kinematics, then the global rotation and translation."""
    if mesh.rig is None or mesh.vertex_part is None:
        raise ConfigError("pose_body needs a rest mesh produced by build_body")
    pose = pose.clamped()
    transforms = _joint_transforms(mesh.rig, pose.angles)
    g_rot, g_t = _global(pose)
    out = np.empty_like(mesh.vertices)
    for part, joint in mesh.rig.part_joint.items():
        sel = mesh.vertex_part == PART_INDEX[part]
        v = mesh.vertices[sel]
        if joint is not None:
            r, t = transforms[joint]
            v = v @ r.T + t
        out[sel] = v @ g_rot.T + g_t
    return mesh.with_vertices(out)


def joint_positions(mesh, pose):
    """World positions of every keypoint after posing (pivot of each joint + head centre)."""
    pose = pose.clamped()
    rig = mesh.rig
    transforms = _joint_transforms(rig, pose.angles)
    g_rot, g_t = _global(pose)
    pts = {"pelvis": np.zeros(3)}
    for joint in JOINTS:
        parent = rig.parents[joint]
        p = rig.pivots[joint]
        if parent is not None:
            r, t = transforms[parent]
            p = r @ p + t
        pts[joint] = p
    r, t = transforms["neck"]
    pts["head"] = r @ rig.head_center + t
    return {name: g_rot @ pts[name] + g_t for name in KEYPOINT_NAMES}


def world_to_camera(points, camera):
    points = np.asarray(points, dtype=float)
    return (points - camera.center) @ np.asarray(camera.rotation)


def project(points_or_mesh, camera, near=1e-3):
    """Pinhole projection.  Returns (pixels (N,2), depth (N,)).

    Accepts a Mesh or an (N,3) array of world points.
    """
    points = points_or_mesh.vertices if isinstance(points_or_mesh, Mesh) else points_or_mesh
    cam = world_to_camera(points, camera)
    depth = cam[:, 2]
    bad = np.flatnonzero(~(depth > near))
    if len(bad):
        raise ProjectionError(int(bad[0]), float(depth[bad[0]]), near)
    pix = np.empty((len(cam), 2))
    pix[:, 0] = camera.focal * cam[:, 0] / depth + camera.cx
    pix[:, 1] = camera.focal * cam[:, 1] / depth + camera.cy
    return pix, depth


@dataclass
class KeypointSet:
    names: tuple
    points: np.ndarray  # (K, 2) pixels
    visible: np.ndarray  # (K,) bool

    def as_dict(self):
        return {n: (self.points[i].tolist(), bool(self.visible[i])) for i, n in enumerate(self.names)}


def keypoints(mesh, pose, camera, near=1e-3):
    """Projected joint pivots.  Points behind the camera or outside the frame are invisible."""
    world = joint_positions(mesh, pose)
    pts = np.stack([world[n] for n in KEYPOINT_NAMES])
    cam = world_to_camera(pts, camera)
    depth = cam[:, 2]
    in_front = depth > near
    safe = np.where(in_front, depth, 1.0)
    pix = np.stack(
        [camera.focal * cam[:, 0] / safe + camera.cx, camera.focal * cam[:, 1] / safe + camera.cy], axis=-1
    )
    in_frame = (pix[:, 0] >= 0) & (pix[:, 0] < camera.width) & (pix[:, 1] >= 0) & (pix[:, 1] < camera.height)
    pix[~in_front] = np.nan
    return KeypointSet(KEYPOINT_NAMES, pix, in_front & in_frame)
