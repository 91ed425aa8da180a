"""Parallel-jaw gripper: query cloud, contacts, antipodal sampling, collision.

Gripper frame: origin midway between the finger pads, closing axis along local
``y``, approach axis along local ``z`` (palm on the negative side).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from .objects import TriMesh, inside, ray_triangle_hits, sample_surface

DEFAULT_ASSET = "parallel_jaw.json"


class NoContact(Exception):
    pass


class SamplingExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    name: str
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray  # box axes expressed in the gripper frame


@dataclass(frozen=True)
class GripperModel:
    query_points: np.ndarray  # (30, 3)
    body_boxes: tuple[Box, ...]
    max_width: float
    closing_axis: np.ndarray
    approach_axis: np.ndarray

    def __post_init__(self):
        if self.query_points.shape != (30, 3):
            raise ValueError(f"gripper needs exactly 30 query points, got {self.query_points.shape}")

    @classmethod
    def from_dict(cls, data: dict) -> "GripperModel":
        boxes = tuple(
            Box(
                b.get("name", f"box{i}"),
                np.asarray(b["center"], dtype=float),
                np.asarray(b["half_extents"], dtype=float),
                np.asarray(b.get("rotation", np.eye(3)), dtype=float),
            )
            for i, b in enumerate(data["body_boxes"])
        )
        return cls(
            query_points=np.asarray(data["query_points"], dtype=float),
            body_boxes=boxes,
            max_width=float(data["max_width"]),
            closing_axis=np.asarray(data["closing_axis"], dtype=float),
            approach_axis=np.asarray(data["approach_axis"], dtype=float),
        )

    @classmethod
    def load(cls, path=None) -> "GripperModel":
        if path is None:
            text = resources.files("dualgrasp.assets").joinpath(DEFAULT_ASSET).read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "max_width": self.max_width,
            "closing_axis": self.closing_axis.tolist(),
            "approach_axis": self.approach_axis.tolist(),
            "body_boxes": [
                {"name": b.name, "center": b.center.tolist(), "half_extents": b.half_extents.tolist(),
                 "rotation": b.rotation.tolist()}
                for b in self.body_boxes
            ],
            "query_points": self.query_points.tolist(),
        }


_default = None


def default_gripper() -> GripperModel:
    global _default
    if _default is None:
        _default = GripperModel.load()
    return _default


def grasp_query_points(h: np.ndarray, g: GripperModel) -> np.ndarray:
    """Query cloud moved by both poses: ``(..., 2, 4, 4) -> (..., 60, 3)``, arm 1 first."""
    pts = geo.transform_points(np.asarray(h, dtype=float), g.query_points)
    return pts.reshape(pts.shape[:-3] + (60, 3))


@dataclass(frozen=True)
class Contact:
    position: np.ndarray
    normal: np.ndarray  # unit, pointing into the object

    def __post_init__(self):
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("contact normal must be unit length")


def find_contacts(mesh: TriMesh, pose: np.ndarray, g: GripperModel) -> tuple[Contact, Contact]:
    """Jaw contacts along the closing line of a single grasp.

    The closing segment spans ``max_width`` centred on the grasp origin.  Both
    ends must be outside the object, and the segment must cross the surface.

    Raises:
        NoContact: if the segment misses the object or an end starts inside it.
    """
    pose = np.asarray(pose, dtype=float)
    axis = pose[:3, :3] @ g.closing_axis
    half = 0.5 * g.max_width
    start = pose[:3, 3] - half * axis
    end = pose[:3, 3] + half * axis
    if inside(mesh, np.stack([start, end])).any():
        raise NoContact("object wider than the gripper opening")
    s, hit = ray_triangle_hits(start[None], axis, mesh.triangles)
    s, hit = s[0], hit[0] & (s[0] >= 0) & (s[0] <= g.max_width)
    if not hit.any():
        raise NoContact("closing line misses the object")
    idx = np.flatnonzero(hit)
    normals = mesh.face_normals()
    first, last = idx[np.argmin(s[idx])], idx[np.argmax(s[idx])]
    if normals[first] @ axis >= 0 or normals[last] @ axis <= 0:
        raise NoContact("grazing contact")
    c1 = Contact(start + s[first] * axis, -normals[first])
    c2 = Contact(start + s[last] * axis, -normals[last])
    return c1, c2


class ObstacleCloud:
    """A point cloud with a k-d tree for gripper collision queries."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        self.tree = cKDTree(self.points)


def _body_radius(g: GripperModel) -> float:
    return max(float(np.linalg.norm(np.abs(b.center) + np.linalg.norm(b.half_extents))) for b in g.body_boxes)


def _points_in_body(local: np.ndarray, g: GripperModel, inflate: float) -> np.ndarray:
    hit = np.zeros(local.shape[:-1], dtype=bool)
    for b in g.body_boxes:
        q = (local - b.center) @ b.rotation
        hit |= np.all(np.abs(q) <= b.half_extents + inflate, axis=-1)
    return hit


def collision_mask_brute(cloud: np.ndarray, poses: np.ndarray, g: GripperModel, inflate: float = 0.0) -> np.ndarray:
    """Reference scan of every point against every box, for poses ``(..., 4, 4)``."""
    poses = np.asarray(poses, dtype=float)
    R, t = poses[..., :3, :3], poses[..., :3, 3]
    # gripper-frame coordinates R^T (x - t), as row vectors
    local = (np.asarray(cloud, dtype=float) - t[..., None, :]) @ R
    return _points_in_body(local, g, inflate).any(axis=-1)


def collision_mask(cloud, poses: np.ndarray, g: GripperModel, inflate: float = 0.0) -> np.ndarray:
    """Per-pose flags: does any cloud point fall inside a body box grown by ``inflate``?

    The space between the fingers is not part of the body.  ``cloud`` may be
    an array or an :class:`ObstacleCloud`; only points within the body's
    bounding sphere are tested.
    """
    if not isinstance(cloud, ObstacleCloud):
        cloud = ObstacleCloud(cloud)
    poses = np.asarray(poses, dtype=float)
    flat = poses.reshape(-1, 4, 4)
    radius = _body_radius(g) + inflate * np.sqrt(3.0) + 1e-9
    centers, group = np.unique(flat[:, :3, 3], axis=0, return_inverse=True)
    group = group.reshape(-1)
    near = cloud.tree.query_ball_point(centers, radius)
    out = np.zeros(len(flat), dtype=bool)
    for c, idx in enumerate(near):
        if not idx:
            continue
        members = np.flatnonzero(group == c)
        local = (cloud.points[idx] - centers[c]) @ flat[members, :3, :3]
        out[members] = _points_in_body(local, g, inflate).any(axis=-1)
    return out.reshape(poses.shape[:-2])


def check_collision(cloud: np.ndarray, pose: np.ndarray, g: GripperModel, inflate: float = 0.0) -> bool:
    return bool(collision_mask(cloud, np.asarray(pose)[None], g, inflate)[0])


def _perpendicular_frames(closing: np.ndarray, roll: np.ndarray) -> np.ndarray:
    """Rotations whose local y is ``closing`` and local z is rolled by ``roll`` about it."""
    n = len(closing)
    helper = np.where(np.abs(closing[:, [0]]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
    u = np.cross(closing, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = np.cross(closing, u)
    z = np.cos(roll)[:, None] * u + np.sin(roll)[:, None] * w
    x = np.cross(closing, z)
    R = np.empty((n, 3, 3))
    R[:, :, 0], R[:, :, 1], R[:, :, 2] = x, closing, z
    return R


def sample_antipodal_grasps(
    mesh: TriMesh,
    count: int,
    mu: float,
    seed: int,
    g: GripperModel | None = None,
    collision_cloud: np.ndarray | None = None,
    rolls: int = 8,
    batch: int = 256,
    max_attempts: int | None = None,
    clearance: float = 0.0,
) -> np.ndarray:
    """Rejection-sample collision-free antipodal grasps; returns ``(count, 4, 4)``.

    A surface point and a direction inside its inward friction cone define a
    ray; the first exit point along it is the second contact.  Pairs whose
    line lies inside both friction cones and whose separation fits the
    opening are kept; the approach roll is drawn uniformly and retried until
    the gripper body, grown by ``clearance``, clears the object.

    Raises:
        SamplingExhausted: if the acceptance rate falls below 1e-4 over the budget.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    g = g or default_gripper()
    rng = np.random.default_rng(seed)
    if collision_cloud is None:
        collision_cloud = sample_surface(mesh, 4000, seed=int(rng.integers(2**31)))
    if not isinstance(collision_cloud, ObstacleCloud):
        collision_cloud = ObstacleCloud(collision_cloud)
    normals = mesh.face_normals()
    tris = mesh.triangles
    half_angle = np.arctan(mu)
    cos_cone = np.cos(half_angle)
    max_attempts = max_attempts or max(20000, 2000 * count)
    accepted: list[np.ndarray] = []
    attempts = 0
    while len(accepted) < count:
        if attempts >= max_attempts:
            if len(accepted) / attempts < 1e-4 or len(accepted) == 0:
                raise SamplingExhausted(f"{len(accepted)} grasps after {attempts} attempts")
            break
        attempts += batch
        p1, face = sample_surface(mesh, batch, seed=int(rng.integers(2**31)), return_faces=True)
        inward = -normals[face]
        # direction uniform over the cone's solid angle
        cos_t = 1.0 - rng.random(batch) * (1.0 - cos_cone)
        phi = rng.uniform(0, 2 * np.pi, batch)
        frame = _perpendicular_frames(inward, np.zeros(batch))
        sin_t = np.sqrt(1 - cos_t**2)
        d = (cos_t[:, None] * inward + sin_t[:, None] * (np.cos(phi)[:, None] * frame[:, :, 0]
                                                          + np.sin(phi)[:, None] * frame[:, :, 2]))
        s, hit = ray_triangle_hits(p1, d, tris)
        hit &= s > 1e-9
        s = np.where(hit, s, np.inf)
        j = np.argmin(s, axis=1)
        dist = s[np.arange(batch), j]
        ok = np.isfinite(dist) & (dist <= g.max_width - 1e-3)
        ok &= np.einsum("ij,ij->i", d, normals[j]) >= cos_cone - 1e-12
        for k in np.flatnonzero(ok):
            center = p1[k] + 0.5 * dist[k] * d[k]
            roll = rng.uniform(0, 2 * np.pi, rolls)
            R = _perpendicular_frames(np.repeat(d[k][None], rolls, 0), roll)
            poses = np.tile(np.eye(4), (rolls, 1, 1))
            poses[:, :3, :3] = R
            poses[:, :3, 3] = center
            free = ~collision_mask(collision_cloud, poses, g, clearance)
            for pose in poses[free]:
                try:
                    find_contacts(mesh, pose, g)
                except NoContact:
                    continue
                accepted.append(pose)
                break
            if len(accepted) >= count:
                break
    return np.stack(accepted[:count])
