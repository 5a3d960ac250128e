"""Coordinate math and the point-cloud container used by every stage.

Conventions: matrices are row-major and act on column vectors, so a point
p maps to R @ p + t. Batched points are stored as (n, 3) rows and
transformed as points @ R.T + t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from vvstream.errors import CalibrationDegenerateError, DimensionError

WORLD = 'world'
CAMERA = 'camera'

_ORTHO_TOL = 1e-9
WHITE = (255, 255, 255)


class Point(NamedTuple):
    x: float
    y: float
    z: float
    r: int = 255
    g: int = 255
    b: int = 255


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Unordered colored points; `xyz` is float64 (n, 3), `rgb` uint8 (n, 3)."""

    xyz: np.ndarray
    rgb: np.ndarray
    frame: str = WORLD

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        rgb = np.asarray(self.rgb)
        if rgb.size == 0 and len(xyz):
            rgb = np.full((len(xyz), 3), 255, dtype=np.uint8)
        rgb = np.ascontiguousarray(rgb).reshape(-1, 3)
        if len(rgb) != len(xyz):
            raise DimensionError(f'{len(xyz)} positions but {len(rgb)} colors')
        if rgb.dtype != np.uint8:
            if rgb.size and (rgb.min() < 0 or rgb.max() > 255):
                raise ValueError('color channels must be within [0, 255]')
            rgb = rgb.astype(np.uint8)
        if not np.isfinite(xyz).all():
            raise ValueError('point coordinates must be finite')
        if self.frame not in (WORLD, CAMERA):
            raise ValueError(f'unknown frame of reference {self.frame!r}')
        object.__setattr__(self, 'xyz', xyz)
        object.__setattr__(self, 'rgb', rgb)

    @classmethod
    def empty(cls, frame=WORLD):
        return cls(np.empty((0, 3)), np.empty((0, 3), dtype=np.uint8), frame)

    @classmethod
    def from_points(cls, points: Iterable[Point], frame=WORLD):
        points = list(points)
        if not points:
            return cls.empty(frame)
        arr = np.array(points, dtype=np.float64)
        return cls(arr[:, :3], arr[:, 3:].astype(np.uint8), frame)

    @classmethod
    def concat(cls, clouds: Sequence['PointCloud'], frame=None):
        clouds = list(clouds)
        if frame is None:
            frame = clouds[0].frame if clouds else WORLD
        if not clouds:
            return cls.empty(frame)
        return cls(np.concatenate([c.xyz for c in clouds]),
                   np.concatenate([c.rgb for c in clouds]), frame)

    def __len__(self):
        return len(self.xyz)

    def __iter__(self) -> Iterator[Point]:
        for (x, y, z), (r, g, b) in zip(self.xyz.tolist(), self.rgb.tolist()):
            yield Point(x, y, z, r, g, b)

    def take(self, index) -> 'PointCloud':
        return PointCloud(self.xyz[index], self.rgb[index], self.frame)

    def with_frame(self, frame) -> 'PointCloud':
        return PointCloud(self.xyz, self.rgb, frame)

    def quantized(self) -> 'PointCloud':
        """Coordinates rounded through float32, as they travel on the wire."""
        return PointCloud(self.xyz.astype(np.float32).astype(np.float64), self.rgb, self.frame)

    def point_set(self) -> frozenset:
        """Order-free identity of the cloud at wire precision."""
        q = self.xyz.astype(np.float32)
        return frozenset(zip(map(tuple, q.tolist()), map(tuple, self.rgb.tolist())))

    def centroid(self) -> np.ndarray:
        if not len(self):
            raise ValueError('centroid of an empty cloud')
        return self.xyz.mean(axis=0)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    px: float
    py: float
    depth_scale: float = 0.001

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError('focal lengths must be positive')
        if self.depth_scale <= 0:
            raise ValueError('depth scale must be positive')


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Raw depth values S per pixel (row i, column j); 0 means no measurement."""

    width: int
    height: int
    depth: np.ndarray
    color: np.ndarray | None = None

    def __post_init__(self):
        depth = np.asarray(self.depth)
        if depth.size != self.width * self.height:
            raise DimensionError(
                f'depth image declares {self.width}x{self.height} but holds {depth.size} values')
        object.__setattr__(self, 'depth', depth.reshape(self.height, self.width))
        if self.color is not None:
            color = np.asarray(self.color)
            if color.size != self.width * self.height * 3:
                raise DimensionError('color image does not match depth dimensions')
            object.__setattr__(self, 'color', color.reshape(self.height, self.width, 3))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise ValueError('rotation is not orthogonal')
        if abs(np.linalg.det(rotation) - 1.0) > _ORTHO_TOL:
            raise ValueError('rotation is not proper (det != 1)')
        if not np.isfinite(translation).all():
            raise ValueError('translation must be finite')
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, xyz) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: 'RigidTransform') -> 'RigidTransform':
        """Transform applying `other` first, then self."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> 'RigidTransform':
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other):
        return self.compose(other)


def _wrap_angle(a: float) -> float:
    # maps onto (-pi, pi]
    return math.pi - ((math.pi - a) % (2 * math.pi))


@dataclass(frozen=True)
class EulerAngles:
    """Yaw (alpha), pitch (beta), roll (gamma) in radians."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        for name in ('yaw', 'pitch', 'roll'):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f'{name} must be finite')
            object.__setattr__(self, name, _wrap_angle(value))


def rgbd_to_pointcloud(depth: DepthImage, intr: CameraIntrinsics) -> PointCloud:
    """Back-project every measured pixel: z = D*S, x = (j-px)z/fx, y = (i-py)z/fy."""
    rows, cols = np.nonzero(depth.depth)
    s = depth.depth[rows, cols].astype(np.float64)
    z = intr.depth_scale * s
    x = (cols - intr.px) * z / intr.fx
    y = (rows - intr.py) * z / intr.fy
    if depth.color is not None:
        rgb = depth.color[rows, cols].astype(np.uint8)
    else:
        rgb = np.full((len(z), 3), 255, dtype=np.uint8)
    return PointCloud(np.column_stack([x, y, z]), rgb, CAMERA)


def project_to_pixels(cloud: PointCloud, intr: CameraIntrinsics):
    """Inverse pinhole mapping; returns float (j, i, S) arrays."""
    x, y, z = cloud.xyz.T
    j = x * intr.fx / z + intr.px
    i = y * intr.fy / z + intr.py
    return j, i, z / intr.depth_scale


def rotation_from_euler(angles: EulerAngles) -> RigidTransform:
    """R = roll . pitch . yaw, each a right-handed rotation.

    Yaw turns about z, pitch about y, roll about x.
    """
    ca, sa = math.cos(angles.yaw), math.sin(angles.yaw)
    cb, sb = math.cos(angles.pitch), math.sin(angles.pitch)
    cg, sg = math.cos(angles.roll), math.sin(angles.roll)
    roll = np.array([[1, 0, 0], [0, cg, -sg], [0, sg, cg]])
    pitch = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    yaw = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    return RigidTransform(roll @ pitch @ yaw)


def estimate_rigid_transform(source_joints, target_joints, weights=None,
                             min_correspondences=3) -> RigidTransform:
    """Weighted least-squares rigid alignment mapping source onto target (Kabsch)."""
    src = np.asarray(source_joints, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target_joints, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise DimensionError(f'{len(src)} source joints but {len(dst)} target joints')
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(src):
        raise DimensionError('one weight per correspondence is required')
    usable = w > 0
    if usable.sum() < min_correspondences:
        raise CalibrationDegenerateError(
            f'{int(usable.sum())} usable correspondences, need {min_correspondences}')
    src, dst, w = src[usable], dst[usable], w[usable]
    w = w / w.sum()

    src_c = w @ src
    dst_c = w @ dst
    a = src - src_c
    b = dst - dst_c

    spread = np.linalg.svd(np.sqrt(w)[:, None] * a, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-8 * spread[0]:
        raise CalibrationDegenerateError('correspondences are collinear')

    h = (a * w[:, None]).T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, dst_c - rotation @ src_c)


def residual_rms(source_joints, target_joints, transform: RigidTransform, weights=None) -> float:
    src = np.asarray(source_joints, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target_joints, dtype=np.float64).reshape(-1, 3)
    err = np.sum((transform.apply(src) - dst) ** 2, axis=1)
    if weights is None:
        return float(np.sqrt(err.mean()))
    w = np.asarray(weights, dtype=np.float64)
    keep = w > 0
    return float(np.sqrt(np.sum(w[keep] * err[keep]) / np.sum(w[keep])))


def apply_transform(cloud: PointCloud, t: RigidTransform, frame=None) -> PointCloud:
    return PointCloud(t.apply(cloud.xyz), cloud.rgb, frame or cloud.frame)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-from-camera pose for a pinhole camera (x right, y down, z forward)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError('camera target coincides with its position')
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.column_stack([right, down, forward])
    # re-orthonormalize against accumulated rounding
    u, _, vt = np.linalg.svd(rotation)
    return RigidTransform(u @ vt, position)
