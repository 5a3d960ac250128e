"""Per-camera frame sources: synthetic scene scripts and recorded PLY sequences.

A scene script is a JSON document::

    {
      "seed": 7, "fps": 24, "duration_s": 10,
      "background": {"primitives": [
          {"type": "box", "min": [-3, -3, 0], "max": [3, 3, 2.6], "points": 40000,
           "color": [180, 170, 160]},
          {"type": "plane", "origin": [1, 1, 0.8], "u": [0.6, 0, 0], "v": [0, 0.4, 0],
           "points": 2000, "motion": [{"t": 0, "offset": [0, 0, 0]},
                                      {"t": 5, "offset": [0.5, 0, 0]}]}]},
      "cameras": [{"id": 0, "position": [2.5, 0, 1.5], "look_at": [0, 0, 1],
                   "fov_deg": 110}],
      "body": {"points": 6000, "keyframes": [{"t": 0, "position": [0, 0, 0], "yaw_deg": 0}],
               "arm_swing": {"amplitude_deg": 20, "period_s": 1.2}},
      "skeleton_noise_m": 0.0, "skeleton_confidence": 1.0,
      "point_noise_m": 0.0, "drop_rate": 0.0
    }

``background`` may instead name a PLY file (``{"ply": "room.ply"}``, relative
to the script). A camera may add ``"depth": {"width", "height", "fx", "fy",
"px", "py", "depth_scale"}`` to be rendered through a depth image.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
import os
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from vvstream.body import DEFAULT_GROUP_SHARES, HumanoidModel, PartGroup, Skeleton
from vvstream.errors import DimensionError, ManifestError, ScriptError, StreamError, VVStreamError
from vvstream.geometry import (
    CAMERA, CameraIntrinsics, DepthImage, PointCloud, RigidTransform,
    look_at, rgbd_to_pointcloud,
)
from vvstream.ply import read_ply

logger = logging.getLogger(__name__)

MIN_RANGE_M = 0.1
MAX_RANGE_M = 10.0


@dataclass(frozen=True)
class FrameDescriptor:
    camera_id: int
    capture_timestamp: int
    sequence_number: int
    point_count: int


@dataclass(frozen=True, eq=False)
class TaggedFrame:
    """One camera's cloud (camera-local) with its descriptor.

    `point_ids` is ground truth kept by the synthetic generator: the index of
    each point in the scene's world point table.
    """

    descriptor: FrameDescriptor
    cloud: PointCloud
    skeleton: Skeleton | None = None
    point_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.descriptor.point_count != len(self.cloud):
            raise DimensionError(
                f'descriptor announces {self.descriptor.point_count} points, '
                f'cloud holds {len(self.cloud)}')

    @property
    def camera_id(self):
        return self.descriptor.camera_id

    @property
    def timestamp(self):
        return self.descriptor.capture_timestamp


def frame_timestamp(frame_index: int, fps) -> int:
    """Integer microseconds at or just after the frame's nominal time."""
    exact = Fraction(frame_index) * 10 ** 6 / Fraction(fps)
    return math.ceil(exact)


# ---------------------------------------------------------------------------
# Scene script
# ---------------------------------------------------------------------------

def _line_of(text, key):
    if text is None or key is None:
        return None
    match = re.search(rf'"{re.escape(key)}"\s*:', text)
    if not match:
        return None
    return text.count('\n', 0, match.start()) + 1


class _Fields:
    """Typed access to one JSON object with field-path diagnostics."""

    def __init__(self, data, where, text, path):
        if not isinstance(data, dict):
            raise ScriptError('expected an object', path, _line_of(text, where.split('.')[-1]), where)
        self.data = data
        self.where = where
        self.text = text
        self.path = path

    def fail(self, key, message):
        field_path = f'{self.where}.{key}' if self.where else key
        raise ScriptError(message, self.path, _line_of(self.text, key), field_path)

    def get(self, key, default=None, required=False):
        if key not in self.data:
            if required:
                self.fail(key, 'required field is missing')
            return default
        return self.data[key]

    def number(self, key, default=None, required=False, minimum=None):
        value = self.get(key, default, required)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            self.fail(key, f'expected a number, got {value!r}')
        if minimum is not None and value < minimum:
            self.fail(key, f'must be >= {minimum}')
        return value

    def vector(self, key, default=None, required=False, size=3):
        value = self.get(key, default, required)
        if value is None:
            return None
        try:
            arr = np.asarray(value, dtype=np.float64)
        except (TypeError, ValueError):
            self.fail(key, f'expected a list of {size} numbers')
        if arr.shape != (size,) or not np.isfinite(arr).all():
            self.fail(key, f'expected a list of {size} numbers')
        return arr

    def child(self, key, value=None):
        value = self.data.get(key) if value is None else value
        field_path = f'{self.where}.{key}' if self.where else str(key)
        return _Fields(value, field_path, self.text, self.path)


@dataclass(frozen=True)
class CameraSpec:
    camera_id: int
    pose: RigidTransform  # world from camera
    fov_deg: float = 110.0
    intrinsics: CameraIntrinsics | None = None
    width: int = 0
    height: int = 0


@dataclass
class _Keyframes:
    times: np.ndarray
    values: np.ndarray

    def at(self, t):
        if len(self.times) == 1:
            return self.values[0]
        return np.array([np.interp(t, self.times, self.values[:, k])
                         for k in range(self.values.shape[1])])


@dataclass
class SceneScript:
    seed: int
    fps: int
    duration_s: float
    cameras: list
    background_xyz: np.ndarray
    background_rgb: np.ndarray
    background_segments: list = field(default_factory=list)
    body: HumanoidModel | None = None
    body_path: _Keyframes | None = None
    swing_amplitude: float = 0.0
    swing_period: float = 1.0
    skeleton_noise_m: float = 0.0
    skeleton_confidence: float = 1.0
    point_noise_m: float = 0.0
    drop_rate: float = 0.0
    source: str | None = None

    @property
    def frame_count(self):
        return int(round(self.duration_s * self.fps))

    @property
    def camera_ids(self):
        return [c.camera_id for c in self.cameras]

    @property
    def master_id(self):
        return min(self.camera_ids)

    @property
    def static_point_count(self):
        return len(self.background_xyz)

    def timestamp(self, frame_index):
        return frame_timestamp(frame_index, self.fps)

    def frame_index(self, t_us):
        return int(t_us * self.fps // 10 ** 6)

    def camera(self, camera_id) -> CameraSpec:
        for cam in self.cameras:
            if cam.camera_id == camera_id:
                return cam
        raise KeyError(camera_id)

    def world_from_master(self) -> RigidTransform:
        return self.camera(self.master_id).pose

    def ground_truth_transforms(self) -> dict:
        """master-from-sub transform for every camera (master maps to identity)."""
        master_inv = self.world_from_master().inverse()
        return {c.camera_id: master_inv @ c.pose for c in self.cameras}

    def body_state(self, t_s):
        """Posed joints plus body surface at time t (seconds), world frame."""
        if self.body is None:
            return None, None, None, None
        root = self.body_path.at(t_s)
        swing = 0.0
        if self.swing_amplitude:
            swing = self.swing_amplitude * math.sin(2 * math.pi * t_s / self.swing_period)
        joints = self.body.joints(root[:3], root[3], swing)
        xyz, rgb, labels = self.body.surface(joints)
        return joints, xyz, rgb, labels

    def world_state(self, t_s):
        """All world points at time t: (xyz, rgb, body_labels, joints).

        Background points come first; body labels are -1 for them.
        """
        xyz = self.background_xyz
        if self.background_segments:
            xyz = xyz.copy()
            for mask, path in self.background_segments:
                xyz[mask] += path.at(t_s)
        rgb = self.background_rgb
        labels = np.full(len(xyz), -1, dtype=np.int64)
        joints, body_xyz, body_rgb, body_labels = self.body_state(t_s)
        if joints is not None:
            xyz = np.concatenate([xyz, body_xyz])
            rgb = np.concatenate([rgb, body_rgb])
            labels = np.concatenate([labels, body_labels])
        return xyz, rgb, labels, joints


def _sample_box(rng, lo, hi, n):
    size = hi - lo
    # faces: (fixed axis, side)
    faces = [(axis, side) for axis in range(3) for side in (0, 1)]
    areas = np.array([np.prod(np.delete(size, axis)) for axis, _ in faces])
    choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(size=(n, 3)) * size
    for f, (axis, side) in enumerate(faces):
        sel = choice == f
        pts[sel, axis] = hi[axis] if side else lo[axis]
    return pts


def _parse_keyframes(spec: _Fields, key, value_key, size, extra=None):
    frames = spec.get(key)
    if frames is None:
        return None
    if not isinstance(frames, list) or not frames:
        spec.fail(key, 'expected a non-empty list of keyframes')
    times, values = [], []
    for i, raw in enumerate(frames):
        kf = spec.child(f'{key}[{i}]', raw)
        times.append(kf.number('t', required=True))
        row = list(kf.vector(value_key, default=np.zeros(size), size=size))
        if extra:
            row.append(math.radians(kf.number(extra, default=0.0)))
        values.append(row)
    times = np.asarray(times, dtype=np.float64)
    if (np.diff(times) <= 0).any():
        spec.fail(key, 'keyframe times must be strictly increasing')
    return _Keyframes(times, np.asarray(values, dtype=np.float64))


def _parse_background(spec: _Fields, rng, base_dir):
    if spec.get('ply') is not None:
        path = spec.get('ply')
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        cloud = read_ply(path)
        return cloud.xyz, cloud.rgb, []

    primitives = spec.get('primitives', [])
    if not isinstance(primitives, list):
        spec.fail('primitives', 'expected a list')
    chunks_xyz, chunks_rgb, segments = [], [], []
    offset = 0
    for i, raw in enumerate(primitives):
        prim = spec.child(f'primitives[{i}]', raw)
        kind = prim.get('type', required=True)
        n = int(prim.number('points', required=True, minimum=0))
        if kind == 'box':
            lo = prim.vector('min', required=True)
            hi = prim.vector('max', required=True)
            if (hi <= lo).any():
                prim.fail('max', 'box max must exceed min on every axis')
            pts = _sample_box(rng, lo, hi, n)
        elif kind == 'plane':
            origin = prim.vector('origin', required=True)
            u = prim.vector('u', required=True)
            v = prim.vector('v', required=True)
            ab = rng.uniform(size=(n, 2))
            pts = origin + ab[:, :1] * u + ab[:, 1:] * v
        else:
            prim.fail('type', f'unknown primitive {kind!r} (expected box or plane)')
        color = prim.vector('color', default=np.array([200.0, 200.0, 200.0]))
        if ((color < 0) | (color > 255)).any():
            prim.fail('color', 'color channels must lie in [0, 255]')
        shade = rng.integers(-10, 11, size=(n, 1))
        rgb = np.clip(color + shade, 0, 255).astype(np.uint8)
        path = _parse_keyframes(prim, 'motion', 'offset', 3)
        if path is not None:
            segments.append((slice(offset, offset + n), path))
        chunks_xyz.append(pts)
        chunks_rgb.append(rgb)
        offset += n
    if not chunks_xyz:
        return np.empty((0, 3)), np.empty((0, 3), dtype=np.uint8), []
    return np.concatenate(chunks_xyz), np.concatenate(chunks_rgb), segments


def _parse_camera(spec: _Fields):
    camera_id = spec.get('id', required=True)
    if not isinstance(camera_id, int) or isinstance(camera_id, bool) or camera_id < 0:
        spec.fail('id', 'camera id must be a non-negative integer')
    position = spec.vector('position', required=True)
    target = spec.vector('look_at', required=True)
    if np.allclose(position, target):
        spec.fail('look_at', 'camera looks at its own position')
    fov = spec.number('fov_deg', default=110.0)
    if not 0 < fov < 180:
        spec.fail('fov_deg', 'field of view must lie in (0, 180) degrees')
    intr, width, height = None, 0, 0
    if spec.get('depth') is not None:
        depth = spec.child('depth')
        width = int(depth.number('width', required=True, minimum=1))
        height = int(depth.number('height', required=True, minimum=1))
        try:
            intr = CameraIntrinsics(
                depth.number('fx', required=True), depth.number('fy', required=True),
                depth.number('px', default=(width - 1) / 2), depth.number('py', default=(height - 1) / 2),
                depth.number('depth_scale', default=0.001))
        except ValueError as e:
            depth.fail('fx', str(e))
    return CameraSpec(camera_id, look_at(position, target), fov, intr, width, height)


def parse_script(text, path=None) -> SceneScript:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScriptError(e.msg, path, e.lineno)
    root = _Fields(data, '', text, path)
    seed = root.get('seed', 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        root.fail('seed', 'seed must be a non-negative integer')
    fps = root.get('fps', 24)
    if not isinstance(fps, int) or isinstance(fps, bool) or fps <= 0:
        root.fail('fps', 'fps must be a positive integer')
    duration = root.number('duration_s', default=10.0, minimum=0)
    rng = np.random.default_rng([seed, 0x5CE7E])
    base_dir = os.path.dirname(os.fspath(path)) if path else None

    bg_xyz, bg_rgb, segments = _parse_background(root.child('background', root.get('background', {})), rng, base_dir)

    raw_cameras = root.get('cameras', required=True)
    if not isinstance(raw_cameras, list) or not raw_cameras:
        root.fail('cameras', 'at least one camera is required')
    cameras = [_parse_camera(root.child(f'cameras[{i}]', raw)) for i, raw in enumerate(raw_cameras)]
    ids = [c.camera_id for c in cameras]
    if len(set(ids)) != len(ids):
        root.fail('cameras', 'camera ids must be unique')

    body = body_path = None
    amplitude, period = 0.0, 1.0
    if root.get('body') is not None:
        spec = root.child('body')
        shares = dict(DEFAULT_GROUP_SHARES)
        for name, value in (spec.get('group_shares') or {}).items():
            try:
                shares[PartGroup[name.upper()]] = float(value)
            except KeyError:
                spec.fail('group_shares', f'unknown body group {name!r}')
        body = HumanoidModel(int(spec.number('points', default=6000, minimum=0)), seed, shares)
        body_path = _parse_keyframes(spec, 'keyframes', 'position', 3, extra='yaw_deg')
        if body_path is None:
            body_path = _Keyframes(np.zeros(1), np.zeros((1, 4)))
        if spec.get('arm_swing') is not None:
            swing = spec.child('arm_swing')
            amplitude = math.radians(swing.number('amplitude_deg', default=20.0))
            period = swing.number('period_s', default=1.2)
            if period <= 0:
                swing.fail('period_s', 'period must be positive')

    drop_rate = root.number('drop_rate', default=0.0, minimum=0)
    if drop_rate >= 1:
        root.fail('drop_rate', 'drop rate must be below 1')
    confidence = root.number('skeleton_confidence', default=1.0, minimum=0)
    if confidence > 1:
        root.fail('skeleton_confidence', 'confidence must lie in [0, 1]')

    return SceneScript(
        seed=seed, fps=fps, duration_s=duration, cameras=sorted(cameras, key=lambda c: c.camera_id),
        background_xyz=bg_xyz, background_rgb=bg_rgb, background_segments=segments,
        body=body, body_path=body_path, swing_amplitude=amplitude, swing_period=period,
        skeleton_noise_m=root.number('skeleton_noise_m', default=0.0, minimum=0),
        skeleton_confidence=confidence,
        point_noise_m=root.number('point_noise_m', default=0.0, minimum=0),
        drop_rate=drop_rate, source=os.fspath(path) if path else None,
    )


def load_script(path) -> SceneScript:
    try:
        with open(path, encoding='utf-8') as fid:
            text = fid.read()
    except OSError as e:
        raise ScriptError(f'cannot read script: {e.strerror}', path)
    return parse_script(text, path)


# ---------------------------------------------------------------------------
# Synthetic capture
# ---------------------------------------------------------------------------

def _visible(local, fov_deg):
    z = local[:, 2]
    dist = np.linalg.norm(local, axis=1)
    half = math.radians(fov_deg) / 2
    in_range = (z > MIN_RANGE_M) & (z <= MAX_RANGE_M)
    in_cone = z >= dist * math.cos(half)
    return in_range & in_cone


def _render_depth(local, rgb, ids, cam: CameraSpec):
    """Z-buffer camera-local points into a depth image and back-project it."""
    intr = cam.intrinsics
    j = np.rint(local[:, 0] * intr.fx / local[:, 2] + intr.px).astype(np.int64)
    i = np.rint(local[:, 1] * intr.fy / local[:, 2] + intr.py).astype(np.int64)
    s = np.rint(local[:, 2] / intr.depth_scale).astype(np.int64)
    keep = (j >= 0) & (j < cam.width) & (i >= 0) & (i < cam.height) & (s > 0)
    j, i, s, rgb, ids = j[keep], i[keep], s[keep], rgb[keep], ids[keep]
    pixel = i * cam.width + j
    order = np.lexsort((s, pixel))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pixel[order][1:] != pixel[order][:-1]
    win = order[first]

    depth = np.zeros(cam.width * cam.height, dtype=np.int64)
    color = np.zeros((cam.width * cam.height, 3), dtype=np.uint8)
    owner = np.full(cam.width * cam.height, -1, dtype=np.int64)
    depth[pixel[win]] = s[win]
    color[pixel[win]] = rgb[win]
    owner[pixel[win]] = ids[win]
    image = DepthImage(cam.width, cam.height, depth, color)
    cloud = rgbd_to_pointcloud(image, intr)
    # rgbd_to_pointcloud walks pixels in row-major order, like np.flatnonzero
    return cloud, owner[np.flatnonzero(depth)]


def synth_scene(script: SceneScript, t: int) -> dict:
    """Capture every camera at timestamp `t` (µs); dropped cameras are absent."""
    frame_index = script.frame_index(t)
    t_s = t / 1e6
    xyz, rgb, _, joints = script.world_state(t_s)
    ids = np.arange(len(xyz))
    frames = {}
    for cam in script.cameras:
        rng = np.random.default_rng([script.seed, frame_index, cam.camera_id])
        if script.drop_rate and rng.random() < script.drop_rate:
            continue
        # Each camera keeps the world points inside its view cone
        to_local = cam.pose.inverse()
        local = to_local.apply(xyz)
        mask = _visible(local, cam.fov_deg)
        if cam.intrinsics is not None:
            cloud, cam_ids = _render_depth(local[mask], rgb[mask], ids[mask], cam)
        else:
            cloud = PointCloud(local[mask], rgb[mask], CAMERA)
            cam_ids = ids[mask]
        if script.point_noise_m:
            noisy = cloud.xyz + rng.normal(0.0, script.point_noise_m, size=cloud.xyz.shape)
            cloud = PointCloud(noisy, cloud.rgb, CAMERA)

        # Joints out of view are reported with zero confidence
        skeleton = None
        if joints is not None:
            local_joints = to_local.apply(joints)
            if script.skeleton_noise_m:
                local_joints = local_joints + rng.normal(0.0, script.skeleton_noise_m, size=local_joints.shape)
            seen = _visible(local_joints, cam.fov_deg)
            confidence = np.where(seen, script.skeleton_confidence, 0.0)
            skeleton = Skeleton(local_joints, confidence)

        descriptor = FrameDescriptor(cam.camera_id, t, frame_index, len(cloud))
        frames[cam.camera_id] = TaggedFrame(descriptor, cloud, skeleton, cam_ids)
    return frames


def synthetic_streams(script: SceneScript, frame_count=None) -> dict:
    """One lazily generated TaggedFrame stream per camera."""
    count = script.frame_count if frame_count is None else frame_count
    cache = {}
    lock = threading.Lock()

    def frames_at(index):
        # all cameras of one instant are generated together, then handed out
        with lock:
            if index not in cache:
                for old in [k for k in cache if k < index - 1]:
                    del cache[old]
                cache[index] = synth_scene(script, script.timestamp(index))
            return cache[index]

    def stream(camera_id):
        for index in range(count):
            frame = frames_at(index).get(camera_id)
            if frame is not None:
                yield frame

    return {cid: stream(cid) for cid in script.camera_ids}


# ---------------------------------------------------------------------------
# Recorded sequences
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    timestamp_us: int
    ply: str
    skeleton: list | None = None


@dataclass
class Manifest:
    cameras: dict = field(default_factory=dict)
    fps: int = 24
    world_from_master: RigidTransform = field(default_factory=RigidTransform.identity)

    def to_json(self):
        return {
            'version': 1,
            'fps': self.fps,
            'world_from_master': self.world_from_master.as_matrix().tolist(),
            'cameras': {
                str(cid): [{'timestamp_us': e.timestamp_us, 'ply': e.ply,
                            **({'skeleton': e.skeleton} if e.skeleton is not None else {})}
                           for e in entries]
                for cid, entries in sorted(self.cameras.items())
            },
        }


def parse_manifest(data, path=None) -> Manifest:
    where = f'{path}: ' if path else ''
    if not isinstance(data, dict):
        raise ManifestError(f'{where}manifest must be an object')
    manifest = Manifest(fps=data.get('fps', 24))
    if data.get('world_from_master') is not None:
        try:
            manifest.world_from_master = RigidTransform.from_matrix(data['world_from_master'])
        except (ValueError, IndexError) as e:
            raise ManifestError(f'{where}bad world_from_master: {e}')
    cameras = data.get('cameras', {})
    if not isinstance(cameras, dict):
        raise ManifestError(f'{where}"cameras" must map camera ids to frame lists')
    for key, entries in cameras.items():
        try:
            cid = int(key)
        except ValueError:
            raise ManifestError(f'{where}camera id {key!r} is not an integer')
        parsed = []
        for seq, entry in enumerate(entries):
            try:
                parsed.append(ManifestEntry(int(entry['timestamp_us']), str(entry['ply']), entry.get('skeleton')))
            except (KeyError, TypeError, ValueError):
                raise ManifestError(f'{where}camera {cid} entry {seq} needs timestamp_us and ply')
            if seq and parsed[-1].timestamp_us < parsed[-2].timestamp_us:
                raise ManifestError(f'{where}camera {cid} timestamps go backwards at entry {seq}')
        manifest.cameras[cid] = parsed
    return manifest


def load_manifest(path) -> Manifest:
    try:
        with open(path, encoding='utf-8') as fid:
            data = json.load(fid)
    except OSError as e:
        raise ManifestError(f'{path}: cannot read manifest: {e.strerror}')
    except json.JSONDecodeError as e:
        raise ManifestError(f'{path}:{e.lineno}: {e.msg}')
    return parse_manifest(data, path)


def _camera_stream(directory, camera_id, entries) -> Iterator[TaggedFrame]:
    for seq, entry in enumerate(entries):
        path = os.path.join(directory, entry.ply)
        if not os.path.exists(path):
            raise StreamError(f'missing file {entry.ply}', camera_id, seq)
        cloud = read_ply(path, frame=CAMERA)
        skeleton = None
        if entry.skeleton is not None:
            try:
                skeleton = Skeleton.from_rows(entry.skeleton)
            except (VVStreamError, IndexError, ValueError) as e:
                raise StreamError(f'bad skeleton: {e}', camera_id, seq)
        yield TaggedFrame(FrameDescriptor(camera_id, entry.timestamp_us, seq, len(cloud)), cloud, skeleton)


def camera_streams(directory, manifest: Manifest) -> dict:
    """Lazy per-camera frame streams; a missing file fails when reached."""
    return {cid: _camera_stream(directory, cid, entries)
            for cid, entries in sorted(manifest.cameras.items())}


def ingest_ply_sequence(directory, manifest: Manifest) -> Iterator[TaggedFrame]:
    """All cameras' frames, ordered by timestamp then camera id."""
    streams = camera_streams(directory, manifest).values()
    return heapq.merge(*streams, key=lambda f: (f.timestamp, f.camera_id))


# ---------------------------------------------------------------------------
# Camera workers
# ---------------------------------------------------------------------------

_CLOSED = object()


class FrameQueue:
    """Bounded per-camera queue; a full queue drops its oldest frame."""

    def __init__(self, camera_id, depth=8):
        if depth < 1:
            raise ValueError('queue depth must be at least 1')
        self.camera_id = camera_id
        self.depth = depth
        self.dropped = 0
        self.delivered = 0
        self.error = None
        self._items = deque()
        self._closed = False
        self._cond = threading.Condition()

    def put(self, frame):
        with self._cond:
            if len(self._items) >= self.depth:
                self._items.popleft()
                self.dropped += 1
                logger.warning(f'camera {self.camera_id}: queue full, dropped oldest frame')
            self._items.append(frame)
            self._cond.notify()

    def close(self, error=None):
        with self._cond:
            self._closed = True
            self.error = error
            self._cond.notify_all()

    def get(self, timeout=None):
        with self._cond:
            while not self._items and not self._closed:
                if not self._cond.wait(timeout):
                    raise TimeoutError(f'camera {self.camera_id}: no frame within {timeout}s')
            # Queued frames are handed out before the close error
            if self._items:
                return self._items.popleft()
            if self.error is not None:
                raise self.error
            return _CLOSED

    def __iter__(self):
        while True:
            item = self.get()
            if item is _CLOSED:
                return
            yield item


def start_camera_workers(sources: dict, depth=8):
    """Run each camera source on its own thread; returns camera_id -> FrameQueue."""
    queues = {}
    for camera_id, source in sources.items():
        queue = FrameQueue(camera_id, depth)

        def work(source=source, queue=queue):
            try:
                for frame in source:
                    queue.put(frame)
                    queue.delivered += 1
            except VVStreamError as e:
                # pipeline errors pass through unchanged
                queue.close(e)
                return
            except Exception as e:
                # any other failure reaches the consumer as a StreamError
                logger.error(f'camera {queue.camera_id}: source failed: {e!r}')
                error = StreamError(f'source failed: {e}', queue.camera_id, queue.delivered)
                error.__cause__ = e
                queue.close(error)
                return
            queue.close()

        threading.Thread(target=work, name=f'camera-{camera_id}', daemon=True).start()
        queues[camera_id] = queue
    return queues
