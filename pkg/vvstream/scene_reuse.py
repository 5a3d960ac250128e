"""Static-scene reuse: cube grid, disparity detection and viewport saliency.

The static scene is cut into axis-aligned cubes. Each cube is checked for
change at a cadence set by how much attention it gets from the viewer, and
only changed cubes are sent again.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import NamedTuple

import numpy as np
import pandas as pd
from PIL import Image

from vvstream.errors import ConfigurationError, TraceError
from vvstream.geometry import EulerAngles, PointCloud, rotation_from_euler
from vvstream.octree import Octree, chamfer_distance
from vvstream.wire import CUBE_HEADER_BYTES, POINT_BYTES

logger = logging.getLogger(__name__)

DEFAULT_SIDE = 0.15
FRUSTUM_ANGLE_DEG = 30.0
SALIENCY_WINDOW_US = 2_000_000
DISTANCE_FLOOR = 1e-3
CD_MAX_FLOOR = 1e-6
DEFAULT_CHANGE_THRESHOLD = 0.01
HEADSET_FORWARD = np.array([1.0, 0.0, 0.0])

_KEY_OFFSET = 1 << 20
_KEY_SPAN = 1 << 21


# ---------------------------------------------------------------------------
# Cube grid
# ---------------------------------------------------------------------------

class DetectLevel(IntEnum):
    HIGH = 0
    MID = 1
    LOW = 2


class Detection(NamedTuple):
    level: DetectLevel
    frequency: float
    interval: int


_DETECTION = {
    DetectLevel.HIGH: Detection(DetectLevel.HIGH, 1.0, 1),
    DetectLevel.MID: Detection(DetectLevel.MID, 0.2, 5),
    DetectLevel.LOW: Detection(DetectLevel.LOW, 0.1, 10),
}


def detect_level(s_v: float) -> Detection:
    """Detection cadence for a saliency score: >= 16 every frame, >= 9 every 5th, else every 10th."""
    if s_v >= 16.0:
        return _DETECTION[DetectLevel.HIGH]
    if s_v >= 9.0:
        return _DETECTION[DetectLevel.MID]
    return _DETECTION[DetectLevel.LOW]


@dataclass
class CubeCell:
    index: tuple
    points: PointCloud
    last_update_slot: int | None = None
    last_detect_slot: int | None = None
    saliency: float = 0.0
    detect_level: DetectLevel = DetectLevel.LOW

    @property
    def density(self) -> int:
        return len(self.points)


def _linear_keys(ijk):
    shifted = ijk + _KEY_OFFSET
    if (shifted < 0).any() or (shifted >= _KEY_SPAN).any():
        raise ConfigurationError('scene extends beyond the addressable cube range')
    return (shifted[:, 0] * _KEY_SPAN + shifted[:, 1]) * _KEY_SPAN + shifted[:, 2]


def _unlinear(keys):
    iz = keys % _KEY_SPAN
    iy = (keys // _KEY_SPAN) % _KEY_SPAN
    ix = keys // (_KEY_SPAN * _KEY_SPAN)
    return np.column_stack([ix, iy, iz]) - _KEY_OFFSET


class CubeGrid:
    """Points bucketed by cube; cells are materialized on first access."""

    def __init__(self, side_length, origin, xyz, rgb, keys, starts):
        self.side_length = float(side_length)
        self.origin = np.asarray(origin, dtype=np.float64)
        self._xyz = xyz
        self._rgb = rgb
        self._keys = keys
        self._starts = starts
        self._lookup = {int(k): i for i, k in enumerate(keys)}

    def __len__(self):
        return len(self._keys)

    def __contains__(self, index):
        return self._key(index) in self._lookup

    @staticmethod
    def _key(index):
        ix, iy, iz = (int(v) + _KEY_OFFSET for v in index)
        return (ix * _KEY_SPAN + iy) * _KEY_SPAN + iz

    @cached_property
    def indices(self) -> list:
        return [tuple(row) for row in _unlinear(self._keys).tolist()]

    @property
    def point_count(self) -> int:
        return len(self._xyz)

    def counts(self) -> dict:
        sizes = np.diff(np.append(self._starts, len(self._xyz)))
        return dict(zip(self.indices, sizes.tolist()))

    def cell_points(self, index) -> PointCloud:
        i = self._lookup.get(self._key(index))
        if i is None:
            return PointCloud.empty()
        end = self._starts[i + 1] if i + 1 < len(self._starts) else len(self._xyz)
        return PointCloud(self._xyz[self._starts[i]:end], self._rgb[self._starts[i]:end])

    @cached_property
    def cells(self) -> dict:
        return {index: CubeCell(index, self.cell_points(index)) for index in self.indices}

    def center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.side_length

    def centers(self) -> np.ndarray:
        if not len(self):
            return np.empty((0, 3))
        return self.origin + (_unlinear(self._keys) + 0.5) * self.side_length

    def compatible(self, other: 'CubeGrid') -> bool:
        return self.side_length == other.side_length and np.array_equal(self.origin, other.origin)


def assign_cubes(cloud: PointCloud, side_length=DEFAULT_SIDE, origin=(0.0, 0.0, 0.0)) -> CubeGrid:
    """Bucket points into cubes floor((p - origin) / side); order inside a cube is kept."""
    if side_length <= 0:
        raise ConfigurationError('cube side length must be positive')
    origin = np.asarray(origin, dtype=np.float64)
    ijk = np.floor((cloud.xyz - origin) / side_length).astype(np.int64)
    keys = _linear_keys(ijk) if len(cloud) else np.empty(0, dtype=np.int64)
    order = np.argsort(keys, kind='stable')
    sorted_keys = keys[order]
    unique, starts = np.unique(sorted_keys, return_index=True)
    return CubeGrid(side_length, origin, cloud.xyz[order], cloud.rgb[order], unique, starts)


def cell_digest(cloud: PointCloud) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(cloud.xyz.astype('<f4').tobytes())
    h.update(cloud.rgb.tobytes())
    return h.digest()


# ---------------------------------------------------------------------------
# Viewport saliency
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewportSample:
    timestamp: int
    position: tuple
    orientation: EulerAngles

    def __post_init__(self):
        position = tuple(float(v) for v in self.position)
        if len(position) != 3 or not all(math.isfinite(v) for v in position):
            raise TraceError(f'viewport sample at {self.timestamp} has a bad position')
        object.__setattr__(self, 'position', position)

    @property
    def view_vector(self) -> np.ndarray:
        return rotation_from_euler(self.orientation).rotation @ HEADSET_FORWARD

    def to_row(self):
        o = self.orientation
        return (self.timestamp, *self.position, o.yaw, o.pitch, o.roll)


def parse_viewport_trace(lines, source='<trace>') -> list:
    """One sample per line: timestamp_us, px, py, pz, yaw, pitch, roll (radians)."""
    samples = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        fields = line.replace(',', ' ').split()
        if len(fields) != 7:
            raise TraceError(f'{source}:{lineno}: expected 7 values, got {len(fields)}')
        try:
            ts = int(fields[0])
            values = [float(v) for v in fields[1:]]
        except ValueError:
            raise TraceError(f'{source}:{lineno}: non-numeric value')
        if not all(math.isfinite(v) for v in values):
            raise TraceError(f'{source}:{lineno}: non-finite value')
        if samples and ts < samples[-1].timestamp:
            raise TraceError(f'{source}:{lineno}: timestamps go backwards')
        samples.append(ViewportSample(ts, values[:3], EulerAngles(*values[3:])))
    return samples


def load_viewport_trace(path) -> list:
    try:
        with open(path, encoding='utf-8') as fid:
            return parse_viewport_trace(fid, path)
    except OSError as e:
        raise TraceError(f'{path}: cannot read viewport trace: {e.strerror}')


@dataclass
class SaliencyAccumulator:
    """Frustum hit counts per cube over a set of samples, plus latest distances."""

    hits: dict = field(default_factory=dict)
    sample_count: int = 0
    distance: dict = field(default_factory=dict)

    def frequency(self, index) -> float:
        if not self.sample_count:
            return 0.0
        return self.hits.get(index, 0) / self.sample_count


def frustum_hits(centers, position, view, angle_deg=FRUSTUM_ANGLE_DEG):
    """Per-center (inside cone, distance) for one head pose."""
    direction = centers - np.asarray(position, dtype=np.float64)
    dist = np.linalg.norm(direction, axis=1)
    cos_limit = math.cos(math.radians(angle_deg))
    with np.errstate(invalid='ignore', divide='ignore'):
        cos = (direction @ view) / dist
    inside = (dist < 1e-12) | (cos >= cos_limit)
    return inside, dist


def accumulate_saliency(acc: SaliencyAccumulator, sample: ViewportSample, grid: CubeGrid,
                        angle_deg=FRUSTUM_ANGLE_DEG) -> SaliencyAccumulator:
    """Count this sample's frustum hits for every cube of the grid."""
    indices = grid.indices
    if indices:
        inside, dist = frustum_hits(grid.centers(), sample.position, sample.view_vector, angle_deg)
        for index, hit, d in zip(indices, inside.tolist(), dist.tolist()):
            if hit:
                acc.hits[index] = acc.hits.get(index, 0) + 1
            acc.distance[index] = d
    acc.sample_count += 1
    return acc


def _saliency(density, frequency, distance, scale):
    if not frequency:
        return 0.0
    return scale * density * frequency / max(distance, DISTANCE_FLOOR)


def saliency_score(cell: CubeCell, acc: SaliencyAccumulator, scale=1.0) -> float:
    """S_V = scale * density * frequency / distance (distance floored at 1 mm)."""
    return _saliency(cell.density, acc.frequency(cell.index), acc.distance.get(cell.index, math.inf), scale)


class SaliencyMap:
    """Viewport samples of the last `window_us`, folded into snapshots on demand.

    Samples may be added from another thread; snapshots are independent copies.
    """

    def __init__(self, window_us=SALIENCY_WINDOW_US, angle_deg=FRUSTUM_ANGLE_DEG):
        self.window_us = window_us
        self.angle_deg = angle_deg
        self._samples = deque()
        self._lock = threading.Lock()

    def add(self, sample: ViewportSample):
        with self._lock:
            self._samples.append(sample)
            while self._samples and self._samples[0].timestamp <= sample.timestamp - self.window_us:
                self._samples.popleft()

    def extend(self, samples):
        for s in samples:
            self.add(s)

    def __len__(self):
        return len(self._samples)

    def snapshot(self, grid: CubeGrid) -> SaliencyAccumulator:
        with self._lock:
            samples = list(self._samples)
        acc = SaliencyAccumulator(sample_count=len(samples))
        if not samples or not len(grid):
            return acc
        centers = grid.centers()
        hits = np.zeros(len(grid), dtype=np.int64)
        for s in samples:
            inside, dist = frustum_hits(centers, s.position, s.view_vector, self.angle_deg)
            hits += inside
        indices = grid.indices
        acc.hits = {i: h for i, h in zip(indices, hits.tolist()) if h}
        acc.distance = dict(zip(indices, dist.tolist()))
        return acc


# ---------------------------------------------------------------------------
# Disparity detection
# ---------------------------------------------------------------------------

class CubeAction(IntEnum):
    REPLACE = 0
    CLEAR = 1


@dataclass(frozen=True, eq=False)
class CubeUpdate:
    index: tuple
    action: CubeAction
    points: PointCloud
    quality: float = 1.0
    slot: int = 0

    def __post_init__(self):
        if self.action == CubeAction.CLEAR and len(self.points):
            raise ValueError('a clear update carries no points')
        if not 0.0 < self.quality <= 1.0:
            raise ValueError(f'quality fraction {self.quality} outside (0, 1]')

    @property
    def wire_bytes(self) -> int:
        return CUBE_HEADER_BYTES + POINT_BYTES * len(self.points)


@dataclass
class DisparityResult:
    updates: list
    normalized: dict
    cd_max: float
    detected: list


def detect_disparity(current: CubeGrid, reference: CubeGrid, slot: int,
                     threshold=DEFAULT_CHANGE_THRESHOLD, cd_max=CD_MAX_FLOOR, due=None) -> DisparityResult:
    """Compare due cubes with the reference and list the cubes to resend.

    `due` restricts detection to the given indices (all cubes by default).
    The normalized value of a cube is its Chamfer distance over the running
    maximum; new cubes normalize to 1.
    """
    if not current.compatible(reference):
        raise ConfigurationError('current and reference grids differ in side length or origin')
    cd_max = max(cd_max, CD_MAX_FLOOR)
    candidates = set(current.indices) | set(reference.indices)
    if due is not None:
        candidates &= set(due)
    updates, normalized = [], {}
    for index in sorted(candidates):
        now = current.cell_points(index)
        before = reference.cell_points(index)
        if not len(before):
            updates.append(CubeUpdate(index, CubeAction.REPLACE, now, 1.0, slot))
            normalized[index] = 1.0
        elif not len(now):
            updates.append(CubeUpdate(index, CubeAction.CLEAR, PointCloud.empty(), 1.0, slot))
            normalized[index] = 1.0
        else:
            cd = 0.0 if cell_digest(now) == cell_digest(before) else chamfer_distance(now, before)
            cd_max = max(cd_max, cd)
            normalized[index] = cd / cd_max
            if cd > threshold:
                updates.append(CubeUpdate(index, CubeAction.REPLACE, now, 1.0, slot))
    return DisparityResult(updates, normalized, cd_max, sorted(candidates))


def apply_updates(cells: dict, updates) -> dict:
    """Replay cube updates onto a cell map (index -> PointCloud)."""
    for update in updates:
        if update.action == CubeAction.CLEAR:
            cells.pop(update.index, None)
        else:
            cells[update.index] = update.points
    return cells


# ---------------------------------------------------------------------------
# Update scheduling
# ---------------------------------------------------------------------------

@dataclass
class ReferenceCell:
    """What the server last scheduled for a cube."""

    source: PointCloud
    digest: bytes
    delivered: int
    last_update_slot: int
    last_detect_slot: int | None = None
    level: DetectLevel = DetectLevel.LOW
    saliency: float = 0.0

    @property
    def complete(self):
        return self.delivered >= len(self.source)


@dataclass
class CubeCandidate:
    """A cube waiting for static budget: changed, new, cleared or still refining."""

    index: tuple
    action: CubeAction
    points: PointCloud
    normalized_cd: float
    saliency: float
    frequency: float
    slot: int
    kind: str = 'change'
    delivered: int = 0

    @property
    def count(self):
        return len(self.points)


def cell_order(index, n, seed=0) -> np.ndarray:
    """Fixed priority order of a cube's points; quality k keeps the first k."""
    key = [int(seed)] + [int(v) + _KEY_OFFSET for v in index]
    return np.random.default_rng(key).permutation(n)


def partial_points(points: PointCloud, index, count, seed=0) -> PointCloud:
    if count >= len(points):
        return points
    return points.take(np.sort(cell_order(index, len(points), seed)[:count]))


def demand_points(candidate: CubeCandidate, full_quality=False) -> int:
    """Points a candidate asks for: (C_d / C_dmax) * P_c * F_d, at least one."""
    p = candidate.count
    if candidate.action == CubeAction.CLEAR:
        return 0
    if full_quality or candidate.kind == 'new':
        return p
    if candidate.kind == 'refine':
        step = max(1, int(round(candidate.frequency * p)))
        return min(p, candidate.delivered + step)
    return min(p, max(1, int(round(candidate.normalized_cd * p * candidate.frequency))))


def static_budget_fill(residual_bits, candidates, full_quality=False, seed=0):
    """Greedy saliency-ordered selection of cube updates within the residual budget.

    Cubes are visited in descending saliency (ties by index); a cube that
    does not fit is skipped and the next one tried. Returns the chosen
    updates and the deferred candidates.
    """
    chosen, deferred = [], []
    remaining = residual_bits if math.isinf(residual_bits) else max(0, int(residual_bits))
    for cand in sorted(candidates, key=lambda c: (-c.saliency, c.index)):
        n = demand_points(cand, full_quality)
        bits = (CUBE_HEADER_BYTES + POINT_BYTES * n) * 8
        if remaining <= 0 or bits > remaining:
            deferred.append(cand)
            continue
        remaining -= bits
        if cand.action == CubeAction.CLEAR:
            chosen.append(CubeUpdate(cand.index, CubeAction.CLEAR, PointCloud.empty(), 1.0, cand.slot))
        else:
            points = partial_points(cand.points, cand.index, n, seed)
            quality = n / cand.count if cand.count else 1.0
            chosen.append(CubeUpdate(cand.index, CubeAction.REPLACE, points, quality, cand.slot))
    return chosen, deferred


class SceneReuse:
    """Owner of the scheduled static scene and its detection cadence."""

    def __init__(self, side_length=DEFAULT_SIDE, origin=(0.0, 0.0, 0.0), threshold=DEFAULT_CHANGE_THRESHOLD,
                 saliency_scale=1.0, seed=0, full_quality=False):
        self.side_length = side_length
        self.origin = np.asarray(origin, dtype=np.float64)
        self.threshold = threshold
        self.saliency_scale = saliency_scale
        self.seed = seed
        self.full_quality = full_quality
        self.reference = {}
        self.cd_max = CD_MAX_FLOOR
        self.pending = {}
        self.detections = []

    def grid(self, cloud: PointCloud) -> CubeGrid:
        return assign_cubes(cloud, self.side_length, self.origin)

    def detect(self, static_cloud: PointCloud, slot: int, snapshot: SaliencyAccumulator | None = None) -> list:
        """Run this slot's detection pass; changed cubes join the pending set."""
        grid = self.grid(static_cloud)
        snapshot = snapshot or SaliencyAccumulator()
        found = []
        for index in sorted(set(grid.indices) | set(self.reference)):
            now = grid.cell_points(index)
            ref = self.reference.get(index)
            # a cube that emptied keeps the saliency of what was there
            density = len(now) if len(now) or ref is None else len(ref.source)
            score = _saliency(density, snapshot.frequency(index), snapshot.distance.get(index, math.inf),
                              self.saliency_scale)
            detection = detect_level(score)
            if ref is not None:
                ref.level, ref.saliency = detection.level, score
                if ref.last_detect_slot is not None and slot - ref.last_detect_slot < detection.interval:
                    continue
                ref.last_detect_slot = slot
            self.detections.append((slot, index, int(detection.level)))
            if ref is None:
                found.append(CubeCandidate(index, CubeAction.REPLACE, now, 1.0, score,
                                           detection.frequency, slot, 'new'))
                continue
            if not len(now):
                found.append(CubeCandidate(index, CubeAction.CLEAR, now, 1.0, score,
                                           detection.frequency, slot, 'clear'))
                continue
            cd = 0.0 if cell_digest(now) == ref.digest else chamfer_distance(now, ref.source)
            self.cd_max = max(self.cd_max, cd)
            if cd > self.threshold:
                found.append(CubeCandidate(index, CubeAction.REPLACE, now, cd / self.cd_max, score,
                                           detection.frequency, slot, 'change'))
            elif not ref.complete:
                found.append(CubeCandidate(index, CubeAction.REPLACE, ref.source, 0.0, score,
                                           detection.frequency, slot, 'refine', ref.delivered))
        for cand in found:
            self.pending[cand.index] = cand
        return found

    def take_pending(self) -> list:
        pending, self.pending = self.pending, {}
        return [pending[i] for i in sorted(pending)]

    def commit(self, updates, slot: int, candidates=None):
        """Record updates as scheduled.

        `candidates` maps a cube to the candidate its update was cut from; the
        candidate's points become the reference source and its saliency the
        cube's level. Without one the update's own points are the source.
        """
        candidates = candidates or {}
        for update in updates:
            if update.action == CubeAction.CLEAR:
                self.reference.pop(update.index, None)
                continue
            ref = self.reference.get(update.index)
            cand = candidates.get(update.index)
            source = cand.points if cand is not None else update.points
            if cand is not None:
                level, saliency = detect_level(cand.saliency).level, cand.saliency
            elif ref is not None:
                level, saliency = ref.level, ref.saliency
            else:
                level, saliency = DetectLevel.LOW, 0.0
            self.reference[update.index] = ReferenceCell(
                source, cell_digest(source), len(update.points), slot,
                ref.last_detect_slot if ref else slot, level, saliency)

    def schedule(self, residual_bits, slot: int):
        """Fill the residual budget from the pending cubes and commit the chosen ones.

        Deferred cubes are dropped from the pending set and found again at
        their next detection slot.
        """
        candidates = self.take_pending()
        chosen, deferred = static_budget_fill(residual_bits, candidates, self.full_quality, self.seed)
        self.commit(chosen, slot, {c.index: c for c in candidates})
        if deferred:
            logger.debug(f'slot {slot}: {len(deferred)} cube updates deferred')
        return chosen, deferred

    def scheduled_view(self) -> dict:
        """Cube contents the client holds once every scheduled update arrived."""
        return {index: partial_points(ref.source, index, ref.delivered, self.seed)
                for index, ref in sorted(self.reference.items())}


# ---------------------------------------------------------------------------
# Offline analysis
# ---------------------------------------------------------------------------

def mean_spacing(cloud: PointCloud) -> float:
    if len(cloud) < 2:
        return 0.0
    dist, _ = Octree.from_cloud(cloud).query(cloud.xyz, exclude_self=True)
    return float(dist.mean())


def quality_proxy(reference: PointCloud, decimated: PointCloud) -> float:
    """Geometric stand-in for normalized image similarity: exp(-C_d / spacing).

    1.0 for identical clouds, falling toward 0 as the decimated cloud drifts
    from the reference by more than its own point spacing.
    """
    if not len(reference):
        return 1.0
    if not len(decimated):
        return 0.0
    cd = chamfer_distance(reference, decimated)
    spacing = mean_spacing(reference)
    if spacing == 0.0:
        return 1.0 if cd == 0.0 else 0.0
    return float(math.exp(-cd / spacing))


def scene_change_profile(frames, side_length=DEFAULT_SIDE, origin=(0.0, 0.0, 0.0)) -> pd.DataFrame:
    """Per adjacent frame pair: cubes compared, changed, added, removed and summed disparity."""
    rows = []
    previous = None
    for i, cloud in enumerate(frames):
        grid = assign_cubes(cloud, side_length, origin)
        if previous is not None:
            shared = set(grid.indices) & set(previous.indices)
            disparity = 0.0
            changed = 0
            for index in shared:
                a, b = grid.cell_points(index), previous.cell_points(index)
                if cell_digest(a) == cell_digest(b):
                    continue
                cd = chamfer_distance(a, b)
                if cd > 0:
                    changed += 1
                    disparity += cd
            rows.append({'frame': i, 'cubes': len(grid), 'changed': changed,
                         'added': len(set(grid.indices) - shared),
                         'removed': len(set(previous.indices) - shared),
                         'disparity': disparity})
        previous = grid
    return pd.DataFrame(rows, columns=['frame', 'cubes', 'changed', 'added', 'removed', 'disparity'])


def saliency_table(reuse: SceneReuse) -> list:
    return [{'ix': i[0], 'iy': i[1], 'iz': i[2], 'saliency': ref.saliency, 'level': ref.level.name.lower()}
            for i, ref in sorted(reuse.reference.items())]


def export_heatmap(rows, path, pixel=4):
    """Write the per-cube saliency table as CSV and a top-down PNG beside it."""
    frame = pd.DataFrame(rows, columns=['ix', 'iy', 'iz', 'saliency', 'level'])
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False)
    png_path = os.path.splitext(os.fspath(path))[0] + '.png'
    if frame.empty:
        Image.new('L', (1, 1)).save(png_path)
        return png_path
    top = frame.groupby(['ix', 'iy'])['saliency'].max().reset_index()
    x0, y0 = top['ix'].min(), top['iy'].min()
    width = int(top['ix'].max() - x0 + 1)
    height = int(top['iy'].max() - y0 + 1)
    peak = top['saliency'].max() or 1.0
    image = np.zeros((height, width), dtype=np.uint8)
    rows_ = (height - 1 - (top['iy'] - y0)).to_numpy()
    cols = (top['ix'] - x0).to_numpy()
    image[rows_, cols] = np.clip(top['saliency'].to_numpy() / peak * 255, 0, 255).astype(np.uint8)
    Image.fromarray(image, mode='L').resize((width * pixel, height * pixel), Image.NEAREST).save(png_path)
    return png_path
