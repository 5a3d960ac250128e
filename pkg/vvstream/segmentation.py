"""Skeleton-driven cylindrical segmentation and per-part decimation."""
from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from vvstream.body import PART_AXES, PART_GROUP, BodyPart, PartGroup, Skeleton
from vvstream.errors import ConfigurationError
from vvstream.geometry import PointCloud
from vvstream.wire import POINT_BYTES

logger = logging.getLogger(__name__)

# engineering defaults, all configurable
DEFAULT_RADII = {
    BodyPart.HEAD: 0.15,
    BodyPart.NECK: 0.22, BodyPart.CHEST: 0.22, BodyPart.ABDOMEN: 0.22, BodyPart.PELVIS: 0.22,
    BodyPart.LEFT_UPPER_ARM: 0.10, BodyPart.RIGHT_UPPER_ARM: 0.10,
    BodyPart.LEFT_LOWER_ARM: 0.10, BodyPart.RIGHT_LOWER_ARM: 0.10,
    BodyPart.LEFT_HAND: 0.08, BodyPart.RIGHT_HAND: 0.08,
    BodyPart.LEFT_UPPER_LEG: 0.12, BodyPart.RIGHT_UPPER_LEG: 0.12,
    BodyPart.LEFT_LOWER_LEG: 0.12, BodyPart.RIGHT_LOWER_LEG: 0.12,
}
DEFAULT_PADDING = 0.05


@dataclass(frozen=True)
class CylinderSpec:
    part: BodyPart
    start_joint: int
    end_joint: int
    radius: float
    padding: float = DEFAULT_PADDING

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigurationError(f'{self.part.name}: radius must be positive')
        if self.padding < 0:
            raise ConfigurationError(f'{self.part.name}: padding must be non-negative')
        if self.start_joint == self.end_joint or not all(0 <= j < 32 for j in (self.start_joint, self.end_joint)):
            raise ConfigurationError(f'{self.part.name}: axis joints must be distinct valid indices')


def default_cylinders(radii=None, padding=DEFAULT_PADDING) -> list:
    radii = {**DEFAULT_RADII, **(radii or {})}
    return [CylinderSpec(part, *PART_AXES[part], radii[part], padding) for part in BodyPart]


@dataclass(frozen=True, eq=False)
class SegmentedFrame:
    """Body parts plus the static rest; `labels` holds each input point's part or -1."""

    body_parts: dict
    static_scene: PointCloud
    slot_index: int = 0
    labels: np.ndarray = field(default=None)

    @property
    def body_point_count(self):
        return sum(len(c) for c in self.body_parts.values())

    def group_counts(self) -> dict:
        return group_counts(self.body_parts)


def group_counts(parts: Mapping) -> dict:
    counts = {g: 0 for g in PartGroup}
    for part, cloud in parts.items():
        counts[PART_GROUP[BodyPart(part)]] += len(cloud)
    return counts


def _axis_distances(xyz, a, b):
    """(perpendicular distance, axial position, clamped segment distance, length)."""
    axis = b - a
    length = float(np.linalg.norm(axis))
    rel = xyz - a
    if length == 0.0:
        dist = np.linalg.norm(rel, axis=1)
        return dist, np.zeros(len(xyz)), dist, 0.0
    direction = axis / length
    t = rel @ direction
    perp = np.linalg.norm(rel - t[:, None] * direction, axis=1)
    tc = np.clip(t, 0.0, length)
    seg = np.linalg.norm(rel - tc[:, None] * direction, axis=1)
    return perp, t, seg, length


def segment(cloud: PointCloud, skel: Skeleton, specs=None, slot_index=0) -> SegmentedFrame:
    """Split a world-frame cloud into the 15 body parts and the static scene.

    A point falls into a cylinder when its distance to the axis is within the
    radius and its axial position lies on the padded segment. Overlaps go to
    the nearest axis segment, ties to the lower part index.
    """
    specs = sorted(specs or default_cylinders(), key=lambda s: int(s.part))
    if [int(s.part) for s in specs] != list(range(15)):
        raise ConfigurationError('one cylinder per body part is required')
    n = len(cloud)
    score = np.full((n, 15), np.inf)
    for spec in specs:
        if not n:
            break
        a = skel.positions[spec.start_joint]
        b = skel.positions[spec.end_joint]
        perp, t, seg, length = _axis_distances(cloud.xyz, a, b)
        inside = (perp <= spec.radius) & (t >= -spec.padding) & (t <= length + spec.padding)
        score[inside, int(spec.part)] = seg[inside]
    labels = np.full(n, -1, dtype=np.int64)
    if n:
        best = np.argmin(score, axis=1)
        hit = np.isfinite(score[np.arange(n), best])
        labels[hit] = best[hit]
    parts = {part: cloud.take(labels == int(part)) for part in BodyPart}
    return SegmentedFrame(parts, cloud.take(labels < 0), slot_index, labels)


# ---------------------------------------------------------------------------
# Decimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecimationProfile:
    name: str
    ratios: dict  # PartGroup -> kept ratio

    def __post_init__(self):
        for group in PartGroup:
            if group not in self.ratios:
                raise ConfigurationError(f'profile {self.name!r} has no ratio for {group.name.lower()}')
            r = self.ratios[group]
            if not 0.0 < r <= 1.0:
                raise ConfigurationError(f'profile {self.name!r}: ratio {r} outside (0, 1]')

    def ratio_for(self, part) -> float:
        return self.ratios[PART_GROUP[BodyPart(part)]]

    def weighted_ratio(self, counts: Mapping) -> float:
        """Kept share of a body with the given per-group point counts."""
        total = sum(counts.values())
        if not total:
            return 1.0
        return sum(self.ratios[g] * counts[g] for g in PartGroup) / total


def _profile(name, head, chest, arm, leg):
    return DecimationProfile(name, {PartGroup.HEAD: head, PartGroup.CHEST: chest,
                                    PartGroup.ARM: arm, PartGroup.LEG: leg})


PRESETS = {
    'base': _profile('base', 1.0, 1.0, 1.0, 1.0),
    '1': _profile('1', 1.0, 0.60, 0.25, 0.80),
    '2': _profile('2', 0.80, 0.55, 0.05, 0.60),
    '3': _profile('3', 0.80, 0.40, 0.05, 0.40),
    '4a': _profile('4a', 0.70, 0.20, 0.70, 0.25),
    '4b': _profile('4b', 0.44, 0.44, 0.44, 0.44),
    '5': _profile('5', 0.50, 0.25, 0.15, 0.25),
}
PRESETS['4'] = PRESETS['4a']


def parse_ratios(mapping, name='custom') -> DecimationProfile:
    ratios = {}
    for key, value in mapping.items():
        try:
            ratios[PartGroup[str(key).upper()]] = float(value)
        except KeyError:
            raise ConfigurationError(f'profile {name!r}: unknown group {key!r}')
        except (TypeError, ValueError):
            raise ConfigurationError(f'profile {name!r}: ratio for {key!r} is not a number')
    return DecimationProfile(name, ratios)


def load_presets(path) -> dict:
    """Read extra profiles from a JSON file keyed by preset name."""
    try:
        with open(path, encoding='utf-8') as fid:
            doc = json.load(fid)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f'{path}: cannot load presets: {e}')
    return {name: parse_ratios(ratios, name) for name, ratios in doc.items()}


def get_profile(spec, extra=None) -> DecimationProfile:
    """Preset by name, or explicit ratios such as 'head=0.5,chest=0.25,arm=0.15,leg=0.25'."""
    if isinstance(spec, DecimationProfile):
        return spec
    if isinstance(spec, Mapping):
        return parse_ratios(spec)
    presets = {**PRESETS, **(extra or {})}
    key = str(spec)
    if key in presets:
        return presets[key]
    if '=' in key:
        pairs = dict(item.split('=', 1) for item in key.split(',') if item)
        return parse_ratios(pairs, key)
    raise ConfigurationError(f'unknown decimation preset {key!r} (known: {", ".join(sorted(presets))})')


def kept_count(n: int, ratio: float) -> int:
    return int(np.floor(n * ratio + 0.5))


def voxel_downsample(cloud: PointCloud, voxel: float) -> np.ndarray:
    """Indices of one representative point (the lowest index) per occupied voxel."""
    if not len(cloud):
        return np.empty(0, dtype=np.int64)
    keys = np.floor((cloud.xyz - cloud.xyz.min(axis=0)) / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def _outline(cloud) -> np.ndarray:
    """Indices of the lowest and highest point along each axis, first occurrence order."""
    extremes = np.concatenate([cloud.xyz.argmin(axis=0), cloud.xyz.argmax(axis=0)])
    _, first = np.unique(extremes, return_index=True)
    return extremes[np.sort(first)]


def _outline_first(outline, order, count):
    rest = order[~np.isin(order, outline)]
    return np.concatenate([outline, rest])[:count]


def _voxel_order(cloud, count, rng):
    lo, hi = 1e-6, float(np.ptp(cloud.xyz, axis=0).max()) + 1e-3
    best = np.arange(len(cloud))
    for _ in range(40):
        mid = (lo + hi) / 2
        chosen = voxel_downsample(cloud, mid)
        if len(chosen) >= count:
            best, lo = chosen, mid
        else:
            hi = mid
    return rng.permutation(best)


def keep_order(cloud: PointCloud, ratio: float, seed: int, slot: int = 0, part: int = 0,
               mode='random') -> np.ndarray:
    """Indices of the kept points in priority order; every prefix is a coarser layer."""
    n = len(cloud)
    if not 0.0 < ratio <= 1.0:
        raise ConfigurationError(f'kept ratio {ratio} outside (0, 1]')
    count = kept_count(n, ratio)
    rng = np.random.default_rng([int(seed), int(slot), int(part)])
    if count == n:
        return rng.permutation(n)
    # the extreme points lead so any prefix keeps the bounding box
    if mode == 'random':
        return _outline_first(_outline(cloud), rng.permutation(n), count)
    if mode == 'voxel':
        return _outline_first(_outline(cloud), _voxel_order(cloud, count, rng), count)
    raise ConfigurationError(f'unknown decimation mode {mode!r}')


def decimate_part(cloud: PointCloud, kept_ratio: float, seed: int, slot: int = 0, part: int = 0,
                  mode='random') -> PointCloud:
    if kept_ratio == 1.0:
        return cloud
    order = keep_order(cloud, kept_ratio, seed, slot, part, mode)
    return cloud.take(np.sort(order))


def decimate_frame(frame: SegmentedFrame, profile: DecimationProfile, seed: int, mode='random') -> dict:
    return {part: decimate_part(cloud, profile.ratio_for(part), seed, frame.slot_index, int(part), mode)
            for part, cloud in frame.body_parts.items()}


def dynamic_bitrate(frame_parts, frames_per_chunk: int = 1) -> int:
    """Bits for the body points of a chunk at the wire cost per point.

    `frame_parts` is either one frame (part -> cloud), counted
    `frames_per_chunk` times, or a sequence of such frames.
    """
    if isinstance(frame_parts, Mapping):
        frames = [frame_parts] * frames_per_chunk
    else:
        frames = list(frame_parts)
    points = sum(len(cloud) for parts in frames for cloud in parts.values())
    return points * POINT_BYTES * 8
