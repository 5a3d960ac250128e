"""Skeleton-based dynamic calibration of sub cameras onto the master camera."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from vvstream.body import JOINT_COUNT, Skeleton
from vvstream.errors import CalibrationDegenerateError, ConfigurationError, NotCalibratedError
from vvstream.geometry import WORLD, PointCloud, RigidTransform, apply_transform, estimate_rigid_transform
from vvstream.sync import SyncedGroup

logger = logging.getLogger(__name__)


@dataclass
class CalibrationState:
    master_camera_id: int
    transforms: dict = field(default_factory=dict)
    last_update_slot: int | None = None
    refresh_interval: int = 24
    confidence_threshold: float = 0.5
    attempts: int = 0
    status: list = field(default_factory=list)

    def __post_init__(self):
        if self.refresh_interval < 1:
            raise ConfigurationError('refresh interval must be at least one slot')
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigurationError('confidence threshold must lie in [0, 1]')

    def transform_for(self, camera_id) -> RigidTransform | None:
        if camera_id == self.master_camera_id:
            return RigidTransform.identity()
        return self.transforms.get(camera_id)

    def is_calibrated(self, camera_ids) -> bool:
        return all(self.transform_for(cid) is not None for cid in camera_ids)


def denoise_skeleton(s: Skeleton, threshold: float) -> np.ndarray:
    """Boolean mask of the 32 joints whose confidence reaches the threshold."""
    return s.confidence >= threshold


def calibrate_pair(sub: Skeleton, master: Skeleton, threshold: float) -> RigidTransform:
    """master-from-sub transform from the joints both trackers trust."""
    mask = denoise_skeleton(sub, threshold) & denoise_skeleton(master, threshold)
    weights = np.where(mask, sub.confidence * master.confidence, 0.0)
    return estimate_rigid_transform(sub.positions, master.positions, weights)


def _master_skeleton(group: SyncedGroup, state: CalibrationState):
    try:
        return group.frame(state.master_camera_id).skeleton
    except KeyError:
        return None


def refresh(state: CalibrationState, group: SyncedGroup, executor: ThreadPoolExecutor | None = None) -> CalibrationState:
    """Recompute sub-camera transforms when the refresh interval has elapsed.

    A camera whose correspondences are degenerate keeps its previous
    transform; the failure is recorded in `state.status`.
    """
    if state.last_update_slot is not None and group.slot_index < state.last_update_slot:
        logger.warning(f'calibration: slot {group.slot_index} precedes last update {state.last_update_slot}')
        return state
    due = state.last_update_slot is None or group.slot_index - state.last_update_slot >= state.refresh_interval
    master = _master_skeleton(group, state)
    if not due or master is None:
        return state

    subs = [f for f in group.frames if f.camera_id != state.master_camera_id]

    def solve(frame):
        if frame.skeleton is None:
            return frame.camera_id, CalibrationDegenerateError('no skeleton')
        try:
            return frame.camera_id, calibrate_pair(frame.skeleton, master, state.confidence_threshold)
        except CalibrationDegenerateError as e:
            return frame.camera_id, e

    results = list(executor.map(solve, subs)) if executor else [solve(f) for f in subs]
    for camera_id, result in sorted(results, key=lambda r: r[0]):
        if isinstance(result, RigidTransform):
            state.transforms[camera_id] = result
            state.status.append({'slot': group.slot_index, 'camera_id': camera_id, 'ok': True})
        else:
            kept = 'keeps previous transform' if camera_id in state.transforms else 'stays uncalibrated'
            logger.info(f'calibration: camera {camera_id} at slot {group.slot_index} failed ({result}); {kept}')
            state.status.append({'slot': group.slot_index, 'camera_id': camera_id, 'ok': False,
                                 'reason': str(result)})
    state.last_update_slot = group.slot_index
    state.attempts += 1
    return state


def merge_group(group: SyncedGroup, state: CalibrationState, strict=True):
    """Concatenate every camera's cloud in the master frame.

    With strict=False, cameras that were never calibrated are left out; the
    second return value lists them.
    """
    clouds, skipped = [], []
    for frame in sorted(group.frames, key=lambda f: f.camera_id):
        transform = state.transform_for(frame.camera_id)
        if transform is None:
            if strict:
                raise NotCalibratedError(f'camera {frame.camera_id} has no calibration')
            skipped.append(frame.camera_id)
            continue
        if frame.camera_id == state.master_camera_id:
            clouds.append(frame.cloud.with_frame(WORLD))
        else:
            clouds.append(apply_transform(frame.cloud, transform, WORLD))
    merged = PointCloud.concat(clouds, WORLD)
    if strict:
        return merged
    return merged, skipped


def export_state(state: CalibrationState) -> str:
    doc = {
        'master_camera_id': state.master_camera_id,
        'last_update_slot': state.last_update_slot,
        'refresh_interval': state.refresh_interval,
        'confidence_threshold': state.confidence_threshold,
        'cameras': [
            {'camera_id': cid,
             'rotation': t.rotation.reshape(-1).tolist(),
             'translation': t.translation.tolist()}
            for cid, t in sorted(state.transforms.items())
        ],
    }
    return json.dumps(doc, indent=2)


def import_state(text: str) -> CalibrationState:
    try:
        doc = json.loads(text)
        state = CalibrationState(
            master_camera_id=int(doc['master_camera_id']),
            last_update_slot=doc.get('last_update_slot'),
            refresh_interval=int(doc.get('refresh_interval', 24)),
            confidence_threshold=float(doc.get('confidence_threshold', 0.5)),
        )
        for entry in doc.get('cameras', []):
            state.transforms[int(entry['camera_id'])] = RigidTransform(
                np.asarray(entry['rotation'], dtype=np.float64).reshape(3, 3), entry['translation'])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f'bad calibration state: {e}')
    return state


def skeleton_in_master(group: SyncedGroup, state: CalibrationState) -> Skeleton | None:
    """Skeleton for segmentation: the master's, or the first calibrated sub's."""
    for frame in sorted(group.frames, key=lambda f: f.camera_id != state.master_camera_id):
        transform = state.transform_for(frame.camera_id)
        if frame.skeleton is None or transform is None:
            continue
        if int((frame.skeleton.confidence >= state.confidence_threshold).sum()) < JOINT_COUNT // 2:
            continue
        return frame.skeleton.transformed(transform)
    return None
