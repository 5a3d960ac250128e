"""Skeleton joint table, body-part labels and the synthetic humanoid.

The joint order follows the 32-joint depth-sensor body-tracking layout.
Body-local axes: x toward the body's left, y forward, z up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from vvstream.errors import DataError, DimensionError

JOINT_NAMES = (
    'PELVIS', 'SPINE_NAVEL', 'SPINE_CHEST', 'NECK',
    'CLAVICLE_LEFT', 'SHOULDER_LEFT', 'ELBOW_LEFT', 'WRIST_LEFT',
    'HAND_LEFT', 'HANDTIP_LEFT', 'THUMB_LEFT',
    'CLAVICLE_RIGHT', 'SHOULDER_RIGHT', 'ELBOW_RIGHT', 'WRIST_RIGHT',
    'HAND_RIGHT', 'HANDTIP_RIGHT', 'THUMB_RIGHT',
    'HIP_LEFT', 'KNEE_LEFT', 'ANKLE_LEFT', 'FOOT_LEFT',
    'HIP_RIGHT', 'KNEE_RIGHT', 'ANKLE_RIGHT', 'FOOT_RIGHT',
    'HEAD', 'NOSE', 'EYE_LEFT', 'EAR_LEFT', 'EYE_RIGHT', 'EAR_RIGHT',
)
JOINT_COUNT = 32
J = {name: index for index, name in enumerate(JOINT_NAMES)}

_LEFT_REST = {
    'CLAVICLE': (0.08, 0.0, 1.50),
    'SHOULDER': (0.24, 0.0, 1.47),
    'ELBOW': (0.438, 0.0, 1.272),
    'WRIST': (0.615, 0.0, 1.095),
    'HAND': (0.672, 0.0, 1.038),
    'HANDTIP': (0.728, 0.0, 0.982),
    'THUMB': (0.672, 0.04, 1.038),
    'HIP': (0.09, 0.0, 0.88),
    'KNEE': (0.12, 0.0, 0.47),
    'ANKLE': (0.14, 0.0, 0.07),
    'FOOT': (0.14, 0.12, 0.02),
    'EYE': (0.035, 0.085, 1.73),
    'EAR': (0.08, 0.0, 1.70),
}


def _rest_pose():
    pose = np.zeros((JOINT_COUNT, 3))
    pose[J['PELVIS']] = (0.0, 0.0, 1.08)
    pose[J['SPINE_NAVEL']] = (0.0, 0.0, 1.24)
    pose[J['SPINE_CHEST']] = (0.0, 0.0, 1.42)
    pose[J['NECK']] = (0.0, 0.0, 1.56)
    pose[J['HEAD']] = (0.0, 0.0, 1.77)
    pose[J['NOSE']] = (0.0, 0.10, 1.70)
    for name, (x, y, z) in _LEFT_REST.items():
        pose[J[f'{name}_LEFT']] = (x, y, z)
        pose[J[f'{name}_RIGHT']] = (-x, y, z)
    return pose


REST_POSE = _rest_pose()


class BodyPart(IntEnum):
    HEAD = 0
    NECK = 1
    CHEST = 2
    ABDOMEN = 3
    LEFT_UPPER_ARM = 4
    RIGHT_UPPER_ARM = 5
    LEFT_LOWER_ARM = 6
    RIGHT_LOWER_ARM = 7
    LEFT_HAND = 8
    RIGHT_HAND = 9
    LEFT_UPPER_LEG = 10
    RIGHT_UPPER_LEG = 11
    LEFT_LOWER_LEG = 12
    RIGHT_LOWER_LEG = 13
    PELVIS = 14


class PartGroup(IntEnum):
    HEAD = 0
    CHEST = 1
    ARM = 2
    LEG = 3


PART_GROUP = {
    BodyPart.HEAD: PartGroup.HEAD,
    BodyPart.NECK: PartGroup.HEAD,
    BodyPart.CHEST: PartGroup.CHEST,
    BodyPart.ABDOMEN: PartGroup.CHEST,
    BodyPart.PELVIS: PartGroup.CHEST,
    BodyPart.LEFT_UPPER_ARM: PartGroup.ARM,
    BodyPart.RIGHT_UPPER_ARM: PartGroup.ARM,
    BodyPart.LEFT_LOWER_ARM: PartGroup.ARM,
    BodyPart.RIGHT_LOWER_ARM: PartGroup.ARM,
    BodyPart.LEFT_HAND: PartGroup.ARM,
    BodyPart.RIGHT_HAND: PartGroup.ARM,
    BodyPart.LEFT_UPPER_LEG: PartGroup.LEG,
    BodyPart.RIGHT_UPPER_LEG: PartGroup.LEG,
    BodyPart.LEFT_LOWER_LEG: PartGroup.LEG,
    BodyPart.RIGHT_LOWER_LEG: PartGroup.LEG,
}

# cylinder axis of each part, as (start joint, end joint)
PART_AXES = {
    BodyPart.HEAD: (J['NECK'], J['HEAD']),
    BodyPart.NECK: (J['SPINE_CHEST'], J['NECK']),
    BodyPart.CHEST: (J['SPINE_NAVEL'], J['SPINE_CHEST']),
    BodyPart.ABDOMEN: (J['PELVIS'], J['SPINE_NAVEL']),
    BodyPart.LEFT_UPPER_ARM: (J['SHOULDER_LEFT'], J['ELBOW_LEFT']),
    BodyPart.RIGHT_UPPER_ARM: (J['SHOULDER_RIGHT'], J['ELBOW_RIGHT']),
    BodyPart.LEFT_LOWER_ARM: (J['ELBOW_LEFT'], J['WRIST_LEFT']),
    BodyPart.RIGHT_LOWER_ARM: (J['ELBOW_RIGHT'], J['WRIST_RIGHT']),
    BodyPart.LEFT_HAND: (J['WRIST_LEFT'], J['HANDTIP_LEFT']),
    BodyPart.RIGHT_HAND: (J['WRIST_RIGHT'], J['HANDTIP_RIGHT']),
    BodyPart.LEFT_UPPER_LEG: (J['HIP_LEFT'], J['KNEE_LEFT']),
    BodyPart.RIGHT_UPPER_LEG: (J['HIP_RIGHT'], J['KNEE_RIGHT']),
    BodyPart.LEFT_LOWER_LEG: (J['KNEE_LEFT'], J['ANKLE_LEFT']),
    BodyPart.RIGHT_LOWER_LEG: (J['KNEE_RIGHT'], J['ANKLE_RIGHT']),
    BodyPart.PELVIS: (J['HIP_LEFT'], J['HIP_RIGHT']),
}

# surface radius of the synthetic shells (not the segmentation filter radii)
SHELL_RADIUS = {
    BodyPart.HEAD: 0.09, BodyPart.NECK: 0.05,
    BodyPart.CHEST: 0.14, BodyPart.ABDOMEN: 0.12, BodyPart.PELVIS: 0.10,
    BodyPart.LEFT_UPPER_ARM: 0.045, BodyPart.RIGHT_UPPER_ARM: 0.045,
    BodyPart.LEFT_LOWER_ARM: 0.04, BodyPart.RIGHT_LOWER_ARM: 0.04,
    BodyPart.LEFT_HAND: 0.03, BodyPart.RIGHT_HAND: 0.03,
    BodyPart.LEFT_UPPER_LEG: 0.07, BodyPart.RIGHT_UPPER_LEG: 0.07,
    BodyPart.LEFT_LOWER_LEG: 0.05, BodyPart.RIGHT_LOWER_LEG: 0.05,
}

# share of body points per report group; dense head like a captured face
DEFAULT_GROUP_SHARES = {
    PartGroup.HEAD: 0.28, PartGroup.CHEST: 0.27, PartGroup.ARM: 0.19, PartGroup.LEG: 0.26,
}

_PART_COLORS = {
    PartGroup.HEAD: (224, 172, 140),
    PartGroup.CHEST: (40, 70, 150),
    PartGroup.ARM: (210, 160, 130),
    PartGroup.LEG: (50, 50, 60),
}

# shells cover the inner part of each bone so neighbouring shells do not touch
_SHELL_SPAN = (0.1, 0.9)

_ARM_CHAINS = {
    'LEFT': [J[f'{n}_LEFT'] for n in ('ELBOW', 'WRIST', 'HAND', 'HANDTIP', 'THUMB')],
    'RIGHT': [J[f'{n}_RIGHT'] for n in ('ELBOW', 'WRIST', 'HAND', 'HANDTIP', 'THUMB')],
}


@dataclass(frozen=True, eq=False)
class Skeleton:
    """32 joints with a tracking confidence in [0, 1] each."""

    positions: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        confidence = np.asarray(self.confidence, dtype=np.float64)
        if positions.shape != (JOINT_COUNT, 3):
            raise DimensionError(f'skeleton needs {JOINT_COUNT} joints, got shape {positions.shape}')
        if confidence.shape != (JOINT_COUNT,):
            raise DimensionError('one confidence value per joint is required')
        if ((confidence < 0) | (confidence > 1)).any():
            raise DataError('joint confidences must lie in [0, 1]')
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'confidence', confidence)

    @classmethod
    def from_positions(cls, positions, confidence=1.0):
        return cls(positions, np.full(JOINT_COUNT, float(confidence)))

    def transformed(self, transform) -> 'Skeleton':
        return Skeleton(transform.apply(self.positions), self.confidence)

    def to_rows(self):
        return [[*p, c] for p, c in zip(self.positions.tolist(), self.confidence.tolist())]

    @classmethod
    def from_rows(cls, rows):
        arr = np.asarray(rows, dtype=np.float64)
        return cls(arr[:, :3], arr[:, 3])


def _axis_frame(direction, reference):
    e1 = np.cross(direction, reference)
    if np.linalg.norm(e1) < 1e-9:
        e1 = np.cross(direction, np.array([1.0, 0.0, 0.0]))
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(direction, e1)
    return e1, e2


def _rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def yaw_matrix(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class HumanoidModel:
    """Articulated body whose 15 bones each carry a cylindrical point shell.

    Shell samples are drawn once from the seed in bone coordinates, so every
    pose of the same model shows the same points and keeps their labels.
    """

    def __init__(self, point_count=6000, seed=0, group_shares=None, part_weights=None):
        self.point_count = int(point_count)
        shares = dict(DEFAULT_GROUP_SHARES)
        shares.update(group_shares or {})
        rng = np.random.default_rng([int(seed), 0xB0D1])

        # group share split over member parts by shell area
        area = {}
        for part, (a, b) in PART_AXES.items():
            length = np.linalg.norm(REST_POSE[b] - REST_POSE[a])
            area[part] = SHELL_RADIUS[part] * length * (part_weights or {}).get(part, 1.0)
        group_area = {g: sum(area[p] for p in BodyPart if PART_GROUP[p] == g) for g in PartGroup}
        counts = {p: int(round(self.point_count * shares[PART_GROUP[p]] * area[p] / group_area[PART_GROUP[p]]))
                  for p in BodyPart}

        labels, along, around = [], [], []
        for part in BodyPart:
            n = counts[part]
            labels.append(np.full(n, int(part)))
            along.append(rng.uniform(*_SHELL_SPAN, size=n))
            around.append(rng.uniform(0.0, 2 * math.pi, size=n))
        self.labels = np.concatenate(labels).astype(np.int64)
        self._along = np.concatenate(along)
        self._around = np.concatenate(around)
        self._radius = np.array([SHELL_RADIUS[BodyPart(p)] for p in self.labels])
        shade = rng.integers(-12, 13, size=(len(self.labels), 1))
        base = np.array([_PART_COLORS[PART_GROUP[BodyPart(p)]] for p in self.labels])
        self.colors = np.clip(base + shade, 0, 255).astype(np.uint8)

    def joints(self, position=(0.0, 0.0, 0.0), yaw=0.0, swing=0.0) -> np.ndarray:
        """World joint positions for a root offset, heading and arm swing (radians)."""
        pose = REST_POSE.copy()
        for side, sign in (('LEFT', 1.0), ('RIGHT', -1.0)):
            if swing == 0.0:
                break
            shoulder = pose[J[f'SHOULDER_{side}']]
            rot = _rotation_about((1.0, 0.0, 0.0), sign * swing)
            chain = _ARM_CHAINS[side]
            pose[chain] = (pose[chain] - shoulder) @ rot.T + shoulder
        rot = yaw_matrix(yaw)
        return pose @ rot.T + np.asarray(position, dtype=np.float64)

    def surface(self, joints):
        """Shell points for a posed skeleton: (xyz, rgb, labels)."""
        joints = np.asarray(joints, dtype=np.float64)
        # heading reference follows the body so shells move rigidly with it
        forward = joints[J['NOSE']] - joints[J['HEAD']]
        forward[2] = 0.0
        if np.linalg.norm(forward) < 1e-9:
            forward = np.array([0.0, 1.0, 0.0])
        forward /= np.linalg.norm(forward)
        xyz = np.empty((len(self.labels), 3))
        for part, (a, b) in PART_AXES.items():
            mask = self.labels == int(part)
            if not mask.any():
                continue
            start, end = joints[a], joints[b]
            axis = end - start
            length = np.linalg.norm(axis)
            direction = axis / length
            e1, e2 = _axis_frame(direction, forward)
            u = self._along[mask, None] * length
            theta = self._around[mask, None]
            r = self._radius[mask, None]
            xyz[mask] = start + u * direction + r * (np.cos(theta) * e1 + np.sin(theta) * e2)
        return xyz, self.colors, self.labels
