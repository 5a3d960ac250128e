"""Time-slot synchronization of N camera streams into multi-view groups."""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

from vvstream.capture import TaggedFrame
from vvstream.errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyncConfig:
    slot_duration: Fraction = Fraction(1, 24)
    camera_count: int = 1
    reuse_on_loss: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'slot_duration', Fraction(self.slot_duration).limit_denominator(10 ** 6))
        if self.slot_duration <= 0:
            raise ConfigurationError('slot duration must be positive')
        if self.camera_count < 1:
            raise ConfigurationError('at least one camera is required')

    @property
    def slot_us(self) -> Fraction:
        return self.slot_duration * 10 ** 6

    def slot_of(self, timestamp_us: int) -> int:
        # half-open slots: a boundary timestamp belongs to the later slot
        return math.floor(Fraction(timestamp_us) / self.slot_us)

    def slot_start(self, slot: int) -> int:
        return math.ceil(slot * self.slot_us)


@dataclass(frozen=True, eq=False)
class SyncedGroup:
    slot_index: int
    frames: tuple
    reused_flags: tuple

    @property
    def camera_ids(self):
        return [f.camera_id for f in self.frames]

    @property
    def reused_count(self):
        return sum(self.reused_flags)

    def frame(self, camera_id) -> TaggedFrame:
        for f in self.frames:
            if f.camera_id == camera_id:
                return f
        raise KeyError(camera_id)


@dataclass
class SyncStats:
    groups: int = 0
    reused: int = 0
    withheld: int = 0
    superseded: int = 0
    out_of_order: int = 0
    reused_by_camera: dict = field(default_factory=dict)


class Synchronizer:
    """Assign frames to slots and emit one complete group per slot.

    Frames must arrive in global timestamp order (see `synchronize`). A slot
    is finalized as soon as a frame for a later slot shows up.
    """

    def __init__(self, cfg: SyncConfig, camera_ids):
        self.cfg = cfg
        self.camera_ids = sorted(camera_ids)
        if len(self.camera_ids) != cfg.camera_count:
            raise ConfigurationError(
                f'sync configured for {cfg.camera_count} cameras, got {len(self.camera_ids)} streams')
        self.stats = SyncStats(reused_by_camera={cid: 0 for cid in self.camera_ids})
        self._slot = None
        self._pending = {}
        self._latest = {}
        self._last_ts = {}

    def push(self, frame: TaggedFrame) -> list:
        """Add a frame; returns groups finalized by it (possibly none)."""
        cid = frame.camera_id
        if cid in self._last_ts and frame.timestamp < self._last_ts[cid]:
            self.stats.out_of_order += 1
            logger.warning(f'camera {cid}: frame {frame.descriptor.sequence_number} is older than its predecessor, skipped')
            return []
        self._last_ts[cid] = frame.timestamp
        slot = self.cfg.slot_of(frame.timestamp)
        out = []
        if self._slot is None:
            self._slot = slot
        elif slot < self._slot:
            self.stats.out_of_order += 1
            logger.warning(f'camera {cid}: frame for closed slot {slot} skipped')
            return []
        elif slot > self._slot:
            out.extend(self._finalize())
            # every camera was silent in the slots in between
            self.stats.withheld += slot - self._slot - 1
            self._slot = slot
        if cid in self._pending:
            self.stats.superseded += 1
        self._pending[cid] = frame
        return out

    def flush(self) -> list:
        if self._slot is None:
            return []
        out = self._finalize()
        self._slot = None
        return out

    def _finalize(self):
        fresh = self._pending
        self._pending = {}
        self._latest.update(fresh)
        frames, flags = [], []
        for cid in self.camera_ids:
            if cid in fresh:
                frames.append(fresh[cid])
                flags.append(False)
            elif self.cfg.reuse_on_loss and cid in self._latest:
                frames.append(self._latest[cid])
                flags.append(True)
            else:
                self.stats.withheld += 1
                logger.debug(f'slot {self._slot}: camera {cid} has no frame yet, group withheld')
                return []
        for cid, reused in zip(self.camera_ids, flags):
            if reused:
                self.stats.reused += 1
                self.stats.reused_by_camera[cid] += 1
        self.stats.groups += 1
        return [SyncedGroup(self._slot, tuple(frames), tuple(flags))]


def synchronize(streams: dict, cfg: SyncConfig, stats: SyncStats | None = None) -> Iterator[SyncedGroup]:
    """Merge per-camera streams (camera_id -> iterable) into SyncedGroups.

    Each stream must be time-ordered on its own; frames are interleaved by
    timestamp. Pass `stats` to receive the counters when the stream ends.
    """
    sync = Synchronizer(cfg, streams.keys())
    merged = heapq.merge(*streams.values(), key=lambda f: (f.timestamp, f.camera_id))
    for frame in merged:
        yield from sync.push(frame)
    yield from sync.flush()
    if stats is not None:
        stats.__dict__.update(sync.stats.__dict__)
    logger.info(f'sync finished: {sync.stats.groups} groups, {sync.stats.reused} reused frames, '
                f'{sync.stats.withheld} withheld')
