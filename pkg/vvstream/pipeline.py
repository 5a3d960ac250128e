"""Server-side processing: camera sources through sync, calibration, segmentation and reuse."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from vvstream.body import BodyPart
from vvstream.calibration import CalibrationState, merge_group, refresh, skeleton_in_master
from vvstream.capture import camera_streams, parse_manifest, parse_script, start_camera_workers, synthetic_streams
from vvstream.errors import ConfigurationError, ManifestError
from vvstream.geometry import WORLD, PointCloud, RigidTransform, apply_transform
from vvstream.scene_reuse import SaliencyMap, SceneReuse, quality_proxy
from vvstream.segmentation import (
    SegmentedFrame, decimate_frame, default_cylinders, get_profile, load_presets, segment,
)
from vvstream.sessionlog import SessionLog
from vvstream.sync import SyncConfig, SyncStats, synchronize
from vvstream.vabr import QoEConfig
from vvstream.wire import POINT_BYTES, FramePayload

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of a streaming run; field `x` is read from config key `X`."""

    fps: int = 24
    frames_per_chunk: int = 24
    seed: int = 0
    preset: str = '5'
    preset_file: str | None = None
    decimation_mode: str = 'random'
    cylinder_radii: dict | None = None
    cylinder_padding: float = 0.05
    master_camera: int | None = None
    calibration_interval: int = 24
    confidence_threshold: float = 0.5
    reuse_on_loss: bool = True
    cube_side: float = 0.15
    cube_origin: tuple = (0.0, 0.0, 0.0)
    change_threshold: float = 0.01
    saliency_scale: float = 1.0
    frustum_angle_deg: float = 30.0
    saliency_window_us: int = 2_000_000
    full_quality: bool = False
    quality_proxy: bool = True
    qoe_lambda: float = 1.0
    qoe_mu: float = 1.0
    qoe_window: int = 3
    rebuffer_weight: float = 0.0
    estimator_window: int = 5
    initial_bandwidth_mbps: float = 20.0
    propagation_ms: float = 20.0
    loss_rate: float = 0.0
    uplink_mbps: float = 1000.0
    camera_workers: bool = False
    queue_depth: int = 8
    snapshot_every: int = 10
    client_timeout_s: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, 'cube_origin', tuple(float(v) for v in self.cube_origin))
        if self.fps <= 0 or self.frames_per_chunk < 1:
            raise ConfigurationError('fps and frames per chunk must be positive')
        if self.cube_side <= 0:
            raise ConfigurationError('cube side length must be positive')
        if self.change_threshold < 0:
            raise ConfigurationError('change threshold must be non-negative')
        if self.uplink_mbps <= 0 or self.propagation_ms < 0:
            raise ConfigurationError('uplink rate must be positive and propagation delay non-negative')

    @classmethod
    def from_mapping(cls, mapping, **overrides):
        values = {f.name: mapping[f.name.upper()] for f in dataclasses.fields(cls) if f.name.upper() in mapping}
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigurationError(f'bad pipeline setting: {e}')

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def chunk_seconds(self) -> float:
        return self.frames_per_chunk / self.fps

    def profile(self):
        extra = load_presets(self.preset_file) if self.preset_file else None
        return get_profile(self.preset, extra)

    def cylinders(self):
        radii = {}
        for name, radius in (self.cylinder_radii or {}).items():
            try:
                radii[BodyPart[str(name).upper()]] = float(radius)
            except KeyError:
                raise ConfigurationError(f'unknown body part {name!r} in cylinder radii')
        return default_cylinders(radii, self.cylinder_padding)

    def qoe_config(self) -> QoEConfig:
        return QoEConfig(self.qoe_lambda, self.qoe_mu, self.qoe_window, rebuffer_weight=self.rebuffer_weight)

    def sync_config(self, camera_count) -> SyncConfig:
        return SyncConfig(Fraction(1, int(self.fps)), camera_count, self.reuse_on_loss)


class CaptureInput(NamedTuple):
    sources: dict
    world_from_master: RigidTransform
    fps: int
    kind: str


def open_input(path, frame_count=None) -> CaptureInput:
    """Camera sources from a scene script or a recorded-sequence manifest."""
    try:
        with open(path, encoding='utf-8') as fid:
            text = fid.read()
    except OSError as e:
        raise ConfigurationError(f'{path}: cannot read input: {e.strerror}')
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict) and isinstance(doc.get('cameras'), dict):
        manifest = parse_manifest(doc, path)
        if not manifest.cameras:
            raise ManifestError(f'{path}: manifest lists no cameras')
        directory = os.path.dirname(os.path.abspath(path))
        streams = camera_streams(directory, manifest)
        if frame_count is not None:
            streams = {cid: _limit(s, frame_count) for cid, s in streams.items()}
        return CaptureInput(streams, manifest.world_from_master, int(manifest.fps), 'manifest')
    script = parse_script(text, path)
    return CaptureInput(synthetic_streams(script, frame_count), script.world_from_master(), int(script.fps), 'script')


def _limit(stream, count):
    for i, frame in enumerate(stream):
        if i >= count:
            return
        yield frame


class ProcessedFrame(NamedTuple):
    payload: FramePayload
    timings: dict
    static_points: int


@dataclass(frozen=True, eq=False)
class ChunkInput:
    index: int
    frames: list
    candidates: list
    slot: int
    ready_s: float
    timings: list = field(default_factory=list)


def _ms(start):
    return (time.perf_counter() - start) * 1000.0


class Pipeline:
    """Turns camera sources into decimated body frames and static-scene candidates.

    `chunks()` is lazy: chunk k+1 is processed only when asked for, so
    viewport reports received in between steer its detection cadence.
    """

    def __init__(self, cfg: PipelineConfig, sources: dict, world_from_master=None, log: SessionLog | None = None,
                 saliency: SaliencyMap | None = None, executor=None):
        if not sources:
            raise ConfigurationError('no camera sources')
        self.cfg = cfg
        self.sources = dict(sources)
        self.camera_ids = sorted(self.sources)
        self.world_from_master = world_from_master or RigidTransform.identity()
        self.log = log if log is not None else SessionLog()
        self.saliency = saliency if saliency is not None else SaliencyMap(cfg.saliency_window_us, cfg.frustum_angle_deg)
        self.executor = executor
        master = cfg.master_camera if cfg.master_camera is not None else self.camera_ids[0]
        if master not in self.sources:
            raise ConfigurationError(f'master camera {master} has no source')
        self.calibration = CalibrationState(master, refresh_interval=cfg.calibration_interval,
                                            confidence_threshold=cfg.confidence_threshold)
        self.reuse = SceneReuse(cfg.cube_side, cfg.cube_origin, cfg.change_threshold, cfg.saliency_scale,
                                cfg.seed, cfg.full_quality)
        self.profile = cfg.profile()
        self.specs = cfg.cylinders()
        self.sync_cfg = cfg.sync_config(len(self.camera_ids))
        self.sync_stats = SyncStats()
        self.skipped = 0
        self._capture_wall = {}
        self._last_skeleton = None

    def _timed(self, camera_id, source):
        it = iter(source)
        while True:
            start = time.perf_counter()
            try:
                frame = next(it)
            except StopIteration:
                return
            self._capture_wall[(camera_id, frame.descriptor.sequence_number)] = _ms(start)
            yield frame

    def groups(self):
        sources = {cid: self._timed(cid, src) for cid, src in self.sources.items()}
        # Optionally read each camera on its own thread
        if self.cfg.camera_workers:
            sources = start_camera_workers(sources, self.cfg.queue_depth)
        return synchronize(sources, self.sync_cfg, self.sync_stats)

    def _log_cameras(self, group, timings):
        slot = group.slot_index
        capture = uplink = 0.0
        for frame, reused in zip(group.frames, group.reused_flags):
            if reused:
                continue
            cid = frame.camera_id
            wall = self._capture_wall.pop((cid, frame.descriptor.sequence_number), 0.0)
            nbytes = len(frame.cloud) * POINT_BYTES
            sim = nbytes * 8 / (self.cfg.uplink_mbps * 1e6) * 1000.0
            self.log.log_event('capture', frame=slot, camera=cid, bytes=nbytes, wall_ms=wall,
                               timestamp_us=frame.timestamp)
            self.log.log_event('uplink', frame=slot, camera=cid, bytes=nbytes, sim_ms=sim,
                               timestamp_us=frame.timestamp)
            capture, uplink = max(capture, wall), max(uplink, sim)
        timings['capture'] = (0.0, capture)
        timings['uplink'] = (uplink, 0.0)

    def process(self, group, sync_ms=0.0) -> ProcessedFrame:
        cfg = self.cfg
        slot = group.slot_index
        timings = {}
        self._log_cameras(group, timings)
        self.log.log_event('sync', frame=slot, wall_ms=sync_ms, reused=group.reused_count,
                           timestamp_us=self.sync_cfg.slot_start(slot))
        timings['sync'] = (0.0, sync_ms)

        # Register every camera into the world frame
        start = time.perf_counter()
        refresh(self.calibration, group, self.executor)
        merged, skipped = merge_group(group, self.calibration, strict=False)
        self.skipped += len(skipped)
        world = apply_transform(merged, self.world_from_master, WORLD)
        skeleton = skeleton_in_master(group, self.calibration)
        if skeleton is not None:
            skeleton = skeleton.transformed(self.world_from_master)
            self._last_skeleton = skeleton
        else:
            # person out of every view: keep segmenting around the last pose seen
            skeleton = self._last_skeleton
        wall = _ms(start)
        self.log.log_event('calibration', frame=slot, bytes=len(world) * POINT_BYTES, wall_ms=wall,
                           skipped=len(skipped))
        timings['calibration'] = (0.0, wall)

        # Split the body from the scene and decimate its parts
        start = time.perf_counter()
        if skeleton is None:
            seg = SegmentedFrame({p: PointCloud.empty() for p in BodyPart}, world, slot,
                                 np.full(len(world), -1, dtype=np.int64))
        else:
            seg = segment(world, skeleton, self.specs, slot)
        parts = decimate_frame(seg, self.profile, cfg.seed, cfg.decimation_mode)
        kept = sum(len(c) for c in parts.values())
        quality = None
        if cfg.quality_proxy and slot % cfg.frames_per_chunk == 0 and seg.body_point_count:
            quality = quality_proxy(PointCloud.concat(list(seg.body_parts.values())),
                                    PointCloud.concat(list(parts.values())))
        wall = _ms(start)
        self.log.log_event('segmentation', frame=slot, bytes=kept * POINT_BYTES, wall_ms=wall,
                           body_points=seg.body_point_count, kept_points=kept,
                           static_points=len(seg.static_scene), quality=quality,
                           **{f'{g.name.lower()}_points': n for g, n in seg.group_counts().items()})
        timings['segmentation'] = (0.0, wall)

        # Queue background cubes that are due and changed
        start = time.perf_counter()
        snapshot = self.saliency.snapshot(self.reuse.grid(seg.static_scene))
        found = self.reuse.detect(seg.static_scene, slot, snapshot)
        wall = _ms(start)
        self.log.log_event('reuse', frame=slot, bytes=sum(len(c.points) for c in found) * POINT_BYTES,
                           wall_ms=wall, cubes=len(found), scene_bytes=len(seg.static_scene) * POINT_BYTES)
        timings['reuse'] = (0.0, wall)

        payload = FramePayload(slot, {int(p): c for p, c in parts.items()})
        return ProcessedFrame(payload, timings, len(seg.static_scene))

    def _chunk(self, index, frames):
        last = frames[-1].payload.slot
        return ChunkInput(index, [f.payload for f in frames], self.reuse.take_pending(), last,
                          self.sync_cfg.slot_start(last + 1) / 1e6, [f.timings for f in frames])

    def chunks(self):
        buffer, current = [], None
        groups = iter(self.groups())
        while True:
            start = time.perf_counter()
            group = next(groups, None)
            sync_ms = _ms(start)
            if group is None:
                break
            # A chunk closes when the first group of the next one arrives
            index = group.slot_index // self.cfg.frames_per_chunk
            if current is not None and index != current and buffer:
                yield self._chunk(current, buffer)
                buffer = []
            current = index
            # Sync time excludes capture work done while pulling the group
            fresh = {(f.camera_id, f.descriptor.sequence_number)
                     for f, reused in zip(group.frames, group.reused_flags) if not reused}
            capture = sum(self._capture_wall.get(key, 0.0) for key in fresh)
            buffer.append(self.process(group, max(0.0, sync_ms - capture)))
        if buffer:
            yield self._chunk(current, buffer)
        if self.skipped:
            logger.warning(f'{self.skipped} camera frames left out for lack of calibration')
