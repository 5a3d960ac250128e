"""Loopback streaming session: server decision loop, simulated link and client.

The server and the channel run on the calling thread with a simulated
clock; the client decodes on its own thread. The two sides talk only in
encoded frames passed over ordered queues.
"""
from __future__ import annotations

import hashlib
import logging
import math
import queue
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from vvstream.channel import ChannelModel, Delivery
from vvstream.errors import ProtocolError, SessionAbortError
from vvstream.geometry import EulerAngles, PointCloud
from vvstream.pipeline import Pipeline, PipelineConfig
from vvstream.scene_reuse import ViewportSample
from vvstream.sessionlog import CAMERA_STAGES, CHUNK_STAGES, END_TO_END, FRAME_STAGES, SessionLog
from vvstream.vabr import (
    ChunkDecision, HarmonicMeanEstimator, Scheduler, build_chunks, qoe, schedule_static, upgrade_level,
)
from vvstream.wire import (
    PART_COUNT, FramePayload, Message, MessageReader, MessageType, ThroughputRecord, ViewportRecord,
    encode, point_table,
)

logger = logging.getLogger(__name__)

MAX_VIEWPORT_BATCH = 0xFFFF


def reconstruction_digest(frames, cells) -> str:
    """Order-independent digest of body frames (slot, parts) and cube contents."""
    h = hashlib.blake2b(digest_size=16)
    for frame in sorted(frames, key=lambda f: f.slot):
        h.update(struct.pack('<I', frame.slot))
        for part in range(PART_COUNT):
            table = np.sort(point_table(frame.parts.get(part, PointCloud.empty())))
            h.update(struct.pack('<I', len(table)))
            h.update(table.tobytes())
    for index in sorted(cells):
        table = np.sort(point_table(cells[index]))
        h.update(struct.pack('<3iI', *index, len(table)))
        h.update(table.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class Envelope:
    data: bytes
    delivery: Delivery
    chunk: int


@dataclass(frozen=True)
class Mark:
    kind: str
    chunk: int


_STOP = Mark('stop', -1)


class StreamClient:
    """Receiving side: replays messages into a body and cube-grid reconstruction."""

    def __init__(self, viewport=(), chunk_seconds=1.0, snapshot_every=0):
        self.reader = MessageReader()
        self.viewport = list(viewport)
        self.chunk_seconds = chunk_seconds
        self.snapshot_every = snapshot_every
        self.hello = None
        self.ended = False
        self.cells = {}
        self.frames = {}
        self.levels = {}
        self.digests = {}
        self.snapshots = {}
        self._sent_samples = 0
        self._received = {}

    def _apply(self, message: Message):
        body = message.body
        if message.type == MessageType.HELLO:
            self.hello = body
        elif message.type in (MessageType.DYNAMIC_CHUNK, MessageType.LAYER_UPGRADE):
            expected = self.levels.get(body.chunk, -1) + 1
            if body.level != expected:
                raise ProtocolError(f'chunk {body.chunk}: layer {body.level} arrived, expected {expected}')
            frames = self.frames.setdefault(body.chunk, {})
            for frame in body.frames:
                parts = frames.setdefault(frame.slot, {p: [] for p in range(PART_COUNT)})
                for part, cloud in frame.parts.items():
                    parts[part].append(cloud)
            self.levels[body.chunk] = body.level
        elif message.type == MessageType.STATIC_UPDATE:
            for cube in body.cubes:
                if cube.action == 1:
                    self.cells.pop(cube.index, None)
                else:
                    self.cells[cube.index] = cube.points
        elif message.type == MessageType.END:
            self.ended = True

    def body_frames(self, chunk) -> list:
        return [FramePayload(slot, {p: PointCloud.concat(pieces) for p, pieces in parts.items()})
                for slot, parts in sorted(self.frames.get(chunk, {}).items())]

    def _report(self, chunk) -> list:
        nbytes, service = self._received.pop(chunk, (0, 0.0))
        out = [encode(Message(MessageType.THROUGHPUT_REPORT,
                              ThroughputRecord(chunk, nbytes, int(round(service * 1e6)))))]
        horizon = (chunk + 1) * self.chunk_seconds * 1e6
        batch = []
        while self._sent_samples < len(self.viewport) and self.viewport[self._sent_samples].timestamp < horizon:
            batch.append(ViewportRecord(*self.viewport[self._sent_samples].to_row()))
            self._sent_samples += 1
        for start in range(0, len(batch), MAX_VIEWPORT_BATCH):
            out.append(encode(Message(MessageType.VIEWPORT_REPORT, batch[start:start + MAX_VIEWPORT_BATCH])))
        return out

    def _close(self, chunk):
        frames = self.body_frames(chunk)
        self.digests[chunk] = reconstruction_digest(frames, self.cells)
        if self.snapshot_every and chunk % self.snapshot_every == 0 and frames:
            last = frames[-1]
            self.snapshots[chunk] = PointCloud.concat(
                [last.parts[p] for p in range(PART_COUNT)] + [self.cells[i] for i in sorted(self.cells)])
        # body points of finished chunks are no longer needed
        self.frames.pop(chunk, None)

    def handle(self, item) -> list:
        """Consume one queue item; returns encoded replies for the server."""
        if isinstance(item, Envelope):
            nbytes, service = self._received.get(item.chunk, (0, 0.0))
            d = item.delivery
            self._received[item.chunk] = (nbytes + len(item.data), service + (d.finish - d.start))
            for message in self.reader.feed(item.data):
                self._apply(message)
            return []
        if item.kind == 'report':
            return self._report(item.chunk)
        if item.kind == 'close':
            self._close(item.chunk)
        return []

    def run(self, inbox: queue.Queue, outbox: queue.Queue):
        try:
            while True:
                item = inbox.get()
                if item is _STOP:
                    return
                replies = self.handle(item)
                if replies:
                    outbox.put(b''.join(replies))
        except Exception as e:
            outbox.put(e)


@dataclass
class SessionResult:
    log: SessionLog
    decisions: list
    server_digests: dict = field(default_factory=dict)
    client_digests: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)
    startup_s: float | None = None
    qoe: float | None = None
    delivered_bytes: int = 0
    last_finish_s: float = 0.0
    chunks: int = 0

    @property
    def consistent(self) -> bool:
        return self.server_digests == self.client_digests


class StreamSession:
    """One run of the server decision loop over a simulated channel."""

    def __init__(self, pipeline: Pipeline, channel: ChannelModel, client: StreamClient, cfg: PipelineConfig,
                 log: SessionLog | None = None):
        self.pipeline = pipeline
        self.channel = channel
        self.client = client
        self.cfg = cfg
        self.log = log if log is not None else pipeline.log
        initial = math.inf if channel.trace.unlimited else cfg.initial_bandwidth_mbps * 1e6
        self.scheduler = Scheduler(cfg.qoe_config(), cfg.chunk_seconds,
                                   HarmonicMeanEstimator(cfg.estimator_window, initial))
        self.inbox = queue.Queue()
        self.outbox = queue.Queue()
        self.upstream = MessageReader()
        self.clock = 0.0
        self.startup_s = None
        self.result = SessionResult(self.log, self.scheduler.decisions)

    def _send(self, message: Message, send_time, chunk, kind):
        data = encode(message)
        self.clock = max(self.clock, send_time)
        delivery = self.channel.send(self.clock, len(data))
        self.inbox.put(Envelope(data, delivery, chunk))
        level = getattr(message.body, 'level', None)
        self.log.log_event('transmit', chunk=chunk, bytes=len(data), level=level,
                           sim_ms=(delivery.arrival - delivery.send) * 1000.0, kind=kind,
                           arrival_ms=delivery.arrival * 1000.0, timestamp_us=round(delivery.send * 1e6))
        self.result.last_finish_s = max(self.result.last_finish_s, delivery.finish)
        return delivery

    def _await_report(self, chunk):
        """Block until the client's throughput report for `chunk` is in."""
        report = None
        samples = []
        while report is None:
            try:
                item = self.outbox.get(timeout=self.cfg.client_timeout_s)
            except queue.Empty:
                raise SessionAbortError(f'client sent no report for chunk {chunk}')
            if isinstance(item, Exception):
                raise SessionAbortError(f'client failed on chunk {chunk}: {item}') from item
            try:
                messages = self.upstream.feed(item)
            except ProtocolError as e:
                raise SessionAbortError(f'bad report from client: {e}') from e
            for message in messages:
                if message.type == MessageType.VIEWPORT_REPORT:
                    samples.extend(message.body)
                elif message.type == MessageType.THROUGHPUT_REPORT:
                    if message.body.chunk != chunk:
                        raise SessionAbortError(f'report for chunk {message.body.chunk}, expected {chunk}')
                    report = message.body
        return report, samples

    def _chunk(self, chunk_in):
        cfg = self.cfg
        k = chunk_in.index
        # Pick the dynamic level; the static update gets the rest of the budget
        start = time.perf_counter()
        dynamic, static = build_chunks(k, chunk_in.frames, chunk_in.candidates, cfg.seed, cfg.full_quality)
        selection, budget = self.scheduler.decide(dynamic)
        predicted = self.scheduler.estimator.estimate()
        level, late = selection.levels[0], selection.late[0]
        residual = budget - dynamic.level_bits[level]
        static_message, chosen, deferred = schedule_static(static, residual, self.pipeline.reuse)
        packaging_ms = (time.perf_counter() - start) * 1000.0

        # Base layers go out first, then the static update
        send_time = chunk_in.ready_s
        deliveries = [self._send(dynamic.message(l), send_time, k, 'dynamic') for l in range(level + 1)]
        static_bytes = 0
        if static_message is not None:
            static_bytes = self._send(static_message, send_time, k, 'static').size_bytes
        base_arrival = deliveries[-1].arrival
        if self.startup_s is None:
            self.startup_s = deliveries[0].arrival
        deadline = self.startup_s + k * cfg.chunk_seconds

        # Block on the client's throughput and viewport report
        self.inbox.put(Mark('report', k))
        report, samples = self._await_report(k)
        self.scheduler.estimator.add(report.bytes * 8, report.duration_us / 1e6)
        actual = math.inf if report.duration_us == 0 else report.bytes * 8 / (report.duration_us / 1e6)
        for s in samples:
            self.pipeline.saliency.add(viewport_sample(s))

        # Spare time before the deadline buys extra layers
        final = level
        reply_time = max(base_arrival, self.channel.free_at) + self.channel.propagation_s
        spare_s = deadline - reply_time - self.channel.propagation_s
        if level < dynamic.max_level and spare_s > 0:
            spare_bits = self.scheduler.estimator.estimate() * spare_s
            final = upgrade_level(dynamic.level_bits, level, spare_bits)
            for layer in range(level + 1, final + 1):
                self._send(dynamic.message(layer), reply_time, k, 'upgrade')
        self.inbox.put(Mark('close', k))

        # What the client must hold once every message of this chunk arrived
        self.result.server_digests[k] = reconstruction_digest(dynamic.frames_at(final),
                                                              self.pipeline.reuse.scheduled_view())
        decision = ChunkDecision(k, level, dynamic.level_bits[final], static_bytes * 8,
                                 late or deliveries[0].arrival > deadline, predicted / 1e6, actual / 1e6,
                                 final if final != level else None, len(deferred))
        self.scheduler.record(decision)

        delivery_ms = (base_arrival - send_time) * 1000.0
        self.log.log_event('packaging', chunk=k, bytes=dynamic.level_bits[final] // 8 + static_bytes,
                           level=final, wall_ms=packaging_ms, cubes=len(chosen),
                           timestamp_us=round(send_time * 1e6))
        self.log.log_event('delivery', chunk=k, level=final, sim_ms=delivery_ms,
                           bytes=dynamic.level_bits[final] // 8 + static_bytes, late=decision.late)
        self._log_end_to_end(chunk_in, k, final, packaging_ms, delivery_ms)

    def _log_end_to_end(self, chunk_in, k, level, packaging_ms, delivery_ms):
        for frame, timings in zip(chunk_in.frames, chunk_in.timings):
            sim = sum(timings[s][0] for s in CAMERA_STAGES + FRAME_STAGES) + delivery_ms
            wall = sum(timings[s][1] for s in CAMERA_STAGES + FRAME_STAGES) + packaging_ms
            self.log.log_event(END_TO_END, chunk=k, frame=frame.slot, level=level, sim_ms=sim, wall_ms=wall,
                               stages=len(CAMERA_STAGES + FRAME_STAGES + CHUNK_STAGES))

    def run(self) -> SessionResult:
        thread = threading.Thread(target=self.client.run, args=(self.inbox, self.outbox),
                                  name='client', daemon=True)
        thread.start()
        try:
            hello = {'fps': self.cfg.fps, 'frames_per_chunk': self.cfg.frames_per_chunk,
                     'preset': self.pipeline.profile.name, 'cube_side': self.cfg.cube_side}
            self._send(Message(MessageType.HELLO, hello), 0.0, 0, 'control')
            for chunk_in in self.pipeline.chunks():
                self._chunk(chunk_in)
                self.result.chunks += 1
            self._send(Message(MessageType.END), self.clock, self.result.chunks, 'control')
        finally:
            self.inbox.put(_STOP)
            thread.join(self.cfg.client_timeout_s)
        # Client failures after the last report
        while not self.outbox.empty():
            item = self.outbox.get_nowait()
            if isinstance(item, Exception):
                raise SessionAbortError(f'client failed: {item}') from item

        result = self.result
        result.client_digests = dict(self.client.digests)
        result.snapshots = dict(self.client.snapshots)
        result.startup_s = self.startup_s
        result.delivered_bytes = self.channel.delivered_bytes
        if result.decisions:
            result.qoe = qoe([d.dynamic_bits for d in result.decisions], self.startup_s or 0.0,
                             self.scheduler.cfg)
        if not result.consistent:
            logger.warning('client reconstruction differs from the server schedule')
        self.log.log_event('summary', chunks=result.chunks, preset=self.pipeline.profile.name,
                           fps=self.cfg.fps, startup_ms=(self.startup_s or 0.0) * 1000.0, qoe=result.qoe,
                           delivered_bytes=result.delivered_bytes, consistent=result.consistent,
                           reused=self.pipeline.sync_stats.reused)
        return result


def viewport_sample(record: ViewportRecord):
    return ViewportSample(record.timestamp, record[1:4], EulerAngles(*record[4:7]))


def run_session(pipeline: Pipeline, channel: ChannelModel, client: StreamClient, cfg: PipelineConfig,
                log: SessionLog | None = None) -> SessionResult:
    return StreamSession(pipeline, channel, client, cfg, log).run()
