"""HTTP streaming endpoints; bodies use the same binary framing as the loopback session."""
from __future__ import annotations

import math
import threading
from collections import OrderedDict

from flask import Blueprint, Response, current_app, jsonify, request
from werkzeug.exceptions import abort

from vvstream.errors import ProtocolError, VVStreamError
from vvstream.pipeline import Pipeline, PipelineConfig
from vvstream.session import viewport_sample
from vvstream.vabr import ChunkDecision, HarmonicMeanEstimator, Scheduler, build_chunks, schedule_static
from vvstream.wire import Message, MessageReader, MessageType, encode

bp = Blueprint('stream', __name__, url_prefix='/stream')

EXTENSION_KEY = 'vvstream.hub'
CACHED_CHUNKS = 4


class StreamHub:
    """Pull-based server state: chunks are produced in order as clients ask for them."""

    def __init__(self, pipeline: Pipeline, cfg: PipelineConfig):
        self.pipeline = pipeline
        self.cfg = cfg
        self.scheduler = Scheduler(cfg.qoe_config(), cfg.chunk_seconds,
                                   HarmonicMeanEstimator(cfg.estimator_window, cfg.initial_bandwidth_mbps * 1e6))
        self._source = pipeline.chunks()
        self._cache = OrderedDict()
        self._layers = {}
        self.finished = False
        self.last_index = -1
        self.reports = 0
        self.lock = threading.Lock()

    def hello(self) -> bytes:
        return encode(Message(MessageType.HELLO, {
            'fps': self.cfg.fps, 'frames_per_chunk': self.cfg.frames_per_chunk,
            'preset': self.pipeline.profile.name, 'cube_side': self.cfg.cube_side}))

    def _produce(self):
        chunk_in = next(self._source, None)
        if chunk_in is None:
            self.finished = True
            return
        dynamic, static = build_chunks(chunk_in.index, chunk_in.frames, chunk_in.candidates,
                                       self.cfg.seed, self.cfg.full_quality)
        selection, budget = self.scheduler.decide(dynamic)
        level = selection.levels[0]
        message, chosen, deferred = schedule_static(static, budget - dynamic.level_bits[level], self.pipeline.reuse)
        frames = [encode(dynamic.message(l)) for l in range(level + 1)]
        static_bytes = 0
        if message is not None:
            data = encode(message)
            static_bytes = len(data)
            frames.append(data)
        self.scheduler.record(ChunkDecision(chunk_in.index, level, dynamic.level_bits[level], static_bytes * 8,
                                            selection.late[0], self.scheduler.estimator.estimate() / 1e6,
                                            deferred_cubes=len(deferred)))
        self._cache[chunk_in.index] = b''.join(frames)
        self._layers = {chunk_in.index: dynamic}
        while len(self._cache) > CACHED_CHUNKS:
            self._cache.popitem(last=False)
        self.last_index = chunk_in.index

    def chunk(self, k) -> bytes | None:
        with self.lock:
            while not self.finished and self.last_index < k:
                self._produce()
            return self._cache.get(k)

    def layer(self, k, layer) -> bytes | None:
        with self.lock:
            dynamic = self._layers.get(k)
            if dynamic is None or not 0 < layer <= dynamic.max_level:
                return None
            return encode(dynamic.message(layer))

    def report(self, data: bytes):
        """Apply a client's THROUGHPUT_REPORT / VIEWPORT_REPORT frames."""
        reader = MessageReader()
        messages = reader.feed(data)
        if reader.pending:
            raise ProtocolError('truncated frame at end of report', reader.consumed)
        with self.lock:
            for message in messages:
                if message.type == MessageType.THROUGHPUT_REPORT:
                    self.scheduler.estimator.add(message.body.bytes * 8, message.body.duration_us / 1e6)
                    self.reports += 1
                elif message.type == MessageType.VIEWPORT_REPORT:
                    for s in message.body:
                        self.pipeline.saliency.add(viewport_sample(s))
        return len(messages)

    def status(self) -> dict:
        with self.lock:
            estimate = self.scheduler.estimator.estimate()
            return {
                'last_chunk': self.last_index,
                'finished': self.finished,
                'reports': self.reports,
                'estimate_mbps': None if math.isinf(estimate) else estimate / 1e6,
                'decisions': [d.to_line() for d in self.scheduler.decisions[-CACHED_CHUNKS:]],
            }


def get_hub() -> StreamHub:
    hub = current_app.extensions.get(EXTENSION_KEY)
    if hub is None:
        abort(503, description='no stream is being served')
    return hub


def init_app(app, hub: StreamHub | None = None):
    """Attach the stream hub to the app (None detaches it)."""
    app.extensions[EXTENSION_KEY] = hub


def _binary(data):
    return Response(data, mimetype='application/octet-stream')


@bp.route('/hello')
def hello():
    return _binary(get_hub().hello())


@bp.route('/chunks/<int:k>')
def chunk(k):
    hub = get_hub()
    try:
        data = hub.chunk(k)
    except VVStreamError as e:
        current_app.logger.error(f'chunk {k} failed: {e}')
        abort(500, description=str(e))
    if data is None:
        abort(404, description=f'chunk {k} is not available')
    current_app.logger.info(f'served chunk {k} ({len(data)} bytes)')
    return _binary(data)


@bp.route('/chunks/<int:k>/layers/<int:layer>')
def layer(k, layer):
    data = get_hub().layer(k, layer)
    if data is None:
        abort(404, description=f'layer {layer} of chunk {k} is not available')
    return _binary(data)


@bp.route('/reports', methods=('POST',))
def reports():
    hub = get_hub()
    try:
        count = hub.report(request.get_data())
    except ProtocolError as e:
        current_app.logger.info(f'rejected report: {e}')
        abort(400, description=str(e))
    return jsonify({'accepted': count})


@bp.route('/status')
def status():
    return jsonify(get_hub().status())
