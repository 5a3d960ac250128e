"""Byte-exact framing for everything the server and client exchange.

Frame format (all integers little-endian):

    magic "LVVS" (4B) | version u8 (=1) | type u8 | payload length u32 | payload

Chunk payloads:

    DYNAMIC_CHUNK / LAYER_UPGRADE
        chunk u32, level u8, frame count u16
        per frame: slot u32, part count u8
            per part: part id u8, point count u32, points
    STATIC_UPDATE
        chunk u32, cube count u32
        per cube: ix i32, iy i32, iz i32, action u8, slot u32, point count u32, points
    VIEWPORT_REPORT
        sample count u16; per sample: timestamp i64, px py pz yaw pitch roll f64
    THROUGHPUT_REPORT
        chunk u32, bytes u64, duration_us u64

A point is x, y, z float32 then r, g, b uint8: 15 bytes.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, NamedTuple

import numpy as np

from vvstream.errors import ProtocolError
from vvstream.geometry import PointCloud

MAGIC = b'LVVS'
VERSION = 1

HEADER = struct.Struct('<4sBBI')
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 30

POINT_DTYPE = np.dtype([('x', '<f4'), ('y', '<f4'), ('z', '<f4'),
                        ('r', 'u1'), ('g', 'u1'), ('b', 'u1')])
POINT_BYTES = POINT_DTYPE.itemsize

_CHUNK = struct.Struct('<IBH')
_FRAME = struct.Struct('<IB')
_PART = struct.Struct('<BI')
_STATIC = struct.Struct('<II')
_CUBE = struct.Struct('<iiiBII')
_VIEWPORT_COUNT = struct.Struct('<H')
_VIEWPORT = struct.Struct('<q6d')
_THROUGHPUT = struct.Struct('<IQQ')

CHUNK_HEADER_BYTES = _CHUNK.size
FRAME_HEADER_BYTES = _FRAME.size
PART_HEADER_BYTES = _PART.size
STATIC_HEADER_BYTES = _STATIC.size
CUBE_HEADER_BYTES = _CUBE.size

PART_COUNT = 15


class MessageType(IntEnum):
    HELLO = 0
    DYNAMIC_CHUNK = 1
    STATIC_UPDATE = 2
    LAYER_UPGRADE = 3
    VIEWPORT_REPORT = 4
    THROUGHPUT_REPORT = 5
    END = 6


@dataclass(frozen=True, eq=False)
class FramePayload:
    slot: int
    parts: dict  # part id -> PointCloud


@dataclass(frozen=True, eq=False)
class DynamicPayload:
    chunk: int
    level: int
    frames: list = field(default_factory=list)

    @property
    def point_count(self):
        return sum(len(c) for f in self.frames for c in f.parts.values())


class CubeRecord(NamedTuple):
    index: tuple
    action: int
    slot: int
    points: PointCloud


@dataclass(frozen=True, eq=False)
class StaticPayload:
    chunk: int
    cubes: list = field(default_factory=list)

    @property
    def point_count(self):
        return sum(len(c.points) for c in self.cubes)


class ViewportRecord(NamedTuple):
    timestamp: int
    px: float
    py: float
    pz: float
    yaw: float
    pitch: float
    roll: float


class ThroughputRecord(NamedTuple):
    chunk: int
    bytes: int
    duration_us: int


@dataclass(frozen=True, eq=False)
class Message:
    type: MessageType
    body: Any = None


# ---------------------------------------------------------------------------
# Size accounting (matches encode byte for byte)
# ---------------------------------------------------------------------------

def dynamic_message_size(frame_point_counts) -> int:
    """Frame size of a dynamic message; one list of 15 part counts per frame."""
    frames = list(frame_point_counts)
    points = sum(sum(counts) for counts in frames)
    return (HEADER_SIZE + CHUNK_HEADER_BYTES
            + len(frames) * (FRAME_HEADER_BYTES + PART_COUNT * PART_HEADER_BYTES)
            + POINT_BYTES * points)


def static_message_size(cube_point_counts) -> int:
    counts = list(cube_point_counts)
    return HEADER_SIZE + STATIC_HEADER_BYTES + len(counts) * CUBE_HEADER_BYTES + POINT_BYTES * sum(counts)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def point_table(cloud: PointCloud) -> np.ndarray:
    """The cloud as wire records (float32 coordinates, uint8 colors)."""
    table = np.empty(len(cloud), dtype=POINT_DTYPE)
    table['x'], table['y'], table['z'] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    table['r'], table['g'], table['b'] = cloud.rgb[:, 0], cloud.rgb[:, 1], cloud.rgb[:, 2]
    return table


def _points_bytes(cloud: PointCloud) -> bytes:
    return point_table(cloud).tobytes()


def _encode_dynamic(body: DynamicPayload) -> bytes:
    out = [_CHUNK.pack(body.chunk, body.level, len(body.frames))]
    for frame in body.frames:
        out.append(_FRAME.pack(frame.slot, PART_COUNT))
        for part in range(PART_COUNT):
            cloud = frame.parts.get(part)
            if cloud is None:
                cloud = PointCloud.empty()
            out.append(_PART.pack(part, len(cloud)))
            out.append(_points_bytes(cloud))
    return b''.join(out)


def _encode_static(body: StaticPayload) -> bytes:
    out = [_STATIC.pack(body.chunk, len(body.cubes))]
    for cube in body.cubes:
        ix, iy, iz = cube.index
        out.append(_CUBE.pack(ix, iy, iz, int(cube.action), cube.slot, len(cube.points)))
        out.append(_points_bytes(cube.points))
    return b''.join(out)


def _encode_body(msg_type, body) -> bytes:
    if msg_type == MessageType.HELLO:
        return json.dumps(body, sort_keys=True).encode('utf-8') if body else b''
    if msg_type in (MessageType.DYNAMIC_CHUNK, MessageType.LAYER_UPGRADE):
        return _encode_dynamic(body)
    if msg_type == MessageType.STATIC_UPDATE:
        return _encode_static(body)
    if msg_type == MessageType.VIEWPORT_REPORT:
        samples = list(body or [])
        return _VIEWPORT_COUNT.pack(len(samples)) + b''.join(_VIEWPORT.pack(*s) for s in samples)
    if msg_type == MessageType.THROUGHPUT_REPORT:
        return _THROUGHPUT.pack(*body)
    return b''


def encode(message: Message) -> bytes:
    msg_type = MessageType(message.type)
    payload = _encode_body(msg_type, message.body)
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

class _Cursor:
    def __init__(self, data, base):
        self.data = data
        self.pos = 0
        self.base = base

    @property
    def offset(self):
        return self.base + self.pos

    def unpack(self, fmt: struct.Struct, what):
        if self.pos + fmt.size > len(self.data):
            raise ProtocolError(f'truncated {what}', self.offset)
        values = fmt.unpack_from(self.data, self.pos)
        self.pos += fmt.size
        return values

    def points(self, count, what):
        size = count * POINT_BYTES
        if self.pos + size > len(self.data):
            raise ProtocolError(f'{what} announces {count} points beyond the payload', self.offset)
        table = np.frombuffer(self.data, dtype=POINT_DTYPE, count=count, offset=self.pos)
        xyz = np.column_stack([table['x'], table['y'], table['z']]).astype(np.float64)
        if not np.isfinite(xyz).all():
            raise ProtocolError(f'{what} holds non-finite coordinates', self.offset)
        rgb = np.column_stack([table['r'], table['g'], table['b']])
        self.pos += size
        return PointCloud(xyz, rgb)

    def finish(self):
        if self.pos != len(self.data):
            raise ProtocolError(f'{len(self.data) - self.pos} trailing payload bytes', self.offset)


def _decode_dynamic(cur: _Cursor) -> DynamicPayload:
    chunk, level, frame_count = cur.unpack(_CHUNK, 'chunk header')
    frames = []
    for _ in range(frame_count):
        slot, part_count = cur.unpack(_FRAME, 'frame header')
        if part_count > PART_COUNT:
            raise ProtocolError(f'frame declares {part_count} parts', cur.offset - 1)
        parts = {}
        for _ in range(part_count):
            at = cur.offset
            part, count = cur.unpack(_PART, 'part header')
            if part >= PART_COUNT or part in parts:
                raise ProtocolError(f'bad or repeated part id {part}', at)
            parts[part] = cur.points(count, f'part {part}')
        frames.append(FramePayload(slot, parts))
    return DynamicPayload(chunk, level, frames)


def _decode_static(cur: _Cursor) -> StaticPayload:
    chunk, cube_count = cur.unpack(_STATIC, 'static header')
    cubes = []
    for _ in range(cube_count):
        at = cur.offset
        ix, iy, iz, action, slot, count = cur.unpack(_CUBE, 'cube header')
        if action not in (0, 1):
            raise ProtocolError(f'unknown cube action {action}', at + 12)
        if action == 1 and count:
            raise ProtocolError('clear action carries points', at + 17)
        cubes.append(CubeRecord((ix, iy, iz), action, slot, cur.points(count, f'cube {(ix, iy, iz)}')))
    return StaticPayload(chunk, cubes)


def _decode_viewport(cur: _Cursor) -> list:
    (count,) = cur.unpack(_VIEWPORT_COUNT, 'sample count')
    samples = []
    for _ in range(count):
        at = cur.offset
        record = ViewportRecord(*cur.unpack(_VIEWPORT, 'viewport sample'))
        if not all(math.isfinite(v) for v in record[1:]):
            raise ProtocolError('non-finite viewport sample', at)
        samples.append(record)
    return samples


def _decode_body(msg_type, payload):
    cur = _Cursor(payload, HEADER_SIZE)
    if msg_type == MessageType.HELLO:
        if not payload:
            return {}
        try:
            body = json.loads(payload.decode('utf-8'))
        except (UnicodeDecodeError, ValueError, RecursionError):
            raise ProtocolError('hello payload is not JSON', HEADER_SIZE)
        if not isinstance(body, dict):
            raise ProtocolError('hello payload is not an object', HEADER_SIZE)
        return body
    if msg_type in (MessageType.DYNAMIC_CHUNK, MessageType.LAYER_UPGRADE):
        body = _decode_dynamic(cur)
    elif msg_type == MessageType.STATIC_UPDATE:
        body = _decode_static(cur)
    elif msg_type == MessageType.VIEWPORT_REPORT:
        body = _decode_viewport(cur)
    elif msg_type == MessageType.THROUGHPUT_REPORT:
        body = ThroughputRecord(*cur.unpack(_THROUGHPUT, 'throughput report'))
    else:
        body = None
    cur.finish()
    return body


def parse_header(data, offset=0):
    """(type, payload length) of the frame header starting at `offset`."""
    if len(data) - offset < HEADER_SIZE:
        raise ProtocolError('truncated header', len(data))
    magic, version, msg_type, length = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise ProtocolError(f'bad magic {magic!r}', offset)
    if version != VERSION:
        raise ProtocolError(f'unsupported version {version}', offset + 4)
    try:
        msg_type = MessageType(msg_type)
    except ValueError:
        raise ProtocolError(f'unknown message type {msg_type}', offset + 5)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f'payload length {length} exceeds limit', offset + 6)
    return msg_type, length


def decode(data: bytes) -> Message:
    """Decode exactly one frame; anything malformed raises ProtocolError."""
    data = bytes(data)
    msg_type, length = parse_header(data)
    if len(data) - HEADER_SIZE != length:
        raise ProtocolError(f'payload length {length} but {len(data) - HEADER_SIZE} bytes follow', 6)
    return Message(msg_type, _decode_body(msg_type, data[HEADER_SIZE:]))


class MessageReader:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self):
        self._buffer = bytearray()
        self.consumed = 0

    def feed(self, data: bytes) -> list:
        self._buffer.extend(data)
        messages = []
        while len(self._buffer) >= HEADER_SIZE:
            try:
                _, length = parse_header(self._buffer)
            except ProtocolError as e:
                raise ProtocolError(e.reason, self.consumed + e.offset)
            total = HEADER_SIZE + length
            if len(self._buffer) < total:
                break
            frame = bytes(self._buffer[:total])
            try:
                messages.append(decode(frame))
            except ProtocolError as e:
                raise ProtocolError(e.reason, self.consumed + e.offset)
            del self._buffer[:total]
            self.consumed += total
        return messages

    @property
    def pending(self) -> int:
        return len(self._buffer)
