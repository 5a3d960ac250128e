"""Append-only session event log, one JSON object per line."""
from __future__ import annotations

import json
import logging
import os

import pandas as pd

from vvstream.errors import ReportError

logger = logging.getLogger(__name__)

CAMERA_STAGES = ('capture', 'uplink')
FRAME_STAGES = ('sync', 'calibration', 'segmentation', 'reuse')
CHUNK_STAGES = ('packaging', 'delivery')
STAGES = CAMERA_STAGES + FRAME_STAGES + CHUNK_STAGES
END_TO_END = 'end_to_end'

COLUMNS = ('timestamp_us', 'stage', 'chunk', 'frame', 'camera', 'bytes', 'level', 'sim_ms', 'wall_ms')


def get_log_path(directory):
    return os.path.join(directory, 'session.jsonl')


class SessionLog:
    """Session events, kept in memory and optionally streamed to a file.

    `timestamp_us` is the session time the event refers to. `sim_ms` is
    simulated time and deterministic under fixed seeds; measured wall-clock
    time only ever goes to `wall_ms`.
    """

    def __init__(self, path=None):
        self.path = path
        self.records = []
        self.clock_us = 0
        self._fid = None
        if path is not None:
            directory = os.path.dirname(os.fspath(path))
            if directory:
                os.makedirs(directory, exist_ok=True)
            self._fid = open(path, 'w', encoding='utf-8')

    def log_event(self, stage, chunk=None, frame=None, camera=None, bytes=0, level=None,
                  sim_ms=0.0, wall_ms=None, timestamp_us=None, **extra):
        # events without a time of their own are stamped with the latest one seen
        if timestamp_us is None:
            timestamp_us = self.clock_us
        timestamp_us = int(timestamp_us)
        self.clock_us = max(self.clock_us, timestamp_us)
        record = {'timestamp_us': timestamp_us, 'stage': stage, 'chunk': chunk, 'frame': frame, 'camera': camera,
                  'bytes': int(bytes), 'level': level, 'sim_ms': round(float(sim_ms), 6),
                  'wall_ms': None if wall_ms is None else round(float(wall_ms), 3), **extra}
        self.records.append(record)
        if self._fid is not None:
            self._fid.write(json.dumps(record) + '\n')

        where = ' '.join(f'{k} {v}' for k, v in (('chunk', chunk), ('frame', frame), ('camera', camera))
                         if v is not None)
        logger.debug(f'[{record["sim_ms"]:.3f} ms] {stage.upper()}: {where} bytes={record["bytes"]}')
        return record

    def close(self):
        if self._fid is not None:
            self._fid.close()
            self._fid = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def frame(self) -> pd.DataFrame:
        return records_frame(self.records)


def records_frame(records) -> pd.DataFrame:
    frame = pd.DataFrame(list(records))
    for column in COLUMNS:
        if column not in frame:
            frame[column] = None
    return frame


def read_session_log(path) -> pd.DataFrame:
    """Load a session log; every line must be a JSON object."""
    records = []
    try:
        with open(path, encoding='utf-8') as fid:
            for lineno, line in enumerate(fid, 1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ReportError(f'{path}:{lineno}: {e.msg}')
                if not isinstance(record, dict):
                    raise ReportError(f'{path}:{lineno}: record is not an object')
                records.append(record)
    except OSError as e:
        raise ReportError(f'{path}: cannot read session log: {e.strerror}')
    return pd.DataFrame(records)
