"""Evaluation tables from session logs: latency breakdown, bandwidth split, reuse saving, presets."""
from __future__ import annotations

import logging
import math
import os

import pandas as pd

from vvstream.errors import ReportError
from vvstream.sessionlog import CAMERA_STAGES, CHUNK_STAGES, END_TO_END, FRAME_STAGES, STAGES, read_session_log
from vvstream.wire import POINT_BYTES

logger = logging.getLogger(__name__)


def require(frame: pd.DataFrame, *columns, what='session log'):
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ReportError(f'{what} is incomplete', missing)


def _latency(rows):
    return rows['sim_ms'].fillna(0.0).astype(float) + rows['wall_ms'].fillna(0.0).astype(float)


def latency_breakdown(log: pd.DataFrame) -> pd.DataFrame:
    """Mean per-frame latency of each stage, taking the slowest camera of every frame."""
    require(log, 'stage', 'frame', 'chunk', 'camera', 'sim_ms', 'wall_ms')
    log = log.assign(latency_ms=_latency(log))
    rows = []
    per_frame = log[log['stage'].isin(CAMERA_STAGES + FRAME_STAGES + (END_TO_END,)) & log['frame'].notna()]
    slowest = per_frame.groupby(['stage', 'frame'])['latency_ms'].max().reset_index()
    means = slowest.groupby('stage')['latency_ms'].agg(['mean', 'count'])

    frames_per_chunk = None
    e2e = log[(log['stage'] == END_TO_END) & log['chunk'].notna()]
    if not e2e.empty:
        frames_per_chunk = e2e.groupby('chunk')['frame'].nunique()
    chunk_rows = log[log['stage'].isin(CHUNK_STAGES) & log['chunk'].notna()]
    chunk_means = {}
    for stage, group in chunk_rows.groupby('stage'):
        per_chunk = group.groupby('chunk')['latency_ms'].max()
        weights = frames_per_chunk.reindex(per_chunk.index).fillna(0) if frames_per_chunk is not None else None
        if weights is None or weights.sum() == 0:
            chunk_means[stage] = (per_chunk.mean(), len(per_chunk))
        else:
            chunk_means[stage] = ((per_chunk * weights).sum() / weights.sum(), int(weights.sum()))

    for stage in STAGES + (END_TO_END,):
        if stage in chunk_means:
            mean, count = chunk_means[stage]
        elif stage in means.index:
            mean, count = means.loc[stage, 'mean'], means.loc[stage, 'count']
        else:
            continue
        rows.append({'stage': stage, 'latency_ms': float(mean), 'frames': int(count)})
    return pd.DataFrame(rows, columns=['stage', 'latency_ms', 'frames'])


def bandwidth_shares(log: pd.DataFrame) -> pd.DataFrame:
    """Dynamic/static split of transmitted bytes, and of the raw per-frame point load."""
    require(log, 'stage', 'bytes')
    rows = []
    sent = log[log['stage'] == 'transmit']
    if not sent.empty:
        require(sent, 'kind', what='transmit records')
        dynamic = int(sent.loc[sent['kind'].isin(['dynamic', 'upgrade']), 'bytes'].sum())
        static = int(sent.loc[sent['kind'] == 'static', 'bytes'].sum())
        rows.append(_shares('streamed', dynamic, static))
    seg = log[log['stage'] == 'segmentation']
    if not seg.empty:
        require(seg, 'kept_points', 'static_points', what='segmentation records')
        rows.append(_shares('full_frames', int(seg['kept_points'].sum()) * POINT_BYTES,
                            int(seg['static_points'].sum()) * POINT_BYTES))
    return pd.DataFrame(rows, columns=['mode', 'dynamic_bytes', 'static_bytes', 'dynamic_pct', 'static_pct'])


def _shares(mode, dynamic, static):
    total = dynamic + static
    if not total:
        return {'mode': mode, 'dynamic_bytes': 0, 'static_bytes': 0, 'dynamic_pct': 0.0, 'static_pct': 0.0}
    return {'mode': mode, 'dynamic_bytes': dynamic, 'static_bytes': static,
            'dynamic_pct': round(100.0 * dynamic / total, 1), 'static_pct': round(100.0 * static / total, 1)}


def cube_saving(log: pd.DataFrame) -> dict:
    """Full static scene resent every frame versus the cube updates actually sent."""
    require(log, 'stage', 'bytes')
    reuse = log[log['stage'] == 'reuse']
    sent = log[log['stage'] == 'transmit']
    require(reuse, 'scene_bytes', what='reuse records')
    full = int(reuse['scene_bytes'].sum())
    updates = int(sent.loc[sent['kind'] == 'static', 'bytes'].sum()) if 'kind' in sent else 0
    factor = math.inf if not updates else full / updates
    return {'full_scene_bytes': full, 'update_bytes': updates, 'saving_factor': factor}


def preset_row(log: pd.DataFrame) -> dict:
    """Body bandwidth and quality of one run, for comparing decimation presets."""
    require(log, 'stage')
    seg = log[log['stage'] == 'segmentation']
    require(seg, 'body_points', 'kept_points', what='segmentation records')
    summary = log[log['stage'] == 'summary']
    preset = summary['preset'].iloc[-1] if 'preset' in summary and not summary.empty else None
    fps = float(summary['fps'].iloc[-1]) if 'fps' in summary and not summary.empty else 24.0
    frames = len(seg)
    body, kept = int(seg['body_points'].sum()), int(seg['kept_points'].sum())
    seconds = frames / fps if frames else 0.0
    quality = pd.to_numeric(seg['quality'], errors='coerce').dropna() if 'quality' in seg else pd.Series(dtype=float)
    return {
        'preset': preset,
        'frames': frames,
        'body_points': body,
        'kept_points': kept,
        'kept_ratio': kept / body if body else 1.0,
        'dynamic_mbps': kept * POINT_BYTES * 8 / seconds / 1e6 if seconds else 0.0,
        'quality': float(quality.mean()) if len(quality) else None,
    }


def build_report(paths) -> dict:
    """All tables for one or more session logs; latency and shares pool every log."""
    logs = [read_session_log(p) for p in paths]
    if not logs:
        raise ReportError('no session logs given')
    pooled = pd.concat(logs, ignore_index=True)
    savings = []
    for path, log in zip(paths, logs):
        savings.append({'log': os.fspath(path), **cube_saving(log)})
    return {
        'latency': latency_breakdown(pooled) if len(logs) == 1 else _pooled_latency(logs),
        'shares': bandwidth_shares(pooled),
        'saving': pd.DataFrame(savings),
        'presets': pd.DataFrame([{'log': os.fspath(p), **preset_row(l)} for p, l in zip(paths, logs)]),
    }


def _pooled_latency(logs):
    tables = [latency_breakdown(log) for log in logs]
    joined = pd.concat(tables, ignore_index=True)
    joined['weighted'] = joined['latency_ms'] * joined['frames']
    out = joined.groupby('stage', sort=False)[['weighted', 'frames']].sum().reset_index()
    out['latency_ms'] = out['weighted'] / out['frames']
    return out[['stage', 'latency_ms', 'frames']]


def write_report(report: dict, out_dir) -> list:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, table in report.items():
        path = os.path.join(out_dir, f'{name}.csv')
        table.to_csv(path, index=False)
        written.append(path)
    return written
