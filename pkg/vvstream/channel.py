"""Trace-shaped, reliable and ordered network channel."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from vvstream.errors import TraceError

logger = logging.getLogger(__name__)

DEFAULT_PROPAGATION_S = 0.020


class BandwidthTrace:
    """Piecewise-linear available bandwidth (Mbps) over time (s).

    The first and last values hold before and after the listed points.
    """

    def __init__(self, times, mbps):
        self.times = np.asarray(times, dtype=np.float64).reshape(-1)
        self.mbps = np.asarray(mbps, dtype=np.float64).reshape(-1)
        if not len(self.times) or len(self.times) != len(self.mbps):
            raise TraceError('a bandwidth trace needs matching, non-empty time and rate columns')
        if not (np.isfinite(self.times).all() and np.isfinite(self.mbps).all()):
            raise TraceError('bandwidth trace holds non-finite values')
        if (np.diff(self.times) <= 0).any():
            raise TraceError('bandwidth trace times must be strictly increasing')
        if (self.mbps < 0).any():
            raise TraceError('bandwidth must be non-negative')
        self.unlimited = False

    @classmethod
    def constant(cls, mbps):
        return cls([0.0], [mbps])

    @classmethod
    def unlimited_trace(cls):
        trace = cls([0.0], [0.0])
        trace.unlimited = True
        return trace

    @classmethod
    def from_csv(cls, path):
        """Read a two-column (time_s, mbps) comma-separated file; a header row is allowed."""
        try:
            frame = pd.read_csv(path, header=None, comment='#', skipinitialspace=True)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise TraceError(f'{path}: cannot read bandwidth trace: {e}')
        if frame.shape[1] != 2:
            raise TraceError(f'{path}: expected 2 columns, found {frame.shape[1]}')
        numeric = frame.apply(pd.to_numeric, errors='coerce')
        if numeric.iloc[0].isna().any():
            numeric = numeric.iloc[1:]
        if numeric.isna().any().any():
            bad = int(numeric.isna().any(axis=1).to_numpy().argmax()) + 1 + (len(frame) - len(numeric))
            raise TraceError(f'{path}: non-numeric value on row {bad}')
        try:
            return cls(numeric.iloc[:, 0].to_numpy(), numeric.iloc[:, 1].to_numpy())
        except TraceError as e:
            raise TraceError(f'{path}: {e}')

    def rate_bps(self, t) -> float:
        return float(np.interp(t, self.times, self.mbps)) * 1e6

    def _breakpoints(self, t0, t1):
        inner = self.times[(self.times > t0) & (self.times < t1)]
        return np.concatenate([[t0], inner, [t1]])

    def integrate_bits(self, t0, t1) -> float:
        """Bits the link can carry in [t0, t1]."""
        if self.unlimited:
            return math.inf
        if t1 <= t0:
            return 0.0
        pts = self._breakpoints(t0, t1)
        rates = np.interp(pts, self.times, self.mbps) * 1e6
        return float(np.sum((rates[1:] + rates[:-1]) / 2 * np.diff(pts)))

    def finish_time(self, t0, bits) -> float:
        """Earliest time by which `bits` sent from t0 have left the link."""
        if self.unlimited or bits <= 0:
            return t0
        remaining = float(bits)
        t = t0
        edges = [e for e in self.times if e > t0]
        for edge in edges + [math.inf]:
            b = self.rate_bps(t)
            if math.isinf(edge):
                if b <= 0:
                    return math.inf
                return t + remaining / b
            slope = (self.rate_bps(edge) - b) / (edge - t)
            capacity = (b + self.rate_bps(edge)) / 2 * (edge - t)
            if capacity >= remaining:
                if abs(slope) < 1e-12:
                    return t + remaining / b
                disc = b * b + 2 * slope * remaining
                return t + 2 * remaining / (b + math.sqrt(max(disc, 0.0)))
            remaining -= capacity
            t = edge
        return math.inf

    def mean_mbps(self, t0, t1) -> float:
        if t1 <= t0:
            return self.rate_bps(t0) / 1e6
        return self.integrate_bits(t0, t1) / (t1 - t0) / 1e6


@dataclass(frozen=True)
class Delivery:
    send: float
    start: float
    finish: float
    arrival: float
    size_bytes: int
    retransmissions: int = 0


class ChannelModel:
    """FIFO link: a message starts when the link is free, then propagates.

    Random loss never drops data. Each loss adds one retransmission timeout
    to the arrival time and holds the link for that long, so arrivals keep
    send order.
    """

    def __init__(self, trace: BandwidthTrace, propagation_s=DEFAULT_PROPAGATION_S, loss_rate=0.0,
                 retransmit_s=None, seed=0):
        if propagation_s < 0:
            raise ValueError('propagation delay must be non-negative')
        if not 0.0 <= loss_rate < 1.0:
            raise ValueError('loss rate must lie in [0, 1)')
        self.trace = trace
        self.propagation_s = propagation_s
        self.loss_rate = loss_rate
        self.retransmit_s = 2 * propagation_s + 0.01 if retransmit_s is None else retransmit_s
        self._rng = np.random.default_rng([seed, 0xC4A7])
        self._free_at = 0.0
        self._last_send = -math.inf
        self.delivered_bytes = 0

    def send(self, send_time, size_bytes) -> Delivery:
        if send_time < self._last_send:
            raise ValueError('send times must be non-decreasing')
        self._last_send = send_time
        start = max(send_time, self._free_at)
        finish = self.trace.finish_time(start, size_bytes * 8)
        losses = 0
        if self.loss_rate:
            losses = int(self._rng.geometric(1.0 - self.loss_rate)) - 1
        # head-of-line: the next message waits out every retransmission of this one
        self._free_at = finish + losses * self.retransmit_s
        arrival = self._free_at + self.propagation_s
        self.delivered_bytes += size_bytes
        return Delivery(send_time, start, finish, arrival, size_bytes, losses)

    @property
    def free_at(self):
        return self._free_at


def simulate_delivery(messages, channel: ChannelModel) -> list:
    """Arrival times for (send_time, size_bytes) pairs pushed through the channel in order."""
    return [channel.send(t, size) for t, size in messages]
