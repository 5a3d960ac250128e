"""Volumetric adaptive bitrate: layered chunks, the QoE model and level selection.

A dynamic chunk is cut into nested layers. Layer 0 carries the whole head and
a sparse outline of every other part; each further layer adds points until
the last one restores the decimated body in full. Quality level L means
layers 0..L have been delivered.
"""
from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from vvstream.body import PART_GROUP, BodyPart, PartGroup
from vvstream.errors import ConfigurationError
from vvstream.geometry import PointCloud
from vvstream.scene_reuse import CubeAction, SceneReuse, demand_points, static_budget_fill
from vvstream.segmentation import keep_order, kept_count
from vvstream.wire import (
    HEADER_SIZE, PART_COUNT, STATIC_HEADER_BYTES, CubeRecord, DynamicPayload, FramePayload,
    Message, MessageType, StaticPayload, dynamic_message_size, static_message_size,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QualityLevel:
    """Share of each group's decimated points delivered once this level is reached."""

    index: int
    ratios: dict


def check_levels(levels):
    if not levels:
        raise ConfigurationError('at least one quality level is required')
    for group in PartGroup:
        shares = [lv.ratios[group] for lv in levels]
        if any(b < a for a, b in zip(shares, shares[1:])):
            raise ConfigurationError(f'{group.name.lower()} shares must not shrink between levels')
        if shares[-1] != 1.0:
            raise ConfigurationError('the top level must deliver every decimated point')
    return levels


def _level(index, head, chest, arm, leg):
    return QualityLevel(index, {PartGroup.HEAD: head, PartGroup.CHEST: chest,
                                PartGroup.ARM: arm, PartGroup.LEG: leg})


LEVELS = check_levels((
    _level(0, 1.0, 0.15, 0.10, 0.15),
    _level(1, 1.0, 0.40, 0.25, 0.40),
    _level(2, 1.0, 0.70, 0.60, 0.70),
    _level(3, 1.0, 1.00, 1.00, 1.00),
))
MAX_LEVEL = len(LEVELS) - 1
STATIC_LEVEL_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


# ---------------------------------------------------------------------------
# QoE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QoEConfig:
    variation_weight: float = 1.0
    startup_weight: float = 1.0
    window: int = 3
    reference_bits: float | None = None
    rebuffer_weight: float = 0.0
    quality: Callable | None = None

    def __post_init__(self):
        if self.variation_weight < 0 or self.startup_weight < 0 or self.rebuffer_weight < 0:
            raise ConfigurationError('QoE weights must be non-negative')
        if self.window < 1:
            raise ConfigurationError('the look-ahead window needs at least one chunk')

    def q(self, bits, reference=None) -> float:
        if self.quality is not None:
            return float(self.quality(bits))
        r0 = self.reference_bits or reference or 1.0
        return math.log1p(bits / max(r0, 1.0))


def qoe(bitrates, startup_s=0.0, cfg: QoEConfig = QoEConfig(), rebuffer_s=0.0, reference=None) -> float:
    """Sum of chunk qualities minus weighted quality variation and startup delay."""
    qs = [cfg.q(r, reference) for r in bitrates]
    if not qs:
        raise ValueError('QoE needs at least one chunk')
    variation = sum(abs(b - a) for a, b in zip(qs, qs[1:]))
    value = sum(qs) - cfg.variation_weight * variation - cfg.startup_weight * startup_s
    if cfg.rebuffer_weight:
        value -= cfg.rebuffer_weight * rebuffer_s
    return value


# ---------------------------------------------------------------------------
# Chunks
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DynamicChunk:
    """`layers[l]` holds, per frame, only the points layer l adds."""

    index: int
    slots: tuple
    layers: tuple
    level_bits: tuple

    @property
    def max_level(self):
        return len(self.layers) - 1

    def message(self, layer) -> Message:
        msg_type = MessageType.DYNAMIC_CHUNK if layer == 0 else MessageType.LAYER_UPGRADE
        return Message(msg_type, DynamicPayload(self.index, layer, list(self.layers[layer])))

    def layer_bits(self, layer) -> int:
        return self.level_bits[layer] - (self.level_bits[layer - 1] if layer else 0)

    def frames_at(self, level) -> list:
        """Per frame, the parts a client holds at `level`."""
        out = []
        for f, slot in enumerate(self.slots):
            parts = {}
            for part in range(PART_COUNT):
                pieces = [self.layers[l][f].parts[part] for l in range(level + 1)]
                parts[part] = PointCloud.concat(pieces)
            out.append(FramePayload(slot, parts))
        return out

    def point_count(self, level) -> int:
        return sum(len(c) for l in range(level + 1) for f in self.layers[l] for c in f.parts.values())


@dataclass(frozen=True, eq=False)
class StaticChunk:
    """Pending cube candidates in descending saliency, with nested level sizes."""

    index: int
    slot: int
    candidates: tuple
    level_bits: tuple
    full_quality: bool = False

    def cubes_at(self, level) -> tuple:
        return self.candidates[:_prefix(len(self.candidates), STATIC_LEVEL_FRACTIONS[level])]


def _prefix(n, fraction):
    return int(math.ceil(n * fraction - 1e-12))


def _layer_counts(n, group, levels):
    counts = [kept_count(n, lv.ratios[group]) for lv in levels]
    return np.maximum.accumulate(counts).tolist()


def build_dynamic_chunk(index, frames: Sequence[FramePayload], seed=0, levels=LEVELS) -> DynamicChunk:
    """Split decimated frames into nested layers; each layer is a prefix of a fixed point order."""
    layers = [[] for _ in levels]
    for frame in frames:
        pieces = [dict() for _ in levels]
        for part in range(PART_COUNT):
            cloud = frame.parts.get(part, PointCloud.empty())
            group = PART_GROUP[BodyPart(part)]
            order = keep_order(cloud, 1.0, seed, frame.slot, PART_COUNT + part)
            start = 0
            for l, stop in enumerate(_layer_counts(len(cloud), group, levels)):
                pieces[l][part] = cloud.take(np.sort(order[start:stop]))
                start = stop
        for l in range(len(levels)):
            layers[l].append(FramePayload(frame.slot, pieces[l]))
    sizes = []
    for layer in layers:
        counts = [[len(f.parts[p]) for p in range(PART_COUNT)] for f in layer]
        sizes.append(dynamic_message_size(counts) * 8)
    return DynamicChunk(index, tuple(f.slot for f in frames), tuple(tuple(l) for l in layers),
                        tuple(itertools.accumulate(sizes)))


def build_static_chunk(index, slot, candidates, full_quality=False) -> StaticChunk:
    ordered = tuple(sorted(candidates, key=lambda c: (-c.saliency, c.index)))
    bits = []
    for fraction in STATIC_LEVEL_FRACTIONS:
        chosen = ordered[:_prefix(len(ordered), fraction)]
        bits.append(static_message_size(demand_points(c, full_quality) for c in chosen) * 8)
    return StaticChunk(index, slot, ordered, tuple(bits), full_quality)


def build_chunks(index, frames, candidates, seed=0, full_quality=False, levels=LEVELS):
    """Dynamic and static chunk for one period."""
    slot = frames[-1].slot if frames else 0
    return (build_dynamic_chunk(index, frames, seed, levels),
            build_static_chunk(index, slot, candidates, full_quality))


STATIC_OVERHEAD_BITS = (HEADER_SIZE + STATIC_HEADER_BYTES) * 8


def schedule_static(chunk: StaticChunk, residual_bits, reuse: SceneReuse):
    """Fill the residual budget with cube updates and commit them.

    Returns the STATIC_UPDATE message (None when nothing fits) and the
    chosen and deferred cubes.
    """
    cube_bits = residual_bits - STATIC_OVERHEAD_BITS
    if cube_bits <= 0 or not chunk.candidates:
        return None, [], list(chunk.candidates)
    chosen, deferred = static_budget_fill(cube_bits, chunk.candidates, chunk.full_quality, reuse.seed)
    reuse.commit(chosen, chunk.slot, {c.index: c for c in chunk.candidates})
    if not chosen:
        return None, chosen, deferred
    records = [CubeRecord(u.index, int(u.action), u.slot,
                          u.points if u.action == CubeAction.REPLACE else PointCloud.empty())
               for u in chosen]
    return Message(MessageType.STATIC_UPDATE, StaticPayload(chunk.index, records)), chosen, deferred


# ---------------------------------------------------------------------------
# Level selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Selection:
    levels: tuple
    late: tuple
    utility: float
    bits: tuple


def select_levels(window, budgets, current=0, cfg: QoEConfig = QoEConfig(), previous_bits=None) -> Selection:
    """Exhaustive search over the window's level assignments.

    `window` holds each chunk's cumulative bits per level, `budgets` the bits
    the link is expected to carry per chunk interval. Levels never go below
    `current` (an int or one floor per chunk). A chunk whose floor does not
    fit is pinned to it and flagged late. Ties prefer fewer bits, then the
    lexicographically lower assignment.
    """
    window = [list(t) for t in window]
    if not window:
        raise ValueError('empty look-ahead window')
    if len(budgets) != len(window):
        raise ValueError('one budget per window chunk is required')
    floors = list(current) if isinstance(current, Sequence) else [current] * len(window)
    floors = [min(max(0, int(f)), len(t) - 1) for f, t in zip(floors, window)]
    late, choices = [], []
    for table, budget, floor in zip(window, budgets, floors):
        fits = [lv for lv in range(floor, len(table)) if table[lv] <= budget]
        late.append(not fits)
        choices.append(fits or [floor])
    reference = cfg.reference_bits or window[0][0]
    head = [previous_bits] if previous_bits is not None else []
    best = None
    for assignment in itertools.product(*choices):
        bits = [table[lv] for table, lv in zip(window, assignment)]
        utility = qoe(head + bits, 0.0, cfg, reference=reference)
        key = (-utility, sum(bits), assignment)
        if best is None or key < best[0]:
            best = (key, assignment, bits, utility)
    _, assignment, bits, utility = best
    return Selection(tuple(assignment), tuple(late), utility, tuple(bits))


def upgrade_level(table, current, spare_bits) -> int:
    """Highest level reachable from `current` with `spare_bits` more."""
    if spare_bits <= 0 or current >= len(table) - 1:
        return current
    return select_levels([table], [table[current] + spare_bits], current).levels[0]


class HarmonicMeanEstimator:
    """Throughput prediction from the harmonic mean of recent chunk deliveries."""

    def __init__(self, window=5, initial_bps=20e6):
        if window < 1:
            raise ConfigurationError('estimator window must be at least 1')
        self.samples = deque(maxlen=window)
        self.initial_bps = initial_bps

    def add(self, bits, seconds):
        self.samples.append(math.inf if seconds <= 0 else bits / seconds)

    def estimate(self) -> float:
        if not self.samples:
            return self.initial_bps
        inverse = sum(1.0 / s for s in self.samples)
        return math.inf if inverse == 0 else len(self.samples) / inverse


@dataclass
class ChunkDecision:
    chunk: int
    level: int
    dynamic_bits: int
    static_bits: int
    late: bool
    predicted_mbps: float
    actual_mbps: float | None = None
    upgraded_to: int | None = None
    deferred_cubes: int = 0

    def to_line(self) -> str:
        actual = '-' if self.actual_mbps is None else _mbps(self.actual_mbps)
        upgraded = '-' if self.upgraded_to is None else str(self.upgraded_to)
        return (f'{self.chunk}\t{self.level}\t{upgraded}\t{self.dynamic_bits}\t{self.static_bits}\t'
                f'{int(self.late)}\t{_mbps(self.predicted_mbps)}\t{actual}\t{self.deferred_cubes}')


HISTORY_CHUNKS = 4
DECISION_HEADER = 'chunk\tlevel\tupgraded_to\tdynamic_bits\tstatic_bits\tlate\tpredicted_mbps\tactual_mbps\tdeferred_cubes'


def _mbps(value):
    return 'inf' if math.isinf(value) else f'{value:.3f}'


@dataclass
class Scheduler:
    """Per-session decision loop: one level choice per chunk, static on the residual.

    Chunks after the current one are live and not yet captured. Their level
    tables come from `upcoming` when the caller already holds them, and are
    otherwise predicted as the per-level mean of the most recent chunks.
    """

    cfg: QoEConfig = field(default_factory=QoEConfig)
    chunk_seconds: float = 1.0
    estimator: HarmonicMeanEstimator = field(default_factory=HarmonicMeanEstimator)
    decisions: list = field(default_factory=list)
    previous_bits: int | None = None
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_CHUNKS))

    def budget_bits(self) -> float:
        return self.estimator.estimate() * self.chunk_seconds

    def predicted_table(self, table) -> list:
        """Per-level mean of recent tables shaped like `table`, current one included."""
        recent = [t for t in self.history if len(t) == len(table)] + [list(table)]
        return np.mean(np.asarray(recent, dtype=np.float64), axis=0).tolist()

    def window_tables(self, table, upcoming=()) -> list:
        window = [list(table)] + [list(t) for t in upcoming][:self.cfg.window - 1]
        if len(window) < self.cfg.window:
            guess = self.predicted_table(table)
            window += [guess] * (self.cfg.window - len(window))
        return window

    def decide(self, chunk: DynamicChunk, upcoming=()) -> tuple:
        """(Selection, per-chunk budget) over the current chunk and the look-ahead window."""
        budget = self.budget_bits()
        window = self.window_tables(chunk.level_bits, upcoming)
        selection = select_levels(window, [budget] * len(window), 0, self.cfg, self.previous_bits)
        self.history.append(list(chunk.level_bits))
        return selection, budget

    def record(self, decision: ChunkDecision):
        self.decisions.append(decision)
        self.previous_bits = decision.dynamic_bits
        logger.debug(f'chunk {decision.chunk}: level {decision.level}, late={decision.late}')

    def decision_lines(self) -> list:
        return [DECISION_HEADER] + [d.to_line() for d in self.decisions]
