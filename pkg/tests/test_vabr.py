import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from vvstream.body import PART_GROUP, BodyPart, PartGroup
from vvstream.errors import ConfigurationError
from vvstream.geometry import PointCloud
from vvstream.scene_reuse import CubeAction, CubeCandidate, SceneReuse
from vvstream.segmentation import kept_count
from vvstream.vabr import (
    DECISION_HEADER, LEVELS, MAX_LEVEL, ChunkDecision, HarmonicMeanEstimator, QoEConfig, QualityLevel,
    Scheduler, build_dynamic_chunk, build_static_chunk, check_levels, qoe, schedule_static, select_levels,
    upgrade_level,
)
from vvstream.wire import FramePayload, MessageType, decode, encode

from conftest import random_cloud


def body_frames(count=2, points=40, seed=0):
    rng = np.random.default_rng(seed)
    return [FramePayload(slot, {part: random_cloud(rng, points) for part in range(15)})
            for slot in range(count)]


def brute_force_utility(window, budgets, floor, cfg, previous_bits):
    """Best QoE over assignments that fit, pinning unfit chunks to the floor."""
    options = []
    for table, budget in zip(window, budgets):
        fits = [lv for lv in range(floor, len(table)) if table[lv] <= budget]
        options.append(fits or [floor])
    head = [previous_bits] if previous_bits is not None else []
    best = -math.inf
    for assignment in itertools.product(*options):
        bits = [table[lv] for table, lv in zip(window, assignment)]
        best = max(best, qoe(head + bits, 0.0, cfg, reference=window[0][0]))
    return best


class TestQoE:
    def test_single_chunk(self):
        assert qoe([100.0], reference=100.0) == pytest.approx(math.log(2))

    def test_variation_and_startup(self):
        value = qoe([100.0, 300.0], startup_s=0.5, reference=100.0)
        assert value == pytest.approx(math.log(2) + math.log(4) - (math.log(4) - math.log(2)) - 0.5)

    def test_custom_quality(self):
        cfg = QoEConfig(quality=lambda bits: bits / 10, variation_weight=0.0)
        assert qoe([10, 20, 30], cfg=cfg) == pytest.approx(6.0)

    def test_bad_config(self):
        with pytest.raises(ConfigurationError):
            QoEConfig(variation_weight=-1.0)
        with pytest.raises(ConfigurationError):
            QoEConfig(window=0)

    def test_empty(self):
        with pytest.raises(ValueError):
            qoe([])


class TestSelectLevels:
    @pytest.mark.parametrize('instances', [300, pytest.param(500, marks=pytest.mark.slow)])
    def test_matches_brute_force(self, instances):
        rng = np.random.default_rng(17)
        for _ in range(instances):
            n = int(rng.integers(1, 5))
            levels = int(rng.integers(1, 5))
            window = [np.cumsum(rng.integers(1, 1000, size=levels)).tolist() for _ in range(n)]
            budgets = rng.integers(1, 3000, size=n).tolist()
            cfg = QoEConfig(variation_weight=float(rng.choice([0.0, 0.5, 1.0, 2.0])))
            previous = int(rng.integers(1, 2000)) if rng.random() < 0.5 else None
            floor = int(rng.integers(0, levels))
            chosen = select_levels(window, budgets, floor, cfg, previous)
            assert chosen.utility == pytest.approx(brute_force_utility(window, budgets, floor, cfg, previous))
            for table, budget, lv, late in zip(window, budgets, chosen.levels, chosen.late):
                assert lv >= floor
                assert late or table[lv] <= budget

    def test_picks_highest_fitting_level(self):
        chosen = select_levels([[100, 200, 400, 800]], [500])
        assert chosen.levels == (2,)
        assert chosen.late == (False,)

    def test_unfit_chunk_is_late(self):
        chosen = select_levels([[500, 900]], [100])
        assert chosen.levels == (0,) and chosen.late == (True,)

    def test_floor_is_respected(self):
        chosen = select_levels([[10, 20, 40]], [15], current=2)
        assert chosen.levels == (2,) and chosen.late == (True,)

    def test_variation_penalty_holds_level(self):
        window, budgets = [[1, 100]], [1000]
        assert select_levels(window, budgets, cfg=QoEConfig(variation_weight=2.0, reference_bits=1.0),
                             previous_bits=1).levels == (0,)
        assert select_levels(window, budgets, cfg=QoEConfig(variation_weight=0.5, reference_bits=1.0),
                             previous_bits=1).levels == (1,)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            select_levels([], [])
        with pytest.raises(ValueError):
            select_levels([[1, 2]], [1, 2])

    def test_upgrade_level(self):
        table = [10, 20, 40, 80]
        assert upgrade_level(table, 1, 25) == 2
        assert upgrade_level(table, 1, 0) == 1
        assert upgrade_level(table, 3, 1000) == 3


class TestLevels:
    def test_ladder_is_nested(self):
        assert MAX_LEVEL == 3
        for group in PartGroup:
            shares = [lv.ratios[group] for lv in LEVELS]
            assert shares == sorted(shares) and shares[-1] == 1.0

    def test_shrinking_share_rejected(self):
        low = QualityLevel(0, {g: 0.5 for g in PartGroup})
        top = QualityLevel(1, {**{g: 1.0 for g in PartGroup}, PartGroup.ARM: 0.4})
        with pytest.raises(ConfigurationError):
            check_levels((low, top))


class TestDynamicChunk:
    def test_layers_nest(self):
        frames = body_frames()
        chunk = build_dynamic_chunk(5, frames, seed=1)
        assert chunk.max_level == MAX_LEVEL
        assert chunk.point_count(MAX_LEVEL) == 2 * 15 * 40
        previous = None
        for level in range(MAX_LEVEL + 1):
            held = chunk.frames_at(level)
            for part in range(15):
                expected = kept_count(40, LEVELS[level].ratios[PART_GROUP[BodyPart(part)]])
                assert len(held[0].parts[part]) == expected
                if previous is not None:
                    assert previous[0].parts[part].point_set() <= held[0].parts[part].point_set()
            previous = held

    def test_head_is_complete_at_base_layer(self):
        frames = body_frames()
        chunk = build_dynamic_chunk(0, frames)
        base = chunk.frames_at(0)[1]
        assert base.parts[BodyPart.HEAD].point_set() == frames[1].parts[BodyPart.HEAD].point_set()

    def test_layer_bits_match_encoding(self):
        chunk = build_dynamic_chunk(0, body_frames())
        assert list(chunk.level_bits) == sorted(chunk.level_bits)
        for layer in range(chunk.max_level + 1):
            data = encode(chunk.message(layer))
            assert len(data) * 8 == chunk.layer_bits(layer)
        assert decode(encode(chunk.message(0))).type == MessageType.DYNAMIC_CHUNK
        assert chunk.message(2).type == MessageType.LAYER_UPGRADE

    def test_deterministic(self):
        a = build_dynamic_chunk(0, body_frames(), seed=3)
        b = build_dynamic_chunk(0, body_frames(), seed=3)
        assert encode(a.message(1)) == encode(b.message(1))


class TestStaticChunk:
    def candidates(self, count=4, points=10):
        rng = np.random.default_rng(0)
        return [CubeCandidate((i, 0, 0), CubeAction.REPLACE,
                              PointCloud(i * 1.0 + rng.uniform(0.01, 0.9, size=(points, 3)), np.zeros((points, 3))),
                              1.0, float(i), 1.0, 0, 'new')
                for i in range(count)]

    def test_levels_are_saliency_prefixes(self):
        chunk = build_static_chunk(0, 0, self.candidates())
        assert [c.index for c in chunk.cubes_at(0)] == [(3, 0, 0)]
        assert [c.index for c in chunk.cubes_at(3)] == [(3, 0, 0), (2, 0, 0), (1, 0, 0), (0, 0, 0)]
        assert list(chunk.level_bits) == sorted(chunk.level_bits)

    def test_schedule_within_residual(self):
        reuse = SceneReuse(side_length=1.0)
        chunk = build_static_chunk(0, 7, self.candidates())
        message, chosen, deferred = schedule_static(chunk, math.inf, reuse)
        assert message.type == MessageType.STATIC_UPDATE
        assert len(message.body.cubes) == 4 and not deferred
        assert sorted(reuse.reference) == [(i, 0, 0) for i in range(4)]
        assert reuse.reference[(0, 0, 0)].last_update_slot == 7

    def test_no_room_for_static(self):
        reuse = SceneReuse(side_length=1.0)
        message, chosen, deferred = schedule_static(build_static_chunk(0, 0, self.candidates()), 10, reuse)
        assert message is None and chosen == []
        assert len(deferred) == 4
        assert reuse.reference == {}


class TestEstimator:
    def test_harmonic_mean(self):
        est = HarmonicMeanEstimator(window=2, initial_bps=5e6)
        assert est.estimate() == 5e6
        est.add(10e6, 1.0)
        est.add(30e6, 1.0)
        assert est.estimate() == pytest.approx(15e6)
        est.add(30e6, 1.0)
        assert est.estimate() == pytest.approx(30e6)

    def test_instant_delivery_is_unlimited(self):
        est = HarmonicMeanEstimator()
        est.add(1000, 0.0)
        assert math.isinf(est.estimate())

    def test_bad_window(self):
        with pytest.raises(ConfigurationError):
            HarmonicMeanEstimator(window=0)


class TestScheduler:
    def test_decision_line(self):
        decision = ChunkDecision(3, 2, 1000, 200, False, 12.5)
        assert decision.to_line() == '3\t2\t-\t1000\t200\t0\t12.500\t-\t0'
        upgraded = ChunkDecision(4, 1, 10, 0, True, math.inf, 2.0, 3, 5)
        assert upgraded.to_line() == '4\t1\t3\t10\t0\t1\tinf\t2.000\t5'

    def test_unlimited_link_picks_top_level(self):
        scheduler = Scheduler(estimator=HarmonicMeanEstimator(initial_bps=math.inf))
        selection, budget = scheduler.decide(build_dynamic_chunk(0, body_frames()))
        assert math.isinf(budget)
        assert selection.levels[0] == MAX_LEVEL

    def test_tight_link_picks_base_level(self):
        chunk = build_dynamic_chunk(0, body_frames())
        scheduler = Scheduler(chunk_seconds=1.0, estimator=HarmonicMeanEstimator(initial_bps=chunk.level_bits[0]))
        selection, _ = scheduler.decide(chunk)
        assert selection.levels[0] == 0 and not selection.late[0]

    def test_record(self):
        scheduler = Scheduler()
        scheduler.record(ChunkDecision(0, 1, 500, 0, False, 1.0))
        assert scheduler.previous_bits == 500
        assert scheduler.decision_lines()[0] == DECISION_HEADER
        assert len(scheduler.decision_lines()) == 2

    def test_lookahead_sees_upcoming_sizes(self):
        scheduler = Scheduler(QoEConfig(variation_weight=0.0, window=2),
                              estimator=HarmonicMeanEstimator(initial_bps=50))
        current = SimpleNamespace(level_bits=[10, 20, 40, 80])
        selection, budget = scheduler.decide(current, upcoming=[[100, 200, 400, 800]])
        assert budget == 50
        assert selection.levels == (2, 0)
        assert selection.late == (False, True)

    def test_future_window_predicted_from_recent_chunks(self):
        scheduler = Scheduler(QoEConfig(window=3))
        scheduler.decide(SimpleNamespace(level_bits=[10, 20, 40, 80]))
        window = scheduler.window_tables([30, 60, 120, 240])
        assert window[0] == [30, 60, 120, 240]
        assert window[1] == window[2] == pytest.approx([20, 40, 80, 160])

    def test_first_chunk_predicts_itself(self):
        scheduler = Scheduler(QoEConfig(window=2))
        assert scheduler.window_tables([5, 9]) == [[5, 9], [5.0, 9.0]]
