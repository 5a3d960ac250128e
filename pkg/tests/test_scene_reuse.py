import math

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from vvstream.errors import ConfigurationError, TraceError
from vvstream.geometry import EulerAngles, PointCloud
from vvstream.scene_reuse import (
    CubeAction, CubeCandidate, CubeCell, DetectLevel, SaliencyAccumulator, SaliencyMap, SceneReuse,
    ViewportSample, apply_updates, assign_cubes, demand_points, detect_disparity, detect_level, export_heatmap,
    parse_viewport_trace, quality_proxy, saliency_score, saliency_table, scene_change_profile, static_budget_fill,
)
from vvstream.wire import CUBE_HEADER_BYTES, POINT_BYTES


def cube_cloud(rng, corner, n=50, side=0.15):
    """n points strictly inside the cube whose low corner is `corner`."""
    xyz = np.asarray(corner, dtype=np.float64) + rng.uniform(0.01, side - 0.01, size=(n, 3))
    return PointCloud(xyz, rng.integers(0, 256, size=(n, 3)))


def clumped(corner, n=50):
    return PointCloud(np.tile(np.asarray(corner, dtype=np.float64) + 0.01, (n, 1)), np.zeros((n, 3)))


def candidate(index, n, saliency, kind='new', **kwargs):
    points = PointCloud(np.zeros((n, 3)), np.zeros((n, 3)))
    return CubeCandidate(index, CubeAction.REPLACE, points, kwargs.pop('normalized_cd', 1.0), saliency,
                         kwargs.pop('frequency', 1.0), 0, kind, **kwargs)


class TestDetectLevel:
    @pytest.mark.parametrize('score, level, interval', [
        (16.0, DetectLevel.HIGH, 1), (100.0, DetectLevel.HIGH, 1),
        (9.0, DetectLevel.MID, 5), (15.99, DetectLevel.MID, 5),
        (8.99, DetectLevel.LOW, 10), (0.0, DetectLevel.LOW, 10),
    ])
    def test_thresholds(self, score, level, interval):
        detection = detect_level(score)
        assert (detection.level, detection.interval) == (level, interval)

    def test_frequencies(self):
        assert [detect_level(s).frequency for s in (20, 10, 1)] == [1.0, 0.2, 0.1]


class TestAssignCubes:
    def test_buckets(self):
        cloud = PointCloud(np.array([[0.05, 0.05, 0.05], [0.1, 0.1, 0.1], [0.2, 0.0, 0.0], [-0.01, 0.0, 0.0]]),
                           np.zeros((4, 3)))
        grid = assign_cubes(cloud, 0.15)
        assert grid.counts() == {(-1, 0, 0): 1, (0, 0, 0): 2, (1, 0, 0): 1}
        assert (0, 0, 0) in grid and (5, 5, 5) not in grid
        np.testing.assert_allclose(grid.center((1, 0, 0)), [0.225, 0.075, 0.075])

    def test_order_kept_inside_cube(self):
        cloud = PointCloud(np.array([[0.1, 0.0, 0.0], [0.01, 0.0, 0.0], [0.05, 0.0, 0.0]]), np.zeros((3, 3)))
        np.testing.assert_allclose(assign_cubes(cloud, 1.0).cell_points((0, 0, 0)).xyz[:, 0], [0.1, 0.01, 0.05])

    def test_empty_cloud(self):
        grid = assign_cubes(PointCloud.empty())
        assert len(grid) == 0
        assert grid.centers().shape == (0, 3)

    def test_bad_side(self):
        with pytest.raises(ConfigurationError):
            assign_cubes(PointCloud.empty(), 0.0)


class TestDetectDisparity:
    def test_change_new_and_cleared_cubes(self):
        rng = np.random.default_rng(2)
        kept = cube_cloud(rng, (0.0, 0.0, 0.0))
        moved = cube_cloud(rng, (0.3, 0.0, 0.0))
        gone = cube_cloud(rng, (0.6, 0.0, 0.0))
        fresh = cube_cloud(rng, (0.9, 0.0, 0.0))
        reference = assign_cubes(PointCloud.concat([kept, moved, gone]), 0.15)
        current = assign_cubes(PointCloud.concat([kept, clumped((0.3, 0.0, 0.0)), fresh]), 0.15)
        result = detect_disparity(current, reference, slot=4)
        actions = {u.index: u.action for u in result.updates}
        assert actions == {(2, 0, 0): CubeAction.REPLACE, (4, 0, 0): CubeAction.CLEAR,
                           (6, 0, 0): CubeAction.REPLACE}
        assert result.normalized[(0, 0, 0)] == 0.0
        assert result.normalized[(2, 0, 0)] == pytest.approx(1.0)
        assert all(u.slot == 4 for u in result.updates)

    def test_due_restricts_detection(self):
        rng = np.random.default_rng(2)
        reference = assign_cubes(cube_cloud(rng, (0.0, 0.0, 0.0)), 0.15)
        current = assign_cubes(cube_cloud(rng, (0.3, 0.0, 0.0)), 0.15)
        result = detect_disparity(current, reference, slot=0, due=[(0, 0, 0)])
        assert [u.index for u in result.updates] == [(0, 0, 0)]
        assert result.detected == [(0, 0, 0)]

    def test_grids_must_match(self):
        with pytest.raises(ConfigurationError):
            detect_disparity(assign_cubes(PointCloud.empty(), 0.1), assign_cubes(PointCloud.empty(), 0.2), 0)

    def test_apply_updates_replays(self):
        rng = np.random.default_rng(5)
        reference = assign_cubes(cube_cloud(rng, (0.0, 0.0, 0.0)), 0.15)
        current = assign_cubes(cube_cloud(rng, (0.3, 0.0, 0.0)), 0.15)
        cells = {i: reference.cell_points(i) for i in reference.indices}
        apply_updates(cells, detect_disparity(current, reference, 1).updates)
        assert list(cells) == [(2, 0, 0)]
        np.testing.assert_array_equal(cells[(2, 0, 0)].xyz, current.cell_points((2, 0, 0)).xyz)

    def test_replay_rebuilds_every_boundary(self):
        rng = np.random.default_rng(11)
        corners = [(0.3 * i, 0.3 * (i % 2), 0.0) for i in range(6)]
        cubes = {c: cube_cloud(rng, c, n=20) for c in corners[:4]}
        reference = assign_cubes(PointCloud.empty(), 0.15)
        cells = {}
        for frame in range(200):
            corner = corners[rng.integers(len(corners))]
            roll = rng.random()
            if corner in cubes and len(cubes) > 1 and roll < 0.2:
                del cubes[corner]
            elif roll < 0.7:
                cubes[corner] = cube_cloud(rng, corner, n=int(rng.integers(5, 30)))
            if frame % 4:
                continue
            current = assign_cubes(PointCloud.concat(list(cubes.values())), 0.15)
            apply_updates(cells, detect_disparity(current, reference, frame, threshold=0.0).updates)
            assert sorted(cells) == sorted(current.indices)
            for index in current.indices:
                assert cells[index].point_set() == current.cell_points(index).point_set()
            reference = current


class TestStaticBudgetFill:
    def bits(self, n):
        return (CUBE_HEADER_BYTES + POINT_BYTES * n) * 8

    def test_most_salient_first(self):
        big, small = candidate((0, 0, 0), 10, saliency=5.0), candidate((1, 0, 0), 2, saliency=3.0)
        chosen, deferred = static_budget_fill(self.bits(10) + 10, [small, big])
        assert [u.index for u in chosen] == [(0, 0, 0)]
        assert [c.index for c in deferred] == [(1, 0, 0)]

    def test_skips_cube_that_does_not_fit(self):
        big, small = candidate((0, 0, 0), 10, saliency=5.0), candidate((1, 0, 0), 2, saliency=3.0)
        chosen, deferred = static_budget_fill(self.bits(10) - 1, [big, small])
        assert [u.index for u in chosen] == [(1, 0, 0)]
        assert [c.index for c in deferred] == [(0, 0, 0)]

    def test_unlimited_budget(self):
        cands = [candidate((i, 0, 0), 4, saliency=1.0) for i in range(5)]
        chosen, deferred = static_budget_fill(math.inf, cands)
        assert len(chosen) == 5 and not deferred

    def test_partial_quality(self):
        cand = candidate((0, 0, 0), 100, saliency=1.0, kind='change', normalized_cd=0.5, frequency=0.2)
        (update,), _ = static_budget_fill(math.inf, [cand])
        assert len(update.points) == 10
        assert update.quality == pytest.approx(0.1)

    def test_demand_points(self):
        assert demand_points(candidate((0, 0, 0), 100, 1.0, kind='new')) == 100
        assert demand_points(candidate((0, 0, 0), 100, 1.0, kind='change', normalized_cd=0.5,
                                       frequency=0.2)) == 10
        assert demand_points(candidate((0, 0, 0), 100, 1.0, kind='change', normalized_cd=0.5,
                                       frequency=0.2), full_quality=True) == 100
        assert demand_points(candidate((0, 0, 0), 100, 1.0, kind='refine', frequency=0.1, delivered=10)) == 20
        clear = CubeCandidate((0, 0, 0), CubeAction.CLEAR, PointCloud.empty(), 1.0, 1.0, 1.0, 0, 'clear')
        assert demand_points(clear) == 0


class TestSceneReuse:
    def scene(self, rng):
        return [cube_cloud(rng, (0.3 * i, 0.0, 0.0)) for i in range(3)]

    def test_first_pass_sends_everything(self):
        cubes = self.scene(np.random.default_rng(0))
        reuse = SceneReuse(side_length=0.15)
        found = reuse.detect(PointCloud.concat(cubes), slot=0)
        assert {c.kind for c in found} == {'new'}
        chosen, deferred = reuse.schedule(math.inf, slot=0)
        assert len(chosen) == 3 and not deferred
        view = reuse.scheduled_view()
        np.testing.assert_array_equal(view[(2, 0, 0)].xyz, cubes[1].xyz)

    def test_unchanged_scene_sends_nothing(self):
        cubes = self.scene(np.random.default_rng(0))
        reuse = SceneReuse(side_length=0.15)
        reuse.detect(PointCloud.concat(cubes), slot=0)
        reuse.schedule(math.inf, slot=0)
        assert reuse.detect(PointCloud.concat(cubes), slot=10) == []

    def test_low_saliency_cubes_wait_their_interval(self):
        rng = np.random.default_rng(0)
        cubes = self.scene(rng)
        reuse = SceneReuse(side_length=0.15)
        reuse.detect(PointCloud.concat(cubes), slot=0)
        reuse.schedule(math.inf, slot=0)
        changed = PointCloud.concat([clumped((0.0, 0.0, 0.0)), cubes[1], cubes[2]])
        assert reuse.detect(changed, slot=3) == []
        found = reuse.detect(changed, slot=10)
        assert [(c.index, c.kind) for c in found] == [((0, 0, 0), 'change')]

    def test_removed_cube_is_cleared(self):
        cubes = self.scene(np.random.default_rng(0))
        reuse = SceneReuse(side_length=0.15)
        reuse.detect(PointCloud.concat(cubes), slot=0)
        reuse.schedule(math.inf, slot=0)
        reuse.detect(PointCloud.concat(cubes[:2]), slot=10)
        chosen, _ = reuse.schedule(math.inf, slot=10)
        assert [(u.index, u.action) for u in chosen] == [((4, 0, 0), CubeAction.CLEAR)]
        assert sorted(reuse.scheduled_view()) == [(0, 0, 0), (2, 0, 0)]

    def test_deferred_cube_is_dropped_from_pending(self):
        cubes = self.scene(np.random.default_rng(0))
        reuse = SceneReuse(side_length=0.15)
        reuse.detect(PointCloud.concat(cubes), slot=0)
        chosen, deferred = reuse.schedule(0, slot=0)
        assert not chosen and len(deferred) == 3
        assert reuse.take_pending() == []
        assert reuse.scheduled_view() == {}

    def test_saliency_table(self):
        cubes = self.scene(np.random.default_rng(0))
        reuse = SceneReuse(side_length=0.15)
        reuse.detect(PointCloud.concat(cubes), slot=0)
        reuse.schedule(math.inf, slot=0)
        rows = saliency_table(reuse)
        assert [(r['ix'], r['level']) for r in rows] == [(0, 'low'), (2, 'low'), (4, 'low')]


class TestViewportTrace:
    def test_parse(self):
        samples = parse_viewport_trace(['# head trace', '0, 0, 0, 1.6, 0, 0, 0', '',
                                        '33333 0 0 1.6 0.1 0 0  # turning'])
        assert [s.timestamp for s in samples] == [0, 33333]
        assert samples[1].orientation.yaw == pytest.approx(0.1)
        assert samples[0].to_row() == (0, 0.0, 0.0, 1.6, 0.0, 0.0, 0.0)

    @pytest.mark.parametrize('lines, message', [
        (['0 0 0 1.6 0 0'], 'expected 7 values'),
        (['0 0 0 1.6 0 0 x'], 'non-numeric'),
        (['0 0 0 1.6 0 0 nan'], 'non-finite'),
        (['10 0 0 1.6 0 0 0', '5 0 0 1.6 0 0 0'], 'backwards'),
    ])
    def test_errors_name_the_line(self, lines, message):
        with pytest.raises(TraceError, match=message) as err:
            parse_viewport_trace(lines, 'head.txt')
        assert f'head.txt:{len(lines)}' in str(err.value)

    def test_view_vector_follows_yaw(self):
        sample = ViewportSample(0, (0, 0, 0), EulerAngles(yaw=math.pi / 2))
        np.testing.assert_allclose(sample.view_vector, [0.0, 1.0, 0.0], atol=1e-12)


class TestSaliency:
    def grid(self):
        cloud = PointCloud(np.array([[2.05, 0.05, 0.05], [2.06, 0.05, 0.05], [-2.05, 0.05, 0.05]]),
                           np.zeros((3, 3)))
        return assign_cubes(cloud, 0.15)

    def test_cubes_in_view_are_hit(self):
        grid = self.grid()
        saliency = SaliencyMap()
        saliency.add(ViewportSample(0, (0, 0, 0), EulerAngles()))
        acc = saliency.snapshot(grid)
        assert acc.hits == {(13, 0, 0): 1}
        assert acc.frequency((13, 0, 0)) == 1.0
        assert acc.frequency((-14, 0, 0)) == 0.0

    def test_window_forgets_old_samples(self):
        saliency = SaliencyMap(window_us=1_000_000)
        saliency.extend(ViewportSample(t, (0, 0, 0), EulerAngles()) for t in (0, 600_000, 1_500_000))
        assert len(saliency) == 2

    def test_score(self):
        acc = SaliencyAccumulator(hits={(0, 0, 0): 1}, sample_count=2, distance={(0, 0, 0): 0.5})
        cell = CubeCell((0, 0, 0), PointCloud(np.zeros((10, 3)), np.zeros((10, 3))))
        assert saliency_score(cell, acc) == pytest.approx(10 * 0.5 / 0.5)
        assert saliency_score(CubeCell((1, 0, 0), cell.points), acc) == 0.0

    def ring(self, count=8, radius=2.0):
        angles = np.arange(count) * 2 * math.pi / count
        xyz = np.column_stack([radius * np.cos(angles), radius * np.sin(angles), np.full(count, 0.05)])
        return assign_cubes(PointCloud(xyz, np.zeros((count, 3))), 0.15)

    def sweep(self, grid, angle_deg, steps=720):
        saliency = SaliencyMap(angle_deg=angle_deg)
        # head level with the cube centers, turning once around
        saliency.extend(ViewportSample(k * 1000, (0.0, 0.0, 0.075), EulerAngles(yaw=2 * math.pi * k / steps))
                        for k in range(steps))
        return saliency.snapshot(grid)

    @pytest.mark.parametrize('angle', [15.0, 30.0, 45.0])
    def test_circular_sweep_matches_dwell_fraction(self, angle):
        grid = self.ring()
        acc = self.sweep(grid, angle)
        for index in grid.indices:
            assert acc.frequency(index) == pytest.approx(2 * angle / 360, abs=0.02)

    def test_frequency_bounded_and_grows_with_dwell(self):
        grid = self.ring()
        sweeps = [self.sweep(grid, angle) for angle in (5.0, 15.0, 30.0, 60.0, 180.0)]
        for index in grid.indices:
            freqs = [acc.frequency(index) for acc in sweeps]
            assert all(0.0 <= f <= 1.0 for f in freqs)
            assert freqs == sorted(freqs)
            assert freqs[-1] == 1.0

    def test_salient_cube_is_detected_every_slot(self):
        grid = self.grid()
        saliency = SaliencyMap()
        saliency.add(ViewportSample(0, (1.95, 0.075, 0.075), EulerAngles()))
        reuse = SceneReuse(side_length=0.15)
        cloud = PointCloud(np.array([[2.05, 0.05, 0.05], [2.06, 0.05, 0.05]]), np.zeros((2, 3)))
        reuse.detect(cloud, 0, saliency.snapshot(grid))
        reuse.schedule(math.inf, 0)
        assert reuse.reference[(13, 0, 0)].level == DetectLevel.HIGH
        moved = PointCloud(np.array([[2.03, 0.03, 0.03], [2.04, 0.03, 0.03]]), np.zeros((2, 3)))
        found = reuse.detect(moved, 1, saliency.snapshot(grid))
        assert [c.index for c in found] == [(13, 0, 0)]

    def test_detection_cadence_follows_level(self):
        # head at distance 1 from the mid cube, looking along +x
        head = ViewportSample(0, (0.125, 0.075, 0.075), EulerAngles())
        cloud = PointCloud.concat([
            PointCloud(np.tile([1.1, 0.05, 0.05], (10, 1)), np.zeros((10, 3))),
            PointCloud(np.tile([1.1, 0.2, 0.05], (20, 1)), np.zeros((20, 3))),
            PointCloud(np.tile([1.1, -0.2, 0.05], (5, 1)), np.zeros((5, 3))),
        ])
        reuse = SceneReuse(side_length=0.15)
        saliency = SaliencyMap()
        saliency.add(head)
        snapshot = saliency.snapshot(reuse.grid(cloud))
        for slot in range(21):
            reuse.detect(cloud, slot, snapshot)
            reuse.schedule(math.inf, slot)
        levels = {index: ref.level for index, ref in reuse.reference.items()}
        assert levels == {(7, 0, 0): DetectLevel.MID, (7, 1, 0): DetectLevel.HIGH, (7, -2, 0): DetectLevel.LOW}
        slots = {index: [s for s, i, _ in reuse.detections if i == index] for index in levels}
        assert slots[(7, 0, 0)] == [0, 5, 10, 15, 20]
        assert slots[(7, 1, 0)] == list(range(21))
        assert slots[(7, -2, 0)] == [0, 10, 20]


class TestAnalysis:
    def test_quality_proxy(self):
        rng = np.random.default_rng(4)
        cloud = cube_cloud(rng, (0.0, 0.0, 0.0), n=200)
        assert quality_proxy(cloud, cloud) == 1.0
        half = cloud.take(np.arange(0, 200, 2))
        assert 0.0 < quality_proxy(cloud, half) < 1.0
        assert quality_proxy(cloud, PointCloud.empty()) == 0.0

    def test_scene_change_profile(self):
        rng = np.random.default_rng(4)
        a = cube_cloud(rng, (0.0, 0.0, 0.0))
        b = PointCloud.concat([a, cube_cloud(rng, (0.3, 0.0, 0.0))])
        profile = scene_change_profile([a, a, b])
        assert profile['frame'].tolist() == [1, 2]
        assert profile['changed'].tolist() == [0, 0]
        assert profile['added'].tolist() == [0, 1]

    def test_export_heatmap(self, tmp_path):
        rows = [{'ix': 0, 'iy': 0, 'iz': 0, 'saliency': 2.0, 'level': 'low'},
                {'ix': 2, 'iy': 1, 'iz': 3, 'saliency': 8.0, 'level': 'low'}]
        png = export_heatmap(rows, tmp_path / 'out' / 'saliency.csv', pixel=2)
        table = pd.read_csv(tmp_path / 'out' / 'saliency.csv')
        assert table['saliency'].tolist() == [2.0, 8.0]
        with Image.open(png) as image:
            assert image.size == (6, 4)
            assert image.getpixel((4, 0)) == 255
