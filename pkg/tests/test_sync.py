from fractions import Fraction

import numpy as np
import pytest

from vvstream.errors import ConfigurationError
from vvstream.sync import SyncConfig, SyncStats, Synchronizer, synchronize

from conftest import tagged


def streams_with_drops(cameras, slots, drop_rate, seed=0):
    """Per-camera frame lists with random drops; slot 0 and one camera per slot always survive."""
    rng = np.random.default_rng(seed)
    dropped = rng.random((slots, cameras)) < drop_rate
    dropped[0] = False
    dropped[dropped.all(axis=1), 0] = False
    streams = {cid: [tagged(cid, i) for i in range(slots) if not dropped[i, cid]] for cid in range(cameras)}
    return streams, int(dropped.sum())


class TestSyncConfig:
    def test_half_open_slots(self):
        cfg = SyncConfig(Fraction(1, 24), 1)
        assert cfg.slot_of(0) == 0
        assert cfg.slot_of(41666) == 0
        assert cfg.slot_of(41667) == 1
        assert cfg.slot_start(1) == 41667

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigurationError):
            SyncConfig(Fraction(0), 1)
        with pytest.raises(ConfigurationError):
            SyncConfig(Fraction(1, 24), 0)

    def test_camera_count_must_match(self):
        with pytest.raises(ConfigurationError):
            Synchronizer(SyncConfig(Fraction(1, 24), 3), [0, 1])


class TestSynchronize:
    def test_dropped_frames_are_reused(self):
        streams, drops = streams_with_drops(6, 3600, 0.05, seed=42)
        stats = SyncStats()
        groups = list(synchronize(streams, SyncConfig(Fraction(1, 24), 6), stats))
        assert len(groups) == 3600
        assert [g.slot_index for g in groups] == list(range(3600))
        assert all(len(g.frames) == 6 for g in groups)
        assert sum(g.reused_count for g in groups) == drops
        assert stats.reused == drops
        assert stats.groups == 3600

    def test_reused_frame_is_the_latest_one(self):
        streams = {0: [tagged(0, 0), tagged(0, 1), tagged(0, 2)], 1: [tagged(1, 0), tagged(1, 2)]}
        groups = list(synchronize(streams, SyncConfig(Fraction(1, 24), 2)))
        middle = groups[1]
        assert middle.reused_flags == (False, True)
        assert middle.frame(1).descriptor.sequence_number == 0

    def test_no_reuse_withholds_group(self):
        streams = {0: [tagged(0, 0), tagged(0, 1)], 1: [tagged(1, 0)]}
        stats = SyncStats()
        groups = list(synchronize(streams, SyncConfig(Fraction(1, 24), 2, reuse_on_loss=False), stats))
        assert [g.slot_index for g in groups] == [0]
        assert stats.withheld == 1

    def test_camera_without_any_frame_yet(self):
        streams = {0: [tagged(0, 0), tagged(0, 1)], 1: [tagged(1, 1)]}
        groups = list(synchronize(streams, SyncConfig(Fraction(1, 24), 2)))
        assert [g.slot_index for g in groups] == [1]

    def test_out_of_order_frame_skipped(self):
        sync = Synchronizer(SyncConfig(Fraction(1, 24), 1), [0])
        sync.push(tagged(0, 3))
        assert sync.push(tagged(0, 1)) == []
        assert sync.stats.out_of_order == 1

    def test_second_frame_in_slot_supersedes(self):
        sync = Synchronizer(SyncConfig(Fraction(1, 12), 1), [0])
        sync.push(tagged(0, 0))
        sync.push(tagged(0, 1))
        groups = sync.flush()
        assert groups[0].frames[0].descriptor.sequence_number == 1
        assert sync.stats.superseded == 1
