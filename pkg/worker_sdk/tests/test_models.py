import numpy as np
import pytest

from cmr_worker_sdk.models import (build_catalog, dilate_once,
                                   landmark_stub, largest_component,
                                   threshold_segment)


def disk_frame(size=48, radius=10.0, myo=4.0, blood=1.0, wall=0.6):
    c = (size - 1) / 2.0
    rr = np.arange(size)[:, None] - c
    cc = np.arange(size)[None, :] - c
    dist = np.hypot(rr, cc)
    frame = np.zeros((size, size), dtype=np.float32)
    frame[dist <= radius + myo] = wall
    frame[dist <= radius] = blood
    return frame


class TestThresholdSegment:
    def test_bright_disk_labeled_blood_with_ring(self):
        frame = disk_frame()
        mask = threshold_segment(frame[None])[0]
        c = frame.shape[0] // 2
        assert mask[c, c] == 1
        blood = mask == 1
        ring = mask == 2
        assert ring.any()
        assert (dilate_once(blood) & ~blood & ring).sum() == ring.sum()

    def test_all_zero_frame_is_background(self):
        mask = threshold_segment(np.zeros((1, 16, 16), dtype=np.float32))
        assert (mask == 0).all()

    def test_blood_dice_vs_ground_truth(self):
        # clean two-level phantom: the bright component is exactly the disk
        size = 64
        frame = disk_frame(size=size, radius=12.0)
        truth = frame >= 0.99
        mask = threshold_segment(frame[None])[0]
        predicted = mask == 1
        dice = (2.0 * (predicted & truth).sum()
                / (predicted.sum() + truth.sum()))
        assert dice > 0.9

    def test_largest_component_wins(self):
        frame = np.zeros((24, 24), dtype=np.float32)
        frame[2:5, 2:5] = 1.0       # 9 px
        frame[10:20, 10:20] = 1.0   # 100 px
        mask = threshold_segment(frame[None])[0]
        assert mask[12, 12] == 1
        assert mask[3, 3] == 0      # smaller blob discarded

    def test_bad_shape_rejected(self):
        with pytest.raises(ValueError):
            threshold_segment(np.zeros((4, 4)))


class TestComponents:
    def test_component_matches_flood_oracle(self, rng):
        bright = rng.rand(20, 20) > 0.6
        out = largest_component(bright)
        assert out.sum() <= bright.sum()
        if out.any():
            assert (bright | ~out).all()   # subset of bright


class TestLandmarkStub:
    def test_returns_three_points_on_axis(self):
        size = 96
        frame = np.zeros((size, size), dtype=np.float32)
        rr = np.arange(size)[:, None] - 30.0
        cc = np.arange(size)[None, :] - 48.0
        frame[((rr / 30.0) ** 2 + (cc / 12.0) ** 2) <= 1.0] = 1.0
        points = landmark_stub(frame[None])[0]
        mv1, mv2, apex = points
        assert apex[0] > mv1[0] and apex[0] > mv2[0]   # apex at larger row
        base_mid = (mv1 + mv2) / 2
        length = np.hypot(*(apex - base_mid))
        assert 40.0 < length < 75.0   # roughly the cavity's long axis


class TestCatalog:
    def test_builtin_ids(self):
        catalog = build_catalog()
        assert catalog.ids() == ["identity", "lax_landmark_stub",
                                 "oracle_segmenter", "perf_stub",
                                 "threshold_segmenter"]

    def test_all_load_on_cpu(self):
        catalog = build_catalog()
        for model_id in catalog.ids():
            entry = catalog.get(model_id)
            assert "cpu" in entry.devices
            entry.load_fn({}, "cpu")   # must not raise
