import numpy as np
import pytest

from gmflow.autodiff import ConfigError, Tensor, constant, bilinear_sample, no_grad
from gmflow.data import SynthConfig, synth_sample
from gmflow.matching import coordinate_grid
from gmflow.metrics import MetricsError, compute_metrics


def warp_back(frame2, flow):
    """Sample frame2 at p + flow(p); the oracle for synthetic consistency."""
    h, w = flow.shape[:2]
    coords = coordinate_grid(h, w, np.float64).data + flow
    with no_grad():
        out = bilinear_sample(constant(frame2.astype(np.float64)), constant(coords))
    return out.data


class TestSynthSample:
    def test_zero_displacement_is_static(self):
        cfg = SynthConfig(height=32, width=32, max_displacement=0.0, seed=3)
        s = synth_sample(cfg, 0)
        np.testing.assert_allclose(s.frame1, s.frame2, atol=1e-6)
        np.testing.assert_array_equal(s.flow, 0.0)
        assert not s.occlusion.any()
        assert s.valid.all()

    def test_pure_translation_geometry(self):
        cfg = SynthConfig(height=32, width=48, max_displacement=6.0, seed=5)
        s = synth_sample(cfg, 7)
        # constant flow
        assert np.ptp(s.flow[..., 0]) == 0.0 and np.ptp(s.flow[..., 1]) == 0.0
        t = s.flow[0, 0]
        assert np.abs(t).max() <= 6.0
        # out-of-bounds band along the trailing border is unmatched
        ys, xs = np.meshgrid(np.arange(32), np.arange(48), indexing="ij")
        expected = (
            (xs + t[0] < 0) | (xs + t[0] > 47) | (ys + t[1] < 0) | (ys + t[1] > 31)
        )
        np.testing.assert_array_equal(s.occlusion, expected)

    @pytest.mark.parametrize("index", [0, 1, 2])
    def test_warp_back_oracle_translation(self, index):
        cfg = SynthConfig(height=32, width=32, max_displacement=8.0, seed=11)
        s = synth_sample(cfg, index)
        back = warp_back(s.frame2, s.flow.astype(np.float64))
        err = np.abs(back - s.frame1.astype(np.float64))
        assert err[:, ~s.occlusion].max() < 1e-3

    @pytest.mark.parametrize("index", [0, 3, 9])
    def test_warp_back_oracle_with_occluder(self, index):
        cfg = SynthConfig(
            height=48, width=48, max_displacement=8.0, occluder_fraction=0.08, seed=13
        )
        s = synth_sample(cfg, index)
        assert s.occlusion.any()  # the occluder must create unmatched pixels
        back = warp_back(s.frame2, s.flow.astype(np.float64))
        err = np.abs(back - s.frame1.astype(np.float64))
        assert err[:, ~s.occlusion].max() < 1e-3

    def test_occluder_creates_two_motions(self):
        cfg = SynthConfig(
            height=48, width=48, max_displacement=8.0, occluder_fraction=0.1, seed=17
        )
        s = synth_sample(cfg, 1)
        flat = s.flow.reshape(-1, 2)
        assert len(np.unique(flat, axis=0)) == 2

    def test_deterministic_per_index(self):
        cfg = SynthConfig(height=32, width=32, seed=23, occluder_fraction=0.1)
        a = synth_sample(cfg, 4)
        b = synth_sample(cfg, 4)
        np.testing.assert_array_equal(a.frame1, b.frame1)
        np.testing.assert_array_equal(a.flow, b.flow)
        c = synth_sample(cfg, 5)
        assert not np.array_equal(a.frame1, c.frame1)

    def test_intensity_range(self):
        s = synth_sample(SynthConfig(height=32, width=32, seed=29), 0)
        for frame in (s.frame1, s.frame2):
            assert frame.min() >= -1.0 and frame.max() <= 1.0

    def test_displacement_must_fit(self):
        with pytest.raises(ConfigError):
            synth_sample(SynthConfig(height=16, width=16, max_displacement=20.0), 0)


class TestComputeMetrics:
    def test_three_four_five(self):
        pred = np.full((2, 2, 2), (3.0, 4.0))
        gt = np.zeros((2, 2, 2))
        r = compute_metrics(pred, gt)
        assert r.epe_all == pytest.approx(5.0)
        assert r.s0_10 == pytest.approx(5.0)
        assert r.n_s0_10 == 4 and r.n_s10_40 == 0 and r.n_s40plus == 0

    def test_bucket_and_outlier_thresholds(self):
        # gt magnitude 50 with EPE 2: bucketed in s40+, not an outlier
        gt = np.full((1, 1, 2), (50.0, 0.0))
        pred = np.full((1, 1, 2), (48.0, 0.0))
        r = compute_metrics(pred, gt)
        assert r.n_s40plus == 1 and r.s40plus == pytest.approx(2.0)
        assert r.f1_all == 0.0

    def test_outlier_requires_both_conditions(self):
        # EPE 10 > 3 px and 10 > 5% of 100 -> outlier
        gt = np.full((1, 1, 2), (100.0, 0.0))
        pred = np.full((1, 1, 2), (90.0, 0.0))
        assert compute_metrics(pred, gt).f1_all == pytest.approx(100.0)
        # EPE 4 > 3 px but 4 < 5% of 100 -> not an outlier
        pred = np.full((1, 1, 2), (96.0, 0.0))
        assert compute_metrics(pred, gt).f1_all == 0.0

    def test_crafted_ten_pixel_case(self):
        # 10 pixels in a row: hand-computed EPE, buckets, and F1
        gt = np.zeros((1, 10, 2))
        gt[0, :, 0] = [0, 0, 0, 5, 5, 15, 15, 30, 50, 80]
        pred = gt.copy()
        errors = [0, 1, 2, 0, 4, 0, 1, 5, 2, 10]
        pred[0, :, 1] = errors  # orthogonal error = exact EPE per pixel
        occ = np.zeros((1, 10), dtype=bool)
        occ[0, :2] = True
        r = compute_metrics(pred, gt, occlusion=occ)

        assert r.epe_all == pytest.approx(np.mean(errors))
        assert r.epe_matched == pytest.approx(np.mean(errors[2:]))
        assert r.epe_unmatched == pytest.approx(np.mean(errors[:2]))
        # decomposition identity
        assert r.epe_all * r.n_all == pytest.approx(
            r.epe_matched * r.n_matched + r.epe_unmatched * r.n_unmatched, rel=1e-12
        )
        # buckets by gt magnitude: [0,10) holds 5, [10,40) holds 3, 40+ holds 2
        assert (r.n_s0_10, r.n_s10_40, r.n_s40plus) == (5, 3, 2)
        assert r.s0_10 == pytest.approx(np.mean([0, 1, 2, 0, 4]))
        assert r.s10_40 == pytest.approx(np.mean([0, 1, 5]))
        assert r.s40plus == pytest.approx(np.mean([2, 10]))
        # outliers: epe>3 and epe>5% mag -> pixels with error 4, 5, 10
        assert r.f1_all == pytest.approx(30.0)

    def test_bucket_counts_partition_valid_pixels(self):
        rng = np.random.default_rng(31)
        gt = rng.uniform(-60, 60, (8, 8, 2))
        pred = gt + rng.standard_normal((8, 8, 2))
        valid = rng.random((8, 8)) > 0.2
        r = compute_metrics(pred, gt, valid=valid)
        assert r.n_s0_10 + r.n_s10_40 + r.n_s40plus == r.n_all == int(valid.sum())

    def test_empty_valid_rejected(self):
        with pytest.raises(MetricsError):
            compute_metrics(
                np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), valid=np.zeros((2, 2), bool)
            )

    def test_schema_fields(self):
        r = compute_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))
        assert list(r.to_dict()) == [
            "epe_all", "epe_matched", "epe_unmatched",
            "s0_10", "s10_40", "s40plus", "f1_all",
        ]
