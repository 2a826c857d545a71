import numpy as np
import pytest

from stica.augment import (
    FEATURE_SPACE,
    AugmentParams,
    CropPlan,
    CropTube,
    ViewSet,
    audio_augment,
    bilinear_resize,
    feature_crop,
    input_crop_resize,
    parse_time_spec,
    photometric_augment,
    sample_crop_offsets,
    sample_crop_tube,
    sample_view_sets,
)
from stica.tensor import Tensor, backward


def rng(seed=0):
    return np.random.default_rng(seed)


def avgpool_encoder(v, st, ss):
    """Stride-aligned non-overlapping average pooling; the crop-equivalence oracle.

    Each block is reduced from a contiguous copy so the summation order
    (and therefore the result bits) does not depend on the input layout.
    """
    c, t, h, w = v.shape
    out = np.empty((c, t // st, h // ss, w // ss))
    for ti in range(t // st):
        for yi in range(h // ss):
            for xi in range(w // ss):
                block = v[:, ti * st : (ti + 1) * st,
                          yi * ss : (yi + 1) * ss, xi * ss : (xi + 1) * ss]
                out[:, ti, yi, xi] = np.ascontiguousarray(block).reshape(c, -1).mean(axis=1)
    return out


class TestCropTube:
    def test_invariants(self):
        with pytest.raises(ValueError):
            CropTube(3, 3, 0, 1, 0, 1)
        with pytest.raises(ValueError):
            CropTube(-1, 2, 0, 1, 0, 1)
        with pytest.raises(ValueError):
            CropTube(0, 1, 0, 1, 0, 1, domain="pixelish")
        tube = CropTube(0, 4, 1, 3, 0, 2)
        with pytest.raises(ValueError, match="out of bounds"):
            tube.check_bounds((2, 3, 3))


class TestSampleCropTube:
    def test_full_frame_when_area_and_aspect_fixed(self):
        tube = sample_crop_tube((8, 56, 56), (1.0, 1.0), (1.0, 1.0), 8, rng(0))
        assert (tube.x_min, tube.x_max, tube.y_min, tube.y_max) == (0, 56, 0, 56)
        assert (tube.t_min, tube.t_max) == (0, 8)

    def test_full_temporal_length_pins_offset(self):
        for seed in range(5):
            tube = sample_crop_tube((8, 56, 56), (0.4, 1.0), (0.75, 4 / 3), 8, rng(seed))
            assert (tube.t_min, tube.t_max) == (0, 8)

    def test_temporal_length_too_long_rejected(self):
        with pytest.raises(ValueError, match="temporal length"):
            sample_crop_tube((4, 8, 8), (1.0, 1.0), (1.0, 1.0), 5, rng(0))

    def test_statistical_in_bounds_and_area(self):
        g = rng(123)
        areas = []
        for _ in range(10_000):
            tube = sample_crop_tube((8, 56, 56), (0.25, 1.0), (0.75, 4 / 3), 4, g)
            tube.check_bounds((8, 56, 56))
            bh, bw = tube.spatial_size
            areas.append(bh * bw / (56.0 * 56.0))
        areas = np.asarray(areas)
        # integer rounding of the sampled box nudges areas slightly past the ends
        assert areas.min() > 0.25 * 0.9
        assert areas.max() <= 1.0


class TestInputCropResize:
    def test_identity_is_bit_exact(self):
        v = rng(1).uniform(size=(3, 4, 8, 8))
        tube = CropTube(0, 8, 0, 8, 0, 4)
        out = input_crop_resize(v, tube, (8, 8))
        np.testing.assert_array_equal(out, v)

    def test_constant_preserved(self):
        v = np.full((3, 2, 10, 12), 0.37)
        tube = CropTube(1, 11, 2, 9, 0, 2)
        out = input_crop_resize(v, tube, (5, 5))
        np.testing.assert_allclose(out, 0.37, atol=1e-15)

    def test_two_by_two_to_center_sample(self):
        # bilinear formula oracle: center of [1,2;3,4] is the mean
        v = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
        out = input_crop_resize(v, CropTube(0, 2, 0, 2, 0, 1), (1, 1))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 2.5

    def test_same_mapping_every_frame(self):
        frame = rng(2).uniform(size=(3, 1, 9, 9))
        clip = np.concatenate([frame, frame, frame], axis=1)
        tube = CropTube(1, 8, 1, 8, 0, 3)
        out = input_crop_resize(clip, tube, (5, 5))
        np.testing.assert_array_equal(out[:, 0], out[:, 1])
        np.testing.assert_array_equal(out[:, 0], out[:, 2])

    def test_degenerate_output_rejected(self):
        v = np.zeros((3, 2, 8, 8))
        with pytest.raises(ValueError, match="< 1"):
            input_crop_resize(v, CropTube(0, 8, 0, 8, 0, 2), (0, 4))

    def test_bilinear_matches_pointwise_formula(self):
        v = rng(3).uniform(size=(1, 1, 6, 7))
        out = bilinear_resize(v, 4, 5)
        h, w = 6, 7
        for i in range(4):
            for j in range(5):
                y = min(max((i + 0.5) * h / 4 - 0.5, 0), h - 1)
                x = min(max((j + 0.5) * w / 5 - 0.5, 0), w - 1)
                y0, x0 = int(np.floor(y)), int(np.floor(x))
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                fy, fx = y - y0, x - x0
                expected = ((1 - fy) * (1 - fx) * v[0, 0, y0, x0]
                            + (1 - fy) * fx * v[0, 0, y0, x1]
                            + fy * (1 - fx) * v[0, 0, y1, x0]
                            + fy * fx * v[0, 0, y1, x1])
                np.testing.assert_allclose(out[0, 0, i, j], expected, atol=1e-12)


class TestPhotometric:
    def test_zero_strengths_identity(self):
        v = rng(1).uniform(size=(3, 4, 8, 8))
        params = AugmentParams(flip_prob=0.0)
        np.testing.assert_array_equal(photometric_augment(v, params, rng(2)), v)

    def test_double_flip_identity(self):
        v = rng(3).uniform(size=(3, 2, 6, 6))
        params = AugmentParams(flip_prob=1.0)
        once = photometric_augment(v, params, rng(0))
        twice = photometric_augment(once, params, rng(0))
        np.testing.assert_array_equal(twice, v)

    def test_brightness_shifts_every_pixel_by_same_amount(self):
        v = rng(4).uniform(size=(3, 2, 6, 6))
        params = AugmentParams(flip_prob=0.0, brightness=0.3)
        g = rng(5)
        out = photometric_augment(v, params, g)
        shift = out - v
        np.testing.assert_allclose(shift, shift.flat[0], atol=1e-15)
        assert abs(shift.flat[0]) <= 0.3

    def test_audio_gain(self):
        a = rng(6).uniform(size=(1, 16, 16))
        out = audio_augment(a, AugmentParams(audio_gain=0.25), rng(7))
        ratio = out / a
        np.testing.assert_allclose(ratio, ratio.flat[0])
        assert 0.75 <= ratio.flat[0] <= 1.25


class TestFeatureCrop:
    def test_paper_geometry_on_seven_grid(self):
        feat = Tensor(rng(1).normal(size=(8, 4, 7, 7)))
        out = feature_crop(feat, CropTube(0, 6, 0, 6, 0, 4, domain=FEATURE_SPACE))
        assert out.shape == (8, 4, 6, 6)

    def test_full_grid_is_identity(self):
        feat = rng(2).normal(size=(2, 8, 4, 7, 7))
        out = feature_crop(Tensor(feat), CropTube(0, 7, 0, 7, 0, 4, domain=FEATURE_SPACE))
        np.testing.assert_array_equal(out.data, feat)

    def test_gradient_zero_outside_tube(self):
        feat = Tensor(rng(3).normal(size=(1, 2, 4, 5, 5)), requires_grad=True)
        tube = CropTube(1, 4, 2, 5, 1, 3, domain=FEATURE_SPACE)
        backward((feature_crop(feat, tube) * 2.0).sum())
        grad = feat.grad
        inside = np.zeros_like(grad, dtype=bool)
        inside[:, :, 1:3, 2:5, 1:4] = True
        np.testing.assert_array_equal(grad[~inside], 0.0)
        np.testing.assert_array_equal(grad[inside], 2.0)

    def test_out_of_bounds_rejected(self):
        feat = Tensor(np.zeros((1, 2, 4, 5, 5)))
        with pytest.raises(ValueError, match="out of bounds"):
            feature_crop(feat, CropTube(2, 6, 0, 2, 0, 2, domain=FEATURE_SPACE))

    def test_wrong_domain_rejected(self):
        feat = Tensor(np.zeros((1, 2, 4, 5, 5)))
        with pytest.raises(ValueError, match="feature-space"):
            feature_crop(feat, CropTube(0, 2, 0, 2, 0, 2, domain="input"))

    def test_composition(self):
        feat = Tensor(rng(4).normal(size=(3, 6, 6, 6)))
        t1 = CropTube(1, 5, 0, 5, 1, 6, domain=FEATURE_SPACE)
        t2 = CropTube(1, 3, 2, 4, 0, 3, domain=FEATURE_SPACE)
        composed = CropTube(t1.x_min + t2.x_min, t1.x_min + t2.x_max,
                            t1.y_min + t2.y_min, t1.y_min + t2.y_max,
                            t1.t_min + t2.t_min, t1.t_min + t2.t_max,
                            domain=FEATURE_SPACE)
        twice = feature_crop(feature_crop(feat, t1), t2).data
        once = feature_crop(feat, composed).data
        np.testing.assert_array_equal(twice, once)


class TestCropEquivalenceOracle:
    """Feature crops of a pooled map equal pooling of the matching input crop."""

    def test_bit_exact_over_random_tubes(self):
        g = rng(42)
        ss, st = 8, 2  # kernel = stride: 56 -> 7 spatially, 8 -> 4 in time
        v = g.uniform(size=(3, 8, 56, 56))
        pooled = avgpool_encoder(v, st, ss)
        for _ in range(100):
            x0 = int(g.integers(0, 4))
            y0 = int(g.integers(0, 4))
            t0 = int(g.integers(0, 2))
            bw = int(g.integers(1, 7 - x0 + 1))
            bh = int(g.integers(1, 7 - y0 + 1))
            bt = int(g.integers(1, 4 - t0 + 1))
            ftube = CropTube(x0, x0 + bw, y0, y0 + bh, t0, t0 + bt, domain=FEATURE_SPACE)
            via_feature = feature_crop(Tensor(pooled), ftube).data
            crop = v[:, st * t0 : st * (t0 + bt), ss * y0 : ss * (y0 + bh),
                     ss * x0 : ss * (x0 + bw)]
            via_input = avgpool_encoder(crop, st, ss)
            np.testing.assert_array_equal(via_feature, via_input)


class TestCropPlan:
    def test_parse_time_spec(self):
        assert parse_time_spec("2x3+1x2") == [(2, 3), (1, 2)]
        assert parse_time_spec("") == []
        with pytest.raises(ValueError):
            parse_time_spec("2*3")

    def test_paper_sota_plan_is_representable(self):
        plan = CropPlan(m=2, n=4, medium_size=6, small_size=4,
                        time_spec=[(2, 3), (1, 2)], grid=(4, 7, 7))
        specs = plan.crop_specs()
        assert len(specs) == 6
        assert [s[0] for s in specs] == ["medium"] * 2 + ["small"] * 4
        assert [s[2] for s in specs] == [3, 3, 2, 4, 4, 4]

    def test_infeasible_sizes_rejected(self):
        with pytest.raises(ValueError, match="exceeds feature grid"):
            CropPlan(medium_size=9, grid=(4, 7, 7))
        with pytest.raises(ValueError, match="infeasible"):
            CropPlan(time_spec=[(1, 9)], grid=(4, 7, 7))

    def test_offsets_in_bounds_over_many_draws(self):
        g = rng(7)
        for spatial, temporal in [(6, 3), (4, 2), (7, 4), (1, 1)]:
            t0s, y0s, x0s = sample_crop_offsets((4, 7, 7), spatial, temporal, 100_000, g)
            assert t0s.min() >= 0 and t0s.max() + temporal <= 4
            assert y0s.min() >= 0 and y0s.max() + spatial <= 7
            assert x0s.min() >= 0 and x0s.max() + spatial <= 7


class TestSampleViewSets:
    @staticmethod
    def embed_by_mean(view, offsets):
        # stand-in embedding: flatten-pool each view to (N, 2)
        pooled = view.mean(axis=(2, 3, 4))
        return pooled[:, :2]

    def make_feats(self, n=3):
        return (Tensor(rng(1).normal(size=(n, 8, 4, 7, 7))),
                Tensor(rng(2).normal(size=(n, 8, 4, 7, 7))))

    def test_counts_m1_n2(self):
        f1, f2 = self.make_feats()
        plan = CropPlan(m=1, n=2, grid=(4, 7, 7))
        v1, v2 = sample_view_sets(f1, f2, plan, rng(3), self.embed_by_mean)
        for vs in (v1, v2):
            assert len(vs.views) == 4
            assert len(vs.crop_views()) == 3

    def test_zero_crops_leaves_only_large(self):
        f1, f2 = self.make_feats()
        plan = CropPlan(m=0, n=0, time_spec=[], grid=(4, 7, 7))
        v1, _ = sample_view_sets(f1, f2, plan, rng(3), self.embed_by_mean)
        assert [cls for cls, _ in v1.views] == ["large"]

    def test_grid_mismatch_rejected(self):
        f1, f2 = self.make_feats()
        plan = CropPlan(grid=(4, 9, 9), medium_size=6)
        with pytest.raises(ValueError, match="plan grid"):
            sample_view_sets(f1, f2, plan, rng(3), self.embed_by_mean)

    def test_viewset_invariant(self):
        with pytest.raises(ValueError, match="exactly one large"):
            ViewSet(1, [("medium", Tensor(np.zeros((2, 2))))])
