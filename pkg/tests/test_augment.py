import numpy as np
import pytest

from rsslab import augment
from rsslab.augment import AugmentSpec, StyleJitterLaw, sample_views, style_jitter
from rsslab.data import ImageBatch
from rsslab.errors import InvalidSpec


def random_batch(n=3, h=16, w=16, ch=3, seed=0):
    rng = np.random.default_rng(seed)
    return ImageBatch(rng.uniform(size=(n, h, w, ch)))


class TestSpec:
    def test_inverted_bounds_rejected(self):
        with pytest.raises(InvalidSpec):
            AugmentSpec(scales=(0.9, 0.2))
        with pytest.raises(InvalidSpec):
            AugmentSpec(ratios=(2.0, 0.5))
        with pytest.raises(InvalidSpec):
            AugmentSpec(mode="mosaic")
        with pytest.raises(InvalidSpec):
            AugmentSpec(crop_count=0)


class TestCentral:
    def test_identity_when_sizes_match(self):
        batch = random_batch()
        spec = AugmentSpec(mode="central", crop_count=1, out_size=(16, 16))
        views = sample_views(batch, spec, seed=7)
        assert len(views) == 1
        assert views[0].pixels.tobytes() == batch.pixels.tobytes()

    def test_resizes_when_sizes_differ(self):
        batch = random_batch(h=8, w=8)
        spec = AugmentSpec(mode="central", crop_count=1, out_size=(16, 16))
        views = sample_views(batch, spec, seed=7)
        assert views[0].pixels.shape == (3, 16, 16, 3)
        # corners are preserved by corner-aligned resize
        assert np.allclose(views[0].pixels[:, 0, 0], batch.pixels[:, 0, 0])
        assert np.allclose(views[0].pixels[:, -1, -1], batch.pixels[:, -1, -1])


class TestCropSampling:
    def test_deterministic(self):
        batch = random_batch()
        spec = AugmentSpec(mode="crop", scales=(0.2, 1.0), crop_count=4)
        a = sample_views(batch, spec, seed=5)
        b = sample_views(batch, spec, seed=5)
        for va, vb in zip(a, b):
            assert va.pixels.tobytes() == vb.pixels.tobytes()

    def test_seed_changes_views(self):
        batch = random_batch()
        spec = AugmentSpec(mode="crop", scales=(0.2, 0.8), crop_count=4)
        a = sample_views(batch, spec, seed=5)
        b = sample_views(batch, spec, seed=6)
        assert a[0].pixels.tobytes() != b[0].pixels.tobytes()

    def test_patch_quarter_area_on_32(self):
        batch = random_batch(h=32, w=32)
        spec = AugmentSpec(mode="patch", scales=(0.25, 0.25), ratios=(1.0, 1.0),
                           crop_count=6, out_size=(32, 32))
        for view in sample_views(batch, spec, seed=3):
            assert (view.rects[:, 2] == 16).all()
            assert (view.rects[:, 3] == 16).all()

    def test_fixed_scale_ratio_relationship_within_rounding(self):
        # h*w tracks area*scale and w/h tracks ratio up to integer rounding
        batch = random_batch(h=24, w=24, n=6)
        spec = AugmentSpec(mode="crop", scales=(0.4, 0.4), ratios=(1.5, 1.5),
                           crop_count=4, out_size=(8, 8))
        target = 0.4 * 24 * 24
        for view in sample_views(batch, spec, seed=8):
            h, w = view.rects[:, 2], view.rects[:, 3]
            expect_w = np.round(np.sqrt(target * 1.5))
            expect_h = np.round(np.sqrt(target / 1.5))
            assert (w == expect_w).all()
            assert (h == expect_h).all()

    def test_rects_inside_bounds(self):
        batch = random_batch(h=16, w=16, n=8)
        spec = AugmentSpec(mode="crop", scales=(0.08, 1.0), ratios=(0.75, 1.3),
                           crop_count=8)
        for view in sample_views(batch, spec, seed=1):
            top, left, h, w = view.rects.T
            assert (top >= 0).all() and (left >= 0).all()
            assert (top + h <= 16).all() and (left + w <= 16).all()
            assert (h >= 1).all() and (w >= 1).all()

    def test_slots_use_independent_subseeds(self):
        batch = random_batch()
        small = AugmentSpec(mode="crop", scales=(0.2, 0.9), crop_count=3)
        large = AugmentSpec(mode="crop", scales=(0.2, 0.9), crop_count=5)
        a = sample_views(batch, small, seed=9)
        b = sample_views(batch, large, seed=9)
        for s in range(3):
            assert a[s].pixels.tobytes() == b[s].pixels.tobytes()

    def test_views_stay_in_unit_interval(self):
        batch = random_batch(n=4)
        law = StyleJitterLaw(scale_range=(0.7, 1.3), shift_range=(-0.2, 0.2))
        spec = AugmentSpec(mode="crop", scales=(0.1, 1.0), crop_count=6, jitter=law)
        for view in sample_views(batch, spec, seed=2):
            assert view.pixels.min() >= 0.0 and view.pixels.max() <= 1.0

    def test_gather_tables_reproduce_views(self):
        # the recorded sparse map must agree with the sampled pixels
        batch = random_batch(n=2, h=12, w=10)
        spec = AugmentSpec(mode="crop", scales=(0.3, 0.9), crop_count=3,
                           out_size=(6, 5))
        for view in sample_views(batch, spec, seed=4):
            idx, wts = view.flat_gather_tables(channels=3)
            flat = batch.pixels.reshape(2, -1)
            rebuilt = np.stack([
                (flat[j][idx[j]] * wts[j]).sum(axis=1) for j in range(2)])
            assert np.allclose(rebuilt.reshape(view.pixels.shape), view.pixels)


class TestStyleJitter:
    def test_identity_law(self):
        batch = random_batch()
        out = style_jitter(batch, StyleJitterLaw(), seed=0)
        assert out.pixels.tobytes() == batch.pixels.tobytes()

    def test_saturating_shift(self):
        batch = random_batch()
        law = StyleJitterLaw(shift_range=(2.0, 2.0))
        out = style_jitter(batch, law, seed=0)
        assert (out.pixels == 1.0).all()

    def test_deterministic(self):
        batch = random_batch()
        law = StyleJitterLaw(scale_range=(0.8, 1.2), shift_range=(-0.1, 0.1))
        a = style_jitter(batch, law, seed=3)
        b = style_jitter(batch, law, seed=3)
        assert a.pixels.tobytes() == b.pixels.tobytes()

    def test_labels_pass_through(self):
        batch = ImageBatch(np.full((2, 4, 4, 1), 0.5), np.array([1, 0]))
        out = style_jitter(batch, StyleJitterLaw(shift_range=(-0.1, 0.1)), seed=1)
        assert np.array_equal(out.labels, batch.labels)
