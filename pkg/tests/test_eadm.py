import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from evmaf.eadm import (DEFAULT_ALPHA, DtfPyramid, MaskingThresholds, adm_terms, compute_adm,
                        compute_dtf, compute_eadm, csf_weight, dtf_from_plane,
                        modify_masking_thresholds, zero_dtf)
from evmaf.errors import DimensionError

from conftest import crop, make_pair, sinusoid_frame, smooth_texture


@pytest.fixture
def texture(rng):
    return smooth_texture(rng, sigma=2.0)[:128, :128]


def test_csf_weights_positive_and_diagonal_lower():
    for lvl in range(1, 5):
        assert csf_weight(lvl, 1) > 0
        assert csf_weight(lvl, 2) < csf_weight(lvl, 1)


class TestAdm:
    def test_identity_is_one(self, texture):
        assert compute_adm(texture, texture) == 1.0

    def test_blur_staircase_decreasing(self, texture):
        vals = [compute_adm(texture, ndimage.gaussian_filter(texture, s))
                for s in (0.5, 1.0, 1.5, 2.0, 3.0)]
        assert all(b < a for a, b in zip(vals, vals[1:]))
        assert 0 <= vals[-1] < vals[0] < 1

    def test_score_in_unit_interval(self, texture, rng):
        for sigma in (0.01, 0.1, 0.5):
            v = compute_adm(texture, texture + rng.normal(0, sigma, texture.shape))
            assert 0.0 <= v <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adm_terms(np.zeros((64, 64)), np.zeros((64, 32)))


class TestThresholdModification:
    def _mt(self, rng, shape=(64, 64)):
        shapes = [(shape[0] >> k, shape[1] >> k) for k in range(1, 5)]
        return [rng.random(s) for s in shapes]

    def test_zero_dtf_is_identity(self, rng):
        mt = self._mt(rng)
        out = modify_masking_thresholds(mt, zero_dtf((64, 64)))
        for a, b in zip(out.base, out.new):
            np.testing.assert_array_equal(a, b)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 2.0))
    def test_monotone_in_dtf(self, seed, alpha):
        rng = np.random.default_rng(seed)
        mt = self._mt(rng)
        d1 = [rng.random(m.shape) for m in mt]
        d2 = [d + rng.random(d.shape) for d in d1]
        a = modify_masking_thresholds(mt, DtfPyramid(tuple(d1), alpha)).new
        b = modify_masking_thresholds(mt, DtfPyramid(tuple(d2), alpha)).new
        for x, y in zip(a, b):
            assert np.all(y <= x)

    def test_exponent_doubling(self, rng):
        mt = self._mt(rng)
        d = tuple(rng.random(m.shape) * 5 for m in mt)
        one = modify_masking_thresholds(mt, DtfPyramid(d, 0.4)).new
        two = modify_masking_thresholds(mt, DtfPyramid(d, 0.8)).new
        for m, x, y in zip(mt, one, two):
            np.testing.assert_allclose(y * m, x * x, rtol=1e-12)

    def test_accepts_threshold_object(self, rng):
        mt = MaskingThresholds(tuple(self._mt(rng)), ())
        out = modify_masking_thresholds(mt, zero_dtf((64, 64)))
        assert len(out.new) == 4

    def test_level_count_mismatch(self, rng):
        with pytest.raises(DimensionError):
            modify_masking_thresholds(self._mt(rng)[:3], zero_dtf((64, 64)))

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            modify_masking_thresholds(self._mt(rng), zero_dtf((128, 128)))

    def test_alpha_must_be_positive(self):
        with pytest.raises(ValueError):
            zero_dtf((64, 64), alpha=0.0)


class TestDtf:
    def test_first_frame_is_zero(self, texture):
        dtf = compute_dtf(texture, None)
        assert all(np.all(d == 0) for d in dtf.levels)

    def test_static_is_zero(self, texture):
        dtf = compute_dtf(texture, texture)
        assert all(np.all(d == 0) for d in dtf.levels)

    def test_translation_mostly_compensated(self):
        prev, curr = sinusoid_frame(), sinusoid_frame(dx=2, dy=1)
        dtf = compute_dtf(curr, prev)
        assert dtf.plane.mean() < 0.1 * np.abs(curr - prev).mean()

    def test_level_geometry_and_scale(self):
        dtf = dtf_from_plane(np.full((128, 128), 0.2), DEFAULT_ALPHA)
        assert [d.shape for d in dtf.levels] == [(64, 64), (32, 32), (16, 16), (8, 8)]
        for d in dtf.levels:
            np.testing.assert_allclose(d, 0.2, rtol=1e-9)


class TestEadm:
    def test_static_clip_equals_adm(self, texture, rng):
        test = texture + rng.normal(0, 0.03, texture.shape)
        assert compute_eadm((texture, test), texture) == compute_adm(texture, test)
        assert compute_eadm((texture, test)) == compute_adm(texture, test)

    def test_motion_relaxes_masking(self, rng):
        big = smooth_texture(rng, sigma=1.0)
        prev, curr = crop(big), crop(big, dx=3, dy=2)
        # unpredictable texture: compensation leaves a large residual
        curr = curr + rng.normal(0, 0.05, curr.shape)
        test = ndimage.gaussian_filter(curr, 1.0) + rng.normal(0, 0.02, curr.shape)
        plain = compute_adm(curr, test)
        enhanced = compute_eadm((curr, test), prev, alpha=1.0)
        assert enhanced > plain

    def test_frame_pair_input(self, texture):
        assert compute_eadm(make_pair(texture, texture)) == 1.0
