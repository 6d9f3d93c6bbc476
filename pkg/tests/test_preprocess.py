import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfsfusion import preprocess as P
from pfsfusion.errors import ParameterError, ValidationError


def vol(arr, modality="PET", **kw):
    return P.Volume(modality, np.asarray(arr, np.float32), **kw)


def sorted_percentile(values, q):
    s = np.sort(np.asarray(values, np.float64).ravel())
    pos = q / 100 * (s.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, s.size - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


class TestHarmonize:
    def test_identity(self):
        v = vol(np.arange(8.0).reshape(2, 2, 2))
        np.testing.assert_array_equal(P.harmonize(v).voxels, v.voxels)

    def test_arithmetic(self):
        v = vol(np.full((2, 2, 2), 3.0), rescale_slope=2.0, rescale_intercept=-1.0)
        h = P.harmonize(v)
        assert np.all(h.voxels == 5.0)
        assert (h.rescale_slope, h.rescale_intercept) == (1.0, 0.0)

    @given(st.floats(-5, 5).filter(lambda s: abs(s) > 1e-3), st.floats(-100, 100), st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_idempotent_after_reset(self, slope, intercept, seed):
        v = vol(np.random.default_rng(seed).normal(size=(3, 4, 5)), rescale_slope=slope, rescale_intercept=intercept)
        once = P.harmonize(v)
        np.testing.assert_array_equal(P.harmonize(once).voxels, once.voxels)

    def test_zero_slope(self):
        with pytest.raises(ValidationError):
            P.harmonize(vol(np.ones((2, 2, 2)), rescale_slope=0.0))


class TestClip:
    def test_constant_unchanged(self):
        v = vol(np.full((4, 4, 4), 7.0))
        np.testing.assert_array_equal(P.clip_artifacts(v).voxels, v.voxels)

    def test_outlier_reduced(self):
        a = np.ones((10, 12, 14), np.float32)
        a[3, 4, 5] = 1e6
        out = P.clip_artifacts(vol(a)).voxels
        assert out[3, 4, 5] == pytest.approx(sorted_percentile(a, 99.9), rel=1e-6)
        assert out[3, 4, 5] < 1e6

    def test_outlier_in_small_volume_uses_interpolated_percentile(self):
        a = np.ones((5, 5, 5), np.float32)
        a[0, 0, 0] = 1e6
        out = P.clip_artifacts(vol(a)).voxels
        assert out[0, 0, 0] == pytest.approx(sorted_percentile(a, 99.9), rel=1e-5)

    def test_full_range_identity(self):
        v = vol(np.random.default_rng(0).normal(size=(4, 5, 6)))
        np.testing.assert_array_equal(P.clip_artifacts(v, 0, 100).voxels, v.voxels)

    def test_bad_order(self):
        with pytest.raises(ParameterError):
            P.clip_artifacts(vol(np.ones((2, 2, 2))), 50, 40)


class TestNormalizer:
    def test_constant_floor(self):
        n = P.fit_normalizer([vol(np.full((3, 3, 3), 5.0))], "PET")
        assert n.mean == 5.0 and n.std == P.STD_FLOOR

    def test_two_volumes_mean(self):
        n = P.fit_normalizer([vol(np.zeros((2, 3, 4))), vol(np.full((2, 3, 4), 2.0))], "PET")
        assert n.mean == 1.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        vols = [vol(rng.normal(40, 12, size=s), "CT") for s in [(3, 4, 5), (6, 2, 2), (5, 5, 5)]]
        pooled = np.concatenate([v.voxels.astype(np.float64).ravel() for v in vols])
        mean = pooled.sum() / pooled.size
        std = np.sqrt(((pooled - mean) ** 2).sum() / pooled.size)
        n = P.fit_normalizer(vols, "CT", ids=["a", "b", "c"])
        assert n.mean == pytest.approx(mean, rel=1e-5)
        assert n.std == pytest.approx(std, rel=1e-5)
        assert n.fit_on == ("a", "b", "c")

    def test_apply_identity(self):
        v = vol(np.random.default_rng(1).normal(size=(3, 3, 3)))
        np.testing.assert_array_equal(P.apply_normalizer(v, P.Normalizer("PET", 0.0, 1.0)).voxels, v.voxels)

    def test_apply_to_fit_set(self):
        rng = np.random.default_rng(4)
        vols = [vol(rng.gamma(2, 3, size=(4, 5, 6))) for _ in range(3)]
        n = P.fit_normalizer(vols, "PET")
        z = np.concatenate([P.apply_normalizer(v, n).voxels.astype(np.float64).ravel() for v in vols])
        assert abs(z.mean()) < 1e-4
        assert abs(z.std() - 1) < 1e-4

    def test_constant_stays_constant(self):
        out = P.apply_normalizer(vol(np.full((2, 2, 2), 3.0)), P.Normalizer("PET", 1.0, 2.0)).voxels
        assert np.all(out == out.flat[0])

    def test_errors(self):
        with pytest.raises(ValidationError):
            P.fit_normalizer([], "PET")
        with pytest.raises(ValidationError):
            P.fit_normalizer([vol(np.ones((2, 2, 2)), "CT")], "PET")
        with pytest.raises(ValidationError):
            P.apply_normalizer(vol(np.ones((2, 2, 2)), "CT"), P.Normalizer("PET", 0.0, 1.0))


class TestResize:
    def test_same_shape_identity(self):
        v = vol(np.random.default_rng(0).normal(size=(5, 4, 3)))
        np.testing.assert_allclose(P.resize_volume(v, (5, 4, 3)).voxels, v.voxels, atol=1e-6)

    def test_constant(self):
        out = P.resize_volume(vol(np.full((6, 5, 4), 2.5)), (9, 3, 7)).voxels
        assert np.allclose(out, 2.5, atol=0, rtol=1e-7)

    def test_linear_ramp_preserved(self):
        d, h, w = 96, 64, 64
        ramp = np.broadcast_to(np.arange(d, dtype=np.float32)[:, None, None] * 0.5 + 3.0, (d, h, w))
        out = P.resize_volume(vol(ramp), (75, 50, 50))
        assert out.shape == (75, 50, 50)
        expected = 3.0 + 0.5 * np.arange(75) * (d - 1) / 74
        np.testing.assert_allclose(out.voxels[:, 7, 11], expected, rtol=1e-6)
        np.testing.assert_allclose(out.voxels, np.broadcast_to(expected[:, None, None], (75, 50, 50)), rtol=1e-6)

    def test_spacing_rescaled(self):
        out = P.resize_volume(vol(np.zeros((11, 6, 6)), spacing_mm=(2.0, 1.0, 1.0)), (6, 11, 6))
        assert out.spacing_mm == pytest.approx((4.0, 0.5, 1.0))

    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_bounds_preserved(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=tuple(rng.integers(2, 7, size=3)))
        out = P.resize_volume(vol(a), tuple(rng.integers(2, 9, size=3))).voxels
        assert out.min() >= np.float32(a.min()) - 1e-6 and out.max() <= np.float32(a.max()) + 1e-6

    def test_too_small(self):
        with pytest.raises(ValidationError):
            P.resize_volume(vol(np.ones((1, 4, 4))))


def test_roundtrip_io(tmp_path):
    v = vol(np.random.default_rng(0).normal(size=(3, 4, 5)), "CT", spacing_mm=(2.0, 1.5, 1.5),
            rescale_slope=0.5, rescale_intercept=-1024.0)
    P.write_volume(tmp_path / "x.vol", v)
    back = P.read_volume(tmp_path / "x.vol")
    np.testing.assert_array_equal(back.voxels, v.voxels)
    assert (back.modality, back.spacing_mm, back.rescale_slope, back.rescale_intercept) == \
        ("CT", (2.0, 1.5, 1.5), 0.5, -1024.0)


def test_pipeline_deterministic():
    rng = np.random.default_rng(9)
    v = vol(rng.normal(size=(8, 9, 10)), rescale_slope=1.7, rescale_intercept=2.0)
    n = P.Normalizer("PET", 0.3, 1.1)
    a = P.preprocess(v, n, (5, 5, 5)).voxels
    b = P.preprocess(v, n, (5, 5, 5)).voxels
    assert a.tobytes() == b.tobytes()


def test_moments_merge_matches_two_pass():
    rng = np.random.default_rng(11)
    vols = [vol(rng.normal(rng.uniform(-50, 50), rng.uniform(1, 30), size=(4, 5, 6)), "CT") for _ in range(6)]
    direct = P.fit_normalizer(vols, "CT", ids=list("abcdef"))
    merged = P.normalizer_from_moments([P.volume_moments(v) for v in vols], "CT", ids=list("abcdef"))
    assert merged.mean == pytest.approx(direct.mean, rel=1e-12)
    assert merged.std == pytest.approx(direct.std, rel=1e-12)
    assert merged.fit_on == direct.fit_on
    with pytest.raises(ValidationError):
        P.normalizer_from_moments([P.volume_moments(vols[0])], "PET")
