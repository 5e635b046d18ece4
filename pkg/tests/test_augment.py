import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multimix import augment as A
from multimix.augment import TransformSpec

IDENTITY_SPECS = {
    "identity": None,
    "crop32": (0, 0),
    "brightness": 1.0,
    "contrast": 1.0,
    "sharpness": 1.0,
    "posterize": 8,
    "solarize": 1.0,
    "rotate": 0.0,
    "shearX": 0.0,
    "shearY": 0.0,
    "translateX": 0.0,
    "translateY": 0.0,
}


def image(seed=0, size=16):
    # 8-bit grid values spanning [0, 1], as decoded images are
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, size=(size, size)) / 255.0
    x.flat[0], x.flat[1] = 0.0, 1.0
    return x


class FixedRng:
    """Stand-in generator returning scripted draws."""

    def __init__(self, randoms=(), integers=()):
        self._r = list(randoms)
        self._i = list(integers)

    def random(self):
        return self._r.pop(0)

    def integers(self, lo, hi=None, size=None):
        if size is None:
            return self._i.pop(0)
        return np.array([self._i.pop(0) for _ in range(size)])

    def choice(self, n, size, replace):
        return np.array([self._i.pop(0) for _ in range(size)])


class TestIdentityElements:
    @pytest.mark.parametrize("kind", sorted(IDENTITY_SPECS))
    def test_identity_magnitude(self, kind):
        x = image(1)
        out = A.apply_transform(x, TransformSpec(kind, IDENTITY_SPECS[kind]))
        np.testing.assert_array_equal(out, x)

    def test_hflip_involution(self):
        x = image(2)
        twice = A.apply_transform(A.apply_transform(x, TransformSpec("hflip")), TransformSpec("hflip"))
        np.testing.assert_array_equal(twice, x)

    def test_autocontrast_fixed_on_full_range(self):
        x = image(3)
        np.testing.assert_array_equal(A.apply_transform(x, TransformSpec("autocontrast")), x)

    def test_equalize_fixed_on_uniform_histogram(self):
        x = np.arange(256).reshape(16, 16) / 255.0
        np.testing.assert_array_equal(A.apply_transform(x, TransformSpec("equalize")), x)


class TestSemantics:
    def test_posterize_quantization_oracle(self):
        x = np.random.default_rng(4).random((16, 16))
        out = A.apply_transform(x, TransformSpec("posterize", 4))
        np.testing.assert_array_equal(out, np.floor(x * 15) / 15)

    def test_solarize_inverts_above_threshold(self):
        x = np.array([[0.2, 0.6], [0.8, 1.0]])
        np.testing.assert_allclose(A.apply_transform(x, TransformSpec("solarize", 0.7)), [[0.2, 0.6], [0.2, 0.0]])

    def test_brightness_scales_and_clips(self):
        x = np.array([[0.2, 0.8]])
        np.testing.assert_allclose(A.apply_transform(x, TransformSpec("brightness", 1.5)), [[0.3, 1.0]])

    def test_contrast_blends_to_mean(self):
        x = np.array([[0.0, 1.0]])
        np.testing.assert_allclose(A.apply_transform(x, TransformSpec("contrast", 0.5)), [[0.25, 0.75]])

    def test_translate_shifts_with_zero_fill(self):
        x = np.arange(1, 17, dtype=float).reshape(4, 4) / 16
        out = A.apply_transform(x, TransformSpec("translateX", 0.25))
        np.testing.assert_array_equal(out[:, 0], 0.0)
        np.testing.assert_array_equal(out[:, 1:], x[:, :3])

    def test_rotate_beyond_range_rejected(self):
        with pytest.raises(ValueError):
            TransformSpec("rotate", 90.0).validate()

    def test_rotate_small_angle_keeps_centre(self):
        x = np.zeros((9, 9))
        x[4, 4] = 1.0
        out = A.apply_transform(x, TransformSpec("rotate", 25.0))
        assert out[4, 4] == 1.0 and out.sum() == 1.0

    def test_pad_crop_offset(self):
        x = image(5, 64)
        p = A.crop_pad(64)
        assert p == 8
        out = A.pad_crop(x, 3, -2)
        np.testing.assert_array_equal(out[:-3, 2:], x[3:, :-2])
        np.testing.assert_array_equal(out[-3:], 0.0)

    def test_crop_pad_scaling(self):
        assert A.crop_pad(256) == 32
        assert A.crop_pad(32) == 4

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            A.apply_transform(image(), TransformSpec("cutout"))

    def test_out_of_range_magnitude(self):
        with pytest.raises(ValueError):
            A.apply_transform(image(), TransformSpec("translateX", 0.5))


class TestPipelines:
    def test_weak_forced_identity(self):
        x = image(6)
        p = A.crop_pad(16)
        rng = FixedRng(randoms=[0.9], integers=[0, 0])  # no flip, centred crop
        assert p == 2
        np.testing.assert_array_equal(A.weak_augment(x, rng), x)

    def test_weak_forced_flip(self):
        x = image(7)
        rng = FixedRng(randoms=[0.1], integers=[0, 0])
        np.testing.assert_array_equal(A.weak_augment(x, rng), x[:, ::-1])

    def test_strong_identity_only(self):
        x = image(8)
        out, applied = A.strong_augment(x, np.random.default_rng(0), pool=("identity",))
        assert [s.kind for s in applied] == ["identity"]
        np.testing.assert_array_equal(out, x)

    def test_strong_distinct_kinds_and_bounds(self):
        x = image(9)
        seen = set()
        for seed in range(200):
            _, applied = A.strong_augment(x, np.random.default_rng(seed))
            kinds = [s.kind for s in applied]
            assert 1 <= len(kinds) <= 4
            assert len(set(kinds)) == len(kinds)
            seen.add(len(kinds))
            for s in applied:
                s.validate()
                if s.kind == "rotate":
                    assert abs(s.magnitude) <= 30.0
                if s.kind == "translateX":
                    assert abs(s.magnitude) <= 0.3
        assert seen == {1, 2, 3, 4}

    def test_sample_rng_keyed(self):
        a = A.sample_rng(0, 3, 1, 2).random()
        assert a == A.sample_rng(0, 3, 1, 2).random()
        assert a != A.sample_rng(0, 3, 1, 3).random()


class TestProperties:
    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([16, 32]))
    def test_range_shape_determinism(self, seed, size):
        x = np.random.default_rng(seed).random((size, size))
        a = A.augment_pair(x, A.sample_rng(seed, 0))
        b = A.augment_pair(x, A.sample_rng(seed, 0))
        for out in (a.x_w, a.x_g):
            assert out.shape == x.shape
            assert out.min() >= 0.0 and out.max() <= 1.0
        np.testing.assert_array_equal(a.x_w, b.x_w)
        np.testing.assert_array_equal(a.x_g, b.x_g)

    @settings(max_examples=80, deadline=None)
    @given(st.sampled_from(A.POOL), st.integers(0, 2**31 - 1))
    def test_every_kind_preserves_range(self, kind, seed):
        rng = np.random.default_rng(seed)
        x = rng.random((16, 16)).astype(np.float32)
        out = A.apply_transform(x, A.sample_spec(kind, 16, rng))
        assert out.dtype == np.float32 and out.shape == (16, 16)
        assert 0.0 <= out.min() and out.max() <= 1.0
