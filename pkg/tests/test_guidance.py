import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from talkdit.guidance import (
    FOLD_BRANCHES, GuidanceConfig, combine, sample_scales, select_fold, three_fold, two_fold,
)
from talkdit.numerics.rng import Rng

scale = st.floats(0, 10, allow_nan=False)


def _branches(seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(2, 3, 4)) for _ in range(3)]


def test_two_fold_examples():
    full, unc, _ = _branches()
    assert two_fold(full, unc, 0.0).tobytes() == full.tobytes()
    assert two_fold(2.0, 1.0, 1.0) == 3.0


def test_three_fold_examples():
    full, na, unc = _branches()
    assert np.abs(three_fold(full, na, unc, 0, 0) - full).max() <= 1e-12
    np.testing.assert_array_equal(three_fold(full, na, unc, 0, 0, "as-printed"), full + na)
    assert three_fold(3.0, 2.0, 1.0, 1.0, 2.0) == 6.0


def test_as_printed_coefficients_sum_to_two():
    ones = np.ones(3)
    for wa, wt in [(0, 0), (1.5, 1.0), (4.0, 0.3)]:
        np.testing.assert_allclose(three_fold(ones, ones, ones, wa, wt, "as-printed"), 2.0, atol=1e-12)
        np.testing.assert_allclose(three_fold(ones, ones, ones, wa, wt), 1.0, atol=1e-12)


def test_shape_and_variant_errors():
    with pytest.raises(ValueError):
        two_fold(np.zeros(2), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        three_fold(np.zeros(2), np.zeros(2), np.zeros(3), 1.0, 1.0)
    with pytest.raises(ValueError):
        three_fold(np.zeros(2), np.zeros(2), np.zeros(2), 1.0, 1.0, "other")


@settings(max_examples=60, deadline=None)
@given(wa=scale, wt=scale, c=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_shift_invariance(wa, wt, c, seed):
    full, na, unc = _branches(seed)
    np.testing.assert_allclose(two_fold(full + c, unc + c, wa), two_fold(full, unc, wa) + c,
                               atol=1e-9 * (1 + wa))
    np.testing.assert_allclose(three_fold(full + c, na + c, unc + c, wa, wt),
                               three_fold(full, na, unc, wa, wt) + c, atol=1e-9 * (1 + wa + wt))


@settings(max_examples=60, deadline=None)
@given(wa=scale, wt=scale)
def test_equal_branches_are_fixed_points(wa, wt):
    v = np.full(4, 0.37)
    np.testing.assert_allclose(two_fold(v, v, wa), v, atol=1e-12 * (1 + wa))
    np.testing.assert_allclose(three_fold(v, v, v, wa, wt), v, atol=1e-12 * (1 + wa + wt))


def test_select_fold():
    assert select_fold(0.9) == "two-fold"
    assert select_fold(0.5) == "three-fold"
    assert select_fold(0.75) == "two-fold"
    assert select_fold(np.nextafter(0.75, 0)) == "three-fold"
    assert select_fold(0.0) == "three-fold" and select_fold(1.0) == "two-fold"
    with pytest.raises(ValueError):
        select_fold(1.01)
    with pytest.raises(ValueError):
        select_fold(-0.1)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0, 1), b=st.floats(0, 1))
def test_select_fold_monotone(a, b):
    lo, hi = sorted((a, b))
    order = {"three-fold": 0, "two-fold": 1}
    assert order[select_fold(lo)] <= order[select_fold(hi)]


def test_combine_dispatches_on_fold():
    full, na, unc = _branches(1)
    out = {"full": full, "no_audio": na, "uncond": unc}
    assert combine("two-fold", out, 1.2, 0.7).tobytes() == two_fold(full, unc, 1.2).tobytes()
    assert combine("three-fold", out, 1.2, 0.7).tobytes() == three_fold(full, na, unc, 1.2, 0.7).tobytes()
    assert FOLD_BRANCHES["two-fold"] == ("full", "uncond")


def test_sample_scales_degenerate_cases():
    assert sample_scales(GuidanceConfig(audio_scale=2.5, text_scale=1.25, std_fraction=0.0), Rng(0, "g")) \
        == (2.5, 1.25)
    assert sample_scales(GuidanceConfig(audio_scale=0.0, text_scale=0.0), Rng(0, "g")) == (0.0, 0.0)


def test_sample_scales_monte_carlo_mean():
    cfg = GuidanceConfig(audio_scale=5.0, text_scale=5.0)
    rng = Rng(11, "cfg-mc")
    draws = np.array([sample_scales(cfg, rng) for _ in range(10_000)])
    assert np.abs(draws.mean(0) - 5.0).max() < 0.02
    assert np.abs(draws.std(0) - 0.5).max() < 0.02


def test_sample_scales_deterministic_and_clamped():
    cfg = GuidanceConfig(audio_scale=1.0, std_fraction=3.0)
    a = [sample_scales(cfg, Rng(2, "c", i)) for i in range(200)]
    assert a == [sample_scales(cfg, Rng(2, "c", i)) for i in range(200)]
    assert min(w for w, _ in a) == 0.0


def test_config_validation():
    for kw in [dict(audio_scale=-1), dict(threshold=1.0), dict(threshold=0.0), dict(std_fraction=-0.1),
               dict(variant="sum2")]:
        with pytest.raises(ValueError):
            GuidanceConfig(**kw)
