from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from s2sdown import oracle, verify
from s2sdown.grid import DimensionError

finite = st.floats(-50, 50, allow_nan=False, width=64)


def ens_and_obs(max_m=6):
    return st.tuples(st.integers(1, 4), st.integers(1, max_m), st.integers(1, 4)).flatmap(
        lambda s: st.tuples(arrays(np.float64, (s[0], 1, s[1], s[2]), elements=finite),
                            arrays(np.float64, (s[0], 1, s[2]), elements=finite)))


@settings(max_examples=80, deadline=None)
@given(ens_and_obs())
def test_crps_matches_pairwise_oracle(pair):
    ens, y = pair
    np.testing.assert_allclose(verify.crps_discrete(y, ens), oracle.loop_crps(y, ens), rtol=1e-12, atol=1e-10)


@settings(max_examples=80, deadline=None)
@given(ens_and_obs())
def test_crps_bounds(pair):
    ens, y = pair
    c = verify.crps_per_sample(y, ens)
    mae_members = np.abs(ens - y[:, :, None, :]).mean(axis=2)
    assert np.all(c >= -1e-9)
    assert np.all(c <= mae_members + 1e-9)
    # CRPS of the ensemble never exceeds the absolute error of its mean by more than its spread term
    assert np.all(c <= np.abs(ens.mean(axis=2) - y) + np.abs(ens - ens.mean(axis=2, keepdims=True)).mean(axis=2) + 1e-9)


@settings(max_examples=40, deadline=None)
@given(ens_and_obs(), st.floats(-10, 10), st.floats(0.1, 10))
def test_crps_affine_equivariance(pair, shift, scale):
    ens, y = pair
    a = verify.crps_discrete(y * scale + shift, ens * scale + shift)
    np.testing.assert_allclose(a, scale * verify.crps_discrete(y, ens), rtol=1e-9, atol=1e-8)


def test_quantile_downsample_levels_and_identity(rng):
    ens = rng.normal(size=(2, 1, 40, 3))
    q = verify.quantile_downsample(ens, 4)
    assert q.shape == (2, 1, 4, 3)
    assert np.all(np.diff(q, axis=2) >= 0)
    same = verify.quantile_downsample(ens, 40)
    np.testing.assert_allclose(same, np.sort(ens, axis=2))
    x = np.arange(1.0, 11.0).reshape(1, 1, 10, 1)
    np.testing.assert_allclose(verify.quantile_downsample(x, 2)[0, 0, :, 0], [3.0, 8.0])
    with pytest.raises(ValueError):
        verify.quantile_downsample(ens, 41)


def test_spread_and_ssr(rng):
    ens = rng.normal(size=(50, 2, 8, 3))
    y = rng.normal(size=(50, 2, 3))
    sp = verify.spread(ens)
    np.testing.assert_allclose(sp, np.sqrt(ens.var(axis=2, ddof=1).mean(axis=0)))
    np.testing.assert_allclose(verify.ssr(y, ens), oracle.loop_ssr(y, ens))
    lit = verify.spread(ens, literal=True)
    np.testing.assert_allclose(lit, np.sqrt((ens.var(axis=2, ddof=1) ** 2).mean(axis=0)))
    perfect = np.repeat(y[:, :, None], 3, axis=2)
    assert np.all(np.isinf(verify.ssr(y, perfect)))
    with pytest.raises(ValueError, match="2 members"):
        verify.spread(ens[:, :, :1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_ssr_grows_with_member_spread(seed):
    rng = np.random.default_rng(seed)
    centre = rng.normal(size=(30, 1, 1, 4))
    noise = rng.normal(size=(30, 1, 6, 4))
    noise -= noise.mean(axis=2, keepdims=True)
    y = rng.normal(size=(30, 1, 4))
    values = [verify.ssr(y, centre + d * noise) for d in (0.2, 0.5, 1.0, 2.0)]
    for a, b in zip(values, values[1:]):
        assert np.all(b > a)


def test_skill_scores():
    np.testing.assert_allclose(verify.msss(np.array([1.0, 2.0]), np.array([2.0, 2.0])), [0.5, 0.0])
    assert np.isnan(verify.crpss(np.array([1.0]), np.array([0.0])))[0]


def test_ssim_components(rng):
    y = rng.normal(5, 1, size=(4, 2, 12))
    perfect = y[:, :, None, :].repeat(3, axis=2)
    r = verify.ssim(y, perfect)
    np.testing.assert_allclose([r.ssim, r.luminance, r.contrast, r.structure], 1.0, atol=1e-12)
    anti = 2 * y.mean(axis=2, keepdims=True)[:, :, None, :] - perfect
    assert np.all(verify.ssim(y, anti).structure < -0.99)
    flat = np.zeros((4, 2, 1, 12))
    assert verify.ssim(np.zeros((4, 2, 12)), flat).flagged.all()
    ens = rng.normal(5, 1, size=(4, 2, 3, 12))
    np.testing.assert_allclose(np.stack([verify.ssim(y, ens).luminance, verify.ssim(y, ens).contrast,
                                         verify.ssim(y, ens).structure, verify.ssim(y, ens).ssim]),
                               oracle.loop_ssim(y, ens), atol=1e-12)


def test_shape_mismatch_raises(rng):
    with pytest.raises(DimensionError):
        verify.crps_discrete(rng.normal(size=(3, 1, 4)), rng.normal(size=(3, 1, 2, 5)))
    with pytest.raises(DimensionError):
        verify.mse_deterministic(np.zeros((2, 3)), np.zeros((3, 3)))


def test_score_table_rejects_bad_shapes(rng):
    from conftest import small_grid

    with pytest.raises(DimensionError):
        verify.ScoreTable("x", np.zeros((2, 5)), small_grid())
    with pytest.raises(DimensionError):
        verify.ScoreTable("x", np.zeros((2, 12)), small_grid(), leads=(1,))
