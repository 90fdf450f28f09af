import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftkit.core import RngStream
from liftkit.distortions import (
    KINDS,
    REGROT_MEANS,
    DistortionSpec,
    apply,
    estimate_lpe_ratio,
    lpe_constant,
    lpe_ratio,
    make_context,
    region_index,
    sample_context,
)


def test_spec_defaults_and_validation():
    spec = DistortionSpec(kind="scale", lam=2.0)
    assert spec.scale_floor == 0.5
    assert DistortionSpec(kind="blend").sigma == 0.2
    assert DistortionSpec(kind="rot").sigma == 0.5
    with pytest.raises(ValueError):
        DistortionSpec(kind="warp")
    with pytest.raises(ValueError):
        DistortionSpec(kind="scale", scale_floor=1.5, lam=1.0)
    with pytest.raises(ValueError):
        DistortionSpec(kind="regrot", region_means=(0.0, 1.0))
    with pytest.raises(ValueError):
        DistortionSpec(kind="blend", sigma=-0.1)


def test_sample_context_examples():
    ctx = sample_context(DistortionSpec(kind="blend", sigma=0.0), 3, RngStream(0))
    np.testing.assert_array_equal(ctx.payload, np.zeros((3, 3)))
    s, a = np.array([0.1, 0.2, 0.3]), np.array([0.3, -0.2, 0.1])
    np.testing.assert_array_equal(apply(DistortionSpec(kind="blend", sigma=0.0), s, a, ctx, np.zeros(3)), s + a)

    spec = DistortionSpec(kind="regrot")
    angles = np.array([sample_context(spec, 5, RngStream(1).child(k)).payload for k in range(4000)])
    assert angles.shape == (4000, 4)
    np.testing.assert_allclose(angles.mean(axis=0), REGROT_MEANS, atol=4 * 0.2 / math.sqrt(4000))


def test_blend_context_mean_near_zero():
    spec = DistortionSpec(kind="blend", sigma=0.2)
    draws = np.array([sample_context(spec, 5, RngStream(7).child(k)).payload for k in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0)) <= 3 * 0.2 / 100)


def test_sin_context_is_uniform_in_range():
    spec = DistortionSpec(kind="sin")
    draws = np.array([float(sample_context(spec, 2, RngStream(3).child(k)).payload) for k in range(2000)])
    assert draws.min() >= 0 and draws.max() <= 0.3


@settings(max_examples=200)
@given(st.sampled_from(KINDS), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_zero_action_is_fixed_point(kind, d, seed):
    rng = RngStream(seed)
    spec = DistortionSpec(kind=kind)
    W = sample_context(spec, d, rng.child("ctx"))
    s = rng.uniform(-1, 1, size=d)
    np.testing.assert_array_equal(apply(spec, s, np.zeros(d), W, rng.uniform(-0.5, 0.5, size=d)), s)


def test_apply_examples():
    spec = DistortionSpec(kind="rot")
    W = make_context("rot", math.pi / 2, 2)
    np.testing.assert_allclose(apply(spec, np.zeros(2), np.array([1.0, 0.0]), W, np.zeros(2)), [0.0, 1.0], atol=1e-15)

    scale = DistortionSpec(kind="scale", lam=1.0)
    none = make_context("scale", [], 2)
    # far from the target the factor saturates at lam, close to it at the floor
    np.testing.assert_allclose(apply(scale, np.array([1.0, 1.0]), np.array([0.1, 0.0]), none, np.zeros(2)), [1.1, 1.0])
    np.testing.assert_allclose(apply(scale, np.array([0.1, 0.0]), np.array([0.1, 0.0]), none, np.zeros(2)),
                               [0.1 + 0.025, 0.0])


def test_apply_errors():
    spec = DistortionSpec(kind="blend")
    W = make_context("blend", np.zeros((2, 2)), 2)
    with pytest.raises(ValueError):
        apply(spec, np.zeros(2), np.zeros(3), W, np.zeros(2))
    with pytest.raises(ValueError):
        apply(DistortionSpec(kind="rot"), np.zeros(2), np.zeros(2), W, np.zeros(2))
    regrot = DistortionSpec(kind="regrot")
    with pytest.raises(ValueError):
        apply(regrot, np.zeros(1), np.ones(1), make_context("regrot", np.zeros(4), 1), np.zeros(1))
    with pytest.raises(ValueError):
        make_context("blend", np.zeros((3, 3)), 2)
    with pytest.raises(ValueError):
        make_context("sin", np.inf, 2)


def test_region_index_partition():
    assert region_index(np.array([0.0, 0.0])) == 0
    assert region_index(np.array([-0.1, 0.0])) == 1
    assert region_index(np.array([0.0, -0.1])) == 2
    assert region_index(np.array([-0.1, -0.1, 5.0])) == 3


def test_lpe_constants():
    assert lpe_constant(DistortionSpec(kind="blend"), 3) == 0
    assert lpe_constant(DistortionSpec(kind="rot"), 3) == 0
    assert lpe_constant(DistortionSpec(kind="scale", lam=1.0), 2) == 2
    assert lpe_constant(DistortionSpec(kind="regrot"), 2) == 2
    assert lpe_constant(DistortionSpec(kind="sin", sigma=0.3), 4) == pytest.approx(0.6, abs=1e-15)
    assert math.isinf(lpe_constant(DistortionSpec(kind="sqrt"), 2))


@settings(max_examples=100)
@given(st.sampled_from(["blend", "rot"]), st.integers(2, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_linear_kinds_are_exact_on_chains(kind, d, k, seed):
    rng = RngStream(seed)
    spec = DistortionSpec(kind=kind)
    W = sample_context(spec, d, rng.child("ctx"))
    gap, _, _ = lpe_ratio(spec, rng.uniform(-1, 1, size=d), rng.ball(d, 1.0, size=k), W, np.zeros(d))
    assert gap <= 1e-9


@pytest.mark.parametrize("c", [0.1, 0.5, 1.0])
def test_sqrt_gap_closed_form(c):
    spec = DistortionSpec(kind="sqrt")
    zero = make_context("sqrt", np.zeros((3, 3)), 3)
    v = np.array([0.0, 0.6, 0.8])
    gap, path, states = lpe_ratio(spec, np.zeros(3), [c * v, c * v], zero, np.zeros(3))
    assert gap == pytest.approx((2 * math.sqrt(2) - 2) * math.sqrt(c) * c, abs=1e-10)
    assert path == pytest.approx(2 * c, abs=1e-15)
    assert states.shape == (4, 3)


@pytest.mark.parametrize("kind", ["blend", "rot", "scale", "regrot", "sin"])
def test_estimated_ratio_within_bound(kind):
    spec = DistortionSpec(kind=kind)
    d = 5 if kind == "sin" else 2
    ratio = estimate_lpe_ratio(spec, d, 2000, 4, RngStream(11).child(kind))
    assert ratio <= lpe_constant(spec, d) + 1e-6


def test_estimate_is_deterministic():
    spec = DistortionSpec(kind="regrot")
    assert estimate_lpe_ratio(spec, 2, 200, 3, RngStream(5)) == estimate_lpe_ratio(spec, 2, 200, 3, RngStream(5))
