import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mipgrid.render import CameraModel
from mipgrid.scalecoord import (
    ScaleCoordinate,
    ScaleIndexMap,
    blend_weights,
    continuous_scale,
    default_anchors,
    discrete_scale,
    quantile_anchors,
    to_fractional_index,
)

positive = st.floats(1e-4, 1e4, allow_nan=False, allow_infinity=False)


def test_discrete_f100():
    assert discrete_scale(focal_x=100.0, focal_y=100.0) == pytest.approx(0.0057735, abs=5e-8)


@given(positive)
def test_discrete_symmetric_closed_form(f):
    assert discrete_scale(focal_x=f, focal_y=f) == pytest.approx(2 / math.sqrt(12) / f, rel=1e-15)


def test_discrete_mean_of_axes():
    np.testing.assert_allclose(
        discrete_scale(focal_x=100.0, focal_y=200.0), 0.5 * (0.01 + 0.005) * 2 / math.sqrt(12), rtol=1e-15
    )


def test_discrete_halving_focal_doubles():
    cam = CameraModel(80.0, 80.0, 64, 64, np.eye(4), 2.0, 6.0)
    assert discrete_scale(cam.downsampled(2)) == pytest.approx(2 * discrete_scale(cam), rel=1e-15)


@pytest.mark.parametrize("f", [0.0, -1.0])
def test_discrete_rejects(f):
    with pytest.raises(ValueError):
        discrete_scale(focal_x=f, focal_y=100.0)


def test_continuous_examples():
    assert continuous_scale(0.0057735, 1.0) == 0.0057735
    assert continuous_scale(0.0057735, 3.0) == pytest.approx(0.0173205, abs=1e-9)
    assert continuous_scale(0.01, 4.0) == 2 * continuous_scale(0.01, 2.0)


@pytest.mark.parametrize("t", [0.0, -0.5])
def test_continuous_rejects_nonpositive_t(t):
    with pytest.raises(ValueError):
        continuous_scale(0.01, t)


@given(positive, positive, st.floats(1.001, 10))
def test_continuous_strictly_increasing(s, t, k):
    assert continuous_scale(s * k, t) > continuous_scale(s, t)
    assert continuous_scale(s, t * k) > continuous_scale(s, t)


def test_anchor_reproduction():
    m = ScaleIndexMap((0.5, 1.0, 2.0, 4.0))
    for k, a in enumerate(m.anchors):
        assert to_fractional_index(m, a) == k


def test_log_midpoint():
    m = ScaleIndexMap((0.5, 1.0, 3.0, 4.0))
    assert to_fractional_index(m, math.sqrt(1.0 * 3.0)) == pytest.approx(1.5, abs=1e-12)


def test_clamping():
    m = ScaleIndexMap((0.5, 1.0, 2.0, 4.0))
    assert to_fractional_index(m, 1e-6) == 0.0
    assert to_fractional_index(m, 1e6) == 3.0


def test_descending_anchors():
    m = ScaleIndexMap((4.0, 2.0, 1.0))
    assert m(4.0) == 0.0 and m(1.0) == 2.0 and m(math.sqrt(2.0)) == pytest.approx(1.5)


def test_index_map_validation():
    for bad in ((1.0, 1.0), (1.0, 3.0, 2.0), (-1.0, 2.0), ()):
        with pytest.raises(ValueError):
            ScaleIndexMap(bad)
    with pytest.raises(ValueError):
        ScaleIndexMap((1.0, 2.0))(0.0)


def test_default_anchors_example():
    m = default_anchors(0.0057735, (1, 2, 4, 8))
    np.testing.assert_allclose(m.anchors, [0.0057735, 0.0115470, 0.0230940, 0.0461880], atol=1e-9)


def test_default_anchors_two_scales_one_octave():
    m = default_anchors(0.01, (1, 2), scales=2)
    assert math.log2(m.anchors[1] / m.anchors[0]) == 1.0


def test_default_anchors_rejects():
    with pytest.raises(ValueError):
        default_anchors(0.01, (1,), scales=2)
    with pytest.raises(ValueError):
        default_anchors(0.01, (2, 1))


def test_training_scales_map_to_integers():
    cam = CameraModel(80.0, 80.0, 64, 64, np.eye(4), 2.0, 6.0)
    m = default_anchors(discrete_scale(cam), (1, 2, 4, 8))
    idx = [m(discrete_scale(cam.downsampled(f))) for f in (1, 2, 4, 8)]
    assert idx == [0.0, 1.0, 2.0, 3.0]


@given(st.lists(positive, min_size=2, max_size=6, unique=True), positive, positive)
def test_index_monotone(anchors, a, b):
    m = ScaleIndexMap(tuple(sorted(anchors)))
    lo, hi = sorted((a, b))
    assert m(lo) <= m(hi)


@given(
    st.floats(1e-3, 1.0),
    st.lists(st.floats(1.01, 4.0), min_size=1, max_size=5),
    st.floats(1e-3, 1e3),
    st.floats(1e-3, 1e3),
)
def test_ratio_invariance(base, ratios, value, c):
    m = ScaleIndexMap(tuple(base * np.cumprod([1.0] + ratios)))
    scaled = ScaleIndexMap(tuple(c * a for a in m.anchors))
    assert scaled(c * value) == pytest.approx(m(value), abs=1e-9)


def test_quantile_anchors_monotone(rng):
    m = quantile_anchors(rng.uniform(2.0, 6.0, 10_000), 4)
    assert m.scales == 4 and all(b > a for a, b in zip(m.anchors, m.anchors[1:]))
    np.testing.assert_allclose(m.anchors, [2.5, 3.5, 4.5, 5.5], atol=0.05)
    m = quantile_anchors(np.full(10, 3.0), 3)  # ties are separated
    assert m.scales == 3


def test_blend_weights():
    w = blend_weights([0.0, 1.5, 3.0, 7.0, -1.0], 4)
    np.testing.assert_allclose(w.sum(0), 1.0)
    np.testing.assert_allclose(w[:, 1], [0, 0.5, 0.5, 0])
    np.testing.assert_allclose(w[:, 3], [0, 0, 0, 1])
    np.testing.assert_allclose(w[:, 4], [1, 0, 0, 0])


def test_coordinate_validation():
    ScaleCoordinate("2d", 0.01, 3.0)
    with pytest.raises(ValueError):
        ScaleCoordinate("2d", 0.01)
    with pytest.raises(ValueError):
        ScaleCoordinate("disc", 0.01, 3.0)
    with pytest.raises(ValueError):
        ScaleCoordinate("disc", -0.01)
    with pytest.raises(ValueError):
        ScaleCoordinate("nope", 0.01)
