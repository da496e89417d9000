import numpy as np
import pytest
from hypothesis import given, strategies as st

from scenekt import autodiff as ad
from scenekt.autodiff import Tensor
from scenekt.geometry import (
    BoundingBox,
    encode_absolute,
    lift_spatial,
    relative_spatial,
    to_center_form,
    union_box,
)

from conftest import assert_grads_match

coord = st.floats(-10, 10, allow_nan=False)
side = st.floats(0.01, 5, allow_nan=False)
boxes = st.builds(
    lambda x, y, w, h: BoundingBox(x, y, x + w, y + h), coord, coord, side, side
)


def test_degenerate_boxes_rejected():
    with pytest.raises(ValueError):
        BoundingBox(1, 1, 1, 2)  # zero width
    with pytest.raises(ValueError):
        BoundingBox(0, 3, 2, 3)
    with pytest.raises(ValueError):
        BoundingBox(2, 0, 1, 1)


def test_encode_absolute():
    np.testing.assert_array_equal(
        encode_absolute(BoundingBox(0, 0, 1, 1)), [0, 0, 1, 1, 1]
    )
    np.testing.assert_array_equal(
        encode_absolute(BoundingBox(0, 0, 2, 3)), [0, 0, 2, 3, 6]
    )


def test_to_center_form():
    np.testing.assert_array_equal(to_center_form(BoundingBox(0, 0, 2, 2)), [1, 1, 2, 2])
    np.testing.assert_array_equal(to_center_form(BoundingBox(0, 0, 4, 2)), [2, 1, 4, 2])


@given(boxes)
def test_center_form_round_trip(b):
    xc, yc, w, h = to_center_form(b)
    np.testing.assert_allclose(
        [xc - w / 2, yc - h / 2, xc + w / 2, yc + h / 2],
        b.as_array(),
        rtol=0,
        atol=1e-9,
    )


@given(boxes)
def test_area_entry_consistency(b):
    _, _, w, h = to_center_form(b)
    assert encode_absolute(b)[4] == pytest.approx(w * h, rel=1e-12)


@given(boxes)
def test_relative_spatial_self_case(b):
    np.testing.assert_array_almost_equal(
        relative_spatial(b, b), [-0.5, -0.5, 0.5, 0.5, 1.0], decimal=12
    )


def test_relative_spatial_worked_pair():
    s = relative_spatial(BoundingBox(0, 0, 2, 2), BoundingBox(2, 2, 4, 4))
    np.testing.assert_array_equal(s, [0.5, 0.5, 1.5, 1.5, 1.0])


def test_relative_spatial_asymmetric(rng):
    asym = 0
    for _ in range(1000):
        vals = rng.uniform(0, 1, size=8)
        b1 = BoundingBox(vals[0], vals[1], vals[0] + vals[2] + 0.05, vals[1] + vals[3] + 0.05)
        b2 = BoundingBox(vals[4], vals[5], vals[4] + vals[6] + 0.05, vals[5] + vals[7] + 0.05)
        if not np.allclose(relative_spatial(b1, b2), relative_spatial(b2, b1)):
            asym += 1
    assert asym > 990  # symmetric configurations are measure-zero


def test_union_box():
    assert union_box(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)) == BoundingBox(0, 0, 3, 3)
    b = BoundingBox(0.5, 0.25, 2, 3)
    assert union_box(b, b) == b


@given(boxes, boxes)
def test_union_contains_and_commutes(a, b):
    u = union_box(a, b)
    assert union_box(b, a) == u
    for x in (a, b):
        assert u.x_t <= x.x_t and u.y_t <= x.y_t
        assert u.x_b >= x.x_b and u.y_b >= x.y_b


def test_lift_spatial_zero_params_and_shape(rng):
    d_s = 7
    W = Tensor(np.zeros((d_s, 5)), requires_grad=True)
    b = Tensor(np.zeros(d_s), requires_grad=True)
    out = lift_spatial(rng.normal(size=5), W, b)
    np.testing.assert_array_equal(out.value, np.zeros(d_s))
    assert out.value.shape == (d_s,)


def test_lift_spatial_gradients(rng):
    s_raw = rng.normal(size=5)
    assert_grads_match(
        lambda ts: ad.tsum(lift_spatial(s_raw, ts[0], ts[1])),
        [rng.normal(size=(4, 5)), rng.normal(size=4)],
    )
