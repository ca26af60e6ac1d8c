import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoflow.hand_model import HandParams
from hoflow.losses import LossWeights, combined_loss, joint_loss, object_vertex_loss, regularizers


def naive_l2(a, b):
    total = 0.0
    for i in range(len(a)):
        s = 0.0
        for c in range(3):
            s += (a[i][c] - b[i][c]) ** 2
        total += s
    return total / len(a)


def test_equal_inputs_give_zero(rng):
    j = rng.normal(size=(21, 3))
    assert float(joint_loss(j, j)) == 0.0


def test_millimeter_offset():
    j = np.zeros((21, 3))
    assert float(joint_loss(j + [0.001, 0, 0], j)) == pytest.approx(1e-6, rel=1e-12)


def test_matches_naive_loop(rng):
    for n in (21, 300):
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        assert float(object_vertex_loss(a, b)) == pytest.approx(naive_l2(a, b), rel=1e-12)
        assert float(joint_loss(a, b, reduction="sum")) == pytest.approx(n * naive_l2(a, b), rel=1e-12)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        joint_loss(np.zeros((21, 3)), np.zeros((20, 3)))
    with pytest.raises(ValueError):
        joint_loss(np.zeros((2, 3)), np.zeros((2, 3)), reduction="median")


def test_regularizers():
    assert [float(x) for x in regularizers(HandParams())] == [0.0, 0.0]
    e1 = torch.zeros(15, dtype=torch.float64)
    e1[0] = 1.0
    assert float(regularizers(HandParams(pca_pose=e1))[0]) == 1.0


@given(st.lists(st.floats(-5, 5), min_size=25, max_size=25))
@settings(max_examples=50, deadline=None)
def test_regularizers_sum_of_squares(x):
    p = HandParams(x[:15], x[15:])
    lt, lb = regularizers(p)
    assert float(lt) == pytest.approx(sum(v * v for v in x[:15]), abs=1e-9)
    assert float(lb) == pytest.approx(sum(v * v for v in x[15:]), abs=1e-9)


def test_combined_sum():
    one = dict(object=1.0, joints=1.0, beta=1.0, theta=1.0)
    assert float(combined_loss(one, LossWeights(1, 1, 1))) == 4.0
    assert float(combined_loss({k: 0.0 for k in one}, LossWeights())) == 0.0
    assert float(combined_loss({**one, "photo": 2.0}, LossWeights(1, 1, 1, photo=0.5))) == 5.0


def test_combined_matches_hand_sum(rng):
    for _ in range(100):
        c = rng.uniform(0, 3, 4)
        w = rng.uniform(0, 2, 3)
        got = combined_loss(dict(zip(("object", "joints", "beta", "theta"), c)), LossWeights(*w))
        assert float(got) == pytest.approx(c[0] + w[0] * c[1] + w[1] * c[2] + w[2] * c[3], rel=1e-14)


def test_combined_is_linear_in_each_component():
    base = dict(object=0.3, joints=0.2, beta=0.7, theta=0.1)
    w = LossWeights(2.0, 0.5, 0.25)
    l0 = float(combined_loss(base, w))
    l1 = float(combined_loss({**base, "beta": 1.7}, w))
    assert l1 - l0 == pytest.approx(0.5 * 1.0)


def test_negative_inputs_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_J=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_theta=float("nan"))
    with pytest.raises(ValueError):
        combined_loss(dict(object=-0.1, joints=0, beta=0, theta=0))
