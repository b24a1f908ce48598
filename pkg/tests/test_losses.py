import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collabcp import autodiff as ad
from collabcp.losses import LossWeights, loss_cls, loss_reg, loss_uq, loss_uq_from_log_variance, total_loss

LN2 = math.log(2.0)


def test_cls_at_zero_logits():
    assert loss_cls(np.zeros(5), np.array([1, 0, 1, 1, 0.0])).item() == pytest.approx(LN2, abs=1e-15)


def test_cls_saturates():
    assert loss_cls(np.array([50.0]), np.array([1.0])).item() < 1e-20


def test_cls_mean_of_two():
    assert loss_cls(np.zeros(2), np.array([1.0, 0.0])).item() == pytest.approx(LN2, abs=1e-15)


def test_cls_stable_for_huge_logits():
    val = loss_cls(np.array([-1000.0, 1000.0]), np.array([1.0, 0.0])).item()
    assert val == pytest.approx(1000.0)


def test_cls_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        loss_cls(np.zeros(3), np.zeros(4))


def test_reg_exact_prediction():
    y = np.array([[0.1, 0.2, 0.3, 0.4]])
    assert loss_reg(y, y, np.ones((1, 4))).item() == 0.0


def test_reg_single_coordinate():
    mask = np.array([[0, 1, 0, 0.0]])
    assert loss_reg(np.array([[9, 3.0, 9, 9]]), np.array([[0, 1.0, 0, 0]]), mask).item() == 4.0


def test_reg_empty_mask():
    assert loss_reg(np.ones((2, 4)), np.zeros((2, 4)), np.zeros((2, 4))).item() == 0.0


@pytest.mark.parametrize(
    "resid, sigma, expected",
    [(0.0, 1.0, 0.0), (1.0, 1.0, 0.5), (0.0, math.e, 1.0)],
)
def test_uq_examples(resid, sigma, expected):
    val = loss_uq(np.array([resid]), np.array([0.0]), np.array([sigma]), np.array([1.0])).item()
    assert val == pytest.approx(expected, abs=1e-15)


def test_uq_log_variance_form_agrees():
    rng = np.random.default_rng(0)
    pred, tgt, lv = rng.normal(size=(3, 8)), rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    mask = (rng.uniform(size=(3, 8)) > 0.4).astype(float)
    a = loss_uq(pred, tgt, np.exp(0.5 * lv), mask).item()
    b = loss_uq_from_log_variance(pred, tgt, lv, mask).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_uq_rejects_non_positive_sigma():
    with pytest.raises(ValueError):
        loss_uq(np.zeros(2), np.zeros(2), np.array([1.0, 0.0]), np.ones(2))


def test_uq_can_be_negative():
    assert loss_uq(np.zeros(1), np.zeros(1), np.array([0.5]), np.ones(1)).item() < 0


def golden_section(f, lo, hi, tol=1e-10):
    phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    while b - a > tol:
        if f(c) < f(d):
            b = d
        else:
            a = c
        c, d = b - phi * (b - a), a + phi * (b - a)
    return (a + b) / 2


@pytest.mark.parametrize("r", [0.1, 1.0, 10.0])
def test_uq_minimizer_is_absolute_residual(r):
    f = lambda s: loss_uq(np.array([r]), np.array([0.0]), np.array([s]), np.array([1.0])).item()  # noqa: E731
    assert golden_section(f, 1e-3, 100.0) == pytest.approx(abs(r), abs=1e-6)


def test_total_examples():
    assert total_loss(1.0, 2.0, 3.0, LossWeights(1, 0, 0))[1].total == 1.0
    assert total_loss(1.0, 2.0, 3.0)[1].total == 6.0
    # w_reg * l_reg + w_cls * l_cls + w_uq * l_uq = 0.5 + 0.5 + 0.75
    assert total_loss(1.0, 2.0, 3.0, LossWeights(0.5, 0.25, 0.25))[1].total == 1.75


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(0, 3), min_size=3, max_size=3))
def test_breakdown_identity(parts, w):
    _, bd = total_loss(*parts, LossWeights(*w))
    assert bd.total == pytest.approx(w[0] * parts[0] + w[1] * parts[1] + w[2] * parts[2], abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_sign_behaviour(seed):
    rng = np.random.default_rng(seed)
    z, t = rng.normal(scale=4, size=10), (rng.uniform(size=10) > 0.5).astype(float)
    assert loss_cls(z, t).item() >= 0
    assert loss_reg(z, t, np.ones(10)).item() >= 0
    big = loss_uq(z, t, np.full(10, 1.0), np.ones(10)).item()
    assert big >= 0  # log 1 = 0 leaves only the squared term


@pytest.mark.parametrize("seed", range(5))
def test_losses_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    t_cls = (rng.uniform(size=(2, 6)) > 0.7).astype(float)
    t_box = rng.normal(size=(2, 6))
    mask = (rng.uniform(size=(2, 6)) > 0.5).astype(float)

    def fn(i, p):
        total, _ = total_loss(
            loss_reg(i["box"], t_box, mask),
            loss_cls(i["z"], t_cls),
            loss_uq_from_log_variance(i["box"], t_box, i["lv"], mask),
            LossWeights(0.7, 1.3, 0.9),
        )
        return {"L": total}

    g = ad.Graph(fn, {"z": (2, 6), "box": (2, 6), "lv": (2, 6)})
    inputs = {"z": rng.normal(size=(2, 6)), "box": rng.normal(size=(2, 6)), "lv": rng.normal(size=(2, 6))}
    for leaf in inputs:
        assert ad.finite_difference_check(g, inputs, leaf, "L") < 1e-4
