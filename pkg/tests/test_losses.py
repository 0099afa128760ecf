import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdn import losses
from mdn.data import GroupTable
from mdn.errors import CoverageError, DataError, ShapeError
from mdn.nncore import finite_diff, rel_error

GROUPS_2x2 = GroupTable([[90, 10], [10, 90]])


def scalar_ce(row, y):
    return -math.log(math.exp(row[y]) / sum(math.exp(v) for v in row))


def test_ce_uniform_logits_is_log_c():
    assert losses.ce_loss(np.zeros((1, 2)), [0]).mean == pytest.approx(math.log(2), abs=1e-12)


def test_ce_saturated():
    logits = np.zeros((1, 10))
    logits[0, 3] = 1000.0
    assert losses.ce_loss(logits, [3]).mean == pytest.approx(0.0, abs=1e-12)


def test_ce_matches_scalar_oracle(rng):
    logits = 3 * rng.normal(size=(20, 5))
    y = rng.integers(0, 5, size=20)
    res = losses.ce_loss(logits, y)
    expected = [scalar_ce(r, k) for r, k in zip(logits, y)]
    np.testing.assert_allclose(res.losses, expected, rtol=0, atol=1e-12)


def test_ce_errors():
    with pytest.raises(DataError):
        losses.ce_loss(np.zeros((0, 2)), [])
    with pytest.raises(DataError):
        losses.ce_loss(np.zeros((1, 2)), [2])


def test_msl_zero_margins_bit_identical_to_ce(rng):
    logits = rng.normal(size=(9, 3))
    y, b = rng.integers(0, 3, 9), rng.integers(0, 2, 9)
    a = losses.msl_loss(logits, y, b, np.zeros((3, 2)))
    c = losses.ce_loss(logits, y)
    assert a.losses.tobytes() == c.losses.tobytes()
    assert a.probs.tobytes() == c.probs.tobytes()


def test_msl_scalar_example():
    m = np.zeros((2, 2))
    m[0, 0] = 0.5
    res = losses.msl_loss(np.array([[1.0, 0.0]]), [0], [0], m)
    assert res.mean == pytest.approx(math.log1p(math.exp(-0.5)), abs=1e-12)
    assert res.mean == pytest.approx(0.474077, abs=1e-6)


def test_msl_margin_shape_error():
    with pytest.raises(ShapeError):
        losses.msl_loss(np.zeros((1, 2)), [0], [0], np.zeros((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 2.0))
def test_msl_monotone_in_own_margin(seed, delta):
    rng = np.random.default_rng(seed)
    C, B = int(rng.integers(2, 5)), int(rng.integers(2, 4))
    logits = rng.normal(size=(1, C))
    y, b = [int(rng.integers(C))], [int(rng.integers(B))]
    m = rng.normal(size=(C, B))
    before = losses.msl_loss(logits, y, b, m).mean
    m[y[0], b[0]] += delta
    assert losses.msl_loss(logits, y, b, m).mean > before


def test_msl_grad_logits_uniform():
    res = losses.msl_loss(np.zeros((1, 2)), [0], [0], np.zeros((2, 2)))
    np.testing.assert_allclose(losses.msl_grad_logits(res, [0]), [[-0.5, 0.5]])


def test_msl_grad_logits_saturated():
    res = losses.msl_loss(np.array([[50.0, -50.0]]), [0], [0], np.zeros((2, 2)))
    assert np.abs(losses.msl_grad_logits(res, [0])).max() < 1e-40


def test_msl_grad_logits_finite_difference(rng):
    logits, y, b = rng.normal(size=(6, 4)), rng.integers(0, 4, 6), rng.integers(0, 3, 6)
    m = rng.normal(size=(4, 3))
    g = losses.msl_grad_logits(losses.msl_loss(logits, y, b, m), y)
    fd = finite_diff(lambda v: losses.msl_loss(v.reshape(6, 4), y, b, m).mean, logits.ravel())
    assert rel_error(g, fd) < 1e-6


def test_msl_grad_margins_uniform():
    res = losses.msl_loss(np.zeros((1, 2)), [0], [0], np.zeros((2, 2)))
    g = losses.msl_grad_margins(res, [0], [0])
    np.testing.assert_allclose(g, [[0.5, 0.0], [-0.5, 0.0]])


def test_msl_grad_margins_finite_difference(rng):
    logits, y, b = rng.normal(size=(8, 3)), rng.integers(0, 3, 8), rng.integers(0, 3, 8)
    m = rng.normal(size=(3, 3))
    g = losses.msl_grad_margins(losses.msl_loss(logits, y, b, m), y, b)
    fd = finite_diff(lambda v: losses.msl_loss(logits, y, b, v.reshape(3, 3)).mean, m.ravel())
    assert rel_error(g, fd) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_margin_gradient_is_negated_logit_gradient(seed):
    rng = np.random.default_rng(seed)
    C, B = int(rng.integers(2, 5)), int(rng.integers(2, 4))
    logits = rng.normal(size=(1, C))
    y, b = [int(rng.integers(C))], [int(rng.integers(B))]
    res = losses.msl_loss(logits, y, b, rng.normal(size=(C, B)))
    gm = losses.msl_grad_margins(res, y, b)
    gl = losses.msl_grad_logits(res, y)
    np.testing.assert_array_equal(gm[:, b[0]], -gl[0])
    assert not np.delete(gm, b[0], axis=1).any()
    assert abs(gm.sum()) < 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_rows_and_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    logits = 5 * rng.normal(size=(4, 3))
    y, b = rng.integers(0, 3, 4), rng.integers(0, 2, 4)
    m = rng.normal(size=(3, 2))
    res = losses.msl_loss(logits, y, b, m)
    np.testing.assert_allclose(res.probs.sum(axis=1), 1.0, atol=1e-12)
    assert ((res.probs > 0) & (res.probs < 1)).all()
    shifted = losses.msl_loss(logits + shift, y, b, m)
    np.testing.assert_allclose(shifted.losses, res.losses, atol=1e-10)
    groups = GroupTable([[5, 1], [1, 5], [5, 1]])
    yy, bb = np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])
    assert losses.mel_loss(logits + shift, yy, bb, groups)[0] == pytest.approx(
        losses.mel_loss(logits, yy, bb, groups)[0], abs=1e-10)


def brute_force_mel(logits, y, b, groups):
    total = 0.0
    for c in range(logits.shape[1]):
        conf = [scalar_ce(logits[i], c) for i in range(len(y)) if y[i] == c and not groups.aligned[c, b[i]]]
        alig = [scalar_ce(logits[i], c) for i in range(len(y)) if y[i] == c and groups.aligned[c, b[i]]]
        if conf and alig:
            total += abs(sum(conf) / len(conf) - sum(alig) / len(alig))
    return total


def test_mel_symmetric_predictions_zero():
    logits = np.array([[2.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    y, b = [0, 0, 1, 1], [0, 1, 0, 1]
    value, gaps = losses.mel_loss(logits, y, b, GROUPS_2x2)
    assert value == 0.0 and not gaps.any()


def test_mel_single_class_arithmetic():
    # CE = -log p, so pick p giving CE 0.9 (conflicting) and 0.7 (aligned)
    def logits_for(ce):
        p = math.exp(-ce)
        return [math.log(p), math.log(1 - p)]
    logits = np.array([logits_for(0.9), logits_for(0.7)])
    value, gaps = losses.mel_loss(logits, [0, 0], [1, 0], GROUPS_2x2)
    assert value == pytest.approx(0.2, abs=1e-12)
    assert gaps[0] == pytest.approx(0.2, abs=1e-12)


def test_mel_matches_brute_force(rng):
    groups = GroupTable([[50, 3, 2], [4, 60, 1], [2, 2, 70]])
    y = np.repeat([0, 1, 2], 6)
    b = np.tile([0, 1, 2, 0, 1, 2], 3)
    logits = 2 * rng.normal(size=(18, 3))
    value, _ = losses.mel_loss(logits, y, b, groups)
    assert value == pytest.approx(brute_force_mel(logits, y, b, groups), abs=1e-12)


def test_mel_coverage_error_names_class():
    with pytest.raises(CoverageError, match="class 1"):
        losses.mel_loss(np.zeros((3, 2)), [0, 0, 1], [0, 1, 1], GROUPS_2x2)


def test_mel_tied_class_contributes_nothing():
    groups = GroupTable([[50, 50], [10, 90]])
    logits = np.array([[3.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 2.0]])
    value, gaps = losses.mel_loss(logits, [0, 0, 1, 1], [0, 1, 0, 1], groups)
    assert gaps[0] == 0.0 and value == pytest.approx(abs(gaps[1]))


def test_mel_grad_zero_gaps():
    logits = np.array([[2.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    g = losses.mel_grad_logits(logits, [0, 0, 1, 1], [0, 1, 0, 1], GROUPS_2x2)
    assert not g.any()


def test_mel_grad_sign_convention():
    logits = np.array([[0.0, 1.0], [1.0, 0.0]])  # conflicting sample worse
    y, b = [0, 0], [1, 0]
    g = losses.mel_grad_logits(logits, y, b, GROUPS_2x2)
    ce_grad = losses.ce_loss(logits, y).probs - np.array([[1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(g[0], ce_grad[0])
    np.testing.assert_allclose(g[1], -ce_grad[1])


def test_mel_grad_finite_difference(rng):
    groups = GroupTable([[50, 3], [4, 60]])
    y, b = np.array([0, 0, 0, 1, 1, 1, 1]), np.array([0, 1, 1, 0, 0, 1, 1])
    while True:
        logits = 2 * rng.normal(size=(7, 2))
        if np.all(np.abs(losses.mel_loss(logits, y, b, groups)[1]) > 1e-3):
            break
    g = losses.mel_grad_logits(logits, y, b, groups)
    fd = finite_diff(lambda v: losses.mel_loss(v.reshape(7, 2), y, b, groups)[0], logits.ravel())
    assert rel_error(g, fd) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mel_nonnegative_and_zero_iff_gaps_zero(seed):
    rng = np.random.default_rng(seed)
    groups = GroupTable([[9, 1], [1, 9]])
    y, b = np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])
    logits = rng.normal(size=(4, 2))
    value, gaps = losses.mel_loss(logits, y, b, groups)
    assert value >= 0
    assert (value == 0) == (not gaps.any())


def test_group_mean_ce_gradient(rng):
    y, b = np.array([0, 0, 0, 1, 1, 1]), np.array([0, 0, 1, 0, 1, 1])
    logits = rng.normal(size=(6, 2))
    value, g = losses.group_mean_ce(logits, y, b, 2)
    ce = losses.ce_loss(logits, y).losses
    expected = np.mean([ce[:2].mean(), ce[2], ce[3], ce[4:].mean()])
    assert value == pytest.approx(expected, abs=1e-12)
    fd = finite_diff(lambda v: losses.group_mean_ce(v.reshape(6, 2), y, b, 2)[0], logits.ravel())
    assert rel_error(g, fd) < 1e-6
