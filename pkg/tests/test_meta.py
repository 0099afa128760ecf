import numpy as np
import pytest

from mdn import losses, meta, nncore
from mdn.data import DataBundle, DatasetConfig, LabeledBatch, make_bundle
from mdn.errors import ConfigError, CoverageError
from mdn.gradcheck import meta_analytic, meta_instance, meta_outer_loss
from mdn.meta import (PseudoCache, TrainConfig, TrainState, final_update, margin_meta_gradient,
                      margin_step, pseudo_update, train)
from mdn.nncore import ClassifierParams, ExtractorParams, Model, finite_diff, rel_error


def linear_state(W, c, B=2):
    model = Model(ExtractorParams([], []), ClassifierParams(np.array(W, float), np.array(c, float)))
    return TrainState(model, np.zeros((len(c), B)))


@pytest.fixture(scope="module")
def small_bundle():
    return make_bundle(DatasetConfig(kind="blobs", rho=0.95, n_train=400, n_test=200, seed=1))


def test_pseudo_update_zero_gradient():
    state = linear_state([[1000.0, 0.0], [0.0, 1000.0]], [0, 0])
    batch = LabeledBatch([[1.0, 0.0], [0.0, 1.0]], [0, 1], [0, 1])
    theta_hat, phi_hat, _ = pseudo_update(state, batch, 0.5)
    np.testing.assert_array_equal(phi_hat.weight, state.phi.weight)
    np.testing.assert_array_equal(phi_hat.bias, state.phi.bias)


def test_pseudo_update_hand_computation():
    W = np.array([[0.2, -0.1], [0.0, 0.3]])
    state = linear_state(W, [0.1, 0.0])
    state.margins = np.array([[0.5, 0.0], [0.0, 0.2]])
    X = np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, 0.3]])
    y, b = np.array([0, 1, 1]), np.array([0, 1, 0])
    alpha = 0.7
    _, phi_hat, cache = pseudo_update(state, LabeledBatch(X, y, b), alpha)
    # hand: z = Wx + c - m[:, b]; p = softmax(z)
    expected_W, expected_c = W.copy(), np.array([0.1, 0.0])
    gW, gc = np.zeros((2, 2)), np.zeros(2)
    for x, yi, bi in zip(X, y, b):
        z = W @ x + np.array([0.1, 0.0]) - state.margins[:, bi]
        p = np.exp(z) / np.exp(z).sum()
        r = p - np.eye(2)[yi]
        gW += np.outer(r, x) / 3
        gc += r / 3
    np.testing.assert_allclose(phi_hat.weight, expected_W - alpha * gW, atol=1e-14)
    np.testing.assert_allclose(phi_hat.bias, expected_c - alpha * gc, atol=1e-14)
    # the real parameters stay put
    np.testing.assert_array_equal(state.phi.weight, W)


def test_pseudo_update_pure(rng):
    state, train_b, *_ = meta_instance(rng)
    a = pseudo_update(state, train_b, 0.3)
    b = pseudo_update(state, train_b, 0.3)
    assert a[1].flat().tobytes() == b[1].flat().tobytes()
    assert a[0].flat().tobytes() == b[0].flat().tobytes()


def _cache(p, f, y, b, B=2):
    res = losses.SoftmaxResult(np.array(p, float), np.zeros(len(y)), 0.0, B)
    fwd = nncore.ForwardCache(inputs=np.array(f, float), features=np.array(f, float))
    return PseudoCache(fwd, res, None, np.array(y), np.array(b))


def test_meta_gradient_zero_outer():
    cache = _cache([[0.3, 0.7]], [[1.0, 2.0]], [0], [1])
    G = margin_meta_gradient(cache, ClassifierParams(np.zeros((2, 2)), np.zeros(2)))
    assert not G.any()


def test_meta_gradient_scalar_example():
    cache = _cache([[0.5, 0.5]], [[3.0, -1.0]], [0], [0])
    # a = W f + c = (1, 0) with W = 0, c = (1, 0)
    G = margin_meta_gradient(cache, ClassifierParams(np.zeros((2, 2)), np.array([1.0, 0.0])))
    np.testing.assert_allclose(G[:, 0], [-0.25, 0.25])
    assert not G[:, 1].any()


def test_meta_gradient_matches_end_to_end_finite_differences():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 10:
        state, tr, mb, groups, alpha = meta_instance(rng)
        G, theta_hat, logits = meta_analytic(state, tr, mb, groups, alpha)
        gaps = losses.mel_loss(logits, mb.y, mb.b, groups)[1]
        if np.any(np.abs(gaps[gaps != 0]) < 1e-3):
            continue
        C, B = state.margins.shape
        fd = finite_diff(lambda v: meta_outer_loss(state, tr, mb, groups, alpha, v.reshape(C, B),
                                                   theta_hat), state.margins.ravel(), 1e-4)
        assert rel_error(alpha * G, -fd) < 1e-4
        checked += 1


def test_margin_step():
    m = np.zeros((2, 2))
    G = np.full((2, 2), 2.0)
    assert not margin_step(m, G, 0.5, 0.0).any()
    assert not margin_step(m, np.zeros((2, 2)), 0.5, 1.0).any()
    assert margin_step(np.zeros((1, 1)), np.array([[2.0]]), 0.1, 1.0)[0, 0] == pytest.approx(0.2)
    with pytest.raises(ConfigError):
        margin_step(m, G, 0.1, -1.0)


def test_final_update_with_unchanged_margins_equals_pseudo(rng):
    state, tr, *_ = meta_instance(rng)
    theta_hat, phi_hat, _ = pseudo_update(state, tr, 0.4)
    cfg = TrainConfig(alpha=0.4, optimizer="sgd")
    final_update(state, tr, state.margins.copy(), cfg)
    assert state.phi.flat().tobytes() == phi_hat.flat().tobytes()
    assert state.theta.flat().tobytes() == theta_hat.flat().tobytes()
    assert state.t == 1


def test_history_loss_matches_snapshot(rng):
    state, tr, *_ = meta_instance(rng)
    before = state.model.copy()
    new_m = state.margins + rng.normal(size=state.margins.shape)
    final_update(state, tr, new_m, TrainConfig(alpha=0.1))
    rec = state.history[-1]
    logits = nncore.forward(before.extractor, before.classifier, tr.X).logits
    assert rec["msl"] == losses.msl_loss(logits, tr.y, tr.b, rec["margins"]).mean
    assert (rec["margins"] == new_m).all()


def test_evaluation_points(small_bundle):
    """Cross term at pre-update quantities, outer gradient at the look-ahead model."""
    cfg = TrainConfig(mode="mdn", alpha=0.2, beta=3.0, epochs=1, hidden=(6,), batch_size=16,
                      meta_per_group=2)
    state = meta.init_state(cfg, small_bundle.train.X.shape[1], 2, 2)
    state.margins = np.array([[0.1, 0.4], [0.3, -0.2]])
    batch_rng, meta_rng = np.random.default_rng(0), np.random.default_rng(1)
    start = state.model.copy()
    m0 = state.margins.copy()
    meta.train_step(state, small_bundle, cfg, batch_rng, meta_rng)

    batch = small_bundle.train.take(np.random.default_rng(0).integers(0, 400, size=16))
    mb = meta.sample_meta_batch(small_bundle, 2, np.random.default_rng(1))
    fwd = nncore.forward(start.extractor, start.classifier, batch.X)
    res = losses.msl_loss(fwd.logits, batch.y, batch.b, m0)
    gt, gp = nncore.backward(fwd, start.extractor, start.classifier,
                             losses.msl_grad_logits(res, batch.y))
    ahead = nncore.sgd_step(start, Model(gt, gp), cfg.alpha)
    feats_hat = nncore.forward(ahead.extractor, ahead.classifier, mb.X).features
    logits_hat = nncore.classify(ahead.classifier, feats_hat)
    g_phi = nncore.classifier_grad(feats_hat, losses.mel_grad_logits(logits_hat, mb.y, mb.b, small_bundle.groups))
    G = np.zeros((2, 2))
    a = fwd.features @ g_phi.weight.T + g_phi.bias
    for i in range(16):
        p = res.probs[i]
        G[:, batch.b[i]] += p * (p @ a[i] - a[i]) / 16
    np.testing.assert_allclose(state.margins, m0 + cfg.alpha * cfg.beta * G, atol=1e-14)


def test_beta_zero_trajectory_equals_vanilla(small_bundle):
    common = dict(alpha=0.1, epochs=2, hidden=(8,), batch_size=32, seed=4)
    van = train(TrainConfig(mode="vanilla", **common), small_bundle)
    mdn0 = train(TrainConfig(mode="mdn", beta=0.0, **common), small_bundle)
    assert van.state.model.flat().tobytes() == mdn0.state.model.flat().tobytes()
    assert [h["msl"] for h in van.state.history] == [h["msl"] for h in mdn0.state.history]
    assert not mdn0.state.margins.any()
    assert van.best_test.to_dict() == mdn0.best_test.to_dict()


def test_vanilla_is_plain_cross_entropy_training(small_bundle):
    cfg = TrainConfig(mode="vanilla", alpha=0.1, epochs=1, hidden=(8,), batch_size=32, seed=2)
    result = train(cfg, small_bundle)
    # replay with ce_loss directly
    model = meta.init_state(cfg, small_bundle.train.X.shape[1], 2, 2).model
    rng = np.random.default_rng([2, meta.STREAM_BATCHES])
    for _ in range(result.state.t):
        batch = small_bundle.train.take(rng.integers(0, 400, size=32))
        fwd = nncore.forward(model.extractor, model.classifier, batch.X)
        res = losses.ce_loss(fwd.logits, batch.y)
        g = Model(*nncore.backward(fwd, model.extractor, model.classifier,
                                   losses.ce_grad_logits(res, batch.y)))
        model = nncore.sgd_step(model, g, 0.1)
    assert model.flat().tobytes() == result.state.model.flat().tobytes()


def test_training_deterministic(small_bundle):
    cfg = dict(mode="mdn", alpha=0.1, beta=2.0, epochs=1, hidden=(8,), batch_size=32, seed=9)
    a = train(TrainConfig(**cfg), small_bundle)
    b = train(TrainConfig(**cfg), small_bundle)
    assert a.state.model.flat().tobytes() == b.state.model.flat().tobytes()
    assert a.state.margins.tobytes() == b.state.margins.tobytes()


def test_history_and_finiteness(small_bundle):
    r = train(TrainConfig(mode="mdn", alpha=0.1, beta=5.0, epochs=2, hidden=(8,), batch_size=50),
              small_bundle)
    assert len(r.state.history) == r.state.t == 2 * 8
    assert all(np.isfinite(h["margins"]).all() for h in r.state.history)
    assert [h["t"] for h in r.state.history] == list(range(1, 17))


def test_unseen_bias_column_margins_stay_zero():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 100)
    b = np.where(rng.random(200) < 0.9, y, 1 - y)  # bias class 2 never appears
    X = rng.normal(size=(200, 3)) + y[:, None]
    tr = LabeledBatch(X, y, b)
    ev = LabeledBatch(X[:12], np.repeat([0, 1], 6), np.tile([0, 1, 2], 4))
    bundle = DataBundle(tr, ev, ev, 2, 3)
    r = train(TrainConfig(mode="mdn", beta=5.0, epochs=2, hidden=(4,), batch_size=20), bundle)
    assert not r.state.margins[:, 2].any()
    assert r.state.margins[:, :2].any()


@pytest.mark.parametrize("mode", ["resample", "mdn_no_mel", "mdn_no_msl"])
def test_other_modes_run(small_bundle, mode):
    r = train(TrainConfig(mode=mode, beta=5.0, epochs=1, hidden=(8,), batch_size=32), small_bundle)
    assert r.state.t == 13
    if mode == "mdn_no_msl":
        assert not r.state.margins.any()
    if mode == "mdn_no_mel":
        assert r.state.margins.any()


def test_adam_final_update_runs(small_bundle):
    r = train(TrainConfig(mode="mdn", optimizer="adam", alpha=1e-3, beta=50.0, epochs=1,
                          hidden=(8,), batch_size=32), small_bundle)
    assert r.state.opt_state.t == r.state.t


def test_config_errors(small_bundle):
    with pytest.raises(ConfigError):
        train(TrainConfig(mode="nope"), small_bundle)
    with pytest.raises(ConfigError):
        train(TrainConfig(alpha=0.0), small_bundle)
    with pytest.raises(ConfigError):
        train(TrainConfig(mode="mdn", batch_size=3), small_bundle)


def test_coverage_error_before_training():
    bundle = make_bundle(DatasetConfig(kind="blobs", rho=1.0, n_train=200, n_test=40))
    with pytest.raises(CoverageError):
        train(TrainConfig(mode="mdn", epochs=1), bundle)
    train(TrainConfig(mode="vanilla", epochs=1, hidden=(4,)), bundle)


def test_best_epoch_selection(small_bundle):
    r = train(TrainConfig(mode="vanilla", epochs=3, hidden=(8,), batch_size=32), small_bundle)
    vals = [e.val.unbiased_acc for e in r.epochs]
    assert r.best_epoch == int(np.argmax(vals)) + 1
    assert r.best_test is r.epochs[r.best_epoch - 1].test
