"""Finite-difference verification suites for every analytic gradient.

Each suite draws ``instances`` random seeded problems and returns the largest
relative error between the analytic gradient and central differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, nncore
from .data import GroupTable, LabeledBatch
from .meta import TrainState, margin_meta_gradient, pseudo_update
from .nncore import ClassifierParams, ExtractorParams, Model, finite_diff, rel_error

FIRST_ORDER_TOL = 1e-5
META_TOL = 1e-4
KINK = 1e-3


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def random_labels(rng, n, C, B):
    return rng.integers(0, C, size=n), rng.integers(0, B, size=n)


def random_groups(rng, C, B) -> GroupTable:
    """One dominant (aligned) bias cell per class, the rest smaller."""
    counts = rng.integers(1, 10, size=(C, B))
    for c in range(C):
        counts[c, rng.integers(0, B)] = 100
    return GroupTable(counts)


def covered_labels(rng, n, groups: GroupTable):
    """Labels where every class has at least one aligned and one conflicting sample."""
    C, B = groups.shape
    n = max(n, 2 * C)
    ys, bs = [], []
    for c in range(C):
        ys += [c, c]
        bs += [rng.choice(np.flatnonzero(groups.aligned[c])),
               rng.choice(np.flatnonzero(~groups.aligned[c]))]
    y_rest, b_rest = random_labels(rng, n - 2 * C, C, B)
    y = np.concatenate([ys, y_rest]).astype(np.int64)
    b = np.concatenate([bs, b_rest]).astype(np.int64)
    perm = rng.permutation(n)
    return y[perm], b[perm]


def _away_from_kink(logits, y, b, groups):
    _, gaps = losses.mel_loss(logits, y, b, groups)
    used = np.unique(y)
    used = used[~groups.aligned[used].all(axis=1)]
    return np.all(np.abs(gaps[used]) > KINK)


def _instance_dims(rng, d_max=8, n_max=16):
    C, B = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    d = int(rng.integers(1, d_max + 1))
    n = int(rng.integers(2 * C, n_max + 1))
    return C, B, d, n


def random_net(rng, d_in, hidden, C, activation=None) -> Model:
    act = activation or ("tanh", "relu")[rng.integers(0, 2)]
    model = nncore.init_model(rng, d_in, hidden, C, act)
    # non-zero biases so the check covers them
    return model.with_tensors([t + 0.1 * rng.normal(size=t.shape) for t in model.tensors()])


# ------------------------------------------------------------------ suites

def suite_logits(seed=0, instances=50, corrupt=False):
    """CE, MSL and MEL gradients w.r.t. the logits, and MSL w.r.t. the margins."""
    rng = np.random.default_rng(seed)
    worst = {"ce_logits": 0.0, "msl_logits": 0.0, "msl_margins": 0.0, "mel_logits": 0.0}
    for _ in range(instances):
        C, B, d, n = _instance_dims(rng)
        y, b = random_labels(rng, n, C, B)
        logits = 2 * rng.normal(size=(n, C))
        m = rng.normal(size=(C, B))

        g = losses.ce_grad_logits(losses.ce_loss(logits, y), y)
        fd = finite_diff(lambda v: losses.ce_loss(v.reshape(n, C), y).mean, logits.ravel())
        worst["ce_logits"] = max(worst["ce_logits"], rel_error(g, fd))

        res = losses.msl_loss(logits, y, b, m)
        g = losses.msl_grad_logits(res, y)
        fd = finite_diff(lambda v: losses.msl_loss(v.reshape(n, C), y, b, m).mean, logits.ravel())
        worst["msl_logits"] = max(worst["msl_logits"], rel_error(g, fd))

        g = losses.msl_grad_margins(res, y, b)
        if corrupt:
            g = g * 1.01
        fd = finite_diff(lambda v: losses.msl_loss(logits, y, b, v.reshape(C, B)).mean, m.ravel())
        worst["msl_margins"] = max(worst["msl_margins"], rel_error(g, fd))

        groups = random_groups(rng, C, B)
        while True:
            yg, bg = covered_labels(rng, n, groups)
            lg = 2 * rng.normal(size=(len(yg), C))
            if _away_from_kink(lg, yg, bg, groups):
                break
        g = losses.mel_grad_logits(lg, yg, bg, groups)
        fd = finite_diff(lambda v: losses.mel_loss(v.reshape(lg.shape), yg, bg, groups)[0],
                         lg.ravel())
        worst["mel_logits"] = max(worst["mel_logits"], rel_error(g, fd))
    return [SuiteResult(k, v, FIRST_ORDER_TOL, instances) for k, v in worst.items()]


def _loss_through_net(kind, model: Model, X, y, b, m, groups):
    logits = nncore.forward(model.extractor, model.classifier, X).logits
    if kind == "ce":
        return losses.ce_loss(logits, y).mean
    if kind == "msl":
        return losses.msl_loss(logits, y, b, m).mean
    return losses.mel_loss(logits, y, b, groups)[0]


def _logit_grad(kind, logits, y, b, m, groups):
    if kind == "ce":
        return losses.ce_grad_logits(losses.ce_loss(logits, y), y)
    if kind == "msl":
        return losses.msl_grad_logits(losses.msl_loss(logits, y, b, m), y)
    return losses.mel_grad_logits(logits, y, b, groups)


def suite_backprop(seed=0, instances=50, corrupt=False):
    """CE / MSL / MEL gradients w.r.t. extractor and classifier parameters."""
    rng = np.random.default_rng(seed + 1)
    worst = {"backprop_theta": 0.0, "backprop_phi": 0.0}
    for k in range(instances):
        C, B, d, n = _instance_dims(rng)
        d_in = int(rng.integers(1, 6))
        hidden = tuple(int(h) for h in rng.integers(1, d + 1, size=rng.integers(1, 3)))
        model = random_net(rng, d_in, hidden, C)
        groups = random_groups(rng, C, B)
        m = rng.normal(size=(C, B))
        kind = ("ce", "msl", "mel")[k % 3]
        while True:
            y, b = covered_labels(rng, n, groups)
            X = rng.normal(size=(len(y), d_in))
            fwd = nncore.forward(model.extractor, model.classifier, X)
            if kind != "mel" or _away_from_kink(fwd.logits, y, b, groups):
                break
        g_theta, g_phi = nncore.backward(fwd, model.extractor, model.classifier,
                                         _logit_grad(kind, fwd.logits, y, b, m, groups))
        if corrupt:
            g_theta = g_theta.with_tensors([t * 1.01 for t in g_theta.tensors()])

        def f_theta(v):
            return _loss_through_net(kind, Model(model.extractor.from_flat(v), model.classifier),
                                     X, y, b, m, groups)

        def f_phi(v):
            return _loss_through_net(kind, Model(model.extractor, model.classifier.from_flat(v)),
                                     X, y, b, m, groups)

        worst["backprop_theta"] = max(worst["backprop_theta"], rel_error(
            g_theta.flat(), finite_diff(f_theta, model.extractor.flat())))
        worst["backprop_phi"] = max(worst["backprop_phi"], rel_error(
            g_phi.flat(), finite_diff(f_phi, model.classifier.flat())))
    return [SuiteResult(k, v, FIRST_ORDER_TOL, instances) for k, v in worst.items()]


def meta_instance(rng, C=None, B=None, d=None, n=None):
    """Small random problem for the margin meta-gradient check."""
    C = C or int(rng.integers(2, 4))
    B = B or int(rng.integers(2, 4))
    d = d or int(rng.integers(1, 6))
    n = n or int(rng.integers(2, 9))
    d_in = int(rng.integers(1, 5))
    model = random_net(rng, d_in, (d,), C)
    y, b = random_labels(rng, n, C, B)
    train = LabeledBatch(rng.normal(size=(n, d_in)), y, b)
    groups = random_groups(rng, C, B)
    ym, bm = covered_labels(rng, 2 * C, groups)
    meta = LabeledBatch(rng.normal(size=(len(ym), d_in)), ym, bm)
    state = TrainState(model, rng.normal(size=(C, B)))
    alpha = float(rng.uniform(0.1, 1.0))
    return state, train, meta, groups, alpha


def meta_outer_loss(state, train, meta, groups, alpha, margins, theta_hat):
    """Outer loss of the look-ahead classifier as a function of the margins.

    The look-ahead extractor is fixed at ``theta_hat``.
    """
    probe = TrainState(state.model, margins)
    _, phi_hat, _ = pseudo_update(probe, train, alpha)
    feats = nncore.extract(theta_hat, meta.X).features
    return losses.mel_loss(nncore.classify(phi_hat, feats), meta.y, meta.b, groups)[0]


def meta_analytic(state, train, meta, groups, alpha):
    theta_hat, phi_hat, cache = pseudo_update(state, train, alpha)
    feats = nncore.extract(theta_hat, meta.X).features
    logits = nncore.classify(phi_hat, feats)
    d = losses.mel_grad_logits(logits, meta.y, meta.b, groups)
    g_phi = nncore.classifier_grad(feats, d)
    return margin_meta_gradient(cache, g_phi, groups.shape[1]), theta_hat, logits


def suite_meta(seed=0, instances=20, corrupt=False, step=1e-4):
    """Closed-form margin meta-gradient against differences through one pseudo-step.

    ``alpha * G`` must equal minus the derivative of the outer loss.
    """
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    done = 0
    while done < instances:
        state, train, meta, groups, alpha = meta_instance(rng)
        G, theta_hat, logits = meta_analytic(state, train, meta, groups, alpha)
        if not _away_from_kink(logits, meta.y, meta.b, groups):
            continue
        if corrupt:
            G = G * 1.01
        C, B = state.margins.shape
        fd = finite_diff(
            lambda v: meta_outer_loss(state, train, meta, groups, alpha, v.reshape(C, B), theta_hat),
            state.margins.ravel(), step)
        worst = max(worst, rel_error(alpha * G, -fd))
        done += 1
    return [SuiteResult("meta_margins", worst, META_TOL, instances)]


SUITES = {
    "logits": suite_logits,
    "backprop": suite_backprop,
    "meta": suite_meta,
}


def run_all(seed=0, instances=50, meta_instances=20, corrupt: str | None = None):
    results = []
    results += suite_logits(seed, instances, corrupt == "logits")
    results += suite_backprop(seed, instances, corrupt == "backprop")
    results += suite_meta(seed, meta_instances, corrupt == "meta")
    return results
