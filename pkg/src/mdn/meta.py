"""Bi-level training: margins learned by a one-step look-ahead meta-gradient.

Each iteration of the ``mdn`` mode:

1. pseudo-update the model with one SGD step on the marginal softmax loss
   (training batch, current margins), without touching the real parameters;
2. evaluate the meta equalized loss of the look-ahead model on a freshly
   drawn group-balanced meta batch and backprop it to the classifier;
3. chain that classifier gradient through the pseudo-step into the margins
   (closed form of the mixed second derivative, :func:`margin_meta_gradient`)
   and take a plain gradient step on the margins;
4. update the real model on the same training batch under the new margins.

Only the classifier depends on the margins in step 3; the look-ahead
extractor is held fixed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import losses, nncore
from .data import (DataBundle, LabeledBatch, check_meta_coverage, sample_balanced_batch,
                   sample_meta_batch, sample_train_batch)
from .errors import ConfigError, NumericError, ShapeError
from .metrics import MetricsReport, PredictionLog, evaluate_log
from .nncore import AdamState, ClassifierParams, Model

log = logging.getLogger(__name__)

MODES = ("mdn", "vanilla", "resample", "mdn_no_mel", "mdn_no_msl")
OPTIMIZERS = ("sgd", "adam")

# named random sub-streams, so ablations share data, init and train batches
STREAM_INIT, STREAM_BATCHES, STREAM_META = 10, 11, 12


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 5e-3
    batch_size: int = 128
    meta_per_group: int = 16
    epochs: int = 10
    seed: int = 0
    mode: str = "mdn"
    optimizer: str = "sgd"
    hidden: tuple = (100, 100)
    activation: str = "relu"

    def validate(self, n_classes: int | None = None, n_bias: int | None = None):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.meta_per_group < 1:
            raise ConfigError("epochs, batch_size and meta_per_group must be >= 1")
        if self.mode.startswith("mdn") and n_classes and n_bias and \
                self.batch_size < n_classes * n_bias:
            raise ConfigError(
                f"batch_size {self.batch_size} < C*B = {n_classes * n_bias} in mode {self.mode}")
        self.hidden = tuple(int(h) for h in self.hidden)
        return self


@dataclass
class TrainState:
    model: Model
    margins: np.ndarray
    t: int = 0
    opt_state: AdamState | None = None
    history: list = field(default_factory=list)

    @property
    def theta(self):
        return self.model.extractor

    @property
    def phi(self):
        return self.model.classifier


def init_state(config: TrainConfig, in_dim: int, n_classes: int, n_bias: int) -> TrainState:
    rng = np.random.default_rng([config.seed, STREAM_INIT])
    model = nncore.init_model(rng, in_dim, config.hidden, n_classes, config.activation)
    opt = AdamState.zeros(model) if config.optimizer == "adam" else None
    return TrainState(model, np.zeros((n_classes, n_bias)), 0, opt)


@dataclass
class PseudoCache:
    """Quantities of the training batch at the pre-update parameters."""

    forward: nncore.ForwardCache
    result: losses.SoftmaxResult
    grads: Model
    y: np.ndarray
    b: np.ndarray

    @property
    def probs(self):
        return self.result.probs

    @property
    def features(self):
        return self.forward.features


def _msl_grads(model: Model, batch: LabeledBatch, margins, fwd=None):
    if fwd is None:
        fwd = nncore.forward(model.extractor, model.classifier, batch.X)
    res = losses.msl_loss(fwd.logits, batch.y, batch.b, margins)
    d = losses.msl_grad_logits(res, batch.y)
    g_theta, g_phi = nncore.backward(fwd, model.extractor, model.classifier, d)
    return fwd, res, Model(g_theta, g_phi)


def pseudo_update(state: TrainState, batch: LabeledBatch, alpha: float):
    """One virtual SGD step on the MSL; returns (theta_hat, phi_hat, cache).

    ``state`` is left untouched.
    """
    fwd, res, grads = _msl_grads(state.model, batch, state.margins)
    ahead = nncore.sgd_step(state.model, grads, alpha)
    return ahead.extractor, ahead.classifier, PseudoCache(fwd, res, grads, batch.y, batch.b)


def margin_meta_gradient(cache: PseudoCache, meta_grad_phi: ClassifierParams,
                         n_bias: int | None = None) -> np.ndarray:
    """Mixed second-derivative term contracted with the outer classifier gradient.

    With ``a_i = meta_grad.weight @ f_i + meta_grad.bias`` and ``p_i`` the
    shifted-logit softmax of training sample ``i``::

        G[k, b] = 1/n * sum_{i: b_i = b} p_ik * (<p_i, a_i> - a_ik)

    The margin update is ``m + alpha * beta * G``; ``alpha * G`` equals minus
    the derivative of the outer loss w.r.t. the margins through the look-ahead
    step.
    """
    p, f = cache.probs, cache.features
    B = n_bias if n_bias is not None else cache.result.n_bias
    if meta_grad_phi.weight.shape != (p.shape[1], f.shape[1]):
        raise ShapeError(
            f"outer gradient {meta_grad_phi.weight.shape} does not match "
            f"{p.shape[1]} classes x {f.shape[1]} features")
    a = f @ meta_grad_phi.weight.T + meta_grad_phi.bias
    contrib = p * ((p * a).sum(axis=1, keepdims=True) - a)
    G = np.zeros((p.shape[1], B))
    np.add.at(G.T, np.asarray(cache.b, dtype=np.intp), contrib)
    return G / p.shape[0]


def margin_step(margins: np.ndarray, G: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    out = margins + alpha * beta * G
    if not np.all(np.isfinite(out)):
        raise NumericError("margins became non-finite")
    return out


def _apply(state: TrainState, grads: Model, config: TrainConfig) -> Model:
    if config.optimizer == "adam":
        model, state.opt_state = nncore.adam_step(state.model, grads, state.opt_state, config.alpha)
        return model
    return nncore.sgd_step(state.model, grads, config.alpha)


def final_update(state: TrainState, batch: LabeledBatch, new_margins: np.ndarray,
                 config: TrainConfig, fwd: nncore.ForwardCache | None = None,
                 record: dict | None = None) -> TrainState:
    """Real model step on the MSL under ``new_margins``; mutates and returns ``state``.

    ``fwd`` may carry the forward pass of ``batch`` at the current parameters
    (it does not depend on the margins).
    """
    fwd, res, grads = _msl_grads(state.model, batch, new_margins, fwd)
    state.model = _apply(state, grads, config)
    state.margins = new_margins
    state.t += 1
    rec = {"t": state.t, "msl": res.mean}
    if record:
        rec.update(record)
    rec["margins"] = new_margins.copy()
    state.history.append(rec)
    return state


def outer_grad_phi(theta_hat, phi_hat, meta: LabeledBatch, bundle: DataBundle, mode: str):
    """Outer loss at the look-ahead model and its gradient w.r.t. the classifier."""
    feats = nncore.extract(theta_hat, meta.X).features
    logits = nncore.classify(phi_hat, feats)
    if mode == "mdn_no_mel":
        value, d = losses.group_mean_ce(logits, meta.y, meta.b, bundle.n_bias)
    else:
        value, _ = losses.mel_loss(logits, meta.y, meta.b, bundle.groups)
        d = losses.mel_grad_logits(logits, meta.y, meta.b, bundle.groups)
    return value, nncore.classifier_grad(feats, d)


def train_step(state: TrainState, bundle: DataBundle, config: TrainConfig,
               batch_rng, meta_rng) -> TrainState:
    mode = config.mode
    if mode == "resample":
        batch = sample_balanced_batch(bundle, config.batch_size, batch_rng)
    else:
        batch = sample_train_batch(bundle, config.batch_size, batch_rng)

    if mode in ("vanilla", "resample"):
        return final_update(state, batch, state.margins, config)

    meta = sample_meta_batch(bundle, config.meta_per_group, meta_rng)
    if mode == "mdn_no_msl":
        fwd, res, g_train = _msl_grads(state.model, batch, state.margins)
        mfwd = nncore.forward(state.theta, state.phi, meta.X)
        mel, _ = losses.mel_loss(mfwd.logits, meta.y, meta.b, bundle.groups)
        d = losses.mel_grad_logits(mfwd.logits, meta.y, meta.b, bundle.groups)
        g_meta = Model(*nncore.backward(mfwd, state.theta, state.phi, d))
        grads = g_train.with_tensors([a + c for a, c in zip(g_train.tensors(), g_meta.tensors())])
        state.model = _apply(state, grads, config)
        state.t += 1
        state.history.append({"t": state.t, "msl": res.mean, "outer": mel,
                              "margins": state.margins.copy()})
        return state

    theta_hat, phi_hat, cache = pseudo_update(state, batch, config.alpha)
    outer, g_phi = outer_grad_phi(theta_hat, phi_hat, meta, bundle, mode)
    G = margin_meta_gradient(cache, g_phi, bundle.n_bias)
    new_m = margin_step(state.margins, G, config.alpha, config.beta)
    return final_update(state, batch, new_m, config, fwd=cache.forward,
                        record={"outer": outer})


def predict(model: Model, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = []
    for i in range(0, X.shape[0], chunk):
        out.append(nncore.forward(model.extractor, model.classifier, X[i:i + chunk]).logits.argmax(1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, split: LabeledBatch, bundle: DataBundle, epoch=-1,
             name="test") -> tuple[MetricsReport, PredictionLog]:
    plog = PredictionLog(split.y, split.b, predict(model, split.X))
    rep = evaluate_log(plog, bundle.n_classes, bundle.n_bias, bundle.groups.aligned,
                       epoch=epoch, split=name)
    return rep, plog


@dataclass
class EpochRecord:
    epoch: int
    val: MetricsReport
    test: MetricsReport
    margins: np.ndarray


@dataclass
class TrainResult:
    state: TrainState
    epochs: list
    best_epoch: int
    best_test: MetricsReport
    best_margins: np.ndarray
    best_predictions: PredictionLog
    best_model: Model

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]


def train(config: TrainConfig, bundle: DataBundle,
          on_iteration: Callable[[TrainState], None] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Run ``config.epochs`` epochs; report test metrics at the best-validation epoch.

    The best epoch is the first one reaching the highest validation unbiased
    accuracy.
    """
    config.validate(bundle.n_classes, bundle.n_bias)
    if config.mode in ("mdn", "mdn_no_mel", "mdn_no_msl"):
        check_meta_coverage(bundle)
    state = init_state(config, bundle.train.X.shape[1], bundle.n_classes, bundle.n_bias)
    batch_rng = np.random.default_rng([config.seed, STREAM_BATCHES])
    meta_rng = np.random.default_rng([config.seed, STREAM_META])
    per_epoch = -(-len(bundle.train) // config.batch_size)

    records, best = [], None
    for epoch in range(1, config.epochs + 1):
        for _ in range(per_epoch):
            train_step(state, bundle, config, batch_rng, meta_rng)
            if on_iteration:
                on_iteration(state)
        val, _ = evaluate(state.model, bundle.val, bundle, epoch, "val")
        test, plog = evaluate(state.model, bundle.test, bundle, epoch, "test")
        rec = EpochRecord(epoch, val, test, state.margins.copy())
        records.append(rec)
        if best is None or val.unbiased_acc > best[0].val.unbiased_acc:
            best = (rec, plog, state.model.copy())
        log.info("epoch %d mode=%s val_unbiased=%.4f test_unbiased=%.4f", epoch,
                 config.mode, val.unbiased_acc, test.unbiased_acc)
        if on_epoch:
            on_epoch(rec)
    rec, plog, model = best
    return TrainResult(state, records, rec.epoch, rec.test, rec.margins, plog, model)


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d
