"""Dense feed-forward network with hand-written forward/backward passes.

The model is ``classifier(extractor(x))``: an MLP feature extractor followed
by a linear classifier producing logits. Everything is float64.

Parameter containers expose ``tensors()`` / ``with_tensors()`` so the update
rules (:func:`sgd_step`, :func:`adam_step`) work on any of them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(z, a, kind):
    # derivative of the activation, given pre-activation z and output a
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class _Tensors:
    """Mixin: flat list view of the arrays held by a parameter container."""

    def tensors(self) -> list[np.ndarray]:
        raise NotImplementedError

    def with_tensors(self, arrays: Sequence[np.ndarray]):
        raise NotImplementedError

    def copy(self):
        return self.with_tensors([t.copy() for t in self.tensors()])

    def zeros_like(self):
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])

    def flat(self) -> np.ndarray:
        ts = self.tensors()
        if not ts:
            return np.zeros(0)
        return np.concatenate([t.ravel() for t in ts])

    def from_flat(self, vec: np.ndarray):
        out, i = [], 0
        for t in self.tensors():
            out.append(np.asarray(vec[i:i + t.size], dtype=np.float64).reshape(t.shape))
            i += t.size
        if i != len(vec):
            raise ShapeError(f"flat vector has {len(vec)} entries, expected {i}")
        return self.with_tensors(out)


@dataclass
class ExtractorParams(_Tensors):
    """MLP layers as (weight d_out x d_in, bias d_out) pairs.

    An empty layer list is the identity extractor (features = inputs).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases differ in length")
        for k, (w, c) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or c.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {c.shape} mismatch")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k}: in-dim {w.shape[1]} != layer {k - 1} out-dim "
                    f"{self.weights[k - 1].shape[0]}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def out_dim(self, in_dim: int) -> int:
        return self.weights[-1].shape[0] if self.weights else in_dim

    def tensors(self):
        out = []
        for w, c in zip(self.weights, self.biases):
            out += [w, c]
        return out

    def with_tensors(self, arrays):
        arrays = list(arrays)
        return ExtractorParams(arrays[0::2], arrays[1::2], self.activation)


@dataclass
class ClassifierParams(_Tensors):
    """Linear classifier: logits = features @ weight.T + bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"classifier weight {self.weight.shape} / bias {self.bias.shape}")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def tensors(self):
        return [self.weight, self.bias]

    def with_tensors(self, arrays):
        w, c = arrays
        return ClassifierParams(w, c)


@dataclass
class Model(_Tensors):
    """Extractor and classifier bundled so one optimizer state covers both."""

    extractor: ExtractorParams
    classifier: ClassifierParams

    def tensors(self):
        return self.extractor.tensors() + self.classifier.tensors()

    def with_tensors(self, arrays):
        arrays = list(arrays)
        k = len(self.extractor.tensors())
        return Model(self.extractor.with_tensors(arrays[:k]),
                     self.classifier.with_tensors(arrays[k:]))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    features: np.ndarray | None = None
    logits: np.ndarray | None = None


def init_model(rng: np.random.Generator, in_dim: int, hidden: Sequence[int],
               n_classes: int, activation: str = "relu") -> Model:
    """Glorot-uniform weights, zero biases."""
    dims = [in_dim, *hidden]
    ws, cs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (d_in + d_out))
        ws.append(rng.uniform(-s, s, size=(d_out, d_in)))
        cs.append(np.zeros(d_out))
    d = dims[-1]
    s = np.sqrt(6.0 / (d + n_classes))
    clf = ClassifierParams(rng.uniform(-s, s, size=(n_classes, d)), np.zeros(n_classes))
    return Model(ExtractorParams(ws, cs, activation), clf)


def extract(theta: ExtractorParams, X: np.ndarray) -> ForwardCache:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"inputs must be 2-D, got shape {X.shape}")
    cache = ForwardCache(inputs=X)
    h = X
    for k, (w, c) in enumerate(zip(theta.weights, theta.biases)):
        if h.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {k}: expects in-dim {w.shape[1]}, got {h.shape[1]}")
        z = h @ w.T + c
        h = _activate(z, theta.activation)
        cache.pre.append(z)
        cache.post.append(h)
    cache.features = h
    return cache


def classify(phi: ClassifierParams, features: np.ndarray) -> np.ndarray:
    if features.shape[1] != phi.weight.shape[1]:
        raise ShapeError(
            f"classifier: expects feature dim {phi.weight.shape[1]}, got {features.shape[1]}")
    return features @ phi.weight.T + phi.bias


def forward(theta: ExtractorParams, phi: ClassifierParams, X: np.ndarray) -> ForwardCache:
    cache = extract(theta, X)
    cache.logits = classify(phi, cache.features)
    return cache


def classifier_grad(features: np.ndarray, dlogits: np.ndarray) -> ClassifierParams:
    return ClassifierParams(dlogits.T @ features, dlogits.sum(axis=0))


def backward(cache: ForwardCache, theta: ExtractorParams, phi: ClassifierParams,
             dlogits: np.ndarray) -> tuple[ExtractorParams, ClassifierParams]:
    """Gradients of a scalar objective given its derivative w.r.t. the logits.

    ``dlogits`` is taken as the full derivative of the objective (the loss
    gradient helpers already fold in the 1/n batch mean), so no further
    scaling happens here.
    """
    if cache.logits is None or dlogits.shape != cache.logits.shape:
        raise ShapeError(f"upstream gradient shape {np.shape(dlogits)} does not match logits")
    g_phi = classifier_grad(cache.features, dlogits)
    g_ws, g_cs = [None] * theta.n_layers, [None] * theta.n_layers
    delta = dlogits @ phi.weight
    for k in range(theta.n_layers - 1, -1, -1):
        dz = delta * _activate_grad(cache.pre[k], cache.post[k], theta.activation)
        h_in = cache.post[k - 1] if k > 0 else cache.inputs
        g_ws[k] = dz.T @ h_in
        g_cs[k] = dz.sum(axis=0)
        if k > 0:
            delta = dz @ theta.weights[k]
    return ExtractorParams(g_ws, g_cs, theta.activation), g_phi


def _check_finite(grads: _Tensors):
    for k, g in enumerate(grads.tensors()):
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise NumericError(f"non-finite gradient in tensor {k} at index {tuple(bad)}")


def sgd_step(params, grads, lr: float):
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    _check_finite(grads)
    ps, gs = params.tensors(), grads.tensors()
    if [p.shape for p in ps] != [g.shape for g in gs]:
        raise ShapeError("parameter and gradient shapes differ")
    return params.with_tensors([p - lr * g for p, g in zip(ps, gs)])


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params.tensors()],
                   [np.zeros_like(p) for p in params.tensors()])

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    _check_finite(grads)
    ps, gs = params.tensors(), grads.tensors()
    if [p.shape for p in ps] != [m.shape for m in state.m]:
        raise ShapeError("optimizer state does not match parameters")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_tensors(new_p), AdamState(new_m, new_v, t)


def finite_diff(loss_fn: Callable[[np.ndarray], float], at: np.ndarray,
                step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at the flat vector ``at``."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(at, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        up = float(loss_fn(x))
        x[i] = orig - step
        down = float(loss_fn(x))
        x[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (up - down) / (2 * step)
    return grad


def rel_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error between two gradient estimates."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
