"""Cross-entropy, marginal softmax loss and meta equalized loss.

Every gradient is returned at the logit level (n x C) so a single
:func:`mdn.nncore.backward` serves all three losses. Gradients of batch-mean
losses already include the 1/n factor.

The marginal softmax loss shifts each sample's logits by the margin column of
its bias class before the usual softmax cross-entropy::

    z_k = logit_k - margins[k, b_i]
    loss_i = logsumexp(z) - z[y_i]

With an all-zero margin table it is plain cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import CoverageError, DataError, ShapeError

if TYPE_CHECKING:
    from .data import GroupTable


@dataclass
class SoftmaxResult:
    probs: np.ndarray
    losses: np.ndarray
    mean: float
    n_bias: int | None = None


def _check_labels(logits, y, name="y", n=None):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    if logits.shape[0] == 0:
        raise DataError("empty batch")
    y = np.asarray(y)
    if y.shape != (logits.shape[0],):
        raise ShapeError(f"{name} has shape {y.shape}, expected ({logits.shape[0]},)")
    hi = logits.shape[1] if n is None else n
    if y.size and (y.min() < 0 or y.max() >= hi):
        raise DataError(f"{name} labels outside [0, {hi})")
    return logits, y.astype(np.intp)


def _softmax_xent(z: np.ndarray, y: np.ndarray) -> SoftmaxResult:
    shift = z - z.max(axis=1, keepdims=True)
    e = np.exp(shift)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    losses = np.log(s[:, 0]) - shift[np.arange(len(y)), y]
    return SoftmaxResult(probs, losses, float(losses.mean()))


def ce_loss(logits, y) -> SoftmaxResult:
    logits, y = _check_labels(logits, y)
    return _softmax_xent(logits, y)


def msl_loss(logits, y, b, margins) -> SoftmaxResult:
    logits, y = _check_labels(logits, y)
    margins = np.asarray(margins, dtype=np.float64)
    if margins.ndim != 2 or margins.shape[0] != logits.shape[1]:
        raise ShapeError(f"margin table {margins.shape} does not match {logits.shape[1]} classes")
    _, b = _check_labels(logits, b, "b", margins.shape[1])
    res = _softmax_xent(logits - margins[:, b].T, y)
    res.n_bias = margins.shape[1]
    return res


def _onehot(y, C):
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y] = 1.0
    return out


def msl_grad_logits(result: SoftmaxResult, y) -> np.ndarray:
    p = result.probs
    return (p - _onehot(np.asarray(y, dtype=np.intp), p.shape[1])) / p.shape[0]


ce_grad_logits = msl_grad_logits


def msl_grad_margins(result: SoftmaxResult, y, b, n_bias: int | None = None) -> np.ndarray:
    """Gradient of the batch-mean MSL w.r.t. the C x B margin table.

    Margins enter only as ``logit - margin`` so each sample contributes the
    negation of its logit gradient to its own bias column.
    """
    B = n_bias if n_bias is not None else result.n_bias
    if B is None:
        raise ShapeError("number of bias classes unknown")
    b = np.asarray(b, dtype=np.intp)
    g = -msl_grad_logits(result, y)
    out = np.zeros((result.probs.shape[1], B))
    np.add.at(out.T, b, g)
    return out


def _group_members(y, b, groups: "GroupTable"):
    """Yield (class, conflicting index array, aligned index array) per class in the batch.

    Classes whose table has no conflicting cell (count ties) are skipped: their
    gap is zero by definition.
    """
    aligned = groups.aligned[y, b]
    for c in np.unique(y):
        if groups.aligned[c].all():
            continue
        in_c = y == c
        conf = np.flatnonzero(in_c & ~aligned)
        alig = np.flatnonzero(in_c & aligned)
        if conf.size == 0 or alig.size == 0:
            side = "conflicting" if conf.size == 0 else "aligned"
            raise CoverageError(f"class {c} has no {side} samples in the batch")
        yield c, conf, alig


def mel_loss(logits, y, b, groups: "GroupTable") -> tuple[float, np.ndarray]:
    """Sum over classes of |mean CE(conflicting) - mean CE(aligned)|.

    Returns the loss and the signed per-class gaps (zero for classes absent
    from the batch).
    """
    logits, y = _check_labels(logits, y)
    _, b = _check_labels(logits, b, "b", groups.aligned.shape[1])
    losses = _softmax_xent(logits, y).losses
    gaps = np.zeros(logits.shape[1])
    for c, conf, alig in _group_members(y, b, groups):
        gaps[c] = losses[conf].mean() - losses[alig].mean()
    return float(np.abs(gaps).sum()), gaps


def mel_grad_logits(logits, y, b, groups: "GroupTable") -> np.ndarray:
    logits, y = _check_labels(logits, y)
    _, b = _check_labels(logits, b, "b", groups.aligned.shape[1])
    res = _softmax_xent(logits, y)
    per_sample = res.probs - _onehot(y, logits.shape[1])
    weight = np.zeros(len(y))
    for c, conf, alig in _group_members(y, b, groups):
        gap = res.losses[conf].mean() - res.losses[alig].mean()
        sign = np.sign(gap)
        weight[conf] = sign / conf.size
        weight[alig] = -sign / alig.size
    return per_sample * weight[:, None]


def group_mean_ce(logits, y, b, n_bias: int) -> tuple[float, np.ndarray]:
    """Unweighted mean over present (y, b) cells of the cell-mean CE, and its logit gradient.

    Outer objective of the "no meta equalized loss" ablation.
    """
    logits, y = _check_labels(logits, y)
    _, b = _check_labels(logits, b, "b", n_bias)
    res = _softmax_xent(logits, y)
    cell = y * n_bias + b
    ids, inverse, counts = np.unique(cell, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=res.losses)
    value = float((sums / counts).mean())
    w = 1.0 / (counts[inverse] * len(ids))
    grad = (res.probs - _onehot(y, logits.shape[1])) * w[:, None]
    return value, grad
