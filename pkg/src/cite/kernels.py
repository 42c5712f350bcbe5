"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: a vectorized numpy implementation and an
explicit-loop numba ``@njit`` version. The active set is picked once at
import time: numba when importable, unless ``CITE_NUMBA=0`` forces the
numpy path. Both paths agree to floating-point reassociation tolerance;
within one selected path results are bitwise deterministic.

``benchmarks/bench_kernels.py`` times the two paths side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "BACKEND",
    "iou_matrix",
    "softmax_rows",
    "logistic_loss_grad",
    "l2_normalize_rows",
    "bn_train_forward",
    "bn_train_backward",
    "sqdist_argmin",
    "pairwise_hadamard",
    "numpy_impls",
    "build_numba_impls",
]


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _iou_matrix_np(a, b):
    """Pairwise IOU of two box arrays (n,4) x (m,4) -> (n,m)."""
    ax1, ay1, ax2, ay2 = a[:, 0:1], a[:, 1:2], a[:, 2:3], a[:, 3:4]
    bx1, by1, bx2, by2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def _softmax_rows_np(x):
    """Max-shifted row softmax."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _logistic_loss_grad_np(scores, labels, mask):
    """Masked sum of log(1+exp(-y*x)) and its gradient w.r.t. scores.

    Computed as max(z,0) + log1p(exp(-|z|)) with z = -y*x, which never
    overflows.
    """
    z = -labels * scores
    ez = np.exp(-np.abs(z))
    loss = float(np.sum(mask * (np.maximum(z, 0.0) + np.log1p(ez))))
    sig = np.where(z >= 0.0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    grad = mask * (-labels) * sig
    return loss, grad


def _l2_normalize_rows_np(x, eps):
    """Divide each row by max(row 2-norm, eps); also returns the raw norms."""
    norms = np.sqrt(np.sum(x * x, axis=1))
    denom = np.maximum(norms, eps)
    return x / denom[:, None], norms


def _bn_train_forward_np(x, gamma, beta, eps):
    """Train-mode batch norm over columns with population variance.

    Returns (out, xhat, invstd, mean, var); mean/var feed the running-stat
    update, xhat/invstd feed the backward pass.
    """
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * invstd
    out = gamma * xhat + beta
    return out, xhat, invstd, mean, var


def _bn_train_backward_np(dout, xhat, invstd, gamma):
    """Backward of train-mode batch norm -> (dx, dgamma, dbeta)."""
    n = dout.shape[0]
    dgamma = np.sum(dout * xhat, axis=0)
    dbeta = np.sum(dout, axis=0)
    dx = (gamma * invstd) * (dout - dbeta / n - xhat * (dgamma / n))
    return dx, dgamma, dbeta


def _sqdist_argmin_np(x, centers):
    """Index of the nearest center per row (squared Euclidean, ties -> lowest)."""
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centers.T)
        + np.sum(centers * centers, axis=1)[None, :]
    )
    labels = np.argmin(d2, axis=1)
    dists = np.maximum(d2[np.arange(x.shape[0]), labels], 0.0)
    return labels.astype(np.int64), dists


def _pairwise_hadamard_np(t, v):
    """All-pairs elementwise product: (p,m) x (r,m) -> (p*r, m), row i*r+j = t[i]*v[j]."""
    p, m = t.shape
    r = v.shape[0]
    return (t[:, None, :] * v[None, :, :]).reshape(p * r, m)


def numpy_impls():
    return {
        "iou_matrix": _iou_matrix_np,
        "softmax_rows": _softmax_rows_np,
        "logistic_loss_grad": _logistic_loss_grad_np,
        "l2_normalize_rows": _l2_normalize_rows_np,
        "bn_train_forward": _bn_train_forward_np,
        "bn_train_backward": _bn_train_backward_np,
        "sqdist_argmin": _sqdist_argmin_np,
        "pairwise_hadamard": _pairwise_hadamard_np,
    }


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def build_numba_impls():
    """Compile the numba kernel set. Raises ImportError when numba is absent."""
    from numba import njit

    @njit(cache=True)
    def iou_matrix(a, b):
        n = a.shape[0]
        m = b.shape[0]
        out = np.zeros((n, m))
        for i in range(n):
            ax1, ay1, ax2, ay2 = a[i, 0], a[i, 1], a[i, 2], a[i, 3]
            area_a = (ax2 - ax1) * (ay2 - ay1)
            for j in range(m):
                iw = min(ax2, b[j, 2]) - max(ax1, b[j, 0])
                ih = min(ay2, b[j, 3]) - max(ay1, b[j, 1])
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
                if union > 0.0:
                    out[i, j] = inter / union
        return out

    @njit(cache=True)
    def softmax_rows(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            hi = x[i, 0]
            for j in range(1, m):
                if x[i, j] > hi:
                    hi = x[i, j]
            total = 0.0
            for j in range(m):
                e = math.exp(x[i, j] - hi)
                out[i, j] = e
                total += e
            for j in range(m):
                out[i, j] /= total
        return out

    @njit(cache=True)
    def logistic_loss_grad(scores, labels, mask):
        n = scores.shape[0]
        grad = np.zeros_like(scores)
        loss = 0.0
        for i in range(n):
            if mask[i] == 0.0:
                continue
            z = -labels[i] * scores[i]
            ez = math.exp(-abs(z))
            loss += mask[i] * (max(z, 0.0) + math.log1p(ez))
            if z >= 0.0:
                sig = 1.0 / (1.0 + ez)
            else:
                sig = ez / (1.0 + ez)
            grad[i] = mask[i] * (-labels[i]) * sig
        return loss, grad

    @njit(cache=True)
    def l2_normalize_rows(x, eps):
        n, m = x.shape
        out = np.empty_like(x)
        norms = np.empty(n)
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += x[i, j] * x[i, j]
            norm = math.sqrt(s)
            norms[i] = norm
            denom = norm if norm > eps else eps
            for j in range(m):
                out[i, j] = x[i, j] / denom
        return out, norms

    @njit(cache=True)
    def bn_train_forward(x, gamma, beta, eps):
        n, m = x.shape
        mean = np.zeros(m)
        var = np.zeros(m)
        for i in range(n):
            for j in range(m):
                mean[j] += x[i, j]
        for j in range(m):
            mean[j] /= n
        for i in range(n):
            for j in range(m):
                d = x[i, j] - mean[j]
                var[j] += d * d
        for j in range(m):
            var[j] /= n
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = np.empty_like(x)
        out = np.empty_like(x)
        for i in range(n):
            for j in range(m):
                xhat[i, j] = (x[i, j] - mean[j]) * invstd[j]
                out[i, j] = gamma[j] * xhat[i, j] + beta[j]
        return out, xhat, invstd, mean, var

    @njit(cache=True)
    def bn_train_backward(dout, xhat, invstd, gamma):
        n, m = dout.shape
        dgamma = np.zeros(m)
        dbeta = np.zeros(m)
        for i in range(n):
            for j in range(m):
                dgamma[j] += dout[i, j] * xhat[i, j]
                dbeta[j] += dout[i, j]
        dx = np.empty_like(dout)
        for i in range(n):
            for j in range(m):
                dx[i, j] = (gamma[j] * invstd[j]) * (
                    dout[i, j] - dbeta[j] / n - xhat[i, j] * (dgamma[j] / n)
                )
        return dx, dgamma, dbeta

    @njit(cache=True)
    def sqdist_argmin(x, centers):
        n = x.shape[0]
        k, d = centers.shape
        labels = np.zeros(n, dtype=np.int64)
        dists = np.zeros(n)
        for i in range(n):
            best = np.inf
            best_k = 0
            for c in range(k):
                s = 0.0
                for j in range(d):
                    diff = x[i, j] - centers[c, j]
                    s += diff * diff
                if s < best:
                    best = s
                    best_k = c
            labels[i] = best_k
            dists[i] = best
        return labels, dists

    @njit(cache=True)
    def pairwise_hadamard(t, v):
        p, m = t.shape
        r = v.shape[0]
        out = np.empty((p * r, m))
        for i in range(p):
            for j in range(r):
                row = i * r + j
                for c in range(m):
                    out[row, c] = t[i, c] * v[j, c]
        return out

    return {
        "iou_matrix": iou_matrix,
        "softmax_rows": softmax_rows,
        "logistic_loss_grad": logistic_loss_grad,
        "l2_normalize_rows": l2_normalize_rows,
        "bn_train_forward": bn_train_forward,
        "bn_train_backward": bn_train_backward,
        "sqdist_argmin": sqdist_argmin,
        "pairwise_hadamard": pairwise_hadamard,
    }


def _select():
    flag = os.environ.get("CITE_NUMBA", "").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return numpy_impls(), "numpy"
    try:
        return build_numba_impls(), "numba"
    except ImportError:
        return numpy_impls(), "numpy"


_IMPLS, BACKEND = _select()

iou_matrix = _IMPLS["iou_matrix"]
softmax_rows = _IMPLS["softmax_rows"]
logistic_loss_grad = _IMPLS["logistic_loss_grad"]
l2_normalize_rows = _IMPLS["l2_normalize_rows"]
bn_train_forward = _IMPLS["bn_train_forward"]
bn_train_backward = _IMPLS["bn_train_backward"]
sqdist_argmin = _IMPLS["sqdist_argmin"]
pairwise_hadamard = _IMPLS["pairwise_hadamard"]
