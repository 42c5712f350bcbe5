"""Dense tensors plus a reverse-mode differentiable layer set.

The design is a recording tape: ops execute eagerly on numpy arrays,
append a backward closure to the active :class:`Tape`, and
``Tape.backward`` replays the closures in exact reverse order. Passing
``tape=None`` runs forward-only (inference). The op set is exactly what
the region-phrase scoring network needs; no broadcasting framework, no
convolutions.

All computation is double precision. Hot forward/backward paths defer to
:mod:`cite.kernels`.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import DimensionError, NumericError, StateError, ValidationError

DTYPE = np.float64


class Tensor:
    """A dense matrix (or scalar) with an optional gradient buffer."""

    __slots__ = ("data", "grad", "name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep shape.
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", trainable" if self.trainable else ""
        return f"Tensor({self.name or 'anon'}, shape={self.data.shape}{flag})"


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Ordered record of executed layers; backward walks it in reverse."""

    def __init__(self):
        self._records: list[tuple[str, Callable[[], None]]] = []

    def record(self, op_name: str, backward: Callable[[], None]):
        self._records.append((op_name, backward))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor, seed_grad: float = 1.0):
        """Propagate gradients from a scalar loss back to every input."""
        if not self._records:
            raise StateError("backward called before any forward op was recorded")
        if loss.data.size != 1:
            raise DimensionError("backward expects a scalar loss tensor")
        loss.grad = np.full_like(loss.data, seed_grad)
        for _, bwd in reversed(self._records):
            bwd()


def _as_2d(t: Tensor, op: str) -> np.ndarray:
    if t.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-d matrix, got shape {t.data.shape}")
    return t.data


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def affine(tape: Optional[Tape], x: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    """x @ w + b for x (n,d), w (d,m), b (m,)."""
    xd, wd = _as_2d(x, "affine"), _as_2d(w, "affine")
    if xd.shape[1] != wd.shape[0]:
        raise DimensionError(
            f"affine: x has {xd.shape[1]} columns but w has {wd.shape[0]} rows"
        )
    out_data = xd @ wd
    if b is not None:
        if b.data.shape != (wd.shape[1],):
            raise DimensionError(
                f"affine: bias shape {b.data.shape} does not match output width {wd.shape[1]}"
            )
        out_data = out_data + b.data
    out = Tensor(out_data)

    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g @ wd.T)
            _accum(w, xd.T @ g)
            if b is not None:
                _accum(b, g.sum(axis=0))
        tape.record("affine", backward)
    return out


def relu(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        positive = x.data > 0.0

        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g * positive)
        tape.record("relu", backward)
    return out


class BatchNormState:
    """Per-feature affine batch normalization with running statistics."""

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5,
                 name: str = "bn"):
        if eps <= 0.0:
            raise ValidationError("batch norm eps must be positive")
        self.gamma = Tensor(np.ones(width), name=f"{name}.gamma", trainable=True)
        self.beta = Tensor(np.zeros(width), name=f"{name}.beta", trainable=True)
        self.running_mean = np.zeros(width, dtype=DTYPE)
        self.running_var = np.ones(width, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps
        self.name = name

    @property
    def width(self) -> int:
        return self.gamma.data.shape[0]


def batch_norm(tape: Optional[Tape], x: Tensor, state: BatchNormState,
               mode: str) -> Tensor:
    """Column batch norm. Train mode uses batch statistics (population
    variance) and updates running stats; infer mode uses running stats."""
    xd = _as_2d(x, "batch_norm")
    if xd.shape[1] != state.width:
        raise DimensionError(
            f"batch_norm: input width {xd.shape[1]} != state width {state.width}"
        )
    if mode == "train":
        if xd.shape[0] < 2:
            raise ValidationError("batch_norm train mode needs a batch of at least 2 rows")
        out_data, xhat, invstd, mean, var = kernels.bn_train_forward(
            xd, state.gamma.data, state.beta.data, state.eps
        )
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var
        out = Tensor(out_data)
        if tape is not None:
            gamma = state.gamma

            def backward():
                g = out.grad
                if g is None:
                    return
                dx, dgamma, dbeta = kernels.bn_train_backward(
                    g, xhat, invstd, gamma.data
                )
                _accum(x, dx)
                _accum(gamma, dgamma)
                _accum(state.beta, dbeta)
            tape.record("batch_norm[train]", backward)
        return out

    if mode != "infer":
        raise ValidationError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")
    invstd = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (xd - state.running_mean) * invstd
    out = Tensor(state.gamma.data * xhat + state.beta.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g * (state.gamma.data * invstd))
            _accum(state.gamma, np.sum(g * xhat, axis=0))
            _accum(state.beta, g.sum(axis=0))
        tape.record("batch_norm[infer]", backward)
    return out


def l2_normalize_rows(tape: Optional[Tape], x: Tensor, eps: float = 1e-10) -> Tensor:
    """Divide each row by max(row 2-norm, eps)."""
    if eps <= 0.0:
        raise ValidationError("l2_normalize_rows eps must be positive")
    xd = _as_2d(x, "l2_normalize_rows")
    out_data, norms = kernels.l2_normalize_rows(xd, eps)
    out = Tensor(out_data)
    if tape is not None:
        denom = np.maximum(norms, eps)[:, None]
        guarded = (norms < eps)[:, None]

        def backward():
            g = out.grad
            if g is None:
                return
            dot = np.sum(g * out.data, axis=1, keepdims=True)
            dx = np.where(guarded, g / eps, (g - out.data * dot) / denom)
            _accum(x, dx)
        tape.record("l2_normalize_rows", backward)
    return out


def hadamard(tape: Optional[Tape], a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape matrices."""
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"hadamard: shapes {a.data.shape} and {b.data.shape} differ"
        )
    out = Tensor(a.data * b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        tape.record("hadamard", backward)
    return out


def pairwise_hadamard(tape: Optional[Tape], t: Tensor, v: Tensor) -> Tensor:
    """All (row of t) x (row of v) elementwise products, laid out so that
    output row i*r+j is t[i] * v[j]."""
    td, vd = _as_2d(t, "pairwise_hadamard"), _as_2d(v, "pairwise_hadamard")
    if td.shape[1] != vd.shape[1]:
        raise DimensionError(
            f"pairwise_hadamard: widths {td.shape[1]} and {vd.shape[1]} differ"
        )
    p, m = td.shape
    r = vd.shape[0]
    out = Tensor(kernels.pairwise_hadamard(td, vd))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            g3 = g.reshape(p, r, m)
            _accum(t, np.einsum("prm,rm->pm", g3, vd))
            _accum(v, np.einsum("prm,pm->rm", g3, td))
        tape.record("pairwise_hadamard", backward)
    return out


def repeat_rows(tape: Optional[Tape], x: Tensor, reps: int) -> Tensor:
    """Repeat each row `reps` times consecutively."""
    xd = _as_2d(x, "repeat_rows")
    n, k = xd.shape
    out = Tensor(np.repeat(xd, reps, axis=0))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g.reshape(n, reps, k).sum(axis=1))
        tape.record("repeat_rows", backward)
    return out


def softmax_rows(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Numerically stable row softmax."""
    out = Tensor(kernels.softmax_rows(_as_2d(x, "softmax_rows")))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            s = out.data
            _accum(x, (g - np.sum(g * s, axis=1, keepdims=True)) * s)
        tape.record("softmax_rows", backward)
    return out


def fuse(tape: Optional[Tape], conds: list[Tensor], u: Tensor) -> Tensor:
    """Weighted sum of K conditional outputs: out = sum_k conds[k] * u[:, k].

    This is the matrix-vector product F = C U applied batchwise, with C the
    (M, K) matrix of conditional embedding outputs per pair.
    """
    ud = _as_2d(u, "fuse")
    if len(conds) != ud.shape[1]:
        raise DimensionError(
            f"fuse: {len(conds)} conditional outputs but weights have {ud.shape[1]} columns"
        )
    base = _as_2d(conds[0], "fuse")
    for c in conds[1:]:
        if c.data.shape != base.shape:
            raise DimensionError("fuse: conditional outputs must share one shape")
    if ud.shape[0] != base.shape[0]:
        raise DimensionError(
            f"fuse: weights have {ud.shape[0]} rows but conditionals have {base.shape[0]}"
        )
    out_data = np.zeros_like(base)
    for k, c in enumerate(conds):
        out_data += c.data * ud[:, k:k + 1]
    out = Tensor(out_data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            du = np.empty_like(ud)
            for k, c in enumerate(conds):
                _accum(c, g * ud[:, k:k + 1])
                du[:, k] = np.sum(g * c.data, axis=1)
            _accum(u, du)
        tape.record("fuse", backward)
    return out


# ---------------------------------------------------------------------------
# losses and scalar combinators
# ---------------------------------------------------------------------------

def logistic_loss(tape: Optional[Tape], scores: Tensor, labels: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> Tensor:
    """Sum over unmasked entries of log(1 + exp(-label * score)).

    Labels must be +1 or -1 wherever the mask is nonzero.
    """
    labels = np.asarray(labels, dtype=DTYPE)
    if labels.shape != scores.data.shape:
        raise DimensionError(
            f"logistic_loss: labels shape {labels.shape} != scores shape {scores.data.shape}"
        )
    if mask is None:
        mask_flat = np.ones(labels.size, dtype=DTYPE)
    else:
        mask = np.asarray(mask, dtype=DTYPE)
        if mask.shape != labels.shape:
            raise DimensionError("logistic_loss: mask shape differs from scores")
        mask_flat = np.ascontiguousarray(mask.ravel())
    labels_flat = np.ascontiguousarray(labels.ravel())
    if not np.all((np.abs(labels_flat) == 1.0) | (mask_flat == 0.0)):
        raise ValidationError("logistic_loss labels must be +1 or -1")
    scores_flat = np.ascontiguousarray(scores.data.ravel())
    loss, grad_flat = kernels.logistic_loss_grad(scores_flat, labels_flat, mask_flat)
    out = Tensor(np.asarray(loss))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(scores, float(g) * grad_flat.reshape(scores.data.shape))
        tape.record("logistic_loss", backward)
    return out


def l1_norm(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Sum of absolute values; subgradient at 0 is 0."""
    out = Tensor(np.asarray(np.sum(np.abs(x.data))))
    if tape is not None:
        sign = np.sign(x.data)

        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, float(g) * sign)
        tape.record("l1_norm", backward)
    return out


def sum_all(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Sum of all entries."""
    out = Tensor(np.asarray(np.sum(x.data)))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, np.full_like(x.data, float(g)))
        tape.record("sum_all", backward)
    return out


def add(tape: Optional[Tape], a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (used for scalar losses)."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(a, g)
            _accum(b, g)
        tape.record("add", backward)
    return out


def scale(tape: Optional[Tape], x: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    out = Tensor(x.data * c)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g * c)
        tape.record("scale", backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn: Callable[[Optional[Tape]], Tensor],
               params: dict[str, Tensor],
               h: float = 1e-5,
               samples_per_tensor: int = 200,
               seed: int = 0,
               exclude: Optional[dict[str, np.ndarray]] = None) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn(tape)` must rebuild the forward pass from the current values of
    `params` and return the scalar loss; it is called once with a recording
    tape for the analytic gradient and twice per sampled coordinate for the
    finite differences. Per tensor, min(samples_per_tensor, size) coordinates
    are sampled without replacement; `exclude[name]` masks coordinates out
    (e.g. inputs sitting exactly on a relu kink). Returns the max of
    |ga - gn| / max(|ga|, |gn|, 1e-8) over all sampled coordinates.

    A coordinate can fail at step h for two spurious reasons even when the
    analytic gradient is right: the difference straddles a relu kink (fixed
    by a smaller step), or the true gradient is so small that double
    precision rounding of the loss dominates the quotient (fixed by a larger
    step). Suspicious coordinates are therefore re-measured over a ladder of
    steps around h and the best agreement is kept; a genuinely wrong
    analytic gradient keeps failing at every step.
    """
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    if not np.isfinite(loss.data):
        raise NumericError("grad_check: loss is not finite")
    tape.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    def eval_loss() -> float:
        value = float(loss_fn(None).data)
        if not np.isfinite(value):
            raise NumericError("grad_check: perturbed loss is not finite")
        return value

    max_rel = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        size = flat.size
        if size <= samples_per_tensor:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=samples_per_tensor, replace=False)
        skip = None
        if exclude is not None and name in exclude:
            skip = np.asarray(exclude[name], dtype=bool).reshape(-1)
        ga_flat = analytic[name].reshape(-1)

        def central(idx: int, step: float) -> float:
            orig = flat[idx]
            flat[idx] = orig + step
            up = eval_loss()
            flat[idx] = orig - step
            down = eval_loss()
            flat[idx] = orig
            return (up - down) / (2.0 * step)

        for idx in coords:
            if skip is not None and skip[idx]:
                continue
            ga = ga_flat[idx]
            rel = None
            for step in (h, h / 8.0, h / 64.0, 8.0 * h, 64.0 * h, 512.0 * h):
                try:
                    gn = central(idx, step)
                except NumericError:
                    if step == h:
                        raise
                    continue  # aggressive refinement step left the finite region
                err = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
                rel = err if rel is None else min(rel, err)
                if rel <= 1e-6:
                    break
            if rel > max_rel:
                max_rel = rel
    return max_rel
