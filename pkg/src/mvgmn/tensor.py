"""Dense numeric substrate with reverse-mode autodiff on a gradient tape.

Tensors wrap numpy arrays (float32 for training/benchmark runs, float64 for
gradient checking) and are treated as immutable values. Inside a ``GradTape``
context, every operation whose inputs require gradients appends a backward
closure to the tape; ``GradTape.backward`` replays the closures in reverse
execution order, which is a reverse topological order of the graph, visiting
each recorded operation exactly once. Gradients accumulate additively across
fan-out.

Outside a tape context operations run plain numpy with no recording, which is
the inference/benchmark fast path.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)

_finite_checks_enabled = True


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable/disable NaN/Inf checking on op outputs."""
    global _finite_checks_enabled
    prev = _finite_checks_enabled
    _finite_checks_enabled = enabled
    try:
        yield
    finally:
        _finite_checks_enabled = prev


def _check_finite(data: np.ndarray) -> None:
    if _finite_checks_enabled and not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")


class Tensor:
    """Immutable-by-convention array value, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # Convenience arithmetic; the named functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_active_tape: "GradTape | None" = None


class GradTape:
    """Single-writer record of operations for one forward/backward pass."""

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def __enter__(self) -> "GradTape":
        global _active_tape
        if _active_tape is not None:
            raise ConfigurationError("gradient tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._ops.append(backward_fn)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and replay closures in reverse order."""
        if loss.data.size != 1:
            raise DimensionError("backward requires a scalar loss")
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("loss is non-finite")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()


def _make(data: np.ndarray) -> Tensor:
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires = False
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, backward_fn: Callable[[], None]) -> None:
    out.requires = True
    _active_tape.record(backward_fn)


def _tracking(*tensors: Tensor) -> bool:
    return _active_tape is not None and any(t.requires for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def custom_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an externally computed forward result as a differentiable op.

    ``backward`` receives d(loss)/d(out) and must return one gradient array
    (or None) per input, in order. Used by ops whose backward is hand-derived
    rather than composed, e.g. the selective scan recurrence.
    """
    inputs = list(inputs)
    out = _make(out_data)
    if _tracking(*inputs):

        def bwd():
            g = out.grad
            if g is None:
                return
            grads = backward(g)
            for t, gt in zip(inputs, grads):
                if t.requires and gt is not None:
                    _accum(t, gt)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a  # scalar + tensor
    if isinstance(b, (int, float)):
        out = _make(a.data + b)
        if _tracking(a):

            def bwd():
                if out.grad is not None:
                    _accum(a, out.grad)

            _record(out, bwd)
        return out
    out = _make(a.data + b.data)
    if _tracking(a, b):

        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires:
                _accum(b, _unbroadcast(g, b.data.shape))

        _record(out, bwd)
    return out


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    if isinstance(a, (int, float)):
        return add(mul(b, -1.0), a)
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, (int, float)):
        out = _make(a.data * b)
        if _tracking(a):

            def bwd():
                if out.grad is not None:
                    _accum(a, out.grad * b)

            _record(out, bwd)
        return out
    out = _make(a.data * b.data)
    if _tracking(a, b):

        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

        _record(out, bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product; batched stacks go through bmm."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = _make(a.data @ b.data)
    if _tracking(a, b):

        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires:
                _accum(a, g @ b.data.T)
            if b.requires:
                _accum(b, a.data.T @ g)

        _record(out, bwd)
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading axes."""
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim:
        raise DimensionError(
            f"bmm expects equal-rank stacks of matrices, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"bmm shapes do not compose: {a.data.shape} @ {b.data.shape}"
        )
    out = _make(np.matmul(a.data, b.data))
    if _tracking(a, b):

        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires:
                _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
            if b.requires:
                _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

        _record(out, bwd)
    return out


def swap_last(a: Tensor) -> Tensor:
    out = _make(np.swapaxes(a.data, -1, -2).copy())
    if _tracking(a):

        def bwd():
            if out.grad is not None:
                _accum(a, np.swapaxes(out.grad, -1, -2))

        _record(out, bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape))
    if _tracking(a):

        def bwd():
            if out.grad is not None:
                _accum(a, out.grad.reshape(a.data.shape))

        _record(out, bwd)
    return out


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows along axis -2 (sequence axis); backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = _make(np.take(a.data, idx, axis=-2))
    if _tracking(a):

        def bwd():
            g = out.grad
            if g is None:
                return
            full = np.zeros_like(a.data)
            np.add.at(np.moveaxis(full, -2, 0), idx, np.moveaxis(g, -2, 0))
            _accum(a, full)

        _record(out, bwd)
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    out = _make(np.concatenate([p.data for p in parts], axis=axis))
    if _tracking(*parts):
        sizes = [p.data.shape[axis] for p in parts]

        def bwd():
            g = out.grad
            if g is None:
                return
            start = 0
            for p, n in zip(parts, sizes):
                if p.requires:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, start + n)
                    _accum(p, g[tuple(sl)])
                start += n

        _record(out, bwd)
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0))
    if _tracking(a):

        def bwd():
            if out.grad is not None:
                # subgradient at 0 is 0
                _accum(a, out.grad * (a.data > 0))

        _record(out, bwd)
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data))
    if _tracking(a):

        def bwd():
            if out.grad is not None:
                _accum(a, out.grad * out.data)

        _record(out, bwd)
    return out


def sigmoid_stable(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for large |x| (plain ndarray math)."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Tensor) -> Tensor:
    out = _make(np.logaddexp(0.0, a.data).astype(a.data.dtype))
    if _tracking(a):

        def bwd():
            if out.grad is not None:
                _accum(a, out.grad * sigmoid_stable(a.data))

        _record(out, bwd)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _make(np.asarray(a.data.sum(), dtype=a.data.dtype))
    if _tracking(a):

        def bwd():
            if out.grad is not None:
                _accum(a, np.broadcast_to(out.grad, a.data.shape).copy())

        _record(out, bwd)
    return out


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims))
    if _tracking(a):

        def bwd():
            g = out.grad
            if g is None:
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

        _record(out, bwd)
    return out


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.data.shape[axis]
    out = _make(a.data.mean(axis=axis, keepdims=keepdims))
    if _tracking(a):

        def bwd():
            g = out.grad
            if g is None:
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction.

    Allocates a single output array (rows can be benchmark-sized).
    """
    p = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = _make(p)
    if _tracking(a):

        def bwd():
            g = out.grad
            if g is None:
                return
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accum(a, p * (g - dot))

        _record(out, bwd)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between row softmaxes and integer labels."""
    x = logits.data
    if x.ndim != 2:
        raise DimensionError(f"expected [batch, classes] logits, got {x.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (x.shape[0],):
        raise DimensionError("labels must have one entry per logits row")
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = x.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    out = _make(np.asarray(loss, dtype=x.dtype))
    if _tracking(logits):

        def bwd():
            g = out.grad
            if g is None:
                return
            probs = np.exp(logp)
            probs[np.arange(n), labels] -= 1.0
            _accum(logits, (g / n) * probs)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolutions along the sequence axis
# ---------------------------------------------------------------------------


def _pad_rows(x: np.ndarray, pad: int) -> np.ndarray:
    width = [(0, 0)] * x.ndim
    width[-2] = (pad, pad)
    return np.pad(x, width)


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Length-preserving 1-D convolution along axis -2.

    ``x`` is [..., L, D], ``kernel`` is [K, D, D_out] with K odd; the input is
    zero-padded by (K-1)/2 on both ends.
    """
    k, d_in, d_out = kernel.data.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_same kernel width must be odd, got {k}")
    if x.data.shape[-1] != d_in:
        raise DimensionError(
            f"conv1d_same channel mismatch: input {x.data.shape} vs kernel {kernel.data.shape}"
        )
    length = x.data.shape[-2]
    pad = (k - 1) // 2
    xp = _pad_rows(x.data, pad)
    out_data = np.zeros(x.data.shape[:-1] + (d_out,), dtype=x.data.dtype)
    for j in range(k):
        out_data += np.matmul(xp[..., j : j + length, :], kernel.data[j])
    if bias is not None:
        out_data += bias.data
    inputs = [x, kernel] if bias is None else [x, kernel, bias]
    out = _make(out_data)
    if _tracking(*inputs):

        def bwd():
            g = out.grad
            if g is None:
                return
            if kernel.requires:
                gk = np.zeros_like(kernel.data)
                gf = g.reshape(-1, d_out)
                for j in range(k):
                    xs = xp[..., j : j + length, :].reshape(-1, d_in)
                    gk[j] = xs.T @ gf
                _accum(kernel, gk)
            if x.requires:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[..., j : j + length, :] += np.matmul(g, kernel.data[j].T)
                _accum(x, gxp[..., pad : pad + length, :])
            if bias is not None and bias.requires:
                _accum(bias, g.reshape(-1, d_out).sum(axis=0))

        _record(out, bwd)
    return out


def conv1d_depthwise(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel length-preserving convolution: weights [K, D], x [..., L, D]."""
    k, d = weights.data.shape
    if k % 2 == 0:
        raise ConfigurationError(f"depthwise kernel width must be odd, got {k}")
    if x.data.shape[-1] != d:
        raise DimensionError(
            f"depthwise channel mismatch: input {x.data.shape} vs weights {weights.data.shape}"
        )
    length = x.data.shape[-2]
    pad = (k - 1) // 2
    xp = _pad_rows(x.data, pad)
    out_data = np.zeros_like(x.data)
    for j in range(k):
        out_data += xp[..., j : j + length, :] * weights.data[j]
    if bias is not None:
        out_data += bias.data
    inputs = [x, weights] if bias is None else [x, weights, bias]
    out = _make(out_data)
    if _tracking(*inputs):

        def bwd():
            g = out.grad
            if g is None:
                return
            lead = tuple(range(g.ndim - 1))
            if weights.requires:
                gw = np.zeros_like(weights.data)
                for j in range(k):
                    gw[j] = (xp[..., j : j + length, :] * g).sum(axis=lead)
                _accum(weights, gw)
            if x.requires:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[..., j : j + length, :] += g * weights.data[j]
                _accum(x, gxp[..., pad : pad + length, :])
            if bias is not None and bias.requires:
                _accum(bias, g.sum(axis=lead))

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` must rebuild the graph from the current parameter values and
    return a scalar loss. Returns the worst relative error over every scalar
    parameter entry, with the hybrid denominator max(1, |fd|, |analytic|).
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigurationError("check_gradients requires float64 parameters")
    with GradTape() as tape:
        loss = loss_fn()
        if loss.data.size != 1:
            raise DimensionError("check_gradients requires a scalar loss")
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("loss is non-finite")
        tape.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("finite-difference evaluation is non-finite")
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(fd - gflat[i]) / max(1.0, abs(fd), abs(gflat[i]))
            worst = max(worst, err)
    return worst
