"""Dense tensors with reverse-mode automatic differentiation.

Deliberately minimal: enough ops for small MLP/CNN forward passes, fake
quantizers with straight-through gradients, and gradient-based diagnostics.
Float32 is the working precision; float64 is used wherever tight numerical
tolerances are asserted. Broadcasting is restricted to scalar-vs-tensor and
equal shapes so every backward rule stays auditable.
"""

from __future__ import annotations

import itertools
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _convkernels as _ck
from .errors import NumericsWarning, RankError, ShapeError, StaleTapeError

DEFAULT_DTYPE = np.float32

_seq_counter = itertools.count()
_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf checks after every op (slow; for debugging)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    """n-dimensional array with an optional gradient slot.

    Tensors produced by ops carry references to their inputs and a backward
    closure; `backward()` replays the recorded graph in reverse execution
    order. Tensors on an active graph are never mutated in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_grad_fn", "_seq", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[Tensor], None] | None = None
        self._seq = next(_seq_counter)
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the op nodes reachable from a root tensor.

    Nodes are stored in creation order, which is a valid topological order
    because an op's inputs always exist before its output. Backward replays
    the tape in reverse, visiting each node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._grad_fn is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._prev)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def replay_backward(self) -> None:
        for node in reversed(self.nodes):
            node._grad_fn(node)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively when a tensor is used more than once.
    """
    if loss.data.size != 1:
        raise RankError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._done:
        raise StaleTapeError("backward already ran on this graph; rebuild it before calling again")
    loss._done = True
    loss.grad = np.ones_like(loss.data)
    Tape.from_root(loss).replay_backward()


# ---------------------------------------------------------------------------
# graph-construction helpers

def _coerce(x, ref_dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref_dtype or DEFAULT_DTYPE))


def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are neither equal nor scalar-vs-tensor")


def _make(data: np.ndarray, prev: Sequence[Tensor], grad_fn: Callable[[Tensor], None]) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in prev)
    out = Tensor(data, requires_grad=req, dtype=data.dtype)
    if req:
        out._prev = tuple(prev)
        out._grad_fn = grad_fn
    if _debug_checks and not np.all(np.isfinite(data)):
        warnings.warn("op produced non-finite values", NumericsWarning, stacklevel=3)
    return out


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Accumulate g into t.grad.

    `fresh` marks g as a newly-allocated array owned by the caller, which the
    first accumulation may then take by reference instead of copying.
    """
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        if t.data.size == 1:
            g = np.asarray(g.sum()).reshape(t.data.shape)
            fresh = True
        else:
            raise ShapeError(f"gradient shape {g.shape} does not reduce to {t.data.shape}")
    if t.grad is None:
        t.grad = g if fresh else g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b, a.dtype)
    _check_binary_shapes(a, b, "add")

    def grad_fn(out):
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    return _make(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b, a.dtype)
    _check_binary_shapes(a, b, "sub")

    def grad_fn(out):
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad, fresh=True)

    return _make(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b, a.dtype)
    _check_binary_shapes(a, b, "mul")

    def grad_fn(out):
        _accumulate(a, out.grad * b.data, fresh=True)
        _accumulate(b, out.grad * a.data, fresh=True)

    return _make(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b, a.dtype)
    _check_binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        warnings.warn("division by exact zero; Inf/NaN will propagate", NumericsWarning, stacklevel=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def grad_fn(out):
        with np.errstate(divide="ignore", invalid="ignore"):
            _accumulate(a, out.grad / b.data, fresh=True)
            _accumulate(b, -out.grad * a.data / (b.data * b.data), fresh=True)

    return _make(out_data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _coerce(a)

    def grad_fn(out):
        _accumulate(a, -out.grad, fresh=True)

    return _make(-a.data, (a,), grad_fn)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0

    def grad_fn(out):
        _accumulate(a, out.grad * mask, fresh=True)

    return _make(np.maximum(a.data, 0), (a,), grad_fn)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def grad_fn(out):
        _accumulate(a, out.grad * s * (1.0 - s), fresh=True)

    return _make(s, (a,), grad_fn)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through inside the closed interval."""
    a = _coerce(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def grad_fn(out):
        _accumulate(a, out.grad * mask, fresh=True)

    return _make(np.clip(a.data, lo, hi), (a,), grad_fn)


def round_ste(a) -> Tensor:
    """Round half to even; backward is the identity (straight-through)."""
    a = _coerce(a)

    def grad_fn(out):
        _accumulate(a, out.grad)

    return _make(np.rint(a.data), (a,), grad_fn)


def tabs(a) -> Tensor:
    a = _coerce(a)
    sign = np.sign(a.data)

    def grad_fn(out):
        _accumulate(a, out.grad * sign, fresh=True)

    return _make(np.abs(a.data), (a,), grad_fn)


def pow_const(a, p: float) -> Tensor:
    """a ** p for a constant exponent; base must be non-negative for fractional p."""
    a = _coerce(a)
    out_data = np.power(a.data, p)

    def grad_fn(out):
        _accumulate(a, out.grad * p * np.power(a.data, p - 1.0), fresh=True)

    return _make(out_data, (a,), grad_fn)


def fake_quantize(x, step, qmin: int, qmax: int) -> Tensor:
    """Fused clamp(round(x/s), qmin, qmax) * s with straight-through gradients.

    One node equivalent of the div/round_ste/clamp/mul composition: gradient to
    x passes inside the clamp range and is zero outside; gradient to the step
    is round(x/s) - x/s inside the range and the clamp bound outside.
    """
    x, step = _coerce(x), _coerce(step)
    _check_binary_shapes(x, step, "fake_quantize")
    s = step.data
    t = x.data / s
    r = np.rint(t)
    inr = (r >= qmin) & (r <= qmax)
    rbar = np.clip(r, qmin, qmax)

    def grad_fn(out):
        _accumulate(x, out.grad * inr, fresh=True)
        if step.requires_grad:
            _accumulate(step, out.grad * np.where(inr, r - t, rbar), fresh=True)

    return _make(rbar * s, (x, step), grad_fn)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; gradient flows only through the chosen branch."""
    a, b = _coerce(a), _coerce(b)
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != a.data.shape or a.data.shape != b.data.shape:
        raise ShapeError(f"where: mask {cond.shape}, branches {a.data.shape} / {b.data.shape} must all match")

    def grad_fn(out):
        _accumulate(a, out.grad * cond, fresh=True)
        _accumulate(b, out.grad * ~cond, fresh=True)

    return _make(np.where(cond, a.data, b.data), (a, b), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")

    def grad_fn(out):
        _accumulate(a, out.grad @ b.data.T, fresh=True)
        _accumulate(b, a.data.T @ out.grad, fresh=True)

    return _make(a.data @ b.data, (a, b), grad_fn)


def transpose2d(a) -> Tensor:
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.data.shape}")

    def grad_fn(out):
        _accumulate(a, out.grad.T)

    return _make(np.ascontiguousarray(a.data.T), (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    new = a.data.reshape(shape)

    def grad_fn(out):
        _accumulate(a, out.grad.reshape(a.data.shape))

    return _make(new.copy(), (a,), grad_fn)


def tsum(a) -> Tensor:
    a = _coerce(a)

    def grad_fn(out):
        _accumulate(a, np.broadcast_to(out.grad, a.data.shape).copy())

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), grad_fn)


def tmean(a) -> Tensor:
    a = _coerce(a)
    n = a.data.size

    def grad_fn(out):
        _accumulate(a, np.broadcast_to(out.grad / n, a.data.shape).copy())

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), grad_fn)


def add_bias(x, b) -> Tensor:
    """Add a per-feature (2-D input) or per-channel (4-D input) bias vector."""
    x, b = _coerce(x), _coerce(b)
    if b.data.ndim != 1:
        raise ShapeError(f"bias must be 1-D, got shape {b.data.shape}")
    if x.data.ndim == 2:
        if x.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"bias length {b.data.shape[0]} does not match features {x.data.shape[1]}")
        out_data = x.data + b.data[None, :]
        axes = (0,)
    elif x.data.ndim == 4:
        if x.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"bias length {b.data.shape[0]} does not match channels {x.data.shape[1]}")
        out_data = x.data + b.data[None, :, None, None]
        axes = (0, 2, 3)
    else:
        raise ShapeError(f"add_bias supports 2-D or 4-D inputs, got shape {x.data.shape}")

    def grad_fn(out):
        _accumulate(x, out.grad)
        _accumulate(b, out.grad.sum(axis=axes), fresh=True)

    return _make(out_data, (x, b), grad_fn)


def avgpool_global(x) -> Tensor:
    """Global average pool [N,C,H,W] -> [N,C]."""
    x = _coerce(x)
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool_global expects 4-D input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape

    def grad_fn(out):
        g = out.grad[:, :, None, None] / (h * w)
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(x.data.mean(axis=(2, 3)), (x,), grad_fn)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, k, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw], zero padding.

    Lowered to an im2col matrix product; the column matrix is kept for the
    backward pass (cheap at desk scale).
    """
    x, k = _coerce(x), _coerce(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.data.shape} and {k.data.shape}")
    if x.data.shape[1] != k.data.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape[1]}, kernel {k.data.shape[1]}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, cin, h, w = x.data.shape
    cout, _, kh, kw = k.data.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    hout = (hp - kh) // sh + 1
    wout = (wp - kw) // sw + 1

    if ph or pw:
        xp = np.zeros((n, cin, hp, wp), dtype=x.data.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x.data
    else:
        xp = np.ascontiguousarray(x.data)

    colsT = _ck.im2col_t(xp, hout, wout, kh, kw, sh, sw)  # [cin*kh*kw, n*hout*wout]
    kmat = k.data.reshape(cout, -1)
    out_data = np.ascontiguousarray(
        (kmat @ colsT).reshape(cout, n, hout, wout).transpose(1, 0, 2, 3))

    def grad_fn(out):
        gm = np.ascontiguousarray(out.grad.transpose(1, 0, 2, 3)).reshape(cout, n * hout * wout)
        if k.requires_grad:
            _accumulate(k, (gm @ colsT.T).reshape(k.data.shape), fresh=True)
        if x.requires_grad:
            dcolsT = kmat.T @ gm
            dxp = _ck.col2im_t(dcolsT, (n, cin, hp, wp), hout, wout, kh, kw, sh, sw)
            _accumulate(x, dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp, fresh=True)

    return _make(out_data, (x, k), grad_fn)


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                eps: float = 1e-5, momentum: float = 0.1, training: bool = False) -> Tensor:
    """Per-channel batch normalization over [N,C,H,W].

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, torch-style momentum). Eval mode
    treats the running statistics as constants.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("batchnorm2d scale/shift must be per-channel vectors")

    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

        def grad_fn(out):
            g = out.grad
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gx = g * gamma.data[None, :, None, None]
                mean_g = gx.mean(axis=(0, 2, 3))
                mean_gx = (gx * xhat).mean(axis=(0, 2, 3))
                dx = (gx - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None])
                dx *= inv_std[None, :, None, None]
                _accumulate(x, dx)

        return _make(out_data, (x, gamma, beta), grad_fn)

    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def grad_fn(out):
        g = out.grad
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accumulate(x, g * (gamma.data * inv_std)[None, :, None, None])

    return _make(out_data, (x, gamma, beta), grad_fn)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of [N,C] logits against integer labels."""
    logits = _coerce(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N,C] logits, got shape {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.data.shape[0]
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(sez)
    loss = -logp[np.arange(n), labels].mean()

    def grad_fn(out):
        p = ez / sez
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, out.grad * p / n)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), grad_fn)


def mse(a, b) -> Tensor:
    """Mean squared error between two equal-shape tensors."""
    d = sub(a, b)
    return tmean(mul(d, d))


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_diff_gradient(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def feval(arr: np.ndarray) -> float:
        out = f(Tensor(arr, dtype=arr.dtype))
        return out.item() if isinstance(out, Tensor) else float(out)

    base = x.data.astype(np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = feval(base)
        flat[i] = saved - eps
        lo = feval(base)
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
