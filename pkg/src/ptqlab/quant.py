"""Fake quantizers: symmetric uniform quantization, step-size initialization,
learned step sizes, adaptive weight rounding, and the multiplicative noise view.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericsWarning
from .tensor import Tensor

# rectified-sigmoid stretch constants and regularizer defaults for the
# learned rounding relaxation
ZETA = 1.1
GAMMA_R = -0.1
LAMBDA_REG = 0.01
BETA_HI = 20.0
BETA_LO = 2.0
WARMUP_FRACTION = 0.2

MIN_STEP = 1e-8


def qrange(bits: int, signed: bool) -> tuple[int, int]:
    """Integer clamp bounds for a symmetric uniform quantizer."""
    if bits < 2:
        raise ValueError("bits must be >= 2")
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


@dataclass
class UniformQuantizer:
    """Symmetric (zero-point-free) uniform quantizer x_hat = clamp(round(x/s)) * s.

    `step` is a scalar for per-tensor quantization or a vector along
    `channel_axis` for per-channel weight quantization.
    """

    bits: int
    signed: bool
    step: np.ndarray | float | None = None
    channel_axis: int | None = None
    learnable: bool = False

    def __post_init__(self):
        self.qmin, self.qmax = qrange(self.bits, self.signed)
        if self.step is not None:
            self.step = np.asarray(self.step, dtype=np.float64)
            if np.any(self.step <= 0):
                raise ValueError("step must be positive")

    def step_for(self, shape: tuple[int, ...], dtype) -> np.ndarray:
        """Materialize the step against a data shape (full-shape per-channel array)."""
        s = np.asarray(self.step, dtype=dtype)
        if self.channel_axis is None or s.ndim == 0:
            return s
        view = [1] * len(shape)
        view[self.channel_axis] = -1
        return np.broadcast_to(s.reshape(view), shape).copy()


def quantize(x: Tensor | np.ndarray, q: UniformQuantizer, step: Tensor | None = None) -> Tensor:
    """Fake-quantize x.

    Gradient w.r.t. x is straight-through inside [qmin*s, qmax*s], zero
    outside. When a learnable `step` tensor is supplied, the gradient w.r.t.
    the step follows from the same straight-through composition (round term
    inside the clamp range, clamp bound outside), which is the learned-step
    rule.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if step is None:
        step = Tensor(q.step_for(x.shape, x.dtype))
    return T.fake_quantize(x, step, q.qmin, q.qmax)


def quantize_array(x: np.ndarray, q: UniformQuantizer) -> np.ndarray:
    """Plain numpy fake-quantization (no autodiff graph)."""
    s = q.step_for(x.shape, x.dtype)
    return np.clip(np.rint(x / s), q.qmin, q.qmax) * s


def init_step_minmax(x: np.ndarray, bits: int, signed: bool, channel_axis: int | None = None) -> np.ndarray:
    """Max-abs (signed) or max (unsigned) step initialization."""
    qmin, qmax = qrange(bits, signed)
    if channel_axis is None:
        peak = np.abs(x).max() if signed else max(float(x.max()), 0.0)
        if peak == 0:
            warnings.warn("all-zero tensor; falling back to step 1e-8", NumericsWarning, stacklevel=2)
            return np.float64(MIN_STEP)
        return np.float64(peak / qmax)
    moved = np.moveaxis(x, channel_axis, 0).reshape(x.shape[channel_axis], -1)
    peak = np.abs(moved).max(axis=1) if signed else np.maximum(moved.max(axis=1), 0.0)
    if np.any(peak == 0):
        warnings.warn("all-zero channel; falling back to step 1e-8", NumericsWarning, stacklevel=2)
        peak = np.where(peak == 0, MIN_STEP * qmax, peak)
    return (peak / qmax).astype(np.float64)


def init_step_mse(x: np.ndarray, bits: int, signed: bool, candidates: int = 80,
                  channel_axis: int | None = None) -> np.ndarray:
    """Grid-search the step over alpha * max|x| / qmax, alpha in [0.2, 1.2].

    Minimizes the squared reconstruction error; ties break toward the larger
    step.
    """
    if candidates < 2:
        raise ValueError("candidates must be >= 2")
    qmin, qmax = qrange(bits, signed)
    alphas = np.linspace(0.2, 1.2, candidates)
    if channel_axis is None:
        peak = float(np.abs(x).max() if signed else max(float(x.max()), 0.0))
        if peak == 0:
            warnings.warn("all-zero tensor; falling back to step 1e-8", NumericsWarning, stacklevel=2)
            return np.float64(MIN_STEP)
        best_s, best_err = MIN_STEP, np.inf
        for a in alphas:
            s = max(a * peak / qmax, MIN_STEP)
            err = float(((np.clip(np.rint(x / s), qmin, qmax) * s - x) ** 2).sum())
            if err <= best_err:
                best_err, best_s = err, s
        return np.float64(best_s)

    moved = np.moveaxis(x, channel_axis, 0).reshape(x.shape[channel_axis], -1)
    peak = np.abs(moved).max(axis=1) if signed else np.maximum(moved.max(axis=1), 0.0)
    peak = np.where(peak == 0, MIN_STEP * qmax, peak)
    best_s = np.full(moved.shape[0], MIN_STEP)
    best_err = np.full(moved.shape[0], np.inf)
    for a in alphas:
        s = np.maximum(a * peak / qmax, MIN_STEP)
        xq = np.clip(np.rint(moved / s[:, None]), qmin, qmax) * s[:, None]
        err = ((xq - moved) ** 2).sum(axis=1)
        upd = err <= best_err
        best_err = np.where(upd, err, best_err)
        best_s = np.where(upd, s, best_s)
    return best_s.astype(np.float64)


@dataclass
class AdaRoundState:
    """Continuous rounding variables and schedule constants for learned rounding.

    h(V) = clamp(sigmoid(V) * (zeta - gamma_r) + gamma_r, 0, 1); at
    initialization h(V) equals the fractional part of w/s so the soft weight
    reproduces the input weight exactly.
    """

    v: Tensor
    zeta: float = ZETA
    gamma_r: float = GAMMA_R
    lambda_reg: float = LAMBDA_REG

    @classmethod
    def init_from_weight(cls, w: np.ndarray, step: np.ndarray, lambda_reg: float = LAMBDA_REG) -> "AdaRoundState":
        frac = w / step - np.floor(w / step)
        # invert the rectified sigmoid; frac in [0,1] maps to finite V
        ratio = (ZETA - GAMMA_R) / (frac - GAMMA_R) - 1.0
        v = -np.log(ratio)
        return cls(v=Tensor(v.astype(w.dtype), requires_grad=True), lambda_reg=lambda_reg)

    def h(self) -> Tensor:
        stretched = T.sigmoid(self.v) * (self.zeta - self.gamma_r) + self.gamma_r
        return T.clamp(stretched, 0.0, 1.0)

    def h_array(self) -> np.ndarray:
        with T.no_grad():
            return self.h().data

    def hard_mask(self) -> np.ndarray:
        return (self.h_array() >= 0.5).astype(self.v.dtype)


def adaround_weight(w: np.ndarray, step: np.ndarray, state: AdaRoundState,
                    qmin: int, qmax: int, hard: bool) -> Tensor:
    """Soft (differentiable in V) or hard adaptively-rounded weight."""
    floor = np.floor(w / step)
    if hard:
        data = np.clip(floor + state.hard_mask(), qmin, qmax) * step
        return Tensor(data.astype(w.dtype))
    soft = T.add(Tensor(floor.astype(w.dtype)), state.h())
    return T.mul(T.clamp(soft, qmin, qmax), Tensor(step.astype(w.dtype)))


def adaround_regularizer(state: AdaRoundState, progress: float) -> Tensor:
    """Binarizing penalty: zero during warm-up, then lambda * sum(1 - |2h-1|^beta)
    with beta cosine-annealed from 20 to 2 over the remaining progress."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    if progress < WARMUP_FRACTION:
        return Tensor(np.zeros((), dtype=state.v.dtype))
    t = (progress - WARMUP_FRACTION) / (1.0 - WARMUP_FRACTION)
    beta = BETA_LO + (BETA_HI - BETA_LO) * 0.5 * (1.0 + np.cos(np.pi * t))
    h = state.h()
    gap = T.tabs(T.sub(T.mul(h, 2.0), 1.0))
    penalty = T.tsum(T.sub(Tensor(np.ones(gap.shape, dtype=gap.dtype)), T.pow_const(gap, float(beta))))
    return T.mul(penalty, float(state.lambda_reg))


@dataclass
class LsqState:
    """Learnable per-quantizer step with its gradient scale 1/sqrt(qmax*numel)."""

    step: Tensor
    grad_scale: float

    @classmethod
    def from_init(cls, step_value: float, qmax: int, numel: int, dtype=np.float32) -> "LsqState":
        s = Tensor(np.asarray(step_value, dtype=dtype), requires_grad=True)
        return cls(step=s, grad_scale=1.0 / np.sqrt(qmax * max(numel, 1)))

    def sgd_update(self, lr: float) -> None:
        if self.step.grad is None:
            return
        new = self.step.data - lr * self.grad_scale * self.step.grad
        self.step = Tensor(np.maximum(new, MIN_STEP), requires_grad=True)


@dataclass
class MultiplicativeNoise:
    """Relative quantization error u with x_hat = x * (1 + u); u = 0 where x = 0."""

    u: np.ndarray


def noise_u(x: np.ndarray, q: UniformQuantizer) -> MultiplicativeNoise:
    """Definitional multiplicative noise u = quantize(x)/x - 1 (0 at x = 0)."""
    xq = quantize_array(x, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(x != 0, xq / x - 1.0, 0.0)
    return MultiplicativeNoise(u=u)


def noise_u_closed_form(x: np.ndarray, q: UniformQuantizer) -> np.ndarray:
    """Closed form u = -c / (abar + c) from the integer level abar and rounding
    error c = x/s - abar; valid only off-clamp and at x != 0."""
    s = q.step_for(x.shape, x.dtype)
    t = x / s
    abar = np.rint(t)
    c = t - abar
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(x != 0, -c / (abar + c), 0.0)
    return u


def unclamped_mask(x: np.ndarray, q: UniformQuantizer) -> np.ndarray:
    """True where round(x/s) lies strictly inside the integer clamp range."""
    s = q.step_for(x.shape, x.dtype)
    r = np.rint(x / s)
    return (r >= q.qmin) & (r <= q.qmax)
