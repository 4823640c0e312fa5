"""Differentiable building blocks for fixed 1-D convolutional networks.

Activations are ``(C, T)`` arrays, or channel-major batches ``(C, B, T)``.
Ops keep the dtype of their inputs: float32 for training, float64 for
gradient checks. Backward functions return the input gradient and *add* into
``Parameter.grad``; frozen parameters are never written.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import kernels


@dataclass(eq=False)
class Parameter:
    name: str
    values: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        """Cast values (and reset grad) in place, e.g. to float64 for grad checks."""
        self.values = self.values.astype(dtype)
        self.grad = np.zeros_like(self.values)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x[:, None, :], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (C, T) or (C, B, T) activations, got shape {x.shape}")


def tap_offsets(kernel_size: int, dilation: int, causal: bool = False) -> np.ndarray:
    """Input offset read by each tap for zero-padded 'same' convolution."""
    span = dilation * (kernel_size - 1)
    left = span if causal else span // 2
    return np.arange(kernel_size, dtype=np.int64) * dilation - left


def _check_conv(x, weight, dilation):
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    if weight.values.ndim != 3:
        raise ValueError(f"{weight.name}: conv weight must be (C_out, C_in, K)")
    co, ci, K = weight.shape
    if x.shape[0] != ci:
        raise ValueError(
            f"{weight.name}: input has {x.shape[0]} channels, weight expects {ci}"
        )
    if K % 2 == 0:
        raise ValueError(f"{weight.name}: kernel size must be odd, got {K}")
    if dilation * (K - 1) >= x.shape[2]:
        raise ValueError(
            f"{weight.name}: dilation span {dilation * (K - 1)} >= sequence length {x.shape[2]}"
        )


def conv1d_forward(
    x: np.ndarray,
    weight: Parameter,
    bias: Optional[Parameter] = None,
    dilation: int = 1,
    causal: bool = False,
) -> np.ndarray:
    xb, squeeze = _as_batch(x)
    _check_conv(xb, weight, dilation)
    offsets = tap_offsets(weight.shape[2], dilation, causal)
    y = kernels.conv_forward(xb, weight.values, offsets)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"{bias.name}: bias shape {bias.shape} != ({weight.shape[0]},)")
        y += bias.values[:, None, None]
    return y[:, 0] if squeeze else y


def conv1d_backward(
    grad_y: np.ndarray,
    x: np.ndarray,
    weight: Parameter,
    bias: Optional[Parameter] = None,
    dilation: int = 1,
    causal: bool = False,
    need_grad_x: bool = True,
) -> Optional[np.ndarray]:
    gyb, squeeze = _as_batch(grad_y)
    xb, _ = _as_batch(x)
    _check_conv(xb, weight, dilation)
    expected = (weight.shape[0], xb.shape[1], xb.shape[2])
    if gyb.shape != expected:
        raise ValueError(f"{weight.name}: grad_y shape {gyb.shape} != forward output {expected}")
    offsets = tap_offsets(weight.shape[2], dilation, causal)
    if weight.trainable:
        weight.grad += kernels.conv_backward_weight(gyb, xb, offsets)
    if bias is not None and bias.trainable:
        bias.grad += gyb.sum(axis=(1, 2))
    if not need_grad_x:
        return None
    gx = kernels.conv_backward_input(gyb, weight.values, offsets)
    return gx[:, 0] if squeeze else gx


def gated_activation(z: np.ndarray) -> np.ndarray:
    """``sigmoid(gate) * tanh(filter)``; the gate is the first half of the channels."""
    h, _, _ = gated_activation_fwd(z)
    return h


def gated_activation_fwd(z: np.ndarray):
    """Forward pass that also returns ``(sigmoid(g), tanh(v))`` for the backward."""
    c2 = z.shape[0]
    if c2 % 2:
        raise ValueError(f"gated activation needs an even channel count, got {c2}")
    c = c2 // 2
    sg = expit(z[:c])
    tv = np.tanh(z[c:])
    return sg * tv, sg, tv


def gated_activation_backward(grad_h: np.ndarray, sg: np.ndarray, tv: np.ndarray) -> np.ndarray:
    out = np.empty((2 * grad_h.shape[0],) + grad_h.shape[1:], dtype=grad_h.dtype)
    c = grad_h.shape[0]
    gs = grad_h * sg
    np.multiply(gs * tv, 1 - sg, out=out[:c])
    np.multiply(gs, 1 - tv * tv, out=out[c:])
    return out


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = diff.size
    loss = float(np.dot(diff.ravel().astype(np.float64), diff.ravel().astype(np.float64)) / n)
    return loss, (2.0 / n) * diff


def kaiming_uniform(shape, rng: np.random.Generator, a: float = np.sqrt(5.0), dtype=np.float32):
    """He-uniform init with leaky slope ``a``; fan-in is ``C_in * K`` for conv weights."""
    fan_in = int(np.prod(shape[1:]))
    gain = np.sqrt(2.0 / (1.0 + a * a))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros_like(param.values), np.zeros_like(param.values), lr=lr, **kw)


def adam_step(param: Parameter, state: AdamState) -> None:
    """One bias-corrected Adam update; zeroes ``param.grad`` afterwards."""
    if not param.trainable:
        raise RuntimeError(f"adam_step on frozen parameter {param.name!r}")
    if state.m.shape != param.shape:
        raise ValueError(f"{param.name}: optimizer state shape {state.m.shape} != {param.shape}")
    g = param.grad
    state.step += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1 - state.beta2) * (g * g)
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    m_hat = state.m / c1
    v_hat = state.v / c2
    param.values -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.values.dtype)
    param.zero_grad()


class Adam:
    """Adam over a fixed list of trainable parameters."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, **kw):
        self.params = [p for p in params if p.trainable]
        self.states = [AdamState.for_param(p, lr=lr, **kw) for p in self.params]

    @property
    def lr(self) -> float:
        return self.states[0].lr if self.states else 0.0

    @lr.setter
    def lr(self, value: float) -> None:
        for s in self.states:
            s.lr = value

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p, s)


def grad_check(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    w0: np.ndarray,
    eps: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
    n_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between ``fun``'s analytic gradient and central differences.

    ``fun(w)`` returns ``(loss, grad)``. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. Either pass explicit
    ``coords`` or sample ``n_coords`` of them; default is every coordinate.
    """
    w0 = np.asarray(w0, dtype=np.float64).ravel()
    _, g = fun(w0.copy())
    g = np.asarray(g, dtype=np.float64).ravel()
    if coords is None:
        if n_coords is None or n_coords >= w0.size:
            coords = range(w0.size)
        else:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(w0.size, size=n_coords, replace=False)
    worst = 0.0
    for i in coords:
        wp = w0.copy()
        wp[i] += eps
        wm = w0.copy()
        wm[i] -= eps
        numeric = (fun(wp)[0] - fun(wm)[0]) / (2 * eps)
        err = abs(g[i] - numeric) / max(1.0, abs(g[i]))
        worst = max(worst, err)
    return worst
