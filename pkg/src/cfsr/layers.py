"""Layer primitives: dense and depth-wise convolution, GELU, softmax, pixel shuffle.

All spatial convolutions are zero-padded "same" cross-correlations (no kernel
flip), so fixed Sobel/Laplacian kernels keep the orientation they are written
in.  Accumulation happens in float64; outputs are cast back to the tensor
storage dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor, accumulate_grad, active_tape, tape_record

DW_KERNEL_SIZES = (3, 5, 7, 9, 11)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# raw float64 correlation kernels (shared by forward, backward and fusion)

def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _corr_dense(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Cross-correlate (N,Ci,H,W) with (Co,Ci,k,k); zero 'same' padding, float64."""
    n, ci, h, w = x.shape
    co, _, k, _ = kernel.shape
    xp = _pad_spatial(np.asarray(x, np.float64), k // 2)
    kern = np.asarray(kernel, np.float64)
    out = np.zeros((n, co, h, w))
    for u in range(k):
        for v in range(k):
            out += np.einsum(
                "oi,nihw->nohw", kern[:, :, u, v], xp[:, :, u:u + h, v:v + w], optimize=True
            )
    return out


def _corr_dense_wgrad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """d(out)/d(kernel) of _corr_dense: returns (Co,Ci,k,k)."""
    n, ci, h, w = x.shape
    co = g.shape[1]
    xp = _pad_spatial(np.asarray(x, np.float64), k // 2)
    g64 = np.asarray(g, np.float64)
    dk = np.empty((co, ci, k, k))
    for u in range(k):
        for v in range(k):
            dk[:, :, u, v] = np.einsum(
                "nohw,nihw->oi", g64, xp[:, :, u:u + h, v:v + w], optimize=True
            )
    return dk


def _corr_dw(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel cross-correlation: x (N,C,H,W) with kernel (C,k,k)."""
    n, c, h, w = x.shape
    k = kernel.shape[-1]
    xp = _pad_spatial(np.asarray(x, np.float64), k // 2)
    kern = np.asarray(kernel, np.float64)
    out = np.zeros((n, c, h, w))
    for u in range(k):
        for v in range(k):
            out += kern[:, u, v][None, :, None, None] * xp[:, :, u:u + h, v:v + w]
    return out


def _corr_dw_wgrad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """d(out)/d(kernel) of _corr_dw: returns (C,k,k)."""
    n, c, h, w = x.shape
    xp = _pad_spatial(np.asarray(x, np.float64), k // 2)
    g64 = np.asarray(g, np.float64)
    dk = np.empty((c, k, k))
    for u in range(k):
        for v in range(k):
            dk[:, u, v] = np.einsum(
                "nchw,nchw->c", g64, xp[:, :, u:u + h, v:v + w], optimize=True
            )
    return dk


# ---------------------------------------------------------------------------
# weight containers

def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Conv2dWeights:
    """Dense convolution weights: kernel (Cout, Cin, k, k) plus per-output bias (1, Cout, 1, 1)."""

    kernel: Tensor
    bias: Tensor

    @classmethod
    def initialize(cls, cin: int, cout: int, k: int, rng: np.random.Generator) -> "Conv2dWeights":
        if k % 2 == 0 or k < 1:
            raise ConfigError(f"dense convolution kernel size must be odd and positive, got {k}")
        kernel = Tensor(kaiming_uniform((cout, cin, k, k), cin * k * k, rng), requires_grad=True)
        bias = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True)
        return cls(kernel, bias)

    @classmethod
    def conv1x1(cls, cin: int, cout: int, rng: np.random.Generator) -> "Conv2dWeights":
        return cls.initialize(cin, cout, 1, rng)


@dataclass
class DwConvWeights:
    """Depth-wise convolution weights: kernel (C, 1, k, k) plus bias (1, C, 1, 1)."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        k = self.kernel.shape[-1]
        if k not in DW_KERNEL_SIZES:
            raise ConfigError(
                f"depth-wise kernel size must be odd, one of {DW_KERNEL_SIZES}; got {k}"
            )

    @classmethod
    def initialize(
        cls, channels: int, k: int, rng: np.random.Generator, learnable: bool = True
    ) -> "DwConvWeights":
        if k not in DW_KERNEL_SIZES:
            raise ConfigError(
                f"depth-wise kernel size must be odd, one of {DW_KERNEL_SIZES}; got {k}"
            )
        kernel = Tensor(
            kaiming_uniform((channels, 1, k, k), k * k, rng), requires_grad=learnable
        )
        bias = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=learnable)
        return cls(kernel, bias)


# ---------------------------------------------------------------------------
# differentiable layer ops

def conv2d(x: Tensor, w: Conv2dWeights) -> Tensor:
    kernel, bias = w.kernel, w.bias
    co, ci, k, _ = kernel.shape
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d expects {ci} input channels, got input of shape {x.shape}")
    out = Tensor(_corr_dense(x.data, kernel.data) + np.asarray(bias.data, np.float64))
    x_val, k_val = x.data, kernel.data
    wants = x.requires_grad or kernel.requires_grad or bias.requires_grad

    def backprop(g: np.ndarray) -> None:
        if x.requires_grad:
            flipped = np.transpose(k_val, (1, 0, 2, 3))[:, :, ::-1, ::-1]
            accumulate_grad(x, _corr_dense(g, flipped))
        if kernel.requires_grad:
            accumulate_grad(kernel, _corr_dense_wgrad(x_val, g, k))
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64))

    return tape_record(out, wants, backprop)


def conv1x1(x: Tensor, w: Conv2dWeights) -> Tensor:
    """Point-wise convolution: out[n,o,h,w] = sum_i kernel[o,i] * x[n,i,h,w] + bias[o]."""
    if w.kernel.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 requires a 1x1 kernel, got {w.kernel.shape}")
    return conv2d(x, w)


def dwconv(x: Tensor, w: DwConvWeights) -> Tensor:
    """Depth-wise 'same' convolution, one k x k filter per channel."""
    kernel, bias = w.kernel, w.bias
    c, _, k, _ = kernel.shape
    if x.shape[1] != c:
        raise ShapeError(f"dwconv expects {c} channels, got input of shape {x.shape}")
    out = Tensor(_corr_dw(x.data, kernel.data[:, 0]) + np.asarray(bias.data, np.float64))
    x_val, k_val = x.data, kernel.data
    wants = x.requires_grad or kernel.requires_grad or bias.requires_grad

    def backprop(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate_grad(x, _corr_dw(g, k_val[:, 0, ::-1, ::-1]))
        if kernel.requires_grad:
            accumulate_grad(kernel, _corr_dw_wgrad(x_val, g, k)[:, None])
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64))

    return tape_record(out, wants, backprop)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, y = x * Phi(x) with Phi the standard normal CDF via erf."""
    x64 = np.asarray(x.data, np.float64)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    out = Tensor(x64 * cdf)

    def backprop(g: np.ndarray) -> None:
        if x.requires_grad:
            pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT_2PI
            accumulate_grad(x, g * (cdf + x64 * pdf))

    return tape_record(out, x.requires_grad, backprop)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r^2, H, W) to (N, C, H*r, W*r).

    Layout contract: out[n, c, h*r + i, w*r + j] = x[n, c*r^2 + i*r + j, h, w].
    """
    if r < 1:
        raise ConfigError(f"pixel shuffle factor must be >= 1, got {r}")
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ShapeError(f"channel count {c} is not divisible by r^2 = {r * r}")
    cout = c // (r * r)
    y = x.data.reshape(n, cout, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(
        n, cout, h * r, w * r
    )
    out = Tensor(y)

    def backprop(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = g.reshape(n, cout, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w)
            accumulate_grad(x, gx)

    return tape_record(out, x.requires_grad, backprop)


def softmax3(logits) -> np.ndarray:
    """Stable softmax of a 3-vector (max-subtracted); returns float64 (3,)."""
    v = np.asarray(logits, np.float64).reshape(-1)
    if v.shape != (3,):
        raise ShapeError(f"softmax3 takes exactly 3 logits, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax3 requires finite logits")
    e = np.exp(v - v.max())
    return e / e.sum()
