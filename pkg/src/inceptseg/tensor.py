"""Rank-4 tensor primitives with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` values laid out as (batch, rows, cols,
channels).  Kernels are ``(kh, kw, c_in, c_out)``.  Every convolution is
stride 1; spatial down/up-sampling happens only in :func:`maxpool2x2` and
:func:`transposed_conv2x2`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

# Double precision is the default; INCEPTSEG_DTYPE=float32 trades accuracy for speed.
DTYPE = np.dtype(os.environ.get("INCEPTSEG_DTYPE", "float64"))


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 (n, h, w, c) array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) <= 0:
        raise ShapeError(f"{name} has a non-positive dimension: {x.shape}")
    return x


@dataclass
class Kernel4:
    """Convolution weights ``(kh, kw, c_in, c_out)`` plus a per-output-channel bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"kernel weight must be rank 4, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[3],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[3]}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.weight.shape

    @classmethod
    def zeros(cls, kh: int, kw: int, c_in: int, c_out: int) -> "Kernel4":
        return cls(np.zeros((kh, kw, c_in, c_out), DTYPE), np.zeros(c_out, DTYPE))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad_amount(kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same padding needs odd kernel sizes, got {kh}x{kw}")
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(x: np.ndarray, kh: int, kw: int, ph: int, pw: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Rows are output pixels, columns ordered (kh, kw, c) to match ``weight.reshape(-1, c_out)``."""
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    n, hp, wp, c = x.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if kh == kw == 1:
        return x.reshape(n * ho * wo, c), (n, ho, wo)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, :, a, b, :] = x[:, a:a + ho, b:b + wo, :]
    return cols.reshape(n * ho * wo, kh * kw * c), (n, ho, wo)


def _kernel_matrix(weight: np.ndarray) -> np.ndarray:
    return weight.reshape(-1, weight.shape[3])


def conv2d(x: np.ndarray, kernel: Kernel4, padding: str = "same") -> np.ndarray:
    return conv2d_with_cols(x, kernel, padding)[0]


def conv2d_with_cols(x: np.ndarray, kernel: Kernel4, padding: str = "same") -> tuple[np.ndarray, np.ndarray]:
    """conv2d that also returns its im2col matrix for reuse in the backward pass."""
    check_tensor4(x, "input")
    kh, kw, ci, co = kernel.shape
    if ci != x.shape[3]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    ph, pw = _pad_amount(kh, kw, padding)
    if x.shape[1] + 2 * ph < kh or x.shape[2] + 2 * pw < kw:
        raise ShapeError(f"input {x.shape} is smaller than kernel {kernel.shape}")
    cols, (n, ho, wo) = _im2col(x, kh, kw, ph, pw)
    out = cols @ _kernel_matrix(kernel.weight)
    out += kernel.bias
    return out.reshape(n, ho, wo, co), cols


def conv2d_backward(grad_out: np.ndarray, cached_input: np.ndarray, kernel: Kernel4,
                    padding: str = "same", cols: np.ndarray | None = None,
                    need_input: bool = True) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of a conv2d w.r.t. its input, kernel weight and bias.

    ``cols`` may carry the im2col matrix from :func:`conv2d_with_cols`;
    ``need_input=False`` skips the input gradient (returned as ``None``).
    """
    kh, kw, ci, co = kernel.shape
    ph, pw = _pad_amount(kh, kw, padding)
    n, h, w, c = cached_input.shape
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if grad_out.shape != (n, ho, wo, co):
        raise ShapeError(f"grad_out {grad_out.shape} does not match forward output {(n, ho, wo, co)}")
    if cols is None:
        cols, _ = _im2col(cached_input, kh, kw, ph, pw)
    g = grad_out.reshape(-1, co)
    grad_w = (cols.T @ g).reshape(kh, kw, ci, co)
    grad_b = g.sum(axis=0)
    if not need_input:
        return None, grad_w, grad_b
    dcols = (g @ _kernel_matrix(kernel.weight).T).reshape(n, ho, wo, kh, kw, ci)
    if kh == kw == 1:
        return dcols.reshape(n, h, w, ci), grad_w, grad_b
    dxp = np.zeros((n, h + 2 * ph, w + 2 * pw, ci), dtype=grad_out.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, a:a + ho, b:b + wo, :] += dcols[:, :, :, a, b, :]
    grad_in = dxp[:, ph:ph + h, pw:pw + w, :]
    return np.ascontiguousarray(grad_in), grad_w, grad_b


# ---------------------------------------------------------------------------
# 2x2 stride-2 transposed convolution
# ---------------------------------------------------------------------------


def transposed_conv2x2(x: np.ndarray, kernel: Kernel4) -> np.ndarray:
    check_tensor4(x, "input")
    kh, kw, ci, co = kernel.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"transposed conv kernel must be 2x2, got {kernel.shape}")
    if ci != x.shape[3]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    n, h, w, _ = x.shape
    # (n*h*w, ci) @ (ci, 2*2*co) -> (n, h, w, 2, 2, co)
    wmat = kernel.weight.transpose(2, 0, 1, 3).reshape(ci, 4 * co)
    y = (x.reshape(-1, ci) @ wmat).reshape(n, h, w, 2, 2, co)
    y = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, co)
    y += kernel.bias
    return y


def transposed_conv2x2_backward(grad_out: np.ndarray, cached_input: np.ndarray,
                                kernel: Kernel4) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, h, w, ci = cached_input.shape
    co = kernel.shape[3]
    if grad_out.shape != (n, 2 * h, 2 * w, co):
        raise ShapeError(f"grad_out {grad_out.shape} does not match forward output {(n, 2 * h, 2 * w, co)}")
    g = grad_out.reshape(n, h, 2, w, 2, co).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * co)
    wmat = kernel.weight.transpose(2, 0, 1, 3).reshape(ci, 4 * co)
    grad_in = (g @ wmat.T).reshape(n, h, w, ci)
    grad_w = (cached_input.reshape(-1, ci).T @ g).reshape(ci, 2, 2, co).transpose(1, 2, 0, 3)
    grad_b = grad_out.sum(axis=(0, 1, 2))
    return grad_in, np.ascontiguousarray(grad_w), grad_b


# ---------------------------------------------------------------------------
# pooling, concatenation
# ---------------------------------------------------------------------------


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool.

    Returns the pooled tensor and, per output element, the winning position
    0..3 in row-major window order.  Ties go to the first position scanned.
    """
    check_tensor4(x, "input")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {x.shape}; pad inputs to a multiple of 8")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match pool cache {argmax.shape}")
    n, h2, w2, c = grad_out.shape
    win = np.zeros((n, h2, w2, c, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    return win.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor4(a, "a")
    check_tensor4(b, "b")
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: spatial/batch mismatch")
    return np.concatenate([a, b], axis=3)


def split_channels(x: np.ndarray, at: int) -> tuple[np.ndarray, np.ndarray]:
    return x[..., :at], x[..., at:]


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a + b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a * b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def add_backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad, grad


def hadamard_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad * b, grad * a


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def sigmoid_backward(grad: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``y`` is the sigmoid output, not its input."""
    return grad * y * (1.0 - y)


def tanh_backward(grad: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``y`` is the tanh output, not its input."""
    return grad * (1.0 - y * y)


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "hadamard": hadamard}


def elementwise(op: str, *args: np.ndarray) -> np.ndarray:
    if op in _UNARY:
        (x,) = args
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = args
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    check_tensor4(x, "input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {out_h}x{out_w}")
    n, h, w, c = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    fr = fr[None, :, None, None]
    fc = fc[None, None, :, None]
    # lerp form a + (b - a) * t keeps constant regions exactly constant
    rows = x[:, r0] + (x[:, r1] - x[:, r0]) * fr
    return rows[:, :, c0] + (rows[:, :, c1] - rows[:, :, c0]) * fc
