"""ConvLSTM cell and the bidirectional fusion used in skip connections.

Gate equations, with ``*`` a same-padded convolution and ``.`` a per-channel
(Hadamard) product::

    i = sigmoid(W_xi * x + W_hi * h + w_ci . c + b_i)
    f = sigmoid(W_xf * x + W_hf * h + w_cf . c + b_f)
    C = f . c + i . tanh(W_xc * x + W_hc * h + b_c)
    o = sigmoid(W_xo * x + W_ho * h + w_co . C + b_o)
    H = o . tanh(C)

Fusion reads ``(x_dec, x_enc)`` as a two-step sequence and combines the final
hidden state of each direction::

    Y = tanh(W_y_fwd * H_fwd + W_y_bwd * H_bwd + b_y)
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import DTYPE, Kernel4, conv2d, conv2d_backward, conv2d_with_cols, sigmoid

GATES = ("i", "f", "c", "o")


@dataclass
class ConvLSTMParams:
    w_xi: np.ndarray
    w_xf: np.ndarray
    w_xc: np.ndarray
    w_xo: np.ndarray
    w_hi: np.ndarray
    w_hf: np.ndarray
    w_hc: np.ndarray
    w_ho: np.ndarray
    w_ci: np.ndarray
    w_cf: np.ndarray
    w_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        F = self.hidden
        for g in GATES:
            wx, wh = getattr(self, f"w_x{g}"), getattr(self, f"w_h{g}")
            if wx.ndim != 4 or wx.shape[3] != F or wx.shape[2] != self.w_xi.shape[2]:
                raise ShapeError(f"w_x{g} has shape {wx.shape}, expected (k, k, c_in, {F})")
            if wh.ndim != 4 or wh.shape[2:] != (F, F):
                raise ShapeError(f"w_h{g} has shape {wh.shape}, expected (k, k, {F}, {F})")
        for name in ("w_ci", "w_cf", "w_co", "b_i", "b_f", "b_c", "b_o"):
            if getattr(self, name).shape != (F,):
                raise ShapeError(f"{name} must have shape ({F},), got {getattr(self, name).shape}")

    @property
    def hidden(self) -> int:
        return self.w_xi.shape[3]

    @property
    def c_in(self) -> int:
        return self.w_xi.shape[2]

    @classmethod
    def zeros(cls, c_in: int, hidden: int, k: int = 3) -> "ConvLSTMParams":
        kw = {}
        for f in fields(cls):
            if f.name.startswith("w_x"):
                kw[f.name] = np.zeros((k, k, c_in, hidden), DTYPE)
            elif f.name.startswith("w_h"):
                kw[f.name] = np.zeros((k, k, hidden, hidden), DTYPE)
            else:
                kw[f.name] = np.zeros(hidden, DTYPE)
        return cls(**kw)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def zeros_like(self) -> "ConvLSTMParams":
        return ConvLSTMParams(**{k: np.zeros_like(v) for k, v in self.as_dict().items()})

    def input_kernel(self) -> Kernel4:
        w = np.concatenate([getattr(self, f"w_x{g}") for g in GATES], axis=3)
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
        return Kernel4(w, b)

    def hidden_kernel(self) -> Kernel4:
        w = np.concatenate([getattr(self, f"w_h{g}") for g in GATES], axis=3)
        return Kernel4(w, np.zeros(w.shape[3], w.dtype))


class ConvLSTMState(NamedTuple):
    H: np.ndarray
    C: np.ndarray


class StepCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray | None
    c_prev: np.ndarray | None
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    C: np.ndarray
    tanh_C: np.ndarray
    params: ConvLSTMParams
    x_cols: np.ndarray | None = None
    h_cols: np.ndarray | None = None


def convlstm_step(x: np.ndarray, state: ConvLSTMState | None,
                  p: ConvLSTMParams) -> tuple[ConvLSTMState, StepCache]:
    """Advance one ConvLSTM time step.  ``state=None`` means zero H and C."""
    if x.ndim != 4 or x.shape[3] != p.c_in:
        raise ShapeError(f"input {x.shape} does not match cell input width {p.c_in}")
    F = p.hidden
    if state is not None:
        expected = x.shape[:3] + (F,)
        if state.H.shape != expected or state.C.shape != expected:
            raise ShapeError(f"state shapes {state.H.shape}/{state.C.shape} do not match {expected}")
    z, x_cols = conv2d_with_cols(x, p.input_kernel())
    h_cols = None
    if state is not None:
        zh, h_cols = conv2d_with_cols(state.H, p.hidden_kernel())
        z += zh
    a_i, a_f, a_c, a_o = (z[..., k * F:(k + 1) * F] for k in range(4))
    g = np.tanh(a_c)
    if state is None:
        i, f = sigmoid(a_i), sigmoid(a_f)
        C = i * g
    else:
        c_prev = state.C
        i = sigmoid(a_i + p.w_ci * c_prev)
        f = sigmoid(a_f + p.w_cf * c_prev)
        C = f * c_prev + i * g
    o = sigmoid(a_o + p.w_co * C)
    tanh_C = np.tanh(C)
    H = o * tanh_C
    cache = StepCache(x, None if state is None else state.H, None if state is None else state.C,
                      i, f, g, o, C, tanh_C, p, x_cols, h_cols)
    return ConvLSTMState(H, C), cache


def convlstm_backward(dH: np.ndarray, dC: np.ndarray | None, cache: StepCache | None):
    """Reverse one step.

    Returns ``(dx, dH_prev, dC_prev, grads)``; the previous-state gradients are
    ``None`` when the step started from the implicit zero state.
    """
    if cache is None:
        raise UsageError("convlstm_backward needs the cache from a convlstm_step call")
    p = cache.params
    i, f, g, o, C, tC = cache.i, cache.f, cache.g, cache.o, cache.C, cache.tanh_C
    grads = p.zeros_like()
    axes = (0, 1, 2)

    d_o = dH * tC
    da_o = d_o * o * (1.0 - o)
    dCt = dH * o * (1.0 - tC * tC) + da_o * p.w_co
    if dC is not None:
        dCt = dCt + dC
    grads.w_co[...] = (da_o * C).sum(axis=axes)

    da_c = dCt * i * (1.0 - g * g)
    da_i = dCt * g * i * (1.0 - i)
    if cache.c_prev is not None:
        c_prev = cache.c_prev
        da_f = dCt * c_prev * f * (1.0 - f)
        dc_prev = dCt * f + da_i * p.w_ci + da_f * p.w_cf
        grads.w_ci[...] = (da_i * c_prev).sum(axis=axes)
        grads.w_cf[...] = (da_f * c_prev).sum(axis=axes)
    else:
        da_f = np.zeros_like(da_i)
        dc_prev = None

    dz = np.concatenate([da_i, da_f, da_c, da_o], axis=3)
    dx, dwx, db = conv2d_backward(dz, cache.x, p.input_kernel(), cols=cache.x_cols)
    F = p.hidden
    for k, gate in enumerate(GATES):
        getattr(grads, f"w_x{gate}")[...] = dwx[..., k * F:(k + 1) * F]
        getattr(grads, f"b_{gate}")[...] = db[k * F:(k + 1) * F]
    dh_prev = None
    if cache.h_prev is not None:
        dh_prev, dwh, _ = conv2d_backward(dz, cache.h_prev, p.hidden_kernel(), cols=cache.h_cols)
        for k, gate in enumerate(GATES):
            getattr(grads, f"w_h{gate}")[...] = dwh[..., k * F:(k + 1) * F]
    return dx, dh_prev, dc_prev, grads


def accumulate(total: ConvLSTMParams, part: ConvLSTMParams) -> ConvLSTMParams:
    for name, v in part.as_dict().items():
        getattr(total, name)[...] += v
    return total


@dataclass
class BConvLSTMParams:
    fwd: ConvLSTMParams
    bwd: ConvLSTMParams
    w_y_fwd: np.ndarray
    w_y_bwd: np.ndarray
    b_y: np.ndarray

    def __post_init__(self):
        if self.fwd.hidden != self.bwd.hidden or self.fwd.c_in != self.bwd.c_in:
            raise ShapeError("forward and backward cells must share input and hidden widths")
        F = self.fwd.hidden
        for name in ("w_y_fwd", "w_y_bwd"):
            w = getattr(self, name)
            if w.ndim != 4 or w.shape[2] != F or w.shape[3] != self.b_y.shape[0]:
                raise ShapeError(f"{name} has shape {w.shape}, expected (k, k, {F}, {self.b_y.shape[0]})")

    @property
    def out_channels(self) -> int:
        return self.b_y.shape[0]

    @classmethod
    def zeros(cls, c_in: int, hidden: int, out: int, k: int = 3, k_y: int = 1) -> "BConvLSTMParams":
        return cls(ConvLSTMParams.zeros(c_in, hidden, k), ConvLSTMParams.zeros(c_in, hidden, k),
                   np.zeros((k_y, k_y, hidden, out), DTYPE), np.zeros((k_y, k_y, hidden, out), DTYPE),
                   np.zeros(out, DTYPE))

    def zeros_like(self) -> "BConvLSTMParams":
        return BConvLSTMParams(self.fwd.zeros_like(), self.bwd.zeros_like(), np.zeros_like(self.w_y_fwd),
                               np.zeros_like(self.w_y_bwd), np.zeros_like(self.b_y))

    def swapped(self) -> "BConvLSTMParams":
        """Exchange the two directions (cells and output kernels)."""
        return BConvLSTMParams(self.bwd, self.fwd, self.w_y_bwd, self.w_y_fwd, self.b_y)


class FuseCache(NamedTuple):
    fwd: tuple[StepCache, StepCache]
    bwd: tuple[StepCache, StepCache]
    h_fwd: np.ndarray
    h_bwd: np.ndarray
    y: np.ndarray
    params: BConvLSTMParams


def bconvlstm_fuse(x_enc: np.ndarray, x_dec: np.ndarray, p: BConvLSTMParams) -> tuple[np.ndarray, FuseCache]:
    if x_enc.shape != x_dec.shape:
        raise ShapeError(f"encoder map {x_enc.shape} and decoder map {x_dec.shape} must match")
    s1, cf1 = convlstm_step(x_dec, None, p.fwd)
    s2, cf2 = convlstm_step(x_enc, s1, p.fwd)
    r2, cb2 = convlstm_step(x_enc, None, p.bwd)
    r1, cb1 = convlstm_step(x_dec, r2, p.bwd)
    zero = np.zeros(p.out_channels, p.b_y.dtype)
    pre = conv2d(s2.H, Kernel4(p.w_y_fwd, p.b_y)) + conv2d(r1.H, Kernel4(p.w_y_bwd, zero))
    y = np.tanh(pre)
    return y, FuseCache((cf1, cf2), (cb2, cb1), s2.H, r1.H, y, p)


def bconvlstm_backward(dy: np.ndarray, cache: FuseCache | None):
    """Returns ``(dx_enc, dx_dec, grads)`` with ``grads`` a :class:`BConvLSTMParams`."""
    if cache is None:
        raise UsageError("bconvlstm_backward needs the cache from a bconvlstm_fuse call")
    p = cache.params
    grads = p.zeros_like()
    dpre = dy * (1.0 - cache.y * cache.y)
    zero = np.zeros(p.out_channels, dy.dtype)
    dh_f, grads.w_y_fwd[...], grads.b_y[...] = conv2d_backward(dpre, cache.h_fwd, Kernel4(p.w_y_fwd, p.b_y))
    dh_b, grads.w_y_bwd[...], _ = conv2d_backward(dpre, cache.h_bwd, Kernel4(p.w_y_bwd, zero))

    # forward direction: step 2 consumed x_enc, step 1 consumed x_dec
    cf1, cf2 = cache.fwd
    dx_enc, dh1, dc1, g2 = convlstm_backward(dh_f, None, cf2)
    dx_dec, _, _, g1 = convlstm_backward(dh1, dc1, cf1)
    accumulate(accumulate(grads.fwd, g2), g1)

    # backward direction: first consumed x_enc, then x_dec
    cb2, cb1 = cache.bwd
    ddec, dh2, dc2, g1 = convlstm_backward(dh_b, None, cb1)
    denc, _, _, g2 = convlstm_backward(dh2, dc2, cb2)
    accumulate(accumulate(grads.bwd, g1), g2)
    return dx_enc + denc, dx_dec + ddec, grads
