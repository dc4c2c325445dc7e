"""Differentiable primitives with hand-written backward passes.

Every forward returns ``(out, cache)``; the matching backward consumes the
cache. Passing ``keep=False`` to a forward discards whatever the backward
would need, which is how inference avoids retaining activations. All ops
preserve the input dtype, so the same code serves float32 training and the
float64 shadow computations of the gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, ShapeError, StateError
from .tensor import track

LEAKY_SLOPE = 0.01
GN_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: object = "same"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        if self.padding == "same":
            if any(k % 2 == 0 for k in self.kernel):
                raise ConfigError(f"'same' padding needs odd kernel, got {self.kernel}")
        else:
            object.__setattr__(self, "padding", _triple(self.padding))

    @property
    def pads(self):
        if self.padding == "same":
            return tuple(k // 2 for k in self.kernel)
        return self.padding

    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def out_shape(self, spatial):
        return tuple(
            (n + 2 * p - k) // s + 1
            for n, p, k, s in zip(spatial, self.pads, self.kernel, self.stride)
        )


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ConfigError(f"expected 3 values, got {v}")
    return v


def _check_require(cache, name):
    if cache is None:
        raise StateError(f"{name}: backward called without saved forward activations")


# ---------------------------------------------------------------- conv3d

def conv3d_forward(x, w, b, spec: ConvSpec, keep=True, site="conv3d"):
    """Cross-correlation of ``x[C_in, D, H, W]`` with ``w[C_out, C_in, kd, kh, kw]``.

    Lowered to one GEMM over an im2col buffer. For stride 1 the buffer rows
    are contiguous slices of the flattened padded input (each kernel tap is a
    constant offset in that layout), which is several times cheaper to build
    than gathering strided windows; outputs landing in the padding columns
    are discarded.
    """
    if x.ndim != 4 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"{site}: input {x.shape} does not match in_channels={spec.in_channels}")
    if w.shape != spec.weight_shape():
        raise ShapeError(f"{site}: weight {w.shape} != {spec.weight_shape()}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"{site}: bias {b.shape} != ({spec.out_channels},)")
    C, Co = spec.in_channels, spec.out_channels
    out_sp = spec.out_shape(x.shape[1:])
    if min(out_sp) < 1:
        raise ShapeError(f"{site}: input {x.shape[1:]} too small for kernel {spec.kernel}")
    kd, kh, kw = spec.kernel
    K = kd * kh * kw
    pd, ph, pw = spec.pads
    Do, Ho, Wo = out_sp
    wm = w.reshape(Co, C, K).transpose(0, 2, 1).reshape(Co, K * C)

    if K == 1 and spec.stride == (1, 1, 1) and spec.pads == (0, 0, 0):
        mode = "pointwise"
        cols = x.reshape(C, -1)
        out = track(wm @ cols, site).reshape((Co,) + out_sp)
    elif spec.stride == (1, 1, 1):
        mode = "flat"
        xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(spec.pads) else x
        Hp, Wp = xp.shape[2], xp.shape[3]
        flat = xp.reshape(C, -1)
        span = (Do - 1) * Hp * Wp + (Ho - 1) * Wp + Wo
        cols = track(np.empty((K, C, span), dtype=x.dtype), site + ".cols")
        k = 0
        for a in range(kd):
            for c in range(kh):
                for e in range(kw):
                    s0 = a * Hp * Wp + c * Wp + e
                    cols[k] = flat[:, s0 : s0 + span]
                    k += 1
        del xp, flat
        cols = cols.reshape(K * C, span)
        res = track(np.zeros((Co, Do * Hp * Wp), dtype=x.dtype), site + ".full")
        res[:, :span] = wm @ cols
        out = track(np.ascontiguousarray(res.reshape(Co, Do, Hp, Wp)[:, :, :Ho, :Wo]), site)
        del res
    else:
        mode = "gather"
        xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(spec.pads) else x
        sd, sh, sw = spec.stride
        cols = track(np.empty((K, C) + out_sp, dtype=x.dtype), site + ".cols")
        k = 0
        for a in range(kd):
            for c in range(kh):
                for e in range(kw):
                    cols[k] = xp[
                        :,
                        a : a + sd * (Do - 1) + 1 : sd,
                        c : c + sh * (Ho - 1) + 1 : sh,
                        e : e + sw * (Wo - 1) + 1 : sw,
                    ]
                    k += 1
        del xp
        cols = cols.reshape(K * C, -1)
        out = track(wm @ cols, site).reshape((Co,) + out_sp)
    out += b.reshape(Co, 1, 1, 1)
    cache = {"cols": cols, "in_shape": x.shape, "spec": spec, "mode": mode} if keep else None
    return out, cache


def conv3d_backward(grad_out, cache, w, need_input_grad=True):
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None when not requested."""
    _check_require(cache, "conv3d")
    spec, cols, mode = cache["spec"], cache["cols"], cache["mode"]
    in_shape = cache["in_shape"]
    C, Co = spec.in_channels, spec.out_channels
    kd, kh, kw = spec.kernel
    K = kd * kh * kw
    out_sp = spec.out_shape(in_shape[1:])
    if grad_out.shape != (Co,) + out_sp:
        raise ShapeError(f"conv3d backward: grad {grad_out.shape} != forward output {(Co,) + out_sp}")
    Do, Ho, Wo = out_sp
    pd, ph, pw = spec.pads
    grad_b = grad_out.reshape(Co, -1).sum(axis=1)
    wm = w.reshape(Co, C, K).transpose(0, 2, 1).reshape(Co, K * C)

    if mode == "flat":
        Dp, Hp, Wp = in_shape[1] + 2 * pd, in_shape[2] + 2 * ph, in_shape[3] + 2 * pw
        span = cols.shape[1]
        gpad = np.zeros((Co, Do, Hp, Wp), dtype=grad_out.dtype)
        gpad[:, :, :Ho, :Wo] = grad_out
        g = gpad.reshape(Co, -1)[:, :span]
    else:
        g = grad_out.reshape(Co, -1)
    grad_w = (g @ cols.T).reshape(Co, K, C).transpose(0, 2, 1).reshape(w.shape)
    if not need_input_grad:
        return None, grad_w, grad_b
    gcols = wm.T @ g

    if mode == "pointwise":
        return gcols.reshape(in_shape), grad_w, grad_b
    if mode == "flat":
        gflat = np.zeros((C, Dp * Hp * Wp), dtype=grad_out.dtype)
        gcols = gcols.reshape(K, C, span)
        k = 0
        for a in range(kd):
            for c in range(kh):
                for e in range(kw):
                    s0 = a * Hp * Wp + c * Wp + e
                    gflat[:, s0 : s0 + span] += gcols[k]
                    k += 1
        gxp = gflat.reshape(C, Dp, Hp, Wp)
    else:
        sd, sh, sw = spec.stride
        gxp = np.zeros((C, in_shape[1] + 2 * pd, in_shape[2] + 2 * ph, in_shape[3] + 2 * pw), grad_out.dtype)
        gcols = gcols.reshape((K, C) + out_sp)
        k = 0
        for a in range(kd):
            for c in range(kh):
                for e in range(kw):
                    gxp[
                        :,
                        a : a + sd * (Do - 1) + 1 : sd,
                        c : c + sh * (Ho - 1) + 1 : sh,
                        e : e + sw * (Wo - 1) + 1 : sw,
                    ] += gcols[k]
                    k += 1
    grad_x = gxp[:, pd : pd + in_shape[1], ph : ph + in_shape[2], pw : pw + in_shape[3]]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------- group norm

def group_norm(x, groups, gamma, beta, eps=GN_EPS, keep=True, site="group_norm"):
    C = x.shape[0]
    if groups < 1 or C % groups:
        raise ConfigError(f"{site}: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"{site}: gamma/beta must have shape ({C},)")
    xg = x.reshape(groups, -1)
    mean = xg.mean(axis=1, dtype=np.float64, keepdims=True)
    var = np.square(xg - mean.astype(x.dtype), dtype=np.float64).mean(axis=1, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = track((xg - mean.astype(x.dtype)) * inv_std, site + ".xhat").reshape(x.shape)
    bshape = (C,) + (1,) * (x.ndim - 1)
    out = track(xhat * gamma.reshape(bshape) + beta.reshape(bshape), site)
    cache = {"xhat": xhat, "inv_std": inv_std, "groups": groups} if keep else None
    return out, cache


def group_norm_backward(grad_out, cache, gamma):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    _check_require(cache, "group_norm")
    xhat, inv_std, groups = cache["xhat"], cache["inv_std"], cache["groups"]
    C = grad_out.shape[0]
    axes = tuple(range(1, grad_out.ndim))
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    dxhat = (grad_out * gamma.reshape((C,) + (1,) * len(axes))).reshape(groups, -1)
    xh = xhat.reshape(groups, -1)
    m = dxhat.mean(axis=1, keepdims=True)
    mx = (dxhat * xh).mean(axis=1, keepdims=True)
    grad_x = (inv_std * (dxhat - m - xh * mx)).reshape(grad_out.shape)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------- activations

def leaky_relu(x, slope=LEAKY_SLOPE, keep=True, site="leaky_relu"):
    pos = x >= 0
    out = track(np.where(pos, x, x * x.dtype.type(slope)), site)
    return out, ({"pos": pos, "slope": slope} if keep else None)


def leaky_relu_backward(grad_out, cache):
    _check_require(cache, "leaky_relu")
    slope = grad_out.dtype.type(cache["slope"])
    return np.where(cache["pos"], grad_out, grad_out * slope)


def sigmoid(x, keep=True, site="sigmoid"):
    """Logistic function, clipped so outputs stay strictly inside (0, 1)."""
    dt = x.dtype
    out = expit(x)
    np.clip(out, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0)), out=out)
    track(out, site)
    return out, ({"out": out} if keep else None)


def sigmoid_backward(grad_out, cache):
    _check_require(cache, "sigmoid")
    y = cache["out"]
    return grad_out * y * (1 - y)


# ---------------------------------------------------------------- upsampling

def _up_axis(x, axis):
    # output o samples input coordinate (o + 0.5) / 2 - 0.5, edge-clamped
    n = x.shape[axis]
    prev = np.take(x, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(x, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape).astype(x.dtype, copy=False)


def _up_axis_adjoint(g, axis):
    n = g.shape[axis] // 2
    sl = [slice(None)] * g.ndim

    def part(s):
        sl[axis] = s
        return g[tuple(sl)]

    ge, go = part(slice(0, None, 2)), part(slice(1, None, 2))
    gx = 0.75 * (ge + go)
    # even output i reads x[max(i-1, 0)]; odd output i reads x[min(i+1, n-1)]
    idx = [slice(None)] * g.ndim

    def at(s):
        idx[axis] = s
        return tuple(idx)

    gx[at(slice(0, n - 1))] += 0.25 * ge[at(slice(1, n))]
    gx[at(slice(0, 1))] += 0.25 * ge[at(slice(0, 1))]
    gx[at(slice(1, n))] += 0.25 * go[at(slice(0, n - 1))]
    gx[at(slice(n - 1, n))] += 0.25 * go[at(slice(n - 1, n))]
    return gx.astype(g.dtype, copy=False)


def trilinear_upsample2x(x, site="upsample"):
    """Double every spatial axis of ``x[C, D, H, W]`` with half-pixel-center mapping."""
    out = x
    for axis in (1, 2, 3):
        out = _up_axis(out, axis)
    return track(out, site)


def trilinear_upsample2x_backward(grad_out):
    g = grad_out
    for axis in (3, 2, 1):
        g = _up_axis_adjoint(g, axis)
    return g


# ---------------------------------------------------------------- dense

def dense(x, w, b, site="dense"):
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"{site}: x {x.shape}, w {w.shape}, b {b.shape} inconsistent")
    return track(w @ x + b, site)


def dense_backward(grad_out, x, w):
    """Returns ``(grad_x, grad_w, grad_b)``."""
    return w.T @ grad_out, np.outer(grad_out, x), grad_out.copy()
