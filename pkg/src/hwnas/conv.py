"""Convolution and pooling kernels for the autodiff engine.

Forward passes materialize im2col patches for a single BLAS matmul; backward
passes recompute the patch matrix from the retained input instead of caching
it, which roughly halves the live memory of a supernet training step.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, _make


def conv_out_hw(h: int, w: int, k: int, stride: int, pad: int, dil: int) -> tuple[int, int]:
    ho = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dil * (k - 1) - 1) // stride + 1
    return ho, wo


def _pad2d(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                  constant_values=value)


def _patches(xp: np.ndarray, k: int, stride: int, dil: int,
             ho: int, wo: int) -> np.ndarray:
    """Strided view (B, C, k, k, Ho, Wo) over a padded input. No copy."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(xp, (b, c, k, k, ho, wo),
                      (sb, sc, dil * sh, dil * sw, stride * sh, stride * sw))


def _scatter_patches(cols: np.ndarray, out_shape: tuple, k: int, stride: int,
                     dil: int) -> np.ndarray:
    """Adjoint of _patches: scatter-add (B, C, k, k, Ho, Wo) into (B, C, Hp, Wp)."""
    b, c, hp, wp = out_shape
    ho, wo = cols.shape[4], cols.shape[5]
    x = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(k):
        hi = i * dil
        for j in range(k):
            wj = j * dil
            x[:, :, hi:hi + stride * ho:stride, wj:wj + stride * wo:stride] += cols[:, :, i, j]
    return x


def _conv_forward_np(x: np.ndarray, w: np.ndarray, stride: int, pad: int,
                     dil: int) -> np.ndarray:
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has Cin={cin}, "
            f"weight {w.shape} expects Cin={cin_w}")
    ho, wo = conv_out_hw(h, wd, kh, stride, pad, dil)
    xp = _pad2d(x, pad)
    cols = _patches(xp, kh, stride, dil, ho, wo).reshape(b, cin * kh * kw, ho * wo)
    out = np.matmul(w.reshape(cout, -1), cols)
    return out.reshape(b, cout, ho, wo)


def _conv_grad_weight(go: np.ndarray, x: np.ndarray, w_shape: tuple, stride: int,
                      pad: int, dil: int) -> np.ndarray:
    b, cin, _, _ = x.shape
    cout, _, kh, kw = w_shape
    ho, wo = go.shape[2], go.shape[3]
    go_flat = go.reshape(b, cout, ho * wo)
    xp = _pad2d(x, pad)
    cols = _patches(xp, kh, stride, dil, ho, wo).reshape(b, cin * kh * kw, ho * wo)
    return np.matmul(go_flat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)


def _conv_grad_input(go: np.ndarray, x_shape: tuple, w: np.ndarray, stride: int,
                     pad: int, dil: int) -> np.ndarray:
    b, cin, h, wd = x_shape
    cout, _, kh, kw = w.shape
    ho, wo = go.shape[2], go.shape[3]
    hp, wp = h + 2 * pad, wd + 2 * pad
    flip_pad = dil * (kh - 1) - pad
    if stride == 1 and flip_pad >= 0:
        # stride-1 grad-input is itself a conv: correlate go with the
        # channel-swapped, spatially flipped kernel (stays on the BLAS path)
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _conv_forward_np(go, w_flip, 1, flip_pad, dil)
    go_flat = go.reshape(b, cout, ho * wo)
    gcols = np.matmul(w.reshape(cout, -1).T, go_flat)
    gcols = gcols.reshape(b, cin, kh, kw, ho, wo)
    gxp = _scatter_patches(gcols, (b, cin, hp, wp), kh, stride, dil)
    return gxp[:, :, pad:hp - pad, pad:wp - pad] if pad else gxp


def _needs(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1,
           padding: Optional[int] = None) -> Tensor:
    """2-d convolution; weight (Cout, Cin, kh, kw).

    Default padding preserves H, W at stride 1 (pad = dilation*(k-1)/2 for
    odd kernels).
    """
    k = w.data.shape[2]
    if padding is None:
        padding = dilation * (k - 1) // 2
    data = _conv_forward_np(x.data, w.data, stride, padding, dilation)

    def backward(go):
        gx = (_conv_grad_input(go, x.data.shape, w.data, stride, padding,
                               dilation) if _needs(x) else None)
        gw = (_conv_grad_weight(go, x.data, w.data.shape, stride, padding,
                                dilation) if _needs(w) else None)
        return gx, gw

    return _make(data, (x, w), backward)


def conv2d_transpose(x: Tensor, w: Tensor) -> Tensor:
    """Stride-2 3x3 transpose convolution; output is exactly 2H x 2W.

    Weight layout (Cin, Cout, 3, 3), matching the convention where the same
    array used by a stride-2 conv2d (as (Cin_out, Cout_in...) ...) gives the
    adjoint pair: <conv2d_s2(a, w), b> == <a, conv2d_transpose(b, w)>.
    The forward pass is the backward-data pass of that stride-2 conv2d.
    """
    b, a_ch, h, wd = x.data.shape
    cin_w, cout, kh, kw = w.data.shape
    if kh != 3 or kw != 3:
        raise ValueError(f"conv2d_transpose requires a 3x3 kernel, got {w.data.shape}")
    if a_ch != cin_w:
        raise ValueError(
            f"conv2d_transpose channel mismatch: input {x.data.shape} has C={a_ch}, "
            f"weight {w.data.shape} expects C={cin_w}")
    stride, pad = 2, 1
    ho, wo = 2 * h, 2 * wd  # doubling contract
    hp, wp = ho + 2 * pad, wo + 2 * pad

    y_flat = x.data.reshape(b, cin_w, h * wd)
    gcols = np.matmul(w.data.reshape(cin_w, -1).T, y_flat)
    gcols = gcols.reshape(b, cout, kh, kw, h, wd)
    canvas = _scatter_patches(gcols, (b, cout, hp, wp), kh, stride, 1)
    data = canvas[:, :, pad:hp - pad, pad:wp - pad]

    def backward(go):
        # d/dx is the plain stride-2 conv of go with the same weight array
        gx = _conv_forward_np(go, w.data, stride, pad, 1) if _needs(x) else None
        if _needs(w):
            # d/dw swaps the roles of input and grad_output in the conv grad
            gop = _pad2d(go, pad)
            cols = _patches(gop, kh, stride, 1, h, wd).reshape(
                b, cout * kh * kw, h * wd)
            gw = np.matmul(x.data.reshape(b, cin_w, h * wd),
                           cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        else:
            gw = None
        return gx, gw

    return _make(data, (x, w), backward)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1,
                     padding: Optional[int] = None) -> Tensor:
    """Per-channel 3x3 convolution; weight (C, kh, kw).

    Shift-and-add formulation: k*k fused multiply-adds over strided views,
    which beats an im2col einsum at these channel counts.
    """
    c_w, kh, kw = w.data.shape
    b, c, h, wd = x.data.shape
    if c != c_w:
        raise ValueError(
            f"depthwise_conv2d channel mismatch: input {x.data.shape} has C={c}, "
            f"weight {w.data.shape} expects C={c_w}")
    if padding is None:
        padding = dilation * (kh - 1) // 2
    ho, wo = conv_out_hw(h, wd, kh, stride, padding, dilation)
    xp = _pad2d(x.data, padding)
    hp, wp = xp.shape[2], xp.shape[3]

    def tap(arr, i, j):
        return arr[:, :, i * dilation:i * dilation + stride * ho:stride,
                   j * dilation:j * dilation + stride * wo:stride]

    data = np.zeros((b, c, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            data += w.data[None, :, i, j, None, None] * tap(xp, i, j)

    def backward(go):
        gw = None
        if _needs(w):
            pat = _patches(xp, kh, stride, dilation, ho, wo)
            pf = np.ascontiguousarray(pat).reshape(b, c, kh * kw, ho * wo)
            gw = np.matmul(pf, go.reshape(b, c, ho * wo, 1)).sum(axis=0) \
                .reshape(w.data.shape)
        gx = None
        if _needs(x):
            gxp = np.zeros((b, c, hp, wp), dtype=go.dtype)
            for i in range(kh):
                for j in range(kw):
                    sl = tap(gxp, i, j)
                    sl += w.data[None, :, i, j, None, None] * go
            gx = (gxp[:, :, padding:hp - padding, padding:wp - padding]
                  if padding else gxp)
        return gx, gw

    return _make(data, (x, w), backward)


def separable_conv2d(x: Tensor, depthwise_weight: Tensor, pointwise_weight: Tensor,
                     stride: int = 1, dilation: int = 1) -> Tensor:
    """Depthwise 3x3 followed by a 1x1 pointwise conv. Composes two graph ops."""
    mid = depthwise_conv2d(x, depthwise_weight, stride=stride, dilation=dilation)
    return conv2d(mid, pointwise_weight, stride=1, dilation=1, padding=0)


def conv1x1_grouped(x: Tensor, ws: list[Tensor]) -> Tensor:
    """E independent 1x1 convs over channel groups of x, one batched matmul.

    x is (B, E*Cin, H, W); ws[e] is (Cout, Cin, 1, 1) applied to group e. Used
    to fuse the pointwise stage of E separable convolutions that share one
    depthwise pass.
    """
    e = len(ws)
    b, ec, h, wd = x.data.shape
    cout, cin = ws[0].data.shape[0], ws[0].data.shape[1]
    if ec != e * cin:
        raise ValueError(f"grouped conv1x1: {ec} channels != {e} groups x {cin}")
    wstack = np.stack([w.data.reshape(cout, cin) for w in ws])  # (E, Cout, Cin)
    xg = x.data.reshape(b, e, cin, h * wd)
    out = np.matmul(wstack, xg)  # (B, E, Cout, N)
    data = out.reshape(b, e * cout, h, wd)

    def backward(go):
        gog = go.reshape(b, e, cout, h * wd)
        gx = None
        if _needs(x):
            gx = np.matmul(wstack.transpose(0, 2, 1), gog).reshape(x.data.shape)
        gws = np.matmul(gog, xg.transpose(0, 1, 3, 2)).sum(axis=0)  # (E, Cout, Cin)
        return (gx,) + tuple(
            gws[i].reshape(ws[i].data.shape) if _needs(ws[i]) else None
            for i in range(e))

    return _make(data, (x,) + tuple(ws), backward)


def pool2d(x: Tensor, kind: str, kernel: int = 3, stride: int = 2,
           padding: int = 1) -> Tensor:
    """Max or average pooling. Average includes the zero padding in its
    divisor (every output cell divides by kernel**2); max routes gradient to
    the first (row-major) argmax of each window."""
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    b, c, h, w = x.data.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ValueError(
            f"pool kernel {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho, wo = conv_out_hw(h, w, kernel, stride, padding, 1)
    fill = -np.inf if kind == "max" else 0.0
    xp = _pad2d(x.data, padding, value=fill)
    hp, wp = xp.shape[2], xp.shape[3]
    pat = _patches(xp, kernel, stride, 1, ho, wo)
    flat = pat.reshape(b, c, kernel * kernel, ho, wo)

    if kind == "avg":
        data = flat.sum(axis=2) / (kernel * kernel)

        def backward(go):
            g = np.broadcast_to(go[:, :, None] / (kernel * kernel),
                                (b, c, kernel * kernel, ho, wo))
            gcols = g.reshape(b, c, kernel, kernel, ho, wo)
            gxp = _scatter_patches(gcols, (b, c, hp, wp), kernel, stride, 1)
            return (gxp[:, :, padding:hp - padding, padding:wp - padding]
                    if padding else gxp,)

        return _make(data, (x,), backward)

    arg = flat.argmax(axis=2)  # first index on ties
    data = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def backward(go):
        gflat = np.zeros((b, c, kernel * kernel, ho, wo), dtype=go.dtype)
        np.put_along_axis(gflat, arg[:, :, None], go[:, :, None], axis=2)
        gcols = gflat.reshape(b, c, kernel, kernel, ho, wo)
        gxp = _scatter_patches(gcols, (b, c, hp, wp), kernel, stride, 1)
        return (gxp[:, :, padding:hp - padding, padding:wp - padding]
                if padding else gxp,)

    return _make(data, (x,), backward)
