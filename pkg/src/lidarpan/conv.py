"""Convolution kernels: strided/dilated conv2d, depthwise separable conv,
and differentiable bilinear sampling.

All kernels run cross-correlation on (C, H, W) maps via an im2col layout
whose column order is (kernel-row, kernel-col, in-channel), so the
accumulation order is fixed and forward passes are deterministic.
"""

import numpy as np

from .errors import ShapeError
from .tensor import Param, Tensor, _make


def _out_extent(n, k, stride, dilation, padding):
    eff = (k - 1) * dilation + 1
    if padding == "same":
        out = (n + stride - 1) // stride
        pad = max((out - 1) * stride + eff - n, 0)
        return out, pad // 2
    if padding == "valid":
        out = (n - eff) // stride + 1
        if out <= 0:
            raise ShapeError("valid convolution output would be empty",
                             input=n, effective_kernel=eff)
        return out, 0
    raise ShapeError("padding policy must be 'same' or 'valid'", padding=padding)


def _patch_indices(oh, ow, kh, kw, stride, dilation):
    dh, dw = dilation
    rr = (np.arange(oh) * stride)[:, None] + (np.arange(kh) * dh)[None, :]
    cc = (np.arange(ow) * stride)[:, None] + (np.arange(kw) * dw)[None, :]
    return rr, cc


def conv2d(x: Tensor, w: Param, b=None, stride: int = 1,
           dilation=(1, 1), padding: str = "same") -> Tensor:
    """2D cross-correlation with zero padding.

    ``w`` is (out_ch, in_ch, kh, kw); ``b`` an optional (out_ch,) bias.
    Backward accumulates into ``w.grad`` / ``b.grad`` and returns the
    input gradient.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x (C,H,W) and w (O,I,kh,kw)",
                         x=list(x.shape), w=list(w.shape))
    cin, h, wd = x.shape
    cout, win, kh, kw = w.shape
    if cin != win:
        raise ShapeError("conv2d: input channels do not match kernel in-channels",
                         x=list(x.shape), w=list(w.shape))
    dh, dw_ = dilation
    oh, pt = _out_extent(h, kh, stride, dh, padding)
    ow, pl = _out_extent(wd, kw, stride, dw_, padding)

    xp = x.data
    if pt or pl or padding == "same":
        eff_h = (kh - 1) * dh + 1
        eff_w = (kw - 1) * dw_ + 1
        pb = max((oh - 1) * stride + eff_h - h - pt, 0) if padding == "same" else 0
        pr = max((ow - 1) * stride + eff_w - wd - pl, 0) if padding == "same" else 0
        xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)))
    rr, cc = _patch_indices(oh, ow, kh, kw, stride, dilation)
    patches = xp[:, rr[:, None, :, None], cc[None, :, None, :]]   # (C, oh, ow, kh, kw)
    cols = patches.transpose(3, 4, 0, 1, 2).reshape(kh * kw * cin, oh * ow)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = (wmat.T @ cols).reshape(cout, oh, ow)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError("conv2d: bias must have one value per output channel",
                             bias=list(b.shape), out_channels=cout)
        out = out + b.data[:, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.reshape(cout, oh * ow)
        gw = (cols @ gmat.T).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        gcols = (wmat @ gmat).reshape(kh, kw, cin, oh, ow)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for kr in range(kh):
            rows_k = np.arange(oh) * stride + kr * dh
            for kc in range(kw):
                cols_k = np.arange(ow) * stride + kc * dw_
                gxp[:, rows_k[:, None], cols_k[None, :]] += gcols[kr, kc]
        gx = gxp[:, pt:pt + h, pl:pl + wd]
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(1, 2)))

    return _make(out.astype(x.data.dtype), parents, backward)


def depthwise_conv2d(x: Tensor, dw: Param, dilation=(1, 1)) -> Tensor:
    """Per-channel 3x3-style convolution, stride 1, zero 'same' padding."""
    cin, h, wd = x.shape
    if dw.data.ndim != 4 or dw.shape[0] != cin or dw.shape[1] != 1:
        raise ShapeError("depthwise kernel must be (in_ch, 1, kh, kw) matching input channels",
                         x=list(x.shape), dw=list(dw.shape))
    kh, kw = dw.shape[2], dw.shape[3]
    dh, dw_ = dilation
    oh, pt = _out_extent(h, kh, 1, dh, "same")
    ow, pl = _out_extent(wd, kw, 1, dw_, "same")
    eff_h = (kh - 1) * dh + 1
    eff_w = (kw - 1) * dw_ + 1
    pb = max((oh - 1) + eff_h - h - pt, 0)
    pr = max((ow - 1) + eff_w - wd - pl, 0)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)))
    rr, cc = _patch_indices(oh, ow, kh, kw, 1, dilation)
    patches = xp[:, rr[:, None, :, None], cc[None, :, None, :]]
    kern = dw.data.reshape(cin, kh, kw)
    out = np.einsum("cijrs,crs->cij", patches, kern)

    def backward(g):
        gdw = np.einsum("cijrs,cij->crs", patches, g).reshape(cin, 1, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for kr in range(kh):
            rows_k = np.arange(oh) + kr * dh
            for kc in range(kw):
                cols_k = np.arange(ow) + kc * dw_
                gxp[:, rows_k[:, None], cols_k[None, :]] += g * kern[:, kr, kc][:, None, None]
        return (gxp[:, pt:pt + h, pl:pl + wd], gdw)

    return _make(out.astype(x.data.dtype), (x, dw), backward)


def depthwise_separable_conv(x: Tensor, dw: Param, pw: Param, dilation=(1, 1)) -> Tensor:
    """Depthwise conv followed by a 1x1 pointwise conv.

    ``dw`` is (in_ch, 1, kh, kw) and ``pw`` (out_ch, in_ch, 1, 1); equal to
    conv2d with the composed kernel on single-channel inputs.
    """
    if pw.data.ndim != 4 or pw.shape[2] != 1 or pw.shape[3] != 1:
        raise ShapeError("pointwise kernel must be (out_ch, in_ch, 1, 1)", pw=list(pw.shape))
    if pw.shape[1] != x.shape[0]:
        raise ShapeError("pointwise in-channels do not match input",
                         x=list(x.shape), pw=list(pw.shape))
    return conv2d(depthwise_conv2d(x, dw, dilation), pw, None, 1, (1, 1), "same")


def gathered_depthwise(samples, dw: Param) -> Tensor:
    """Depthwise combination of pre-gathered neighbor maps.

    ``samples`` is a list of k tensors (C, H, W), one per kernel tap in
    row-major order; ``dw`` is the usual (C, 1, kh, kw) depthwise kernel
    with kh*kw == k. Equivalent to a depthwise convolution whose sampling
    locations were produced elsewhere.
    """
    samples = list(samples)
    c = samples[0].shape[0]
    k = dw.shape[2] * dw.shape[3]
    if dw.shape[0] != c or dw.shape[1] != 1 or len(samples) != k:
        raise ShapeError("gathered_depthwise: kernel does not match samples",
                         dw=list(dw.shape), samples=len(samples),
                         channels=list(samples[0].shape))
    for s in samples[1:]:
        if s.shape != samples[0].shape:
            raise ShapeError("gathered_depthwise: sample extents differ",
                             first=list(samples[0].shape), other=list(s.shape))
    kern = dw.data.reshape(c, k)
    out = np.zeros_like(samples[0].data)
    for o in range(k):
        out = out + samples[o].data * kern[:, o][:, None, None]

    def backward(g):
        grads = [g * kern[:, o][:, None, None] for o in range(k)]
        gdw = np.stack([(g * s.data).sum(axis=(1, 2)) for s in samples], axis=1)
        return (*grads, gdw.reshape(dw.shape))

    return _make(out, (*samples, dw), backward)


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample (C, H, W) at fractional (row, col) coordinates.

    ``coords`` is (2, H', W') carrying rows then cols; out-of-range
    coordinates clamp to the border. Differentiable with respect to both
    the image and the coordinates (zero coordinate-gradient where the
    clamp is active).
    """
    if coords.data.ndim != 3 or coords.shape[0] != 2:
        raise ShapeError("coords must be (2, H', W')", coords=list(coords.shape))
    c, h, w = x.shape
    rows = np.clip(coords.data[0], 0.0, h - 1.0)
    cols = np.clip(coords.data[1], 0.0, w - 1.0)
    r_active = (coords.data[0] > 0.0) & (coords.data[0] < h - 1.0)
    c_active = (coords.data[1] > 0.0) & (coords.data[1] < w - 1.0)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0).astype(x.data.dtype)
    fc = (cols - c0).astype(x.data.dtype)

    v00 = x.data[:, r0, c0]
    v01 = x.data[:, r0, c1]
    v10 = x.data[:, r1, c0]
    v11 = x.data[:, r1, c1]
    out = (v00 * (1 - fr) * (1 - fc) + v01 * (1 - fr) * fc
           + v10 * fr * (1 - fc) + v11 * fr * fc)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), r0, c0), g * (1 - fr) * (1 - fc))
        np.add.at(gx, (slice(None), r0, c1), g * (1 - fr) * fc)
        np.add.at(gx, (slice(None), r1, c0), g * fr * (1 - fc))
        np.add.at(gx, (slice(None), r1, c1), g * fr * fc)
        dr = ((v10 - v00) * (1 - fc) + (v11 - v01) * fc)
        dc = ((v01 - v00) * (1 - fr) + (v11 - v10) * fr)
        grow = (g * dr).sum(axis=0) * r_active
        gcol = (g * dc).sum(axis=0) * c_active
        return (gx, np.stack([grow, gcol]).astype(g.dtype))

    return _make(out.astype(x.data.dtype), (x, coords), backward)
