"""Minimal deterministic tensor library with reverse-mode differentiation.

Feature maps are dense row-major arrays of up to 4 extents, stored
channels-first (C, H, W). Every operator records an explicit analytic
backward closure; gradients accumulate additively into ``Param.grad``
and are only cleared by an explicit reset.

float32 is the working precision everywhere. float64 is supported so the
finite-difference harness can check the same algebra without drowning in
rounding noise; public entry points never switch dtype on their own.
"""

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """Node in the computation graph wrapping a numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ShapeError("tensors support at most 4 extents", shape=list(arr.shape))
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse-mode sweep from this node.

        ``seed`` defaults to ones (the usual scalar-loss case). Grads add
        into any existing buffers; callers reset Params between steps.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(seed, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad or isinstance(node, Param):
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"


class Param(Tensor):
    """Learnable tensor with a persistent, zero-initialized gradient buffer."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    def reset_grad(self):
        self.grad[...] = 0.0

    def step(self, lr):
        """Plain SGD update in place."""
        self.data -= np.asarray(lr, dtype=self.data.dtype) * self.grad


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return list(reversed(order))


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad or p._parents or isinstance(p, Param) for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(
            f"{op}: operand shapes differ",
            lhs=list(a.shape), rhs=list(b.shape),
        )


# ---------------------------------------------------------------------------
# Elementwise suite
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "hadamard")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def affine(x: Tensor, scale=1.0, shift=0.0) -> Tensor:
    """Elementwise ``scale * x + shift`` with constant scale/shift.

    Scale and shift may be scalars or arrays broadcastable to ``x``; they
    are constants, so no gradient flows into them.
    """
    scale = np.asarray(scale, dtype=x.data.dtype)
    shift = np.asarray(shift, dtype=x.data.dtype)
    data = scale * x.data + shift
    if data.shape != x.data.shape:
        raise ShapeError("affine: scale/shift do not broadcast to x",
                         x=list(x.shape), scale=list(scale.shape), shift=list(shift.shape))
    return _make(data, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so neither branch evaluates exp of a large positive value.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data >= 0
    out = np.where(mask, x.data, np.asarray(slope, x.data.dtype) * x.data)
    return _make(out, (x,), lambda g: (np.where(mask, g, np.asarray(slope, g.dtype) * g),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,),
                 lambda g: (np.where(mask, g, 0.0),))


def softmax_channelwise(x: Tensor) -> Tensor:
    """Softmax over the channel (first) axis of a (C, ...) tensor."""
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=0, keepdims=True)
        return ((out * (g - dot)),)

    return _make(out, (x,), backward)


def log_softmax_channelwise(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the channel axis."""
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=0, keepdims=True),)

    return _make(out, (x,), backward)


def concat_channels(tensors) -> Tensor:
    """Concatenate (C_i, H, W) tensors along the channel axis."""
    tensors = list(tensors)
    spatial = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != spatial:
            raise ShapeError("concat_channels: spatial extents differ",
                             first=list(tensors[0].shape), other=list(t.shape))
    data = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return _make(data, tuple(tensors), backward)


def take(x: Tensor, flat_indices) -> Tensor:
    """Differentiable gather from the flattened tensor (duplicates allowed)."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    data = x.data.reshape(-1)[idx]

    def backward(g):
        gx = np.zeros(x.data.size, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx.reshape(x.data.shape),)

    return _make(data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _make(data, (x,), lambda g: (np.broadcast_to(g, x.data.shape).astype(g.dtype),))


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return _make(data, (x,), lambda g: ((np.broadcast_to(g, x.data.shape) / n).astype(g.dtype),))


def dot_const(x: Tensor, weights) -> Tensor:
    """Weighted sum against a constant vector; standard scalarization."""
    w = np.asarray(weights, dtype=x.data.dtype).reshape(-1)
    if w.size != x.data.size:
        raise ShapeError("dot_const: weight count mismatch", x=x.data.size, weights=w.size)
    data = np.asarray(np.dot(x.data.reshape(-1).astype(np.float64), w.astype(np.float64)),
                      dtype=x.data.dtype)
    return _make(data, (x,), lambda g: ((g * w).reshape(x.data.shape),))


# ---------------------------------------------------------------------------
# Normalization and resampling
# ---------------------------------------------------------------------------

def channel_norm(x: Tensor, gamma: Param, beta: Param, eps: float = 1e-3) -> Tensor:
    """Per-channel normalization over spatial positions with learned affine.

    Statistics are computed per channel over H*W; single-image stand-in for
    a batch-synchronized normalization layer. The variance floor is kept
    relatively high because coarse pyramid levels can shrink to a handful
    of pixels, where a small floor lets the inverse stddev blow up.
    """
    if x.data.ndim != 3:
        raise ShapeError("channel_norm expects a (C, H, W) tensor", shape=list(x.shape))
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("channel_norm: affine parameters must have one value per channel",
                         channels=c, gamma=list(gamma.shape), beta=list(beta.shape))
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, x.data.dtype))
    xhat = centered * inv
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    n = x.shape[1] * x.shape[2]

    def backward(g):
        gxhat = g * gamma.data[:, None, None]
        # d/dx of (x - mu) * inv with mu, var functions of x
        sum_g = gxhat.sum(axis=(1, 2), keepdims=True)
        sum_gx = (gxhat * xhat).sum(axis=(1, 2), keepdims=True)
        gx = (inv / n) * (n * gxhat - sum_g - xhat * sum_gx)
        ggamma = (g * xhat).sum(axis=(1, 2))
        gbeta = g.sum(axis=(1, 2))
        return (gx, ggamma, gbeta)

    return _make(out, (x, gamma, beta), backward)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor with half-pixel centers."""
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1", factor=factor)
    if factor == 1:
        return affine(x, 1.0, 0.0)
    c, h, w = x.shape
    oh, ow = h * factor, w * factor
    r0, r1, fr = _resize_axis(h, oh, x.data.dtype)
    c0, c1, fc = _resize_axis(w, ow, x.data.dtype)

    def gather(arr):
        top = arr[:, r0, :][:, :, c0] * (1 - fr)[None, :, None] * (1 - fc)[None, None, :] \
            + arr[:, r0, :][:, :, c1] * (1 - fr)[None, :, None] * fc[None, None, :] \
            + arr[:, r1, :][:, :, c0] * fr[None, :, None] * (1 - fc)[None, None, :] \
            + arr[:, r1, :][:, :, c1] * fr[None, :, None] * fc[None, None, :]
        return top

    out = gather(x.data).astype(x.data.dtype)

    def backward(g):
        gx = np.zeros_like(x.data)
        wr = np.stack([1 - fr, fr])           # (2, oh)
        wc = np.stack([1 - fc, fc])           # (2, ow)
        rows = np.stack([r0, r1])
        cols = np.stack([c0, c1])
        for a in range(2):
            for b in range(2):
                contrib = g * wr[a][None, :, None] * wc[b][None, None, :]
                np.add.at(gx, (slice(None), rows[a][:, None], cols[b][None, :]), contrib)
        return (gx,)

    return _make(out, (x,), backward)


def _resize_axis(n_in, n_out, dtype):
    # Half-pixel mapping: src = (i + 0.5) * n_in / n_out - 0.5, clamped.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(dtype)
    return lo, hi, frac


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; extents must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2 requires even extents", shape=list(x.shape))
    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2)
    out = blocks.mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * np.asarray(0.25, g.dtype)
        return (gx,)

    return _make(out.astype(x.data.dtype), (x,), backward)


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE))
