"""Range-aware differentiable operators.

Three operators shape computation by per-pixel range structure: the
proximity convolution samples the k nearest window neighbors by range
difference, gated feature fusion blends range-encoded features into
pyramid features per pixel and channel, and the range-guided separable
convolution dilates its taps by a learned, range-derived rate.
"""

from dataclasses import dataclass

import numpy as np

from .conv import bilinear_sample, conv2d, gathered_depthwise
from .errors import ShapeError, ValidationError
from .modules import Block, conv_weight, depthwise_weight
from .tensor import (
    Param,
    Tensor,
    _make,
    add,
    affine,
    channel_norm,
    concat_channels,
    hadamard,
    leaky_relu,
    sigmoid,
)

LEAKY_SLOPE = 0.01


@dataclass
class ProximityGrid:
    """Per-pixel neighbor offsets, nearest-by-range-difference first.

    ``offsets`` is (k, 2, H, W) holding (d_row, d_col) per neighbor slot;
    slot order pairs with proximity-convolution weight positions.
    """

    offsets: np.ndarray
    k: int
    search: tuple

    @property
    def shape(self):
        return self.offsets.shape[2:]


def _canonical_offsets(search, k):
    """Search-window offsets: inner kernel window row-major, then the rest.

    The inner window is the smallest odd square holding k taps, so exact
    range ties reproduce the standard convolution's row-major sampling
    grid (query pixel in the middle), which keeps the operator equal to
    conv2d on constant-range inputs.
    """
    sh, sw = search
    inner = 1
    while inner * inner < k:
        inner += 2
    offs = [(dr, dc)
            for dr in range(-(sh // 2), sh // 2 + 1)
            for dc in range(-(sw // 2), sw // 2 + 1)]
    offs.sort(key=lambda o: (max(abs(o[0]), abs(o[1])) > inner // 2, o[0], o[1]))
    return np.array(offs, dtype=np.int16)


def build_proximity_grid(range_img, valid=None, search=(5, 5), k=9) -> ProximityGrid:
    """Select the k nearest window neighbors of every pixel by |range diff|.

    Candidates are the valid in-bounds pixels of the centered search
    window; exact ties resolve by the canonical window order (inner
    kernel window row-major first). The query offset pads whenever fewer
    than k candidates remain, and is forced into the selection if ties
    ever push it out.
    """
    sh, sw = search
    if sh % 2 == 0 or sw % 2 == 0 or sh < 1 or sw < 1:
        raise ValidationError("search extents must be odd and positive", search=[sh, sw])
    if k < 1 or k > sh * sw:
        raise ValidationError("k must satisfy 1 <= k <= search area",
                              k=k, search_area=sh * sw)
    rng_img = np.asarray(range_img, dtype=np.float64)
    if rng_img.ndim != 2:
        raise ShapeError("range image must be 2-D", shape=list(rng_img.shape))
    h, w = rng_img.shape
    if valid is None:
        valid = np.ones((h, w), dtype=bool)

    offs = _canonical_offsets(search, k)
    s = offs.shape[0]
    diffs = np.empty((s, h, w), dtype=np.float64)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    for i, (dr, dc) in enumerate(offs):
        rr = rows + int(dr)
        cc = cols + int(dc)
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rrc = np.clip(rr, 0, h - 1)
        ccc = np.clip(cc, 0, w - 1)
        d = np.abs(rng_img[rrc, ccc] - rng_img)
        d[~(inside & valid[rrc, ccc])] = np.inf
        diffs[i] = d

    order = np.argsort(diffs, axis=0, kind="stable")[:k]          # (k, H, W)
    chosen = offs[order]                                           # (k, H, W, 2)
    excluded = np.take_along_axis(diffs, order, axis=0) == np.inf
    chosen[excluded] = 0

    # ties can push the query offset out when k is below the inner window
    # area; it is contractually always present, so swap it into the last slot
    query_slot = int(np.nonzero((offs == 0).all(axis=1))[0][0])
    has_query = (order == query_slot).any(axis=0) | excluded.any(axis=0)
    chosen[-1][~has_query] = 0

    chosen[:, ~valid] = 0
    return ProximityGrid(offsets=chosen.transpose(0, 3, 1, 2).copy(),
                         k=k, search=(sh, sw))


def proximity_conv(x: Tensor, grid: ProximityGrid, w: Param, b: Param = None) -> Tensor:
    """Convolution over the proximity grid's per-pixel sampling locations.

    ``w`` is (out_ch, in_ch, k); weight slot i pairs with sorted neighbor
    i. The grid itself is non-differentiable; gradients flow into x, w
    and b.
    """
    cin, h, wd = x.shape
    if grid.shape != (h, wd):
        raise ShapeError("proximity grid extent does not match input",
                         grid=list(grid.shape), x=list(x.shape))
    if w.data.ndim != 3 or w.shape[1] != cin or w.shape[2] != grid.k:
        raise ShapeError("proximity weights must be (out_ch, in_ch, k)",
                         w=list(w.shape), in_channels=cin, k=grid.k)
    rows = np.arange(h)[:, None] + grid.offsets[:, 0]
    cols = np.arange(wd)[None, :] + grid.offsets[:, 1]
    gathered = x.data[:, rows, cols].transpose(1, 0, 2, 3)   # (k, C, H, W)
    out = np.einsum("kchw,ock->ohw", gathered, w.data)
    if b is not None:
        out = out + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gw = np.einsum("kchw,ohw->ock", gathered, g)
        gx = np.zeros_like(x.data)
        for i in range(grid.k):
            gi = np.einsum("ohw,oc->chw", g, w.data[:, :, i])
            np.add.at(gx, (slice(None), rows[i], cols[i]), gi)
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(1, 2)))

    return _make(out.astype(x.data.dtype), parents, backward)


class GatedFeatureFusion(Block):
    """Blend pyramid features with range-encoded features, Eq.-style gate.

    Two 3x3 convs (norm + leaky ReLU each) over concat(P, R) give fused
    features G; a 1x1 conv + sigmoid over G gives the per-pixel,
    per-channel gate g; output is g*G + (1-g)*P.
    """

    def __init__(self, p_channels, r_channels, rng, dtype=np.float32):
        super().__init__(dtype)
        c = p_channels
        self.w1 = self.param("conv1.w", conv_weight(rng, c, p_channels + r_channels, 3, 3))
        self.g1 = self.param("norm1.gamma", np.ones(c))
        self.b1 = self.param("norm1.beta", np.zeros(c))
        self.w2 = self.param("conv2.w", conv_weight(rng, c, c, 3, 3))
        self.g2 = self.param("norm2.gamma", np.ones(c))
        self.b2 = self.param("norm2.beta", np.zeros(c))
        self.wg = self.param("gate.w", conv_weight(rng, c, c, 1, 1))
        self.bg = self.param("gate.b", np.zeros(c))

    def forward_parts(self, p: Tensor, r: Tensor):
        """Return (output, fused features, gate) for inspection."""
        if p.shape[1:] != r.shape[1:]:
            raise ShapeError("fusion inputs must share spatial extent",
                             p=list(p.shape), r=list(r.shape))
        x = concat_channels([p, r])
        x = leaky_relu(channel_norm(conv2d(x, self.w1), self.g1, self.b1), LEAKY_SLOPE)
        fused = leaky_relu(channel_norm(conv2d(x, self.w2), self.g2, self.b2), LEAKY_SLOPE)
        gate = sigmoid(conv2d(fused, self.wg, self.bg))
        keep = affine(gate, -1.0, 1.0)
        out = add(hadamard(gate, fused), hadamard(keep, p))
        return out, fused, gate

    def __call__(self, p, r):
        return self.forward_parts(p, r)[0]


class RangeGuidedSeparableConv(Block):
    """Depthwise separable conv whose dilation rate is predicted per pixel.

    A 3x3 conv over range-encoder features yields one logit per pixel;
    the dilation d = d_max * sigmoid(logit) scales the canonical 3x3
    offsets, neighbors are bilinearly sampled at the fractional positions,
    and a depthwise+pointwise pair consumes them. Gradients reach the
    input, all kernels, and the guidance path through the sampling
    coordinates.
    """

    OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]

    def __init__(self, in_channels, out_channels, guide_channels, d_max, rng,
                 dtype=np.float32):
        super().__init__(dtype)
        self.d_max = float(d_max)
        self.guide_w = self.param("guide.w", conv_weight(rng, 1, guide_channels, 3, 3))
        self.guide_b = self.param("guide.b", np.zeros(1))
        self.dw = self.param("depthwise.w", depthwise_weight(rng, in_channels, 3, 3))
        self.pw = self.param("pointwise.w", conv_weight(rng, out_channels, in_channels, 1, 1))

    def dilation_rate(self, guide_feat: Tensor) -> Tensor:
        z = conv2d(guide_feat, self.guide_w, self.guide_b)
        return affine(sigmoid(z), self.d_max, 0.0)

    def __call__(self, x: Tensor, guide_feat: Tensor) -> Tensor:
        if x.shape[1:] != guide_feat.shape[1:]:
            raise ShapeError("input and guidance features must share spatial extent",
                             x=list(x.shape), guide=list(guide_feat.shape))
        _, h, w = x.shape
        d = self.dilation_rate(guide_feat)
        base_r = np.broadcast_to(np.arange(h, dtype=x.data.dtype)[:, None], (h, w))[None]
        base_c = np.broadcast_to(np.arange(w, dtype=x.data.dtype)[None, :], (h, w))[None]
        samples = []
        for dr, dc in self.OFFSETS:
            rows = affine(d, float(dr), base_r)
            cols = affine(d, float(dc), base_c)
            samples.append(bilinear_sample(x, concat_channels([rows, cols])))
        return conv2d(gathered_depthwise(samples, self.dw), self.pw)
