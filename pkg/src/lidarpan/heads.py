"""Desk-scale semantic pipeline: proximity stem, strided encoders, two-way
pyramid with gated range fusion, dilated context / fine-feature head
blocks, and the per-pixel + Lovász-Softmax loss.

Channel widths are toy-sized stand-ins for the full-scale design; every
branch topology and width ratio is preserved so the paper-scale widths
drop in unchanged.
"""

import numpy as np

from .conv import conv2d, depthwise_separable_conv
from .errors import ShapeError, ValidationError
from .modules import Block, conv_weight, depthwise_weight, xavier_uniform
from .range_ops import (
    LEAKY_SLOPE,
    GatedFeatureFusion,
    RangeGuidedSeparableConv,
    build_proximity_grid,
    proximity_conv,
)
from .tensor import (
    Tensor,
    add,
    affine,
    avg_pool2,
    channel_norm,
    concat_channels,
    dot_const,
    leaky_relu,
    log_softmax_channelwise,
    softmax_channelwise,
    take,
    tmean,
    upsample_bilinear,
)


class ConvBlock(Block):
    """conv + per-channel norm + leaky ReLU."""

    def __init__(self, in_ch, out_ch, rng, kernel=3, stride=1, dtype=np.float32):
        super().__init__(dtype)
        self.stride = stride
        self.w = self.param("w", conv_weight(rng, out_ch, in_ch, kernel, kernel))
        self.gamma = self.param("gamma", np.ones(out_ch))
        self.beta = self.param("beta", np.zeros(out_ch))

    def __call__(self, x):
        out = conv2d(x, self.w, None, stride=self.stride)
        return leaky_relu(channel_norm(out, self.gamma, self.beta), LEAKY_SLOPE)


class SepConvBlock(Block):
    """depthwise separable conv + norm + leaky ReLU, arbitrary dilation."""

    def __init__(self, in_ch, out_ch, rng, dilation=(1, 1), dtype=np.float32):
        super().__init__(dtype)
        self.dilation = tuple(dilation)
        self.dw = self.param("dw", depthwise_weight(rng, in_ch, 3, 3))
        self.pw = self.param("pw", conv_weight(rng, out_ch, in_ch, 1, 1))
        self.gamma = self.param("gamma", np.ones(out_ch))
        self.beta = self.param("beta", np.zeros(out_ch))

    def __call__(self, x):
        out = depthwise_separable_conv(x, self.dw, self.pw, self.dilation)
        return leaky_relu(channel_norm(out, self.gamma, self.beta), LEAKY_SLOPE)


class GuidedConvBlock(Block):
    """Range-guided separable conv + norm + leaky ReLU."""

    def __init__(self, in_ch, out_ch, guide_ch, d_max, rng, dtype=np.float32):
        super().__init__(dtype)
        self.conv = self.child("conv", RangeGuidedSeparableConv(
            in_ch, out_ch, guide_ch, d_max, rng, dtype))
        self.gamma = self.param("gamma", np.ones(out_ch))
        self.beta = self.param("beta", np.zeros(out_ch))

    def __call__(self, x, guide):
        return leaky_relu(channel_norm(self.conv(x, guide), self.gamma, self.beta),
                          LEAKY_SLOPE)


class ProximityStem(Block):
    """Input stem: proximity convolution + norm + leaky ReLU."""

    def __init__(self, in_ch, out_ch, k, rng, dtype=np.float32):
        super().__init__(dtype)
        self.k = k
        self.w = self.param("w", xavier_uniform(rng, (out_ch, in_ch, k),
                                                in_ch * k, out_ch * k))
        self.b = self.param("b", np.zeros(out_ch))
        self.gamma = self.param("gamma", np.ones(out_ch))
        self.beta = self.param("beta", np.zeros(out_ch))

    def __call__(self, x, grid):
        out = proximity_conv(x, grid, self.w, self.b)
        return leaky_relu(channel_norm(out, self.gamma, self.beta), LEAKY_SLOPE)


class StridedEncoder(Block):
    """Stride-2 stem plus four stride-2 stages emitting x4..x32 features."""

    def __init__(self, in_ch, stem_ch, stage_ch, rng, dtype=np.float32):
        super().__init__(dtype)
        self.stem = self.child("stem", ConvBlock(in_ch, stem_ch, rng, stride=2, dtype=dtype))
        prev = stem_ch
        self.stages = []
        for i, ch in enumerate(stage_ch):
            blk = self.child(f"stage{i + 1}", ConvBlock(prev, ch, rng, stride=2, dtype=dtype))
            self.stages.append(blk)
            prev = ch
        self.channels = tuple(stage_ch)

    def __call__(self, x):
        _, h, w = x.shape
        if h % 32 or w % 32:
            raise ShapeError("encoder input extents must be divisible by 32",
                             shape=list(x.shape))
        out = self.stem(x)
        feats = []
        for blk in self.stages:
            out = blk(out)
            feats.append(out)
        return tuple(feats)


class TwoWayPyramid(Block):
    """Bidirectional feature pyramid: independent top-down and bottom-up
    branches, summed per level and merged by a 3x3 conv."""

    def __init__(self, enc_channels, out_ch, rng, dtype=np.float32):
        super().__init__(dtype)
        self.out_ch = out_ch
        self.lat_td = [self.child(f"td.lat{i}", ConvBlock(c, out_ch, rng, kernel=1, dtype=dtype))
                       for i, c in enumerate(enc_channels)]
        self.lat_bu = [self.child(f"bu.lat{i}", ConvBlock(c, out_ch, rng, kernel=1, dtype=dtype))
                       for i, c in enumerate(enc_channels)]
        self.merge = [self.child(f"merge{i}", ConvBlock(out_ch, out_ch, rng, dtype=dtype))
                      for i in range(len(enc_channels))]

    def __call__(self, feats):
        if len(feats) != len(self.merge):
            raise ShapeError("pyramid expects one feature map per level",
                             expected=len(self.merge), got=len(feats))
        td = [None] * len(feats)
        for i in reversed(range(len(feats))):
            lateral = self.lat_td[i](feats[i])
            td[i] = lateral if i == len(feats) - 1 else add(
                lateral, upsample_bilinear(td[i + 1], 2))
        bu = [None] * len(feats)
        for i in range(len(feats)):
            lateral = self.lat_bu[i](feats[i])
            bu[i] = lateral if i == 0 else add(lateral, avg_pool2(bu[i - 1]))
        return tuple(self.merge[i](add(td[i], bu[i])) for i in range(len(feats)))


class RangeAwarePyramid(Block):
    """Per-level gated fusion of pyramid features with range features."""

    def __init__(self, p_ch, r_ch, levels, rng, dtype=np.float32):
        super().__init__(dtype)
        self.fusions = [self.child(f"fuse{i}", GatedFeatureFusion(p_ch, r_ch, rng, dtype))
                        for i in range(levels)]

    def __call__(self, p_levels, r_levels):
        if len(p_levels) != len(self.fusions) or len(r_levels) != len(self.fusions):
            raise ShapeError("level count mismatch in range-aware pyramid",
                             expected=len(self.fusions),
                             p=len(p_levels), r=len(r_levels))
        return tuple(f(p, r) for f, p, r in zip(self.fusions, p_levels, r_levels))


class DilatedContextCell(Block):
    """Six-branch dilated context cell with two range-guided branches.

    Branch A (separable, dilation (1,6)) fans into fixed dilations (1,1),
    (6,21), (18,15) plus an identity; the (18,15) output adds a (6,3)
    sub-branch; a range-guided branch on A concatenates with the parallel
    range-guided branch B. All six ends concatenate and a 1x1 conv
    projects back to the cell width.
    """

    def __init__(self, in_ch, guide_ch, width, rng, d_max=24.0, dtype=np.float32):
        super().__init__(dtype)
        half = width // 2
        self.width = width
        self.concat_channels = 6 * width
        self.branch_a = self.child("a", SepConvBlock(in_ch, width, rng, (1, 6), dtype))
        self.branch_b = self.child("b", GuidedConvBlock(in_ch, half, guide_ch, d_max, rng, dtype))
        self.a_11 = self.child("a11", SepConvBlock(width, width, rng, (1, 1), dtype))
        self.a_621 = self.child("a621", SepConvBlock(width, width, rng, (6, 21), dtype))
        self.a_1815 = self.child("a1815", SepConvBlock(width, width, rng, (18, 15), dtype))
        self.a_63 = self.child("a63", SepConvBlock(width, width, rng, (6, 3), dtype))
        self.guided_a = self.child("ga", GuidedConvBlock(width, half, guide_ch, d_max, rng, dtype))
        self.project_w = self.param("project.w", conv_weight(rng, width, 6 * width, 1, 1))
        self.project_gamma = self.param("project.gamma", np.ones(width))
        self.project_beta = self.param("project.beta", np.zeros(width))

    def __call__(self, x, guide):
        if x.shape[1:] != guide.shape[1:]:
            raise ShapeError("cell inputs must share spatial extent",
                             x=list(x.shape), guide=list(guide.shape))
        a = self.branch_a(x)
        b = self.branch_b(x, guide)
        d1815 = self.a_1815(a)
        ends = [
            self.a_11(a),
            self.a_621(a),
            d1815,
            self.a_63(d1815),
            a,
            concat_channels([self.guided_a(a, guide), b]),
        ]
        cat = concat_channels(ends)
        out = conv2d(cat, self.project_w)
        return leaky_relu(channel_norm(out, self.project_gamma, self.project_beta),
                          LEAKY_SLOPE)


class FineFeatureBlock(Block):
    """Range-guided conv (low max dilation) plus two separable convs."""

    def __init__(self, in_ch, guide_ch, mid, out, rng, d_max=3.0, dtype=np.float32):
        super().__init__(dtype)
        self.guided = self.child("guided", GuidedConvBlock(in_ch, mid, guide_ch, d_max, rng, dtype))
        self.sep1 = self.child("sep1", SepConvBlock(mid, out, rng, (1, 1), dtype))
        self.sep2 = self.child("sep2", SepConvBlock(out, out, rng, (1, 1), dtype))

    def __call__(self, x, guide):
        if x.shape[1:] != guide.shape[1:]:
            raise ShapeError("block inputs must share spatial extent",
                             x=list(x.shape), guide=list(guide.shape))
        return self.sep2(self.sep1(self.guided(x, guide)))


class SemanticHead(Block):
    """Context cells at x32/x16, fine blocks at x8/x4, a top-down mismatch
    correction chain with additive bottom-up augmentation, and a final
    classifier upsampled to input resolution."""

    def __init__(self, in_ch, guide_ch, n_classes, rng,
                 cell_width=16, fine_width=8, dtype=np.float32):
        super().__init__(dtype)
        cw, fw = cell_width, fine_width
        self.cell32 = self.child("cell32", DilatedContextCell(in_ch, guide_ch, cw, rng, dtype=dtype))
        self.cell16 = self.child("cell16", DilatedContextCell(in_ch, guide_ch, cw, rng, dtype=dtype))
        self.fine8 = self.child("fine8", FineFeatureBlock(in_ch, guide_ch, cw, fw, rng, dtype=dtype))
        self.fine4 = self.child("fine4", FineFeatureBlock(in_ch, guide_ch, cw, fw, rng, dtype=dtype))
        self.mc32 = self.child("mc32", SepConvBlock(cw, cw, rng, dtype=dtype))
        self.mc32b = self.child("mc32b", SepConvBlock(cw, cw, rng, dtype=dtype))
        self.mc16 = self.child("mc16", SepConvBlock(cw, fw, rng, dtype=dtype))
        self.mc16b = self.child("mc16b", SepConvBlock(fw, fw, rng, dtype=dtype))
        self.mc8 = self.child("mc8", SepConvBlock(fw, fw, rng, dtype=dtype))
        self.mc8b = self.child("mc8b", SepConvBlock(fw, fw, rng, dtype=dtype))
        self.aug8 = self.child("aug8", ConvBlock(fw, fw, rng, kernel=1, dtype=dtype))
        self.aug16 = self.child("aug16", ConvBlock(fw, cw, rng, kernel=1, dtype=dtype))
        self.aug32 = self.child("aug32", ConvBlock(cw, cw, rng, kernel=1, dtype=dtype))
        self.head4 = self.child("head4", ConvBlock(fw, fw, rng, kernel=1, dtype=dtype))
        self.head8 = self.child("head8", ConvBlock(fw, fw, rng, kernel=1, dtype=dtype))
        self.head16 = self.child("head16", ConvBlock(cw, fw, rng, kernel=1, dtype=dtype))
        self.head32 = self.child("head32", ConvBlock(cw, fw, rng, kernel=1, dtype=dtype))
        self.classifier = self.param("classifier.w", conv_weight(rng, n_classes, fw, 1, 1))
        self.classifier_b = self.param("classifier.b", np.zeros(n_classes))

    def __call__(self, pyramid, ren):
        rp4, rp8, rp16, rp32 = pyramid
        r4, r8, r16, r32 = ren
        f32 = self.cell32(rp32, r32)
        f16 = self.cell16(rp16, r16)
        f8 = self.fine8(rp8, r8)
        f4 = self.fine4(rp4, r4)

        t32 = f32
        t16 = add(f16, self.mc32b(self.mc32(upsample_bilinear(t32, 2))))
        t8 = add(f8, self.mc16b(self.mc16(upsample_bilinear(t16, 2))))
        t4 = add(f4, self.mc8b(self.mc8(upsample_bilinear(t8, 2))))

        b4 = t4
        b8 = add(t8, self.aug8(avg_pool2(b4)))
        b16 = add(t16, self.aug16(avg_pool2(b8)))
        b32 = add(t32, self.aug32(avg_pool2(b16)))

        s = add(self.head4(b4), upsample_bilinear(self.head8(b8), 2))
        s = add(s, upsample_bilinear(self.head16(b16), 4))
        s = add(s, upsample_bilinear(self.head32(b32), 8))
        logits4 = conv2d(s, self.classifier, self.classifier_b)
        return upsample_bilinear(logits4, 4)


class SemanticPipeline(Block):
    """Full toy pipeline from a 5-channel projection to semantic logits."""

    def __init__(self, n_classes, seed=0, in_channels=5,
                 stem_channels=16, encoder_channels=(16, 24, 32, 48),
                 pyramid_channels=32, ren_channels=8,
                 search=(5, 5), k=9, dtype=np.float32):
        super().__init__(dtype)
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.search = search
        self.k = k
        self.pcm = self.child("pcm", ProximityStem(in_channels, stem_channels, k, rng, dtype))
        self.encoder = self.child("encoder", StridedEncoder(
            stem_channels, stem_channels, encoder_channels, rng, dtype))
        self.ren = self.child("ren", StridedEncoder(
            1, ren_channels, (ren_channels,) * 4, rng, dtype))
        self.fpn = self.child("fpn", TwoWayPyramid(encoder_channels, pyramid_channels, rng, dtype))
        self.fusion = self.child("fusion", RangeAwarePyramid(
            pyramid_channels, ren_channels, 4, rng, dtype))
        self.head = self.child("head", SemanticHead(
            pyramid_channels, ren_channels, n_classes, rng, dtype=dtype))

    def build_grid(self, channels, valid=None):
        return build_proximity_grid(channels[0], valid=valid, search=self.search, k=self.k)

    def __call__(self, channels, grid=None, valid=None):
        channels = np.asarray(channels, dtype=self.dtype)
        if channels.ndim != 3 or channels.shape[0] != 5:
            raise ShapeError("pipeline input must be (5, H, W)", shape=list(channels.shape))
        if grid is None:
            grid = self.build_grid(channels, valid)
        x = Tensor(channels, dtype=self.dtype)
        rng_channel = Tensor(channels[:1], dtype=self.dtype)
        stem = self.pcm(x, grid)
        enc = self.encoder(stem)
        ren = self.ren(rng_channel)
        pyramid = self.fusion(self.fpn(enc), ren)
        return self.head(pyramid, ren)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def lovasz_grad_from_sorted(gt_sorted):
    """Jaccard-extension gradient for errors sorted in descending order."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_softmax_loss(probs, target_flat, present_classes):
    """Lovász-Softmax over flattened pixels, mean over present classes.

    ``probs`` is a (C, N) tensor of softmax probabilities; the sorting
    permutation is treated as constant, which yields the standard
    piecewise-linear surrogate gradient.
    """
    c, n = probs.shape
    terms = []
    for cls in present_classes:
        fg = (target_flat == cls).astype(np.float64)
        p_c = take(probs, np.arange(n) + cls * n)
        errors = affine(p_c, 1.0 - 2.0 * fg, fg)     # |fg - p| without abs
        perm = np.argsort(-errors.data, kind="stable")
        sorted_errors = take(errors, perm)
        weights = lovasz_grad_from_sorted(fg[perm])
        terms.append(dot_const(sorted_errors, weights))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return affine(total, 1.0 / len(terms), 0.0)


def semantic_loss(logits, target, ignore_id):
    """Equal-weight sum of per-pixel log-loss and Lovász-Softmax.

    ``logits`` is (C, H, W); ``target`` an (H, W) integer map. Pixels
    labeled ``ignore_id`` drop out of both terms.
    """
    c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (h, w):
        raise ShapeError("target extent does not match logits",
                         logits=list(logits.shape), target=list(target.shape))
    keep = (target != ignore_id).reshape(-1)
    if not keep.any():
        raise ValidationError("all pixels carry the ignore id")
    flat_target = target.reshape(-1)[keep]
    pix = np.nonzero(keep)[0]

    logp = log_softmax_channelwise(logits)
    picked = take(logp, flat_target * (h * w) + pix)
    pixel_term = affine(tmean(picked), -1.0, 0.0)

    probs = softmax_channelwise(logits)
    kept_idx = (np.arange(c)[:, None] * (h * w) + pix[None, :]).reshape(-1)
    probs_kept = take(probs, kept_idx)
    probs_kept = _reshape_view(probs_kept, (c, pix.size))
    present = sorted(int(v) for v in np.unique(flat_target))
    lovasz_term = lovasz_softmax_loss(probs_kept, flat_target, present)
    return add(pixel_term, lovasz_term)


def _reshape_view(t, shape):
    from .tensor import _make
    data = t.data.reshape(shape)
    return _make(data, (t,), lambda g: (g.reshape(t.data.shape),))


def pixel_accuracy(logits_data, target, ignore_id):
    pred = np.argmax(logits_data, axis=0)
    keep = target != ignore_id
    if not keep.any():
        return 0.0
    return float((pred[keep] == target[keep]).mean())


# ---------------------------------------------------------------------------
# Toy trainer
# ---------------------------------------------------------------------------

def train_toy(pipeline, scenes, steps, lr=0.01, ignore_id=255, on_step=None):
    """Plain SGD over a fixed scene list in deterministic round-robin order.

    ``scenes`` is a list of (channels, labels) pairs. Returns the loss
    history; ``on_step(step, loss)`` fires after each update.
    """
    grids = [pipeline.build_grid(ch) for ch, _ in scenes]
    history = []
    for step in range(steps):
        ch, labels = scenes[step % len(scenes)]
        logits = pipeline(ch, grid=grids[step % len(scenes)])
        loss = semantic_loss(logits, labels, ignore_id)
        pipeline.reset_grads()
        loss.backward()
        pipeline.sgd_step(lr)
        value = float(loss.data)
        history.append(value)
        if on_step is not None:
            on_step(step, value)
    return history
