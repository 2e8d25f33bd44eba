"""Named finite-difference checks for every differentiable operator.

Each check builds a fresh operator from the given generator, perturbs one
input tensor, and returns the max relative error between analytic and
central-difference gradients. Used by the gradcheck subcommand and the
acceptance suite. Checks run in float64: the quotient needs more
headroom than float32 carries, while the algebra under test is
dtype-independent.
"""

import numpy as np

from .conv import bilinear_sample, conv2d, depthwise_separable_conv
from .fusion import fuse_logits
from .gradcheck import grad_check
from .heads import (
    DilatedContextCell,
    FineFeatureBlock,
    SemanticHead,
    _reshape_view,
    lovasz_softmax_loss,
)
from .range_ops import (
    GatedFeatureFusion,
    RangeGuidedSeparableConv,
    build_proximity_grid,
    proximity_conv,
)
from .tensor import Param, Tensor, softmax_channelwise, take


def _t(rng, shape):
    return Tensor(rng.uniform(-2, 2, shape), dtype=np.float64)


def check_conv2d(rng):
    w = Param(rng.uniform(-1, 1, (2, 1, 3, 3)), dtype=np.float64)
    b = Param(rng.uniform(-1, 1, 2), dtype=np.float64)
    return grad_check(lambda x: conv2d(x, w, b), _t(rng, (1, 5, 5)), eps=1e-3)


def check_depthwise_separable(rng):
    dw = Param(rng.uniform(-1, 1, (2, 1, 3, 3)), dtype=np.float64)
    pw = Param(rng.uniform(-1, 1, (3, 2, 1, 1)), dtype=np.float64)
    return grad_check(lambda x: depthwise_separable_conv(x, dw, pw),
                      _t(rng, (2, 5, 5)), eps=1e-3)


def check_bilinear_sample(rng):
    img = _t(rng, (2, 6, 6))
    # fractional parts kept in [0.1, 0.9]: integer coordinates are kinks
    rows = np.floor(rng.uniform(0, 4, (3, 3))) + rng.uniform(0.1, 0.9, (3, 3))
    cols = np.floor(rng.uniform(0, 4, (3, 3))) + rng.uniform(0.1, 0.9, (3, 3))
    coords = Tensor(np.stack([rows, cols]), dtype=np.float64)
    return grad_check(lambda c: bilinear_sample(img, c), coords, eps=1e-3)


def check_proximity_conv(rng):
    grid = build_proximity_grid(rng.uniform(1, 40, (5, 7)), search=(5, 5), k=9)
    w = Param(rng.uniform(-1, 1, (2, 2, 9)), dtype=np.float64)
    b = Param(rng.uniform(-1, 1, 2), dtype=np.float64)
    return grad_check(lambda x: proximity_conv(x, grid, w, b),
                      _t(rng, (2, 5, 7)), eps=1e-3)


def check_feature_fusion(rng):
    fusion = GatedFeatureFusion(3, 2, rng, dtype=np.float64)
    r = _t(rng, (2, 5, 6))
    return grad_check(lambda p: fusion(p, r), _t(rng, (3, 5, 6)), eps=1e-4)


def check_range_guided_conv(rng):
    conv = RangeGuidedSeparableConv(2, 3, 2, 3.0, rng, dtype=np.float64)
    g = _t(rng, (2, 6, 7))
    return grad_check(lambda x: conv(x, g), _t(rng, (2, 6, 7)), eps=1e-4)


def check_dilated_context_cell(rng):
    cell = DilatedContextCell(3, 2, 8, rng, dtype=np.float64)
    g = _t(rng, (2, 6, 8))
    return grad_check(lambda x: cell(x, g), _t(rng, (3, 6, 8)),
                      eps=1e-4, sample=30, rng=rng)


def check_fine_feature_block(rng):
    blk = FineFeatureBlock(3, 2, 6, 4, rng, dtype=np.float64)
    g = _t(rng, (2, 6, 8))
    return grad_check(lambda x: blk(x, g), _t(rng, (3, 6, 8)),
                      eps=1e-4, sample=30, rng=rng)


def check_semantic_head(rng):
    head = SemanticHead(4, 2, 3, rng, dtype=np.float64)
    pyr = [_t(rng, (4, 32 // f, 32 // f)) for f in (4, 8, 16, 32)]
    ren = [_t(rng, (2, 32 // f, 32 // f)) for f in (4, 8, 16, 32)]
    return grad_check(lambda x: head((x, *pyr[1:]), ren), pyr[0],
                      eps=1e-4, sample=12, rng=rng)


def check_fuse_logits(rng):
    b = _t(rng, (2, 4, 4))
    return grad_check(lambda a: fuse_logits(a, b), _t(rng, (2, 4, 4)), eps=1e-3)


def check_lovasz(rng):
    target = rng.integers(0, 3, 24)

    def f(x):
        probs = softmax_channelwise(x)
        flat = take(probs, np.arange(3 * 24))
        return lovasz_softmax_loss(_reshape_view(flat, (3, 24)), target,
                                   sorted(set(target.tolist())))

    return grad_check(f, _t(rng, (3, 24)), eps=1e-4)


OPERATOR_CHECKS = [
    ("conv2d", check_conv2d),
    ("depthwise_separable", check_depthwise_separable),
    ("bilinear_sample", check_bilinear_sample),
    ("proximity_conv", check_proximity_conv),
    ("feature_fusion", check_feature_fusion),
    ("range_guided_conv", check_range_guided_conv),
    ("dilated_context_cell", check_dilated_context_cell),
    ("fine_feature_block", check_fine_feature_block),
    ("semantic_head", check_semantic_head),
    ("fuse_logits", check_fuse_logits),
    ("lovasz", check_lovasz),
]


def run_operator_checks(seeds, base_seed=0):
    """Max relative error per operator over the given number of seeds."""
    results = {}
    for op_index, (name, fn) in enumerate(OPERATOR_CHECKS):
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(base_seed + s * 1000 + op_index * 17)
            worst = max(worst, fn(rng))
        results[name] = worst
    return results
