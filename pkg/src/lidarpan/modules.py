"""Lightweight parameter containers and initializers for operator blocks.

Blocks register Params under dotted names so whole networks serialize to
one flat snapshot. Weights use Xavier-uniform initialization; biases and
normalization shifts start at zero, normalization scales at one.
"""

import numpy as np

from .tensor import Param


class Block:
    """Base for anything that owns Params and/or child blocks."""

    def __init__(self, dtype=np.float32):
        self._params = {}
        self._children = {}
        self.dtype = dtype

    def param(self, name, data):
        p = Param(np.asarray(data, dtype=self.dtype), dtype=self.dtype)
        self._params[name] = p
        return p

    def child(self, name, block):
        self._children[name] = block
        return block

    def params(self):
        out = {}
        for name, p in self._params.items():
            out[name] = p
        for cname, c in self._children.items():
            for name, p in c.params().items():
                out[f"{cname}.{name}"] = p
        return out

    def reset_grads(self):
        for p in self.params().values():
            p.reset_grad()

    def n_params(self):
        return sum(p.data.size for p in self.params().values())

    def sgd_step(self, lr):
        for p in self.params().values():
            p.step(lr)


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def conv_weight(rng, out_ch, in_ch, kh, kw):
    return xavier_uniform(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw, out_ch * kh * kw)


def depthwise_weight(rng, ch, kh, kw):
    return xavier_uniform(rng, (ch, 1, kh, kw), kh * kw, kh * kw)
