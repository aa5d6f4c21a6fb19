"""Network assembly: a symmetric encoder-decoder with residual block sums.

The encoder is a three-conv stem followed by down blocks; every stage ends
in 2x2 max pooling. The decoder mirrors it with nearest-neighbour upsampling,
a channel concat with the matching encoder skip, two convs, and (when
enabled) an elementwise sum with the upsampled features. A 1x1 conv head
produces two-class logits, softmaxed per pixel.

Channel counts stay deliberately lean: blocks widen to `wide` channels
internally but hand only `narrow` channels to the next stage, so depth is
cheap. All 3x3 convs use zero padding 1 and spatial extents never shrink;
only pooling changes resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    maxpool2x2,
    relu,
    softmax_channels,
    upsample_nearest2x,
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs. depth = number of pooling (and upsampling) stages."""

    depth: int = 7
    wide: int = 64
    narrow: int = 32
    in_channels: int = 3
    classes: int = 2
    plus: bool = True

    def validate(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.wide < 1 or self.narrow < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.classes != 2:
            raise ValueError(f"only 2-class output is supported, got {self.classes}")


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None


def conv_specs(config: ModelConfig):
    """Every convolution in forward order: (name, out_c, in_c, k)."""
    w, n = config.wide, config.narrow
    yield "stem.conv1", w, config.in_channels, 3
    yield "stem.conv2", w, w, 3
    yield "stem.conv3", n, w, 3
    for i in range(1, config.depth):
        yield f"down{i}.conv1", w, n, 3
        yield f"down{i}.conv2", n, w, 3
    for i in range(1, config.depth + 1):
        yield f"up{i}.conv1", w, 2 * n, 3
        yield f"up{i}.conv2", n, w, 3
    yield "head", config.classes, n, 1


def parameter_count(config: ModelConfig) -> int:
    total = 0
    for _, out_c, in_c, k in conv_specs(config):
        total += out_c * in_c * k * k + out_c
    return total


def build(config: ModelConfig, seed: int) -> Model:
    """He-initialised model: w ~ N(0, sqrt(2 / fan_in)), zero biases.

    Parameter order (and therefore the RNG draw order) is fixed by
    conv_specs, so a given (config, seed) always yields identical weights.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, out_c, in_c, k in conv_specs(config):
        fan_in = in_c * k * k
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(out_c, in_c, k, k)).astype(np.float32)
        params[name + ".w"] = Tensor(w, requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(out_c, dtype=np.float32), requires_grad=True)
    return Model(config, params)


def down_block_forward(x, w1, b1, w2, b2, plus=True):
    """conv-relu-conv applied to an already-pooled input, plus the input
    itself when the residual sum is enabled.

    Returns (pooled, skip): the 2x2-pooled features for the next stage and
    the pre-pool features kept for the decoder concat.
    """
    y = conv2d(x, w1, b1, padding=1)
    y = relu(y)
    y = conv2d(y, w2, b2, padding=1)
    if plus:
        y = add(y, x)
    pooled, _ = maxpool2x2(y)
    return pooled, y


def up_block_forward(x, skip, w1, b1, w2, b2, plus=True):
    """Upsample, concat the encoder skip, conv-relu-conv, optional sum with
    the upsampled features."""
    u = upsample_nearest2x(x)
    cat = concat_channels([u, skip])
    y = conv2d(cat, w1, b1, padding=1)
    y = relu(y)
    y = conv2d(y, w2, b2, padding=1)
    if plus:
        y = add(y, u)
    return y


def forward_logits(model: Model, image: Tensor) -> Tensor:
    """Run the network body, returning per-pixel class logits."""
    cfg = model.config
    if image.data.ndim != 4:
        raise ValueError(f"forward expects a (n, c, h, w) image, got shape {image.shape}")
    n, c, h, w = image.shape
    if c != cfg.in_channels:
        raise ValueError(f"forward expects {cfg.in_channels} input channels, got shape {image.shape}")
    unit = 2 ** cfg.depth
    if h % unit or w % unit:
        raise ValueError(
            f"input extent {h}x{w} must be divisible by {unit} (depth {cfg.depth})"
        )
    p = model.params

    def cv(x, name, padding=1):
        return conv2d(x, p[name + ".w"], p[name + ".b"], padding=padding)

    x = relu(cv(image, "stem.conv1"))
    x = relu(cv(x, "stem.conv2"))
    x = cv(x, "stem.conv3")
    skips = [x]
    x, _ = maxpool2x2(x)
    for i in range(1, cfg.depth):
        x, skip = down_block_forward(
            x,
            p[f"down{i}.conv1.w"], p[f"down{i}.conv1.b"],
            p[f"down{i}.conv2.w"], p[f"down{i}.conv2.b"],
            plus=cfg.plus,
        )
        skips.append(skip)
    for i in range(1, cfg.depth + 1):
        x = up_block_forward(
            x, skips.pop(),
            p[f"up{i}.conv1.w"], p[f"up{i}.conv1.b"],
            p[f"up{i}.conv2.w"], p[f"up{i}.conv2.b"],
            plus=cfg.plus,
        )
    return cv(x, "head", padding=0)


def forward(model: Model, image: Tensor) -> Tensor:
    """Per-pixel class probabilities, shape (n, 2, h, w)."""
    return softmax_channels(forward_logits(model, image))


def op_sequence(config: ModelConfig):
    """The resolution-affecting op spine from input to head, as tags.

    This is the single deepest chain; the skip branches that rejoin it in
    the decoder are not representable in a flat list (see receptive_field).
    """
    ops = ["conv3", "conv3", "conv3", "pool"]
    for _ in range(config.depth - 1):
        ops += ["conv3", "conv3", "pool"]
    for _ in range(config.depth):
        ops += ["up", "conv3", "conv3"]
    ops.append("conv1")
    return ops


def receptive_field_ops(ops) -> int:
    """Receptive-field extent of a linear chain of ops on a unit grid.

    The textbook recurrence: track (r, j) where r is the field size in
    input pixels and j the jump (input stride) of the current feature grid.
    A k-conv grows r by (k - 1) * j; 2x2 pooling grows r by j then doubles
    j; 2x upsampling halves j. Exact for chains only - a branching net can
    exceed it, because parallel paths contribute differently-shifted
    intervals whose union is wider than any single path.
    """
    r, j = 1, 1
    for op in ops:
        if op == "conv3":
            r += 2 * j
        elif op == "conv1":
            pass
        elif op == "pool":
            r += j
            j *= 2
        elif op == "up":
            j //= 2
        else:
            raise ValueError(f"unknown op tag {op!r}")
    return r


# Interval propagation for the exact receptive field: for every feature
# pixel p along one axis, track the closed interval [lo(p), hi(p)] of input
# pixels that can reach it. Each op maps these arrays exactly; branch
# merges (concat, residual add) take the union. Extents are per-axis and
# the net is separable, so one axis suffices.


def _rf_conv(iv, k):
    lo, hi = iv
    n = lo.size
    r = (k - 1) // 2
    idx = np.arange(n)
    return lo[np.maximum(idx - r, 0)], hi[np.minimum(idx + r, n - 1)]


def _rf_pool(iv):
    lo, hi = iv
    return lo[0::2], hi[1::2]


def _rf_up(iv):
    lo, hi = iv
    return lo.repeat(2), hi.repeat(2)


def _rf_union(a, b):
    return np.minimum(a[0], b[0]), np.maximum(a[1], b[1])


def receptive_field(config: ModelConfig) -> int:
    """Exact receptive field of one output pixel, in input pixels.

    Computed by interval propagation over the full branch topology. The
    skip paths matter: from depth 3 on, their differently-aligned
    contributions make the true field wider than the deepest-chain
    recurrence predicts.
    """
    chain = receptive_field_ops(op_sequence(config))
    period = 2 ** config.depth
    n = period * ((4 * chain + 4 * period) // period)
    idx = np.arange(n, dtype=np.int64)
    cur = (idx.copy(), idx.copy())

    cur = _rf_conv(_rf_conv(_rf_conv(cur, 3), 3), 3)
    skips = [cur]
    cur = _rf_pool(cur)
    for _ in range(config.depth - 1):
        y = _rf_conv(_rf_conv(cur, 3), 3)
        y = _rf_union(y, cur)
        skips.append(y)
        cur = _rf_pool(y)
    for _ in range(config.depth):
        u = _rf_up(cur)
        cat = _rf_union(u, skips.pop())
        y = _rf_conv(_rf_conv(cat, 3), 3)
        y = _rf_union(y, u)
        cur = y

    lo, hi = cur
    interior = (lo > 0) & (hi < n - 1)
    return int((hi[interior] - lo[interior] + 1).max())
