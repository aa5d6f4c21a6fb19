"""Shared oracles for the model-level tests.

The receptive field oracle works by single-pixel input perturbation: with
all-ones conv weights and zero biases, an impulse on a zero image lights up
exactly the output pixels it can reach structurally (relu and max pooling
pass every positive value), so the nonzero-output extent is the impulse's
influence interval. The receptive field of an output pixel y is the
transpose of that relation - the set of input pixels whose influence
interval covers y - so the field extent is recovered arithmetically from
the per-phase influence intervals (influence is periodic in the pooling
grid), maximised over the output phase. Influence extent itself is NOT the
field size: pooling rounds the two directions differently, so naively
reporting the lit extent overshoots at depth >= 2.

Measured on logits because the two head channels coincide under all-ones
weights and softmax would flatten them to a constant.
"""

import numpy as np

from sealand.model import Model, build, forward, forward_logits, receptive_field
from sealand.tensor import Tensor, cross_entropy_loss


def ones_weight_model(config):
    model = build(config, seed=0)
    for name, t in model.params.items():
        if name.endswith(".w"):
            t.data = np.ones(t.data.shape, dtype=np.float64)
        else:
            t.data = np.zeros(t.data.shape, dtype=np.float64)
    return model


def influence_interval(model, size, r, c):
    """Closed row interval of outputs changed by an impulse at (r, c)."""
    img = np.zeros((1, model.config.in_channels, size, size))
    img[0, :, r, c] = 1.0
    logits = forward_logits(model, Tensor(img))
    changed = logits.data[0, 0] != 0
    rows = np.flatnonzero(changed.any(axis=1))
    assert rows[0] > 0 and rows[-1] < size - 1, "influence clipped at canvas border"
    assert rows[-1] - rows[0] + 1 == rows.size, "influence region not contiguous"
    return int(rows[0]), int(rows[-1])


def measured_receptive_field(config):
    """Largest input extent that can affect a single output pixel.

    One impulse per input phase of the pooling grid gives the influence
    intervals; every other impulse's interval follows by periodicity. The
    field of output y then spans from the smallest to the largest input
    whose interval covers y.
    """
    model = ones_weight_model(config)
    period = 2 ** config.depth
    guess = receptive_field(config)
    size = period * int(np.ceil((2 * guess + 2 * period) / period))
    base = (size // 2 // period) * period

    rel = {}
    for dr in range(period):
        r0 = base + dr
        lo, hi = influence_interval(model, size, r0, base)
        rel[dr] = (lo - r0, hi - r0)
        assert hi - lo + 1 >= period, "interval too short for phase coverage"

    best = 0
    for y in range(base, base + period):
        xmaxs, xmins = [], []
        for dr in range(period):
            rlo, rhi = rel[dr]
            # inputs x = base + dr + k*period influence y iff
            # y - rhi <= x <= y - rlo; take the extreme k on each side
            top = y - rlo
            xmaxs.append(top - ((top - (base + dr)) % period))
            bot = y - rhi
            xmins.append(bot + ((base + dr - bot) % period))
        best = max(best, max(xmaxs) - min(xmins) + 1)
    return best


def model_loss_fn(config, seed, size=16):
    """A scalar loss over a fixed random tile, parameterised by the model
    weights, in the calling convention grad_check expects."""
    model = build(config, seed)
    names = list(model.params)
    rng = np.random.default_rng(seed + 1000)
    img = rng.standard_normal((1, config.in_channels, size, size)).astype(np.float32)
    tgt = rng.integers(0, 2, size=(1, size, size))

    def fn(*tensors):
        m = Model(config, dict(zip(names, tensors)))
        probs = forward(m, Tensor(img.astype(tensors[0].dtype)))
        return cross_entropy_loss(probs, tgt)

    return fn, model.parameters()
