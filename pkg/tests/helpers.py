import numpy as np

from odphar.nn import Backbone, BatchNorm, Conv1D, Dense, ResidualBlock


def rand_conv(rng, f, c, k, stride=1, padding=None, dtype=np.float64, scale=0.5):
    if padding is None:
        padding = (k - 1) // 2
    return Conv1D(
        (rng.standard_normal((f, c, k)) * scale).astype(dtype),
        (rng.standard_normal(f) * 0.1).astype(dtype),
        stride,
        padding,
    )


def rand_bn(rng, c, dtype=np.float64):
    return BatchNorm(
        (1 + 0.2 * rng.standard_normal(c)).astype(dtype),
        (0.1 * rng.standard_normal(c)).astype(dtype),
        (0.1 * rng.standard_normal(c)).astype(dtype),
        rng.uniform(0.5, 1.5, c).astype(dtype),
        1e-5,
    )


def rand_block(rng, c_in, c_out, k=3, dtype=np.float64):
    sc = rand_conv(rng, c_out, c_in, 1, dtype=dtype) if c_in != c_out else None
    return ResidualBlock(
        rand_conv(rng, c_out, c_in, k, dtype=dtype),
        rand_bn(rng, c_out, dtype),
        rand_conv(rng, c_out, c_out, k, dtype=dtype),
        rand_bn(rng, c_out, dtype),
        sc,
    )


def rand_backbone(rng, c_in, steps, stem=4, blocks=(4, 6, 6), k=3, dtype=np.float32, dropout=0.0):
    chans = [stem, *blocks]
    return Backbone(
        rand_conv(rng, stem, c_in, 5, dtype=dtype),
        rand_bn(rng, stem, dtype),
        [rand_block(rng, chans[i], chans[i + 1], k, dtype) for i in range(len(blocks))],
        input_steps=steps,
        dropout=dropout,
    )


def rand_dense(rng, n_in, n_out, dtype=np.float32, scale=0.1):
    return Dense((rng.standard_normal((n_out, n_in)) * scale).astype(dtype), np.zeros(n_out, dtype))
