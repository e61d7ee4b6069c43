"""Layer primitives for the 1D-CNN backbone and the dense classifier head.

Tensors are plain numpy arrays. A single sample is ``(channels, steps)``;
every op also accepts a batch ``(n, channels, steps)`` and returns the
same rank it was given. Ops compute in the dtype of their input, which is
float32 for models built by this package.

Two convolution kernels exist:

* :func:`conv1d_forward` accumulates over ``(channel, tap)`` in a fixed
  sequential order, so results are reproducible bit-for-bit against a
  scalar loop. All inference goes through it.
* :func:`conv1d_forward_gemm` lowers to a matrix product and is used by the
  offline trainer together with :func:`conv1d_backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParameterError, ShapeError

PROB_FLOOR = 1e-12
BN_RUNNING_DECAY = 0.9


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class Conv1D:
    weight: np.ndarray  # (filters, in_channels, kernel)
    bias: np.ndarray  # (filters,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 3:
            raise ShapeError(f"conv weight must be 3-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match {self.weight.shape[0]} filters"
            )
        if self.stride < 1 or self.padding < 0:
            raise ParameterError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def filters(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def out_steps(self, steps: int) -> int:
        return (steps + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != n:
                raise ShapeError(f"batchnorm {name} shape {getattr(self, name).shape} != {n}")
        if np.any(self.running_var < 0):
            raise ParameterError("running_var must be non-negative")
        if self.eps < 0:
            raise ParameterError("eps must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class Dense:
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray  # (out_features,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"dense weight {self.weight.shape} / bias {self.bias.shape} inconsistent"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "Dense":
        return Dense(self.weight.copy(), self.bias.copy())


@dataclass
class ResidualBlock:
    conv1: Conv1D
    bn1: BatchNorm
    conv2: Conv1D
    bn2: BatchNorm
    shortcut: Optional[Conv1D] = None

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv2.filters

    def out_steps(self, steps: int) -> int:
        main = self.conv2.out_steps(self.conv1.out_steps(steps))
        side = steps if self.shortcut is None else self.shortcut.out_steps(steps)
        if main != side:
            raise ShapeError(f"residual paths disagree on length: main {main}, shortcut {side}")
        return main

    def check(self, steps: int) -> None:
        if self.bn1.channels != self.conv1.filters or self.bn2.channels != self.conv2.filters:
            raise ShapeError("batchnorm width does not match its convolution")
        if self.conv2.in_channels != self.conv1.filters:
            raise ShapeError("conv2 input channels must equal conv1 filters")
        if self.shortcut is None:
            if self.in_channels != self.out_channels:
                raise ShapeError(
                    f"identity shortcut needs equal channels, got {self.in_channels}->{self.out_channels}"
                )
        elif (self.shortcut.in_channels, self.shortcut.filters) != (self.in_channels, self.out_channels):
            raise ShapeError("projection shortcut channels do not match the main path")
        self.out_steps(steps)


@dataclass
class Backbone:
    """Stem (conv, BN, ReLU, dropout) followed by residual blocks and a flatten."""

    stem: Conv1D
    stem_bn: BatchNorm
    blocks: list
    input_steps: int
    dropout: float = 0.0

    def __post_init__(self):
        if not self.blocks:
            raise ShapeError("backbone needs at least one residual block")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout rate {self.dropout} outside [0, 1)")
        if self.stem_bn.channels != self.stem.filters:
            raise ShapeError("stem batchnorm width does not match stem filters")
        steps = self.stem.out_steps(self.input_steps)
        if steps < 1:
            raise ShapeError(f"stem produces {steps} steps from input of {self.input_steps}")
        channels = self.stem.filters
        for i, blk in enumerate(self.blocks):
            if blk.in_channels != channels:
                raise ShapeError(f"block {i} expects {blk.in_channels} channels, gets {channels}")
            blk.check(steps)
            steps = blk.out_steps(steps)
            channels = blk.out_channels
            if steps < 1:
                raise ShapeError(f"block {i} output has no steps")
        self._out_shape = (channels, steps)

    @property
    def input_channels(self) -> int:
        return self.stem.in_channels

    @property
    def input_shape(self) -> tuple:
        return (self.input_channels, self.input_steps)

    @property
    def output_shape(self) -> tuple:
        return self._out_shape

    @property
    def flatten_dim(self) -> int:
        c, t = self._out_shape
        return c * t

    def layers(self):
        """Yield ``(name, layer)`` for every parameterised layer in topology order."""
        yield "stem", self.stem
        yield "stem_bn", self.stem_bn
        for i, blk in enumerate(self.blocks):
            yield f"blocks.{i}.conv1", blk.conv1
            yield f"blocks.{i}.bn1", blk.bn1
            yield f"blocks.{i}.conv2", blk.conv2
            yield f"blocks.{i}.bn2", blk.bn2
            if blk.shortcut is not None:
                yield f"blocks.{i}.shortcut", blk.shortcut

    def arrays(self):
        """Yield ``(name, array)`` for every stored array, running stats included."""
        for name, layer in self.layers():
            if isinstance(layer, Conv1D):
                yield f"{name}.weight", layer.weight
                yield f"{name}.bias", layer.bias
            else:
                yield f"{name}.gamma", layer.gamma
                yield f"{name}.beta", layer.beta
                yield f"{name}.running_mean", layer.running_mean
                yield f"{name}.running_var", layer.running_var

    @property
    def param_count(self) -> int:
        return sum(a.size for _, a in self.arrays())

    def to_bytes(self) -> bytes:
        """Concatenated little-endian float32 payload of all arrays, in topology order."""
        return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in self.arrays())

    def freeze(self) -> "Backbone":
        """Mark every array read-only so accidental writes raise."""
        for _, a in self.arrays():
            a.flags.writeable = False
        return self


# ---------------------------------------------------------------------------
# helpers


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (C, T) or (N, C, T) tensor, got shape {x.shape}")


def _restore(out, squeezed):
    return out[0] if squeezed else out


def _check_conv_input(xb, p):
    if xb.shape[1] != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {xb.shape[1]}")
    t_out = p.out_steps(xb.shape[2])
    if t_out < 1:
        raise ShapeError(
            f"conv output length {t_out} < 1 (T={xb.shape[2]}, K={p.kernel}, pad={p.padding})"
        )
    return t_out


# ---------------------------------------------------------------------------
# convolution


def conv1d_forward(x, p: Conv1D):
    """Cross-correlation with zero padding.

    ``out[f, t] = bias[f] + sum_{c, k} x[c, t*stride + k - padding] * w[f, c, k]``,
    accumulated channel-major then tap, starting from the bias.
    """
    xb, squeezed = _as_batch(x)
    t_out = _check_conv_input(xb, p)
    n = xb.shape[0]
    dtype = np.result_type(xb.dtype, p.weight.dtype)
    # (C, K, n*T') so each accumulation step is one contiguous broadcast
    cols = _windows(xb.astype(dtype, copy=False), p, t_out).transpose(1, 3, 0, 2)
    cols = np.ascontiguousarray(cols).reshape(p.in_channels, p.kernel, n * t_out)
    w = p.weight.astype(dtype, copy=False)
    out = np.empty((p.filters, n * t_out), dtype=dtype)
    out[...] = p.bias.astype(dtype)[:, None]
    tmp = np.empty_like(out)
    for c in range(p.in_channels):
        for k in range(p.kernel):
            np.multiply(w[:, c, k, None], cols[c, k][None, :], out=tmp)
            out += tmp
    out = out.reshape(p.filters, n, t_out).transpose(1, 0, 2)
    return _restore(np.ascontiguousarray(out), squeezed)


def _windows(xb, p: Conv1D, t_out):
    """Strided view ``(n, C, T', K)`` of the zero-padded input."""
    xp = np.pad(xb, ((0, 0), (0, 0), (p.padding, p.padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, p.kernel, axis=2)
    return win[:, :, : p.stride * (t_out - 1) + 1 : p.stride, :]


def _im2col(xb, p: Conv1D, t_out):
    win = _windows(xb, p, t_out)
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(xb.shape[0] * t_out, -1)


def conv1d_forward_gemm(x, p: Conv1D):
    """Same result as :func:`conv1d_forward` up to rounding, via one matrix product."""
    xb, squeezed = _as_batch(x)
    t_out = _check_conv_input(xb, p)
    cols = _im2col(xb, p, t_out)
    out = cols @ p.weight.reshape(p.filters, -1).T + p.bias
    out = out.reshape(xb.shape[0], t_out, p.filters).transpose(0, 2, 1)
    return _restore(np.ascontiguousarray(out), squeezed)


def conv1d_backward(grad_out, x, p: Conv1D):
    """Return ``(dx, dweight, dbias)`` for :func:`conv1d_forward`."""
    xb, squeezed = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    t_out = _check_conv_input(xb, p)
    if gb.shape != (xb.shape[0], p.filters, t_out):
        raise ShapeError(f"grad shape {gb.shape} does not match conv output")
    n, c, t = xb.shape
    cols = _im2col(xb, p, t_out)
    g2 = gb.transpose(0, 2, 1).reshape(n * t_out, p.filters)
    dw = (g2.T @ cols).reshape(p.weight.shape)
    db = gb.sum(axis=(0, 2))
    dcols = (g2 @ p.weight.reshape(p.filters, -1)).reshape(n, t_out, c, p.kernel)
    dxp = np.zeros((n, c, t + 2 * p.padding), dtype=dcols.dtype)
    span = p.stride * (t_out - 1) + 1
    for k in range(p.kernel):
        dxp[:, :, k : k + span : p.stride] += dcols[:, :, :, k].transpose(0, 2, 1)
    dx = dxp[:, :, p.padding : p.padding + t]
    return _restore(dx, squeezed), dw, db


# ---------------------------------------------------------------------------
# batch normalisation


def batchnorm_inference(x, p: BatchNorm):
    xb, squeezed = _as_batch(x)
    if xb.shape[1] != p.channels:
        raise ShapeError(f"batchnorm has {p.channels} channels, input has {xb.shape[1]}")
    dtype = xb.dtype
    scale = (p.gamma / np.sqrt(p.running_var + p.eps)).astype(dtype)
    out = (xb - p.running_mean.astype(dtype)[None, :, None]) * scale[None, :, None]
    out = out + p.beta.astype(dtype)[None, :, None]
    return _restore(out, squeezed)


def batchnorm_forward_train(x, p: BatchNorm, update_running=True):
    """Normalise with batch statistics over ``(n, t)``; optionally fold them into the running stats."""
    xb, squeezed = _as_batch(x)
    if xb.shape[1] != p.channels:
        raise ShapeError(f"batchnorm has {p.channels} channels, input has {xb.shape[1]}")
    mean = xb.mean(axis=(0, 2))
    var = xb.var(axis=(0, 2))
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (xb - mean[None, :, None]) * inv_std[None, :, None]
    out = xhat * p.gamma[None, :, None] + p.beta[None, :, None]
    if update_running:
        m = xb.shape[0] * xb.shape[2]
        unbiased = var * m / max(m - 1, 1)
        p.running_mean[...] = BN_RUNNING_DECAY * p.running_mean + (1 - BN_RUNNING_DECAY) * mean
        p.running_var[...] = BN_RUNNING_DECAY * p.running_var + (1 - BN_RUNNING_DECAY) * unbiased
    cache = (xhat, inv_std, p.gamma, squeezed)
    return _restore(out, squeezed), cache


def batchnorm_backward(grad_out, cache):
    xhat, inv_std, gamma, squeezed = cache
    g, _ = _as_batch(grad_out)
    m = g.shape[0] * g.shape[2]
    dgamma = (g * xhat).sum(axis=(0, 2))
    dbeta = g.sum(axis=(0, 2))
    dxhat = g * gamma[None, :, None]
    dx = (inv_std[None, :, None] / m) * (
        m * dxhat - dxhat.sum(axis=(0, 2))[None, :, None] - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return _restore(dx, squeezed), dgamma, dbeta


# ---------------------------------------------------------------------------
# activations and dropout


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def dropout_forward(x, rate: float, rng: Optional[np.random.Generator] = None, training: bool = True):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is ``None`` when the op is an identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate {rate} outside [0, 1)")
    x = np.asarray(x)
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("training-mode dropout needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


# ---------------------------------------------------------------------------
# residual block


def residual_forward(x, p: ResidualBlock, conv=None):
    """Inference-mode block: ``relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))``."""
    conv = conv or conv1d_forward
    h = relu(batchnorm_inference(conv(x, p.conv1), p.bn1))
    h = batchnorm_inference(conv(h, p.conv2), p.bn2)
    side = np.asarray(x) if p.shortcut is None else conv(x, p.shortcut)
    if h.shape != side.shape:
        raise ShapeError(f"residual paths disagree: main {h.shape}, shortcut {side.shape}")
    return relu(h + side)


def residual_forward_train(x, p: ResidualBlock, update_running=True):
    xb, _ = _as_batch(x)
    z1 = conv1d_forward_gemm(xb, p.conv1)
    b1, c1 = batchnorm_forward_train(z1, p.bn1, update_running)
    a1 = relu(b1)
    z2 = conv1d_forward_gemm(a1, p.conv2)
    b2, c2 = batchnorm_forward_train(z2, p.bn2, update_running)
    side = xb if p.shortcut is None else conv1d_forward_gemm(xb, p.shortcut)
    if b2.shape != side.shape:
        raise ShapeError(f"residual paths disagree: main {b2.shape}, shortcut {side.shape}")
    s = b2 + side
    cache = dict(x=xb, b1=b1, a1=a1, c1=c1, c2=c2, s=s, p=p)
    return relu(s), cache


def residual_backward(grad_out, cache):
    """Return ``(dx, grads)`` where ``grads`` is keyed ``conv1.weight``, ``bn1.gamma`` and so on."""
    p = cache["p"]
    g = relu_backward(grad_out, cache["s"])
    grads = {}
    dz2, grads["bn2.gamma"], grads["bn2.beta"] = batchnorm_backward(g, cache["c2"])
    da1, grads["conv2.weight"], grads["conv2.bias"] = conv1d_backward(dz2, cache["a1"], p.conv2)
    db1 = relu_backward(da1, cache["b1"])
    dz1, grads["bn1.gamma"], grads["bn1.beta"] = batchnorm_backward(db1, cache["c1"])
    dx, grads["conv1.weight"], grads["conv1.bias"] = conv1d_backward(dz1, cache["x"], p.conv1)
    if p.shortcut is None:
        dx = dx + g
    else:
        dxs, grads["shortcut.weight"], grads["shortcut.bias"] = conv1d_backward(g, cache["x"], p.shortcut)
        dx = dx + dxs
    return dx, grads


# ---------------------------------------------------------------------------
# classifier head


def softmax(z):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dense_logits(features, p: Dense):
    features = np.asarray(features)
    if features.shape[-1] != p.in_features:
        raise ShapeError(f"dense expects {p.in_features} features, got {features.shape[-1]}")
    return features @ p.weight.T + p.bias


def dense_softmax_forward(features, p: Dense):
    return softmax(dense_logits(features, p))


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise ParameterError(f"label {label} outside [0, {probs.shape[-1]})")
    return 0.0 - float(np.log(max(float(probs[label]), PROB_FLOOR)))


def dense_backward(features, probs, label: int, p: Dense):
    """Gradients of ``cross_entropy(softmax(W f + b), label)`` w.r.t. ``W`` and ``b``."""
    features = np.asarray(features)
    probs = np.asarray(probs)
    if features.shape != (p.in_features,) or probs.shape != (p.out_features,):
        raise ShapeError("features/probs do not match the dense layer")
    if not 0 <= label < p.out_features:
        raise ParameterError(f"label {label} outside [0, {p.out_features})")
    delta = probs.copy()
    delta[label] -= 1
    return np.outer(delta, features), delta


# ---------------------------------------------------------------------------
# whole backbone


def backbone_forward(x, bb: Backbone, training: bool = False, rng=None, conv=None):
    """Stem, residual blocks, flatten. Returns ``(flatten_dim,)`` or ``(n, flatten_dim)``.

    Training mode uses batch statistics (without touching the running stats)
    and live dropout; use :func:`backbone_forward_train` when gradients are
    needed. ``conv`` swaps the inference convolution kernel (the trainer
    passes :func:`conv1d_forward_gemm` for cheap loss monitoring).
    """
    conv = conv or conv1d_forward
    xb, squeezed = _as_batch(x)
    if xb.shape[1:] != bb.input_shape:
        raise ShapeError(f"backbone expects input {bb.input_shape}, got {xb.shape[1:]}")
    if training:
        feats, _ = backbone_forward_train(xb, bb, rng, update_running=False)
        return _restore(feats, squeezed)
    h = relu(batchnorm_inference(conv(xb, bb.stem), bb.stem_bn))
    for blk in bb.blocks:
        h = residual_forward(h, blk, conv)
    return _restore(h.reshape(h.shape[0], -1), squeezed)


def backbone_forward_train(xb, bb: Backbone, rng, update_running=True):
    if xb.shape[1:] != bb.input_shape:
        raise ShapeError(f"backbone expects input {bb.input_shape}, got {xb.shape[1:]}")
    z = conv1d_forward_gemm(xb, bb.stem)
    b, bn_cache = batchnorm_forward_train(z, bb.stem_bn, update_running)
    h, mask = dropout_forward(relu(b), bb.dropout, rng, training=True)
    caches = []
    for blk in bb.blocks:
        h, c = residual_forward_train(h, blk, update_running)
        caches.append(c)
    cache = dict(x=xb, b=b, bn=bn_cache, mask=mask, blocks=caches, shape=h.shape)
    return h.reshape(h.shape[0], -1), cache


def backbone_backward(grad_feats, cache, bb: Backbone):
    """Gradients for every trainable backbone array, keyed as in :meth:`Backbone.arrays`."""
    grads = {}
    g = grad_feats.reshape(cache["shape"])
    for i in reversed(range(len(bb.blocks))):
        g, bg = residual_backward(g, cache["blocks"][i])
        for k, v in bg.items():
            grads[f"blocks.{i}.{k}"] = v
    g = relu_backward(dropout_backward(g, cache["mask"]), cache["b"])
    g, grads["stem_bn.gamma"], grads["stem_bn.beta"] = batchnorm_backward(g, cache["bn"])
    _, grads["stem.weight"], grads["stem.bias"] = conv1d_backward(g, cache["x"], bb.stem)
    return grads


@dataclass
class ArchConfig:
    """Architecture hyperparameters; defaults are declared, not taken from measurements."""

    stem_filters: int = 32
    stem_kernel: int = 5
    stem_stride: int = 1
    block_channels: tuple = (32, 64, 64)
    block_kernel: int = 3
    dropout: float = 0.2

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) != 3:
            raise ParameterError("the architecture has exactly three residual blocks")
        if min(self.stem_filters, self.stem_kernel, self.stem_stride, self.block_kernel, *self.block_channels) < 1:
            raise ParameterError("architecture sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout rate {self.dropout} outside [0, 1)")

    def to_dict(self):
        return dict(
            stem_filters=self.stem_filters,
            stem_kernel=self.stem_kernel,
            stem_stride=self.stem_stride,
            block_channels=list(self.block_channels),
            block_kernel=self.block_kernel,
            dropout=self.dropout,
        )


@dataclass
class Model:
    backbone: Backbone
    classifier: Dense
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.classifier.in_features != self.backbone.flatten_dim:
            raise ShapeError(
                f"classifier takes {self.classifier.in_features} features, "
                f"backbone emits {self.backbone.flatten_dim}"
            )

    @property
    def classes(self) -> int:
        return self.classifier.out_features

    def predict_proba(self, x):
        return dense_softmax_forward(backbone_forward(x, self.backbone), self.classifier)
