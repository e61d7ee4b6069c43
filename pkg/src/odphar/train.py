"""Offline ("generalize first") training of the full network on non-target users."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, ParameterError
from .nn import (
    PROB_FLOOR,
    ArchConfig,
    Backbone,
    BatchNorm,
    Conv1D,
    Dense,
    Model,
    ResidualBlock,
    backbone_backward,
    backbone_forward,
    backbone_forward_train,
    conv1d_forward_gemm,
    softmax,
)

log = logging.getLogger(__name__)

# float32 representation, so a saved-then-loaded model computes identically
BN_EPS = float(np.float32(1e-5))
EVAL_CHUNK = 512


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    patience: int = 0
    val_fraction: float = 0.0
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must be in [0, 1)")
        if self.patience < 0:
            raise ParameterError("patience must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ParameterError("val_fraction must be in [0, 1)")
        if self.clip_norm < 0:
            raise ParameterError("clip_norm must be non-negative (0 disables clipping)")

    def to_dict(self):
        return asdict(self)


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv(rng, filters, in_ch, kernel, stride=1, padding=None):
    if padding is None:
        padding = (kernel - 1) // 2
    w = _kaiming_uniform(rng, (filters, in_ch, kernel), in_ch * kernel)
    return Conv1D(w, np.zeros(filters, np.float32), stride, padding)


def _bn(channels):
    return BatchNorm(
        np.ones(channels, np.float32),
        np.zeros(channels, np.float32),
        np.zeros(channels, np.float32),
        np.ones(channels, np.float32),
        BN_EPS,
    )


def init_weights(arch: ArchConfig, input_shape, classes: int, seed: int) -> Model:
    """Kaiming-uniform (fan-in) conv/dense weights, zero biases, identity BN.

    Convolutions use "same" padding ``(K - 1) // 2``; a block gets a 1x1
    projection shortcut only when its channel count changes.
    """
    if classes < 1:
        raise ParameterError("classes must be >= 1")
    channels, steps = (int(v) for v in input_shape)
    rng = np.random.default_rng(seed)
    stem = _conv(rng, arch.stem_filters, channels, arch.stem_kernel, arch.stem_stride)
    blocks = []
    c_in = arch.stem_filters
    for c_out in arch.block_channels:
        conv1 = _conv(rng, c_out, c_in, arch.block_kernel)
        conv2 = _conv(rng, c_out, c_out, arch.block_kernel)
        shortcut = _conv(rng, c_out, c_in, 1, padding=0) if c_in != c_out else None
        blocks.append(ResidualBlock(conv1, _bn(c_out), conv2, _bn(c_out), shortcut))
        c_in = c_out
    bb = Backbone(stem, _bn(arch.stem_filters), blocks, input_steps=steps, dropout=arch.dropout)
    dense = Dense(
        _kaiming_uniform(rng, (classes, bb.flatten_dim), bb.flatten_dim),
        np.zeros(classes, np.float32),
    )
    return Model(bb, dense, metadata={"seed": int(seed), "arch": arch.to_dict()})


def trainable_arrays(model: Model) -> dict:
    """Name -> live array for everything the offline optimiser updates."""
    out = {k: v for k, v in model.backbone.arrays() if not k.endswith(("running_mean", "running_var"))}
    out["classifier.weight"] = model.classifier.weight
    out["classifier.bias"] = model.classifier.bias
    return out


def _decayed(name):
    return name.endswith(".weight")


def _clip_scale(grads, clip_norm):
    """Factor that brings the global gradient norm down to ``clip_norm`` (1.0 if already within)."""
    if not clip_norm:
        return 1.0
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    return clip_norm / norm if norm > clip_norm else 1.0


def batch_loss_and_grads(model: Model, xb, yb, rng, update_running=True):
    """Mean cross-entropy of a training-mode forward pass and gradients of every trainable array."""
    feats, cache = backbone_forward_train(xb, model.backbone, rng, update_running)
    probs = softmax(feats @ model.classifier.weight.T + model.classifier.bias)
    n = xb.shape[0]
    p_true = probs[np.arange(n), yb]
    loss = float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))
    delta = probs.copy()
    delta[np.arange(n), yb] -= 1
    delta /= n
    grads = backbone_backward(delta @ model.classifier.weight, cache, model.backbone)
    grads["classifier.weight"] = delta.T @ feats
    grads["classifier.bias"] = delta.sum(axis=0)
    return loss, grads


def predict_proba(model: Model, x, conv=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    out = np.empty((x.shape[0], model.classes), dtype=np.float32)
    for s in range(0, x.shape[0], EVAL_CHUNK):
        f = backbone_forward(x[s : s + EVAL_CHUNK], model.backbone, conv=conv)
        out[s : s + EVAL_CHUNK] = softmax(f @ model.classifier.weight.T + model.classifier.bias)
    return out


def mean_loss(model: Model, x, y, conv=None) -> float:
    probs = predict_proba(model, x, conv)
    p_true = probs[np.arange(len(y)), y]
    return float(np.mean(-np.log(np.maximum(p_true.astype(np.float64), PROB_FLOOR))))


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    confusion: np.ndarray  # rows: true class, columns: predicted class


def evaluate(model: Model, x, y) -> EvalResult:
    """Argmax accuracy (ties go to the lowest class index) and confusion matrix."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    pred = np.argmax(predict_proba(model, x), axis=1)
    k = model.classes
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    correct = int(np.trace(conf))
    return EvalResult(correct / len(y), correct, len(y), conf)


def _snapshot(model):
    return {k: v.copy() for k, v in model.backbone.arrays()} | {
        "classifier.weight": model.classifier.weight.copy(),
        "classifier.bias": model.classifier.bias.copy(),
    }


def _restore(model, snap):
    live = dict(model.backbone.arrays())
    live["classifier.weight"] = model.classifier.weight
    live["classifier.bias"] = model.classifier.bias
    for k, v in snap.items():
        live[k][...] = v


def train_general_model(x, y, classes: int, cfg: TrainConfig = None, arch: ArchConfig = None) -> Model:
    """Mini-batch SGD with classical momentum over the whole network.

    ``x`` is ``(n, C, T)`` float32, ``y`` integer labels. Deterministic for a
    given data order and ``cfg.seed``; the seed drives initialisation,
    shuffling and dropout.
    """
    cfg = cfg or TrainConfig()
    arch = arch or ArchConfig()
    x = np.ascontiguousarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 3 or len(x) == 0:
        raise DataError("training data must be a non-empty (n, C, T) array")
    if len(y) != len(x):
        raise DataError("labels and windows differ in length")
    if y.min() < 0 or y.max() >= classes:
        raise DataError(f"labels must lie in [0, {classes})")

    warnings = []
    missing = sorted(set(range(classes)) - set(y.tolist()))
    if missing:
        warnings.append(f"classes without training samples: {missing}")
        log.warning(warnings[-1])

    model = init_weights(arch, x.shape[1:], classes, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])

    val_x = val_y = None
    if cfg.val_fraction > 0 and cfg.epochs > 0:
        order = rng.permutation(len(x))
        n_val = max(1, int(round(cfg.val_fraction * len(x))))
        val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        val_x, val_y, x, y = x[val_idx], y[val_idx], x[tr_idx], y[tr_idx]

    initial_loss = mean_loss(model, x, y, conv1d_forward_gemm)
    params = trainable_arrays(model)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    curve, val_curve = [], []
    best_val, best_snap, stale = np.inf, None, 0
    epochs_run = 0

    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(x))
        for s in range(0, len(x), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            _, grads = batch_loss_and_grads(model, x[idx], y[idx], rng)
            scale = _clip_scale(grads, cfg.clip_norm)
            for k, w in params.items():
                g = grads[k] * scale if scale != 1.0 else grads[k]
                if cfg.weight_decay and _decayed(k):
                    g = g + cfg.weight_decay * w
                v = velocity[k]
                v *= cfg.momentum
                v += g
                w -= (cfg.learning_rate * v).astype(w.dtype)
        # end-of-epoch loss over the whole training set in inference mode
        curve.append(mean_loss(model, x, y, conv1d_forward_gemm))
        epochs_run = epoch + 1
        log.debug("epoch %d loss %.4f", epochs_run, curve[-1])
        if val_x is not None:
            val_curve.append(mean_loss(model, val_x, val_y, conv1d_forward_gemm))
            if val_curve[-1] < best_val:
                best_val, best_snap, stale = val_curve[-1], _snapshot(model), 0
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    _restore(model, best_snap)
                    break

    model.metadata.update(
        config=cfg.to_dict(),
        classes=int(classes),
        epochs_run=epochs_run,
        initial_loss=initial_loss,
        final_loss=mean_loss(model, x, y, conv1d_forward_gemm),
        loss_curve=curve,
        val_curve=val_curve,
        warnings=warnings,
    )
    return model
