"""Streaming dense-head personalisation with EMA momentum and a two-tier memory budget.

Only the classifier and its momentum buffers change during adaptation; the
backbone is run in inference mode. The update for every incoming labelled
sample is::

    ema <- decay * ema + grad
    param <- param - lr * ema
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import OdpharError, ParameterError, PlacementError
from .nn import Backbone, Dense, Model, backbone_forward, dense_backward, dense_softmax_forward, PROB_FLOOR

L1_BYTES = 128 * 1024
L2_BYTES = int(1.6 * 1024 * 1024)  # 1677721
FLOAT_BYTES = 4


# ---------------------------------------------------------------------------
# memory placement


@dataclass
class MemoryBudget:
    l1_bytes: int = L1_BYTES
    l2_bytes: int = L2_BYTES
    l1_used: int = 0
    l2_used: int = 0


@dataclass
class PlacementReport:
    l1_used: int
    l2_used: int
    l1_capacity: int
    l2_capacity: int
    breakdown: dict

    @property
    def l1_ok(self) -> bool:
        return self.l1_used <= self.l1_capacity

    @property
    def l2_ok(self) -> bool:
        return self.l2_used <= self.l2_capacity

    @property
    def ok(self) -> bool:
        return self.l1_ok and self.l2_ok

    def to_dict(self):
        d = asdict(self)
        d.update(l1_ok=self.l1_ok, l2_ok=self.l2_ok)
        return d


def l1_layout(flatten_dim: int, classes: int) -> dict:
    """Bytes of every L1-resident buffer: weights and EMA, bias and EMA, feature and logit scratch."""
    w = flatten_dim * classes * FLOAT_BYTES
    b = classes * FLOAT_BYTES
    return {
        "dense_weight": w,
        "ema_weight": w,
        "dense_bias": b,
        "ema_bias": b,
        "feature_scratch": flatten_dim * FLOAT_BYTES,
        "logit_scratch": 2 * classes * FLOAT_BYTES,
    }


def place(backbone_params: int, flatten_dim: int, classes: int, budget: MemoryBudget = None,
          strict: bool = True) -> PlacementReport:
    """Place a frozen backbone of ``backbone_params`` floats in L2 and the trainable head in L1.

    With ``strict`` an overflowing tier raises :class:`PlacementError`
    (L1 is checked first); otherwise the report just carries the verdict.
    """
    budget = budget or MemoryBudget()
    layout = l1_layout(flatten_dim, classes)
    l1 = budget.l1_used + sum(layout.values())
    l2 = budget.l2_used + backbone_params * FLOAT_BYTES
    layout["backbone"] = backbone_params * FLOAT_BYTES
    report = PlacementReport(l1, l2, budget.l1_bytes, budget.l2_bytes, layout)
    if strict:
        if not report.l1_ok:
            raise PlacementError("L1", l1, budget.l1_bytes)
        if not report.l2_ok:
            raise PlacementError("L2", l2, budget.l2_bytes)
    return report


def place_model(model: Model, budget: MemoryBudget = None, strict: bool = True) -> PlacementReport:
    return place(model.backbone.param_count, model.backbone.flatten_dim, model.classes, budget, strict)


# ---------------------------------------------------------------------------
# adaptation state


@dataclass
class AdaptConfig:
    # flattened features have squared norms in the thousands; larger steps overshoot the warm start
    learning_rate: float = 0.0005
    ema_decay: float = 0.9
    epochs: int = 1
    adapt_fraction: float = 0.4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ParameterError("ema_decay must be in [0, 1)")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not 0.0 < self.adapt_fraction < 1.0:
            raise ParameterError("adapt_fraction must be in (0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdaptState:
    classifier: Dense
    ema_w: np.ndarray
    ema_b: np.ndarray
    learning_rate: float = 0.0005
    ema_decay: float = 0.9
    step_count: int = 0
    faults: int = 0

    def __post_init__(self):
        if self.ema_w.shape != self.classifier.weight.shape or self.ema_b.shape != self.classifier.bias.shape:
            raise ParameterError("EMA buffers must match the classifier shapes")
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ParameterError("ema_decay must be in [0, 1)")

    @classmethod
    def from_classifier(cls, dense: Dense, learning_rate=0.0005, ema_decay=0.9) -> "AdaptState":
        """Warm start from trained head weights; momentum buffers start at zero."""
        head = dense.copy()
        return cls(head, np.zeros_like(head.weight), np.zeros_like(head.bias), learning_rate, ema_decay)

    def copy(self) -> "AdaptState":
        return AdaptState(
            self.classifier.copy(), self.ema_w.copy(), self.ema_b.copy(),
            self.learning_rate, self.ema_decay, self.step_count, self.faults,
        )

    def to_bytes(self) -> bytes:
        c = self.classifier
        return container.pack([
            container._dense_record(c),
            (container.ADAPT, [c.out_features, c.in_features, self.step_count, self.faults],
             np.concatenate([self.ema_w.ravel(), self.ema_b, [self.learning_rate, self.ema_decay]])),
        ])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "AdaptState":
        recs = container.unpack(buf)
        dense = container._dense_from(recs[0])
        ints, fl = container._expect(recs[1], container.ADAPT)
        o, i, steps, faults = (int(v) for v in ints)
        return cls(
            dense, fl[: o * i].reshape(o, i).copy(), fl[o * i : o * i + o].copy(),
            float(fl[-2]), float(fl[-1]), steps, faults,
        )

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AdaptState":
        return cls.from_bytes(Path(path).read_bytes())


def adapt_features_step(state: AdaptState, features, label: int):
    """One in-place update from precomputed backbone features. Returns ``(loss, state)``.

    A non-finite loss or gradient leaves the state untouched apart from the
    fault counter.
    """
    features = np.asarray(features)
    probs = dense_softmax_forward(features, state.classifier)
    gw, gb = dense_backward(features, probs, label, state.classifier)
    p = float(probs[label])
    loss = 0.0 - math.log(max(p, PROB_FLOOR)) if math.isfinite(p) else math.nan
    if not (math.isfinite(loss) and np.isfinite(gw).all() and np.isfinite(gb).all()):
        state.faults += 1
        return loss, state
    c = state.classifier
    state.ema_w *= state.ema_decay
    state.ema_w += gw
    state.ema_b *= state.ema_decay
    state.ema_b += gb
    c.weight -= state.learning_rate * state.ema_w
    c.bias -= state.learning_rate * state.ema_b
    state.step_count += 1
    return loss, state


def adapt_step(state: AdaptState, backbone: Backbone, sample, label: int):
    """Inference-mode backbone forward, then :func:`adapt_features_step`."""
    feats = backbone_forward(sample, backbone, training=False)
    return adapt_features_step(state, feats, label)


def backbone_digest(backbone: Backbone) -> str:
    return hashlib.sha256(container.backbone_bytes(backbone)).hexdigest()


def _finite_or_none(v):
    return v if math.isfinite(v) else None


@dataclass
class SessionReport:
    steps: int = 0
    faults: int = 0
    samples: int = 0
    losses: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    backbone_sha256_before: str = ""
    backbone_sha256_after: str = ""
    estimates: dict = field(default_factory=dict)

    @property
    def backbone_unchanged(self) -> bool:
        return self.backbone_sha256_before == self.backbone_sha256_after

    def to_dict(self):
        d = asdict(self)
        d["losses"] = [_finite_or_none(v) for v in self.losses]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def adapt_session(state: AdaptState, backbone: Backbone, stream, verify_backbone: bool = True) -> SessionReport:
    """Apply :func:`adapt_step` once per ``(sample, label)`` in arrival order.

    Samples that raise (bad shape, bad label) are logged in the report and
    skipped; the session carries on.
    """
    report = SessionReport()
    if verify_backbone:
        report.backbone_sha256_before = backbone_digest(backbone)
    faults0, steps0 = state.faults, state.step_count
    for i, (sample, label) in enumerate(stream):
        report.samples += 1
        try:
            loss, state = adapt_step(state, backbone, sample, int(label))
        except OdpharError as exc:
            report.errors.append({"index": i, "error": str(exc)})
            continue
        report.losses.append(loss)
    report.steps = state.step_count - steps0
    report.faults = state.faults - faults0
    if verify_backbone:
        report.backbone_sha256_after = backbone_digest(backbone)
    return report
