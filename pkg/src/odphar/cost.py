"""Analytical MAC, memory-traffic, latency and energy estimates for inference and head updates.

Counting conventions (multiply-accumulate equivalents):

* conv: ``F * C * K * T_out`` per layer, shortcut projections included
* batch-norm (folded scale and shift): ``2 * C * T``
* dense forward: ``in * out``
* head update: forward ``in*out`` + gradient outer product ``in*out`` +
  EMA and apply ``2 * (in*out + out)``

ReLU, residual adds and softmax are not counted.

Bytes moved per invocation: inference streams every network parameter and
the input window (float32); an update moves the feature vector into the L1
scratch buffer, since the head and its EMA buffers already live in L1.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .errors import ParameterError, ShapeError
from .nn import ArchConfig, Backbone, Conv1D, Dense, Model

log = logging.getLogger(__name__)

FLOAT_BYTES = 4
# default architecture input used when fitting device profiles: 6 channels, 2 s at 10 Hz
REFERENCE_INPUT = (6, 20)
REFERENCE_CLASSES = 12


@dataclass
class DeviceProfile:
    name: str
    macs_per_second: float
    joules_per_mac: float
    bytes_per_second: float
    overhead_s: float = 0.0
    overhead_j: float = 0.0

    def __post_init__(self):
        for k in ("macs_per_second", "joules_per_mac", "bytes_per_second"):
            if not getattr(self, k) > 0:
                raise ParameterError(f"{k} must be positive")
        if self.overhead_s < 0 or self.overhead_j < 0:
            raise ParameterError("overheads must be non-negative")

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DeviceProfile":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ParameterError(f"bad device profile {path}: {exc}") from exc


def builtin_profile(name: str) -> DeviceProfile:
    """Load a profile shipped with the package (``gap9`` or ``stm32f7``)."""
    ref = resources.files("odphar") / "profiles" / f"{name}.json"
    if not ref.is_file():
        raise ParameterError(f"no built-in profile {name!r}")
    return DeviceProfile(**json.loads(ref.read_text()))


def load_profile(name_or_path) -> DeviceProfile:
    """A JSON file if one exists at ``name_or_path``, else a built-in profile (``gap9.json`` means ``gap9``)."""
    p = Path(name_or_path)
    if p.is_file():
        return DeviceProfile.load(p)
    return builtin_profile(p.stem if p.suffix == ".json" and p.parent == Path(".") else str(name_or_path))


# ---------------------------------------------------------------------------
# counting


def conv_macs(p: Conv1D, steps: int) -> int:
    return p.filters * p.in_channels * p.kernel * p.out_steps(steps)


def bn_macs(channels: int, steps: int) -> int:
    return 2 * channels * steps


def inference_breakdown(backbone: Backbone, classifier: Dense = None, input_shape=None) -> dict:
    """Per-layer MAC counts keyed by layer name, in topological order."""
    c, t = input_shape if input_shape is not None else backbone.input_shape
    if c != backbone.stem.in_channels:
        raise ShapeError(f"input has {c} channels, stem expects {backbone.stem.in_channels}")
    out = {}
    stem = backbone.stem
    out["stem.conv"] = conv_macs(stem, t)
    t = stem.out_steps(t)
    out["stem.bn"] = bn_macs(stem.filters, t)
    for i, blk in enumerate(backbone.blocks):
        t1 = blk.conv1.out_steps(t)
        out[f"block{i}.conv1"] = conv_macs(blk.conv1, t)
        out[f"block{i}.bn1"] = bn_macs(blk.conv1.filters, t1)
        t2 = blk.conv2.out_steps(t1)
        out[f"block{i}.conv2"] = conv_macs(blk.conv2, t1)
        out[f"block{i}.bn2"] = bn_macs(blk.conv2.filters, t2)
        if blk.shortcut is not None:
            out[f"block{i}.shortcut"] = conv_macs(blk.shortcut, t)
        t = t2
    flat = backbone.blocks[-1].conv2.filters * t
    if classifier is not None:
        if classifier.in_features != flat:
            raise ShapeError(f"classifier expects {classifier.in_features} features, backbone gives {flat}")
        out["classifier"] = classifier.in_features * classifier.out_features
    return out


def count_inference_macs(backbone: Backbone, classifier: Dense = None, input_shape=None) -> int:
    return int(sum(inference_breakdown(backbone, classifier, input_shape).values()))


def _head_shape(classifier):
    if isinstance(classifier, Dense):
        return classifier.in_features, classifier.out_features
    i, o = classifier
    return int(i), int(o)


def count_update_macs(classifier) -> int:
    """MAC equivalents of one head update; ``classifier`` is a Dense or ``(in, out)``."""
    i, o = _head_shape(classifier)
    return i * o + i * o + 2 * (i * o + o)


def inference_bytes(model: Model, input_shape=None) -> int:
    c, t = input_shape if input_shape is not None else model.backbone.input_shape
    params = model.backbone.param_count + model.classifier.weight.size + model.classifier.bias.size
    return FLOAT_BYTES * (params + c * t)


def update_bytes(classifier) -> int:
    return FLOAT_BYTES * _head_shape(classifier)[0]


# ---------------------------------------------------------------------------
# estimates


@dataclass
class Estimate:
    macs: int
    bytes: int
    latency_s: float
    energy_j: float

    def to_dict(self):
        d = asdict(self)
        d.update(latency_ms=self.latency_s * 1e3, energy_uj=self.energy_j * 1e6)
        return d


def estimate(profile: DeviceProfile, macs, bytes_moved=0) -> Estimate:
    latency = profile.overhead_s + macs / profile.macs_per_second + bytes_moved / profile.bytes_per_second
    energy = profile.overhead_j + macs * profile.joules_per_mac
    return Estimate(int(macs), int(bytes_moved), latency, energy)


def estimate_inference(profile: DeviceProfile, model: Model) -> Estimate:
    return estimate(profile, count_inference_macs(model.backbone, model.classifier), inference_bytes(model))


def estimate_update(profile: DeviceProfile, classifier) -> Estimate:
    return estimate(profile, count_update_macs(classifier), update_bytes(classifier))


def model_cost(profile: DeviceProfile, model: Model) -> dict:
    inf = estimate_inference(profile, model)
    upd = estimate_update(profile, model.classifier)
    return {"profile": profile.name, "inference": inf.to_dict(), "update": upd.to_dict()}


def energy_ratio(slow: DeviceProfile, fast: DeviceProfile, classifier) -> float:
    """Update energy on ``slow`` divided by update energy on ``fast``."""
    return estimate_update(slow, classifier).energy_j / estimate_update(fast, classifier).energy_j


# ---------------------------------------------------------------------------
# calibration


@dataclass
class Anchor:
    """A measured figure: ``kind`` is ``inference`` or ``update``, ``quantity`` is ``latency_s`` or ``energy_j``."""

    kind: str
    quantity: str
    value: float


# order-of-magnitude starting points; they also act as weak priors on directions the anchors leave free
PRIOR = {
    "macs_per_second": 4e9,
    "joules_per_mac": 3e-11,
    "bytes_per_second": 1e9,
    "overhead_s": 5e-5,
    "overhead_j": 3e-6,
}
PRIOR_WEIGHT = 1e-2
FIELDS = list(PRIOR)


def reference_workload(arch: ArchConfig = None, input_shape=REFERENCE_INPUT, classes=REFERENCE_CLASSES):
    """``{kind: (macs, bytes)}`` for the given architecture at the reference input."""
    from .train import init_weights

    model = init_weights(arch or ArchConfig(), input_shape, classes, seed=0)
    return {
        "inference": (count_inference_macs(model.backbone, model.classifier), inference_bytes(model)),
        "update": (count_update_macs(model.classifier), update_bytes(model.classifier)),
    }


@dataclass
class CalibrationResult:
    profile: DeviceProfile
    residuals: dict
    seconds: float
    success: bool
    workload: dict


def calibrate(name: str, anchors, workload=None, prior=None) -> CalibrationResult:
    """Fit a profile so the reference workload reproduces ``anchors``.

    Parameters are fitted in log space (keeping them positive) by
    least squares on relative anchor errors. Each parameter also gets a
    weak residual towards ``prior`` so directions the anchors do not pin
    down stay at sensible values and the fit is unique.
    """
    workload = workload or reference_workload()
    prior = {**PRIOR, **(prior or {})}
    x0 = np.log([prior[k] for k in FIELDS])
    anchors = list(anchors)
    if not anchors:
        raise ParameterError("calibration needs at least one anchor")

    def model_value(params, a):
        macs, nbytes = workload[a.kind]
        if a.quantity == "latency_s":
            return params["overhead_s"] + macs / params["macs_per_second"] + nbytes / params["bytes_per_second"]
        if a.quantity == "energy_j":
            return params["overhead_j"] + macs * params["joules_per_mac"]
        raise ParameterError(f"unknown anchor quantity {a.quantity!r}")

    def residuals(x):
        params = dict(zip(FIELDS, np.exp(x)))
        r = [model_value(params, a) / a.value - 1.0 for a in anchors]
        return np.concatenate([r, PRIOR_WEIGHT * (x - x0)])

    t0 = time.perf_counter()
    sol = least_squares(residuals, x0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=20000)
    elapsed = time.perf_counter() - t0
    params = {k: float(v) for k, v in zip(FIELDS, np.exp(sol.x))}
    prof = DeviceProfile(name=name, **params)
    rel = {f"{a.kind}.{a.quantity}": model_value(params, a) / a.value - 1.0 for a in anchors}
    log.info("calibrated %s in %.3fs: %s", name, elapsed, rel)
    return CalibrationResult(prof, rel, elapsed, bool(sol.success), {k: list(v) for k, v in workload.items()})


# measured figures for the GAP9 board; the update latency anchor is the centre of the 0.07-0.17 ms band
GAP9_ANCHORS = [
    Anchor("inference", "latency_s", 0.34e-3),
    Anchor("inference", "energy_j", 35e-6),
    Anchor("update", "latency_s", 0.12e-3),
    Anchor("update", "energy_j", 4e-6),
]
UPDATE_BAND_S = (0.07e-3, 0.17e-3)

# the only figure available for the comparison MCU is per-update energy
STM32F7_ANCHORS = [Anchor("update", "energy_j", 400e-6)]
STM32F7_PRIOR = {"macs_per_second": 1e8, "joules_per_mac": 2e-9, "bytes_per_second": 2e8, "overhead_s": 1e-4, "overhead_j": 1e-5}


def calibrate_builtin():
    """Fit both shipped profiles from their anchors."""
    return {
        "gap9": calibrate("gap9", GAP9_ANCHORS),
        "stm32f7": calibrate("stm32f7", STM32F7_ANCHORS, prior=STM32F7_PRIOR),
    }


def fmt_si(value, unit):
    for scale, prefix in ((1, ""), (1e-3, "m"), (1e-6, "u"), (1e-9, "n")):
        if abs(value) >= scale or scale == 1e-9:
            return f"{value / scale:.3f} {prefix}{unit}"
    return f"{value} {unit}"  # pragma: no cover

