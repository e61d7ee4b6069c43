"""Seeded multi-user sensor recordings with controllable user-induced drift.

Every class owns a template: a per-channel mix of a fundamental and a second
harmonic at a class-specific frequency, plus a per-channel DC level. Each
user then applies a systematic transform to every template:

* channel gain ``exp(gain * N(0,1))``
* DC offset ``offset * N(0,1)``
* time warp ``exp(warp * N(0,1))`` scaling every frequency
* phase shift ``phase * U(-pi, pi)`` per channel

All four scales are multiplied by one ``magnitude``, so magnitude 0 gives
every user the same distribution. Sessions add a small gain jitter, and
every tick gets white noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Manifest, Recording, write_recording
from .errors import ParameterError


@dataclass
class DriftProfile:
    magnitude: float = 0.8
    gain: float = 0.35
    offset: float = 0.8
    warp: float = 0.4
    phase: float = 1.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ParameterError("drift magnitude must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthConfig:
    users: int = 6
    classes: int = 4
    drift: DriftProfile = None
    seed: int = 0
    sessions: int = 2
    channels: int = 3
    sampling_rate_hz: float = 10.0
    seconds: float = 24.0
    noise: float = 0.3
    session_jitter: float = 0.05

    def __post_init__(self):
        if self.drift is None:
            self.drift = DriftProfile()
        elif not isinstance(self.drift, DriftProfile):
            self.drift = DriftProfile(magnitude=float(self.drift))
        if self.users < 2 or self.classes < 2:
            raise ParameterError("synthetic data needs at least 2 users and 2 classes")
        if self.sessions < 1 or self.channels < 1:
            raise ParameterError("sessions and channels must be >= 1")


def _templates(cfg: SynthConfig, rng):
    k, c = cfg.classes, cfg.channels
    # fundamentals between 6% and 20% of the sampling rate leave headroom for warp
    return {
        "freq": np.linspace(0.06, 0.2, k) * cfg.sampling_rate_hz,
        "amp": rng.uniform(0.5, 1.5, (k, c)),
        "harm": rng.uniform(0.0, 0.6, (k, c)),
        "phi": rng.uniform(0, 2 * np.pi, (k, c)),
        "dc": rng.normal(0.0, 0.5, (k, c)),
    }


def _user_transform(profile: DriftProfile, channels, rng):
    m = profile.magnitude
    return {
        "gain": np.exp(m * profile.gain * rng.standard_normal(channels)),
        "offset": m * profile.offset * rng.standard_normal(channels),
        "warp": float(np.exp(m * profile.warp * rng.standard_normal())),
        "phase": m * profile.phase * rng.uniform(-np.pi, np.pi, channels),
    }


def synth_recordings(cfg: SynthConfig):
    """Yield ``(user, session, label, recording)`` with recording shaped ``(channels, ticks)``.

    Random streams are split so that templates, each user's transform and
    each recording's noise are drawn independently of how many users or
    sessions are requested.
    """
    tmpl = _templates(cfg, np.random.default_rng([cfg.seed, 0]))
    ticks = int(round(cfg.seconds * cfg.sampling_rate_hz))
    t = np.arange(ticks) / cfg.sampling_rate_hz
    for u in range(cfg.users):
        tr = _user_transform(cfg.drift, cfg.channels, np.random.default_rng([cfg.seed, 1, u]))
        for s in range(cfg.sessions):
            for k in range(cfg.classes):
                rng = np.random.default_rng([cfg.seed, 2, u, s, k])
                f = tmpl["freq"][k] * tr["warp"]
                start = rng.uniform(0, 2 * np.pi)
                arg = 2 * np.pi * f * t[None, :] + start + tmpl["phi"][k][:, None] + tr["phase"][:, None]
                wave = np.sin(arg) + tmpl["harm"][k][:, None] * np.sin(2 * arg)
                sig = tmpl["dc"][k][:, None] + tmpl["amp"][k][:, None] * wave
                jitter = np.exp(cfg.session_jitter * rng.standard_normal(cfg.channels))
                sig = sig * (tr["gain"] * jitter)[:, None] + tr["offset"][:, None]
                sig = sig + cfg.noise * rng.standard_normal(sig.shape)
                yield u, s, k, sig.astype(np.float32)


def synth_drift_dataset(out_dir, cfg: SynthConfig = None, **kwargs) -> Manifest:
    """Write recordings plus ``manifest.json`` under ``out_dir`` and return the manifest."""
    cfg = cfg or SynthConfig(**kwargs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = []
    for u, s, k, sig in synth_recordings(cfg):
        rel = f"u{u}/s{s}_c{k}.csv"
        (out / rel).parent.mkdir(exist_ok=True)
        write_recording(out / rel, sig)
        recs.append(Recording(rel, u, s, k))
    m = Manifest(
        name=f"synth-u{cfg.users}-k{cfg.classes}-d{cfg.drift.magnitude:g}-s{cfg.seed}",
        sampling_rate_hz=cfg.sampling_rate_hz,
        channels=cfg.channels,
        classes=cfg.classes,
        users=list(range(cfg.users)),
        sessions={u: list(range(cfg.sessions)) for u in range(cfg.users)},
        recordings=recs,
        class_names=[f"class{k}" for k in range(cfg.classes)],
        root=out,
    )
    m.save(out / "manifest.json")
    return m
