"""Dataset ingestion, windowing, per-channel normalisation and user/session splits.

On disk a dataset is a JSON manifest plus one headerless CSV per recording
(rows are sample ticks, columns are channels). Manifest layout::

    {
      "name": "recgym",
      "sampling_rate_hz": 20,
      "channels": 7,
      "classes": 12,
      "class_names": ["...", ...],            # optional
      "users": [0, 1, ...],
      "sessions": {"0": [0, 1], "1": [0], ...},
      "recordings": [
        {"path": "u0/s0_c3.csv", "user": 0, "session": 0, "label": 3},
        ...
      ]
    }

Recording paths are relative to the manifest's directory. User, session and
label ids are non-negative integers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import container
from .errors import DataError, ParameterError

log = logging.getLogger(__name__)

WINDOW_SECONDS = 2.0
CONSTANT_STD = 1e-8

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["name", "sampling_rate_hz", "channels", "classes", "users", "sessions", "recordings"],
    "properties": {
        "name": {"type": "string"},
        "sampling_rate_hz": {"type": "number", "exclusiveMinimum": 0},
        "channels": {"type": "integer", "minimum": 1},
        "classes": {"type": "integer", "minimum": 1},
        "class_names": {"type": "array", "items": {"type": "string"}},
        "users": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "sessions": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        },
        "recordings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["path", "user", "session", "label"],
                "properties": {
                    "path": {"type": "string"},
                    "user": {"type": "integer", "minimum": 0},
                    "session": {"type": "integer", "minimum": 0},
                    "label": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


@dataclass
class Recording:
    path: str
    user: int
    session: int
    label: int


@dataclass
class Manifest:
    name: str
    sampling_rate_hz: float
    channels: int
    classes: int
    users: list
    sessions: dict
    recordings: list
    class_names: list = field(default_factory=list)
    root: Path = Path(".")

    def validate(self, check_files=True):
        if len(set(self.users)) != len(self.users):
            raise DataError("user ids must be unique")
        users = set(self.users)
        for r in self.recordings:
            if r.label >= self.classes:
                raise DataError(f"recording {r.path}: label {r.label} >= classes {self.classes}")
            if r.user not in users:
                raise DataError(f"recording {r.path}: unknown user {r.user}")
            if r.session not in self.sessions.get(r.user, []):
                raise DataError(f"recording {r.path}: session {r.session} not listed for user {r.user}")
            if check_files and not (self.root / r.path).is_file():
                raise DataError(f"recording file missing: {self.root / r.path}")
        return self

    @property
    def window_steps(self) -> int:
        return window_steps(self.sampling_rate_hz)

    def to_dict(self):
        d = {
            "name": self.name,
            "sampling_rate_hz": self.sampling_rate_hz,
            "channels": self.channels,
            "classes": self.classes,
            "users": list(self.users),
            "sessions": {str(u): list(s) for u, s in sorted(self.sessions.items())},
            "recordings": [
                {"path": r.path, "user": r.user, "session": r.session, "label": r.label}
                for r in self.recordings
            ],
        }
        if self.class_names:
            d["class_names"] = list(self.class_names)
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def load_manifest(path, check_files=True) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    try:
        jsonschema.validate(raw, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise DataError(f"manifest {path} is invalid: {exc.message}") from exc
    m = Manifest(
        name=raw["name"],
        sampling_rate_hz=raw["sampling_rate_hz"],
        channels=raw["channels"],
        classes=raw["classes"],
        users=list(raw["users"]),
        sessions={int(u): list(s) for u, s in raw["sessions"].items()},
        recordings=[Recording(**r) for r in raw["recordings"]],
        class_names=raw.get("class_names", []),
        root=path.parent,
    )
    return m.validate(check_files)


def read_recording(path, channels=None) -> np.ndarray:
    """Headerless CSV -> ``(channels, ticks)`` float32."""
    arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2).T
    if channels is not None and arr.shape[0] != channels:
        raise DataError(f"{path}: expected {channels} channels, found {arr.shape[0]}")
    return arr.astype(np.float32)


def write_recording(path, rec) -> None:
    """Inverse of :func:`read_recording`; values are written with float32 round-trip precision."""
    np.savetxt(path, np.asarray(rec, dtype=np.float32).T, delimiter=",", fmt="%.9g")


# ---------------------------------------------------------------------------
# windows


def window_steps(sampling_rate_hz: float, seconds: float = WINDOW_SECONDS) -> int:
    return int(math.floor(seconds * sampling_rate_hz + 0.5))


def window_count(length: int, w: int) -> int:
    return (length - w) // (w // 2) + 1 if length >= w else 0


def segment(recording, w: int, warnings=None) -> np.ndarray:
    """Cut ``(C, L)`` into 50%-overlap windows ``(n, C, w)``; window ``i`` starts at ``i * w/2``.

    A recording shorter than ``w`` yields no windows and appends a note to
    ``warnings`` if a list is supplied.
    """
    if w < 2 or w % 2:
        raise ParameterError(f"window length must be even and >= 2, got {w}")
    rec = np.asarray(recording)
    if rec.ndim != 2:
        raise DataError(f"recording must be (channels, ticks), got shape {rec.shape}")
    n = window_count(rec.shape[1], w)
    if n == 0:
        msg = f"recording of {rec.shape[1]} ticks is shorter than one window ({w})"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return np.empty((0, rec.shape[0], w), dtype=rec.dtype)
    hop = w // 2
    view = np.lib.stride_tricks.sliding_window_view(rec, w, axis=1)[:, ::hop][:, :n]
    return np.ascontiguousarray(view.transpose(1, 0, 2))


@dataclass
class WindowSet:
    """Windows ``x`` of shape ``(n, C, T)`` with per-window label, user and session ids."""

    x: np.ndarray
    y: np.ndarray
    users: np.ndarray
    sessions: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.users = np.asarray(self.users, dtype=np.int64)
        self.sessions = np.asarray(self.sessions, dtype=np.int64)
        n = len(self.x)
        if self.x.ndim != 3 or not (len(self.y) == len(self.users) == len(self.sessions) == n):
            raise DataError("window arrays have inconsistent lengths")

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.x[idx], self.y[idx], self.users[idx], self.sessions[idx])

    def with_x(self, x) -> "WindowSet":
        return WindowSet(x, self.y, self.users, self.sessions)

    def to_bytes(self) -> bytes:
        n, c, t = self.x.shape
        ints = np.concatenate([[n, c, t], self.y, self.users, self.sessions])
        return container.pack([(container.WINDOWS, ints, self.x.ravel())])

    @classmethod
    def from_bytes(cls, buf) -> "WindowSet":
        recs = container.unpack(buf)
        ints, fl = container._expect(recs[0], container.WINDOWS)
        n, c, t = (int(v) for v in ints[:3])
        rest = ints[3:].reshape(3, n)
        return cls(fl.reshape(n, c, t), rest[0], rest[1], rest[2])

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WindowSet":
        return cls.from_bytes(Path(path).read_bytes())


def window_dataset(manifest: Manifest, seconds: float = WINDOW_SECONDS, warnings=None) -> WindowSet:
    """Read and segment every recording; windows never straddle a recording boundary."""
    w = window_steps(manifest.sampling_rate_hz, seconds)
    xs, ys, us, ss = [], [], [], []
    for r in manifest.recordings:
        win = segment(read_recording(manifest.root / r.path, manifest.channels), w, warnings)
        xs.append(win)
        ys += [r.label] * len(win)
        us += [r.user] * len(win)
        ss += [r.session] * len(win)
    if not xs:
        raise DataError("manifest lists no recordings")
    return WindowSet(np.concatenate(xs), ys, us, ss)


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def fit_channel_stats(x) -> ChannelStats:
    """Per-channel mean and population std over every window and time step of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise DataError("cannot fit normalisation statistics on no windows")
    return ChannelStats(x.mean(axis=(0, 2)), x.std(axis=(0, 2)))


def normalize_per_channel(x, stats: ChannelStats = None) -> np.ndarray:
    """Standardise each channel with ``stats`` (fitted on ``x`` itself when omitted).

    Channels whose std is below 1e-8 map to zero.
    """
    x = np.asarray(x)
    if stats is None:
        stats = fit_channel_stats(x)
    const = stats.std < CONSTANT_STD
    scale = np.where(const, 0.0, 1.0 / np.where(const, 1.0, stats.std))
    out = (x.astype(np.float64) - stats.mean[None, :, None]) * scale[None, :, None]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# splits

L1PO, L1SO = "L1PO", "L1SO"


@dataclass
class SplitPlan:
    protocol: str
    target_user: int
    target_session: int = None
    adapt_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        self.protocol = self.protocol.upper()
        if self.protocol not in (L1PO, L1SO):
            raise ParameterError(f"unknown protocol {self.protocol!r}")
        if self.protocol == L1SO and self.target_session is None:
            raise ParameterError("L1SO needs a target session")
        if not 0.0 < self.adapt_fraction < 1.0:
            raise ParameterError("adapt_fraction must be in (0, 1)")

    @property
    def test_fraction(self) -> float:
        return 1.0 - self.adapt_fraction


@dataclass
class Split:
    train: WindowSet
    adapt: WindowSet
    test: WindowSet
    warnings: list = field(default_factory=list)


def stratified_split(labels, fraction: float, rng: np.random.Generator):
    """Split positions ``0..n-1`` into ``(first, rest)`` with ``|first| = round(fraction * n)``.

    Per-class quotas follow the largest-remainder rule so each class is
    represented in proportion. ``first`` comes back in a seeded random
    arrival order; ``rest`` is sorted.
    """
    labels = np.asarray(labels)
    n = len(labels)
    n_first = int(math.floor(fraction * n + 0.5))
    classes = np.unique(labels)
    members = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    exact = {c: fraction * len(members[c]) for c in classes}
    quota = {c: int(math.floor(exact[c])) for c in classes}
    short = n_first - sum(quota.values())
    by_remainder = sorted(classes, key=lambda c: (-(exact[c] - quota[c]), c))
    for c in by_remainder[:short]:
        quota[c] += 1
    first = np.concatenate([members[c][: quota[c]] for c in classes]) if n else np.empty(0, np.int64)
    rest = np.concatenate([members[c][quota[c] :] for c in classes]) if n else np.empty(0, np.int64)
    return rng.permutation(first).astype(np.int64), np.sort(rest).astype(np.int64)


def make_split(ws: WindowSet, plan: SplitPlan) -> Split:
    """Partition windows into train / adapt / test according to ``plan``.

    L1PO trains on every other user; L1SO trains on everything except the
    held-out session (so the target user's other sessions are included).
    The held-out windows are split ``adapt_fraction`` / rest, stratified by
    class.
    """
    if plan.protocol == L1PO:
        held = ws.users == plan.target_user
        if not held.any():
            raise DataError(f"target user {plan.target_user} has no windows")
    else:
        held = (ws.users == plan.target_user) & (ws.sessions == plan.target_session)
        if not held.any():
            raise DataError(f"user {plan.target_user} session {plan.target_session} has no windows")
    train_idx = np.flatnonzero(~held)
    held_idx = np.flatnonzero(held)
    rng = np.random.default_rng(plan.seed)
    a, t = stratified_split(ws.y[held_idx], plan.adapt_fraction, rng)
    split = Split(ws.subset(train_idx), ws.subset(held_idx[a]), ws.subset(held_idx[t]))
    missing = sorted(set(ws.y[held_idx].tolist()) - set(split.adapt.y.tolist()))
    if missing:
        split.warnings.append(f"classes absent from the adapt set: {missing}")
    if len(split.train) == 0:
        raise DataError("training set is empty")
    return split


def normalize_split(split: Split) -> Split:
    """Normalise all three parts with statistics fitted on the training part only."""
    stats = fit_channel_stats(split.train.x)
    return Split(
        split.train.with_x(normalize_per_channel(split.train.x, stats)),
        split.adapt.with_x(normalize_per_channel(split.adapt.x, stats)),
        split.test.with_x(normalize_per_channel(split.test.x, stats)),
        list(split.warnings),
    )
