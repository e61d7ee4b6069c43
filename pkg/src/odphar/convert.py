"""Convert long-format sensor CSVs (one row per sample tick) into a manifest plus per-recording CSVs.

Each contiguous run of rows sharing (user, session, label) becomes one
recording, so no window ever spans a change of activity. Identifiers of any
type are mapped to dense integers in sorted order; the mapping is written to
``id_map.json`` next to the manifest.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Manifest, Recording, write_recording
from .errors import DataError


@dataclass
class ColumnMap:
    user: str
    label: str
    channels: list
    session: str = None  # None: every user has a single session 0
    sampling_rate_hz: float = None


# Column layouts of the public datasets as published. Only RecGym ships a
# single long table; the other two need a user-written ColumnMap after flattening.
PRESETS = {
    "recgym": ColumnMap(
        user="Subject",
        session="Session",
        label="Workout",
        channels=["A_x", "A_y", "A_z", "G_x", "G_y", "G_z", "C_1"],
        sampling_rate_hz=20.0,
    ),
}


def _natural(v):
    try:
        return (0, float(v), "")
    except ValueError:
        return (1, 0.0, v)


def _dense_ids(values):
    return {v: i for i, v in enumerate(sorted(set(values), key=_natural))}


@dataclass
class _Run:
    user: str
    session: str
    label: str
    rows: list = field(default_factory=list)


def read_runs(paths, cols: ColumnMap):
    """Yield contiguous runs from one or more CSV files with a header row."""
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in [cols.user, cols.label, *cols.channels, *([cols.session] if cols.session else [])]
                       if c not in (reader.fieldnames or [])]
            if missing:
                raise DataError(f"{path}: missing columns {missing}")
            run = None
            for line, row in enumerate(reader, start=2):
                key = (row[cols.user], row[cols.session] if cols.session else "0", row[cols.label])
                if run is None or key != (run.user, run.session, run.label):
                    if run is not None:
                        yield run
                    run = _Run(*key)
                try:
                    run.rows.append([float(row[c]) for c in cols.channels])
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{line}: non-numeric sample ({exc})") from exc
            if run is not None:
                yield run


def convert_long_csv(paths, out_dir, cols: ColumnMap, name: str, sampling_rate_hz: float = None) -> Manifest:
    rate = sampling_rate_hz or cols.sampling_rate_hz
    if not rate:
        raise DataError("sampling rate unknown; pass it explicitly")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    runs = list(read_runs(paths, cols))
    if not runs:
        raise DataError("no samples found")
    users = _dense_ids(r.user for r in runs)
    labels = _dense_ids(r.label for r in runs)
    sess_ids = {u: _dense_ids(r.session for r in runs if r.user == u) for u in users}

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs, counter = [], {}
    for r in runs:
        u, s, k = users[r.user], sess_ids[r.user][r.session], labels[r.label]
        n = counter.get((u, s, k), 0)
        counter[(u, s, k)] = n + 1
        rel = f"u{u}/s{s}_c{k}_r{n}.csv"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_recording(out / rel, np.asarray(r.rows, dtype=np.float32).T)
        recs.append(Recording(rel, u, s, k))

    manifest = Manifest(
        name=name,
        sampling_rate_hz=float(rate),
        channels=len(cols.channels),
        classes=len(labels),
        users=sorted(users.values()),
        sessions={users[u]: sorted(m.values()) for u, m in sess_ids.items()},
        recordings=recs,
        class_names=list(labels),
        root=out,
    )
    manifest.validate(check_files=True)
    manifest.save(out / "manifest.json")
    id_map = {"users": users, "labels": labels, "sessions": sess_ids}
    (out / "id_map.json").write_text(json.dumps(id_map, indent=2) + "\n")
    return manifest
