import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odphar.data import (
    Manifest,
    Recording,
    SplitPlan,
    WindowSet,
    fit_channel_stats,
    load_manifest,
    make_split,
    normalize_per_channel,
    normalize_split,
    read_recording,
    segment,
    stratified_split,
    window_count,
    window_dataset,
    window_steps,
    write_recording,
)
from odphar.errors import DataError, ParameterError
from odphar.synth import DriftProfile, SynthConfig, synth_drift_dataset, synth_recordings
from oracles import windows_bruteforce


# --- segmentation ---------------------------------------------------------


@pytest.mark.parametrize("length,expected", [(20, 1), (40, 3), (19, 0)])
def test_segment_boundaries(length, expected):
    rec = np.arange(2 * length, dtype=np.float32).reshape(2, length)
    assert len(segment(rec, 20)) == expected


def test_short_recording_warns_not_fatal():
    notes = []
    out = segment(np.zeros((3, 5)), 8, notes)
    assert out.shape == (0, 3, 8)
    assert len(notes) == 1 and "shorter" in notes[0]


@pytest.mark.parametrize("w", [0, 1, 3, 7])
def test_segment_rejects_bad_width(w):
    with pytest.raises(ParameterError):
        segment(np.zeros((1, 10)), w)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 32).map(lambda h: 2 * h), st.integers(0, 1024))
def test_segment_matches_bruteforce(w, length):
    starts = windows_bruteforce(length, w)
    assert window_count(length, w) == len(starts)
    rec = np.arange(length, dtype=np.float32)[None]
    out = segment(rec, w)
    assert len(out) == len(starts)
    for win, s in zip(out, starts):
        np.testing.assert_array_equal(win[0], np.arange(s, s + w))


def test_window_steps_round_half_up():
    assert window_steps(20) == 40
    assert window_steps(12.25) == 25
    assert window_steps(10) == 20


# --- normalisation --------------------------------------------------------


def test_two_point_channel_standardises_to_unit():
    x = np.array([[[1.0, 3.0]]], np.float32)
    np.testing.assert_array_equal(normalize_per_channel(x), [[[-1.0, 1.0]]])


def test_constant_channel_maps_to_zero():
    x = np.ones((4, 2, 6), np.float32) * 5
    x[:, 1] = np.arange(6)
    out = normalize_per_channel(x)
    assert (out[:, 0] == 0).all()
    assert abs(out[:, 1].std() - 1) < 1e-5


def test_standardised_channel_unchanged():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 3, 40))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    np.testing.assert_allclose(normalize_per_channel(x.astype(np.float32)), x, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-100, 100), st.floats(0.01, 100))
def test_normalised_moments(seed, loc, scale):
    rng = np.random.default_rng(seed)
    x = (loc + scale * rng.standard_normal((20, 3, 16))).astype(np.float32)
    out = normalize_per_channel(x).astype(np.float64)
    np.testing.assert_allclose(out.mean(axis=(0, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=(0, 2)), 1, atol=1e-5)


def test_stats_ignore_test_values():
    rng = np.random.default_rng(1)
    ws = WindowSet(rng.standard_normal((30, 2, 8)), np.arange(30) % 3, np.repeat([0, 1, 2], 10), np.zeros(30))
    plan = SplitPlan("L1PO", 2, seed=0)
    a = normalize_split(make_split(ws, plan))
    stats = fit_channel_stats(make_split(ws, plan).train.x)
    ws.x[ws.users == 2] *= 1000
    raw = make_split(ws, plan)
    b = normalize_split(raw)
    np.testing.assert_array_equal(a.train.x, b.train.x)
    np.testing.assert_array_equal(b.test.x, normalize_per_channel(raw.test.x, stats))


def test_fit_stats_empty_is_error():
    with pytest.raises(DataError):
        fit_channel_stats(np.zeros((0, 2, 4)))


# --- splits ---------------------------------------------------------------


def _grid_windows(users=10, sessions=2, per=5, classes=4):
    n = users * sessions * per
    u = np.repeat(np.arange(users), sessions * per)
    s = np.tile(np.repeat(np.arange(sessions), per), users)
    y = np.arange(n) % classes
    x = np.arange(n, dtype=np.float32)[:, None, None] * np.ones((1, 2, 4), np.float32)
    return WindowSet(x, y, u, s)


def test_l1po_excludes_target_user():
    ws = _grid_windows()
    sp = make_split(ws, SplitPlan("L1PO", 3, seed=0))
    assert set(sp.train.users.tolist()) == set(range(10)) - {3}
    assert (sp.train.users != 3).all()
    assert (sp.adapt.users == 3).all() and (sp.test.users == 3).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 9), st.integers(0, 2**32 - 1), st.sampled_from(["L1PO", "L1SO"]), st.integers(0, 1))
def test_split_partitions_target_windows(user, seed, protocol, session):
    ws = _grid_windows()
    plan = SplitPlan(protocol, user, session, seed=seed)
    sp = make_split(ws, plan)
    held = (ws.users == user) if protocol == "L1PO" else (ws.users == user) & (ws.sessions == session)
    ids = lambda part: sorted(part.x[:, 0, 0].astype(int).tolist())
    assert sorted(ids(sp.adapt) + ids(sp.test)) == np.flatnonzero(held).tolist()
    assert not set(ids(sp.adapt)) & set(ids(sp.test))
    assert ids(sp.train) == np.flatnonzero(~held).tolist()
    if protocol == "L1SO":
        # the target user's other session stays in training
        assert (sp.train.users == user).sum() == held.sum()


def test_hundred_windows_split_40_60():
    rng = np.random.default_rng(0)
    ws = WindowSet(np.zeros((120, 1, 2)), rng.integers(0, 3, 120), [0] * 100 + [1] * 20, np.zeros(120))
    sp = make_split(ws, SplitPlan("L1PO", 0, seed=5))
    assert (len(sp.adapt), len(sp.test)) == (40, 60)


def test_split_deterministic():
    ws = _grid_windows()
    a = make_split(ws, SplitPlan("L1PO", 1, seed=9))
    b = make_split(ws, SplitPlan("L1PO", 1, seed=9))
    np.testing.assert_array_equal(a.adapt.x, b.adapt.x)
    np.testing.assert_array_equal(a.test.x, b.test.x)


def test_stratified_quotas_largest_remainder():
    labels = np.array([0] * 7 + [1] * 7 + [2] * 6)
    first, rest = stratified_split(labels, 0.4, np.random.default_rng(0))
    # exact quotas 2.8, 2.8, 2.4 -> floors 2, 2, 2; the two spare seats go to the largest remainders
    assert len(first) == 8
    assert np.bincount(labels[first]).tolist() == [3, 3, 2]
    assert sorted(first.tolist() + rest.tolist()) == list(range(20))


def test_missing_target_is_error():
    with pytest.raises(DataError):
        make_split(_grid_windows(), SplitPlan("L1PO", 42))
    with pytest.raises(DataError):
        make_split(_grid_windows(), SplitPlan("L1SO", 0, 7))


def test_absent_class_in_adapt_warns():
    ws = WindowSet(np.zeros((12, 1, 2)), [0] * 9 + [1, 2, 2], [0] * 10 + [1, 1], np.zeros(12))
    sp = make_split(ws, SplitPlan("L1PO", 0, seed=0))
    # class 1 has a single window whose 0.4 quota rounds to 0 seats
    assert sp.warnings and "[1]" in sp.warnings[0]


def test_bad_plans():
    with pytest.raises(ParameterError):
        SplitPlan("L2PO", 0)
    with pytest.raises(ParameterError):
        SplitPlan("L1SO", 0)
    with pytest.raises(ParameterError):
        SplitPlan("L1PO", 0, adapt_fraction=1.0)


# --- manifests, recordings, archives ---------------------------------------


def _tiny_dataset(root):
    (root / "u0").mkdir()
    write_recording(root / "u0" / "a.csv", np.arange(12, dtype=np.float32).reshape(2, 6))
    m = Manifest("tiny", 2.0, 2, 3, [0], {0: [0]}, [Recording("u0/a.csv", 0, 0, 1)], root=root)
    m.save(root / "manifest.json")
    return m


def test_manifest_round_trip(tmp_path):
    _tiny_dataset(tmp_path)
    m = load_manifest(tmp_path / "manifest.json")
    assert m.users == [0] and m.sessions == {0: [0]} and m.window_steps == 4
    rec = read_recording(tmp_path / "u0" / "a.csv", 2)
    np.testing.assert_array_equal(rec, np.arange(12).reshape(2, 6))
    ws = window_dataset(m)
    assert ws.x.shape == (2, 2, 4) and ws.y.tolist() == [1, 1]


@pytest.mark.parametrize(
    "patch,msg",
    [
        (lambda d: d["recordings"][0].update(label=3), "label"),
        (lambda d: d.update(users=[0, 0]), "unique"),
        (lambda d: d["recordings"][0].update(path="missing.csv"), "missing"),
        (lambda d: d["recordings"][0].update(user=4), "unknown user"),
        (lambda d: d.update(channels=0), "invalid"),
        (lambda d: d.pop("classes"), "invalid"),
    ],
)
def test_manifest_invariants(tmp_path, patch, msg):
    _tiny_dataset(tmp_path)
    d = json.loads((tmp_path / "manifest.json").read_text())
    patch(d)
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(DataError, match=msg):
        load_manifest(tmp_path / "manifest.json")


def test_channel_count_mismatch(tmp_path):
    write_recording(tmp_path / "r.csv", np.zeros((3, 4)))
    with pytest.raises(DataError):
        read_recording(tmp_path / "r.csv", 2)


def test_window_archive_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    ws = WindowSet(rng.standard_normal((7, 3, 10)), rng.integers(0, 4, 7), rng.integers(0, 5, 7), rng.integers(0, 2, 7))
    ws.save(tmp_path / "w.odfs")
    back = WindowSet.load(tmp_path / "w.odfs")
    for a in ("x", "y", "users", "sessions"):
        np.testing.assert_array_equal(getattr(back, a), getattr(ws, a))


# --- synthetic drift ------------------------------------------------------


def test_synth_same_seed_byte_identical(tmp_path):
    a = synth_drift_dataset(tmp_path / "a", users=2, classes=2, seed=4, seconds=4)
    synth_drift_dataset(tmp_path / "b", users=2, classes=2, seed=4, seconds=4)
    for r in a.recordings:
        assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_synth_manifest_loads(tmp_path):
    synth_drift_dataset(tmp_path, users=3, classes=4, seed=1, seconds=4)
    m = load_manifest(tmp_path / "manifest.json")
    assert m.users == [0, 1, 2] and len(m.recordings) == 3 * 2 * 4
    ws = window_dataset(m)
    assert ws.x.shape[1:] == (3, 20)


def test_zero_drift_users_share_distribution():
    # with magnitude 0 users differ only through noise draws: per-class means agree
    cfg = SynthConfig(users=4, classes=3, drift=DriftProfile(magnitude=0.0), seed=2, noise=0.0, seconds=60)
    means = {}
    for u, s, k, sig in synth_recordings(cfg):
        means.setdefault(k, []).append(sig.mean(axis=1))
    for k, ms in means.items():
        np.testing.assert_allclose(np.std(ms, axis=0), 0, atol=0.15)


def test_drift_changes_users():
    cfg = SynthConfig(users=3, classes=2, drift=0.8, seed=2, noise=0.0)
    sigs = {(u, k): sig for u, s, k, sig in synth_recordings(cfg) if s == 0}
    assert not np.allclose(sigs[0, 0].mean(axis=1), sigs[1, 0].mean(axis=1), atol=0.1)


def test_synth_rejects_tiny_configs():
    with pytest.raises(ParameterError):
        SynthConfig(users=1)
    with pytest.raises(ParameterError):
        SynthConfig(classes=1)
    with pytest.raises(ParameterError):
        DriftProfile(magnitude=-1)
