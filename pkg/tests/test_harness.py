import json

import pytest

import odphar.harness as harness
from odphar.adapt import AdaptConfig
from odphar.data import Manifest, SplitPlan, window_dataset
from odphar.errors import DataError, ParameterError
from odphar.harness import (
    EvalReport,
    ExperimentConfig,
    FoldRecord,
    aggregate,
    fold_seeds,
    quantify_drift,
    run_fold,
    run_l1po,
    run_l1so,
    summarize,
    write_report,
)
from odphar.nn import ArchConfig
from odphar.synth import synth_drift_dataset
from odphar.train import TrainConfig, evaluate

FAST = ExperimentConfig(
    train=TrainConfig(epochs=2, seed=0),
    arch=ArchConfig(stem_filters=4, block_channels=(4, 4, 4), dropout=0.0),
    adapt=AdaptConfig(),
    seed=3,
)


def _cfg(**adapt):
    return ExperimentConfig(FAST.train, FAST.arch, AdaptConfig(**adapt), FAST.seed)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return synth_drift_dataset(tmp_path_factory.mktemp("synth"), users=3, classes=2, drift=0.8, seed=1, seconds=8)


@pytest.fixture(scope="module")
def l1po(manifest):
    return run_l1po(manifest, FAST)


def test_one_fold_per_user(l1po):
    assert [f.target_user for f in l1po.folds] == [0, 1, 2]
    assert all(f.ok for f in l1po.folds)


def test_two_users_two_folds(tmp_path):
    m = synth_drift_dataset(tmp_path, users=2, classes=2, seed=0, seconds=6)
    assert len(run_l1po(m, FAST).folds) == 2


def test_improvement_is_exact_difference(l1po):
    for f in l1po.folds:
        assert f.improvement == f.post_odp_acc - f.pre_odp_acc
        assert f.pre_odp_acc == f.pre_correct / f.n_test
        assert f.steps == f.n_adapt and f.backbone_unchanged


def test_aggregates_recomputable(l1po):
    d = json.loads(l1po.to_json())
    back = EvalReport.from_dict(d)
    assert back.aggregates == d["aggregates"]
    folds = d["folds"]
    pooled = sum(f["pre_correct"] for f in folds) / sum(f["n_test"] for f in folds)
    assert d["aggregates"]["mean_pre"] == pooled


def test_zero_lr_is_identity(manifest):
    rep = run_l1po(manifest, _cfg(learning_rate=0.0))
    for f in rep.folds:
        assert f.post_odp_acc == f.pre_odp_acc and f.post_correct == f.pre_correct
        assert f.improvement == 0.0


def test_zero_epochs_is_identity(manifest):
    rep = run_l1po(manifest, _cfg(epochs=0))
    for f in rep.folds:
        assert f.steps == 0 and f.post_correct == f.pre_correct


def test_pre_equals_plain_evaluate(manifest):
    ws = window_dataset(manifest)
    plan = SplitPlan("L1PO", 1, seed=fold_seeds(FAST.seed, 1)[1])
    rec, (model, _, split) = run_fold(ws, manifest.classes, plan, FAST, 1, keep_model=True)
    assert rec.pre_odp_acc == evaluate(model, split.test.x, split.test.y).accuracy


def test_same_seeds_identical_json(manifest, l1po):
    assert run_l1po(manifest, FAST).to_json() == l1po.to_json()


def test_parallel_matches_serial(manifest, l1po):
    cfg = ExperimentConfig(FAST.train, FAST.arch, FAST.adapt, FAST.seed, jobs=2)
    assert run_l1po(manifest, cfg).to_json() == l1po.to_json()


def test_l1so_enumerates_sessions(manifest):
    rep = run_l1so(manifest, FAST)
    assert [(f.target_user, f.target_session) for f in rep.folds] == [(u, s) for u in range(3) for s in range(2)]
    # the target user's other session is in training
    assert all(f.n_train > 0 for f in rep.folds)


def test_single_session_user_skipped(manifest):
    m = Manifest(manifest.name, manifest.sampling_rate_hz, manifest.channels, manifest.classes, manifest.users,
                 {0: [0, 1], 1: [0], 2: [0, 1]},
                 [r for r in manifest.recordings if not (r.user == 1 and r.session == 1)], root=manifest.root)
    rep = run_l1so(m, FAST)
    assert [f.target_user for f in rep.folds] == [0, 0, 2, 2]
    assert rep.warnings == ["user 1 has a single session; skipped"]


def test_failed_fold_recorded_and_sweep_continues(manifest, monkeypatch):
    real = harness.train_general_model

    def flaky(x, y, classes, cfg, arch):
        if cfg.seed == fold_seeds(FAST.seed, 1)[0]:
            raise RuntimeError("boom")
        return real(x, y, classes, cfg, arch)

    monkeypatch.setattr(harness, "train_general_model", flaky)
    rep = run_l1po(manifest, FAST)
    assert [f.status for f in rep.folds] == ["ok", "failed", "ok"]
    assert "boom" in rep.folds[1].error
    assert rep.aggregates["failed"] == 1 and rep.aggregates["folds"] == 3


def test_l1po_needs_two_users(manifest):
    m = Manifest("one", 10.0, 3, 2, [0], {0: [0]}, [], root=manifest.root)
    with pytest.raises(ParameterError):
        run_l1po(m, FAST)


def test_write_report(tmp_path, l1po):
    path = write_report(l1po, tmp_path)
    assert json.loads(path.read_text())["protocol"] == "L1PO"
    assert (tmp_path / "report.md").read_text().startswith("| Dataset")


# --- drift and summary arithmetic ----------------------------------------


def _report(accs, protocol="L1PO", sha="x", n_test=100):
    folds = []
    for i, (pre, post) in enumerate(accs):
        folds.append(FoldRecord(protocol, i, pre_odp_acc=pre, post_odp_acc=post, improvement=post - pre,
                                pre_correct=round(pre * n_test), post_correct=round(post * n_test), n_test=n_test))
    return EvalReport(protocol, "d", sha, {}, folds)


def test_drift_identical_reports_zero():
    r = _report([(0.8, 0.9), (0.7, 0.75)])
    d = quantify_drift(r, r)
    assert d["drift"] == 0 and d["per_user"] == {"0": 0.0, "1": 0.0}


def test_drift_arithmetic():
    d = quantify_drift(_report([(0.70, 0.9)]), _report([(0.80, 0.8)], "L1SO"))
    assert d["drift"] == pytest.approx(0.10, abs=1e-12)


def test_drift_manifest_mismatch():
    with pytest.raises(ParameterError):
        quantify_drift(_report([(0.7, 0.8)]), _report([(0.8, 0.8)], "L1SO", sha="y"))


def test_summary_single_fold_row():
    table = summarize(_report([(0.90, 0.94)]))
    assert "| 90.00 | 94.00 | +4.00 | +4.00 | [+4.00, +4.00] |" in table


def test_summary_range():
    table = summarize(_report([(0.9000, 0.9199), (0.9000, 0.9475)], n_test=10_000))
    assert "[+1.99, +4.75]" in table


def test_readings_agree_at_equal_sizes_and_may_differ_otherwise():
    eq = aggregate(_report([(0.5, 0.9), (0.8, 0.85)]).folds)
    assert eq["mean_improvement"] == pytest.approx(eq["diff_of_means"], abs=1e-12)
    a = _report([(0.5, 0.9)], n_test=10).folds + _report([(0.8, 0.85)], n_test=100).folds
    neq = aggregate(a)
    assert neq["mean_improvement"] == pytest.approx(0.225)
    assert neq["diff_of_means"] == pytest.approx((9 + 85 - 5 - 80) / 110)


def test_summary_needs_successful_folds():
    r = EvalReport("L1PO", "d", "x", {}, [FoldRecord("L1PO", 0, status="failed")])
    with pytest.raises(DataError):
        summarize(r)
