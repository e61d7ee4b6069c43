"""Leave-one-person-out / leave-one-session-out experiments with pre- and post-adaptation accuracy.

Each fold trains a general model on the non-held-out windows, measures
accuracy on the held-out test part (pre), streams the held-out adapt part
through :func:`adapt_session` and measures the same test part again (post).

Aggregates: ``mean_pre`` and ``mean_post`` pool every test window of every
fold (sample-weighted); ``mean_improvement`` is the unweighted mean of the
per-fold ``post - pre``. With equal test sizes the two readings coincide,
and :func:`aggregate` checks that they do.
"""

from __future__ import annotations

import hashlib
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, AdaptState, adapt_session, place_model
from .cost import estimate_update, load_profile
from .data import L1PO, L1SO, Manifest, SplitPlan, WindowSet, make_split, normalize_split, window_dataset
from .errors import DataError, ParameterError
from .nn import ArchConfig, Model
from .train import TrainConfig, evaluate, train_general_model

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    seed: int = 0
    jobs: int = 1
    profile: str = "gap9"

    def to_dict(self):
        return {
            "train": self.train.to_dict(),
            "arch": self.arch.to_dict(),
            "adapt": self.adapt.to_dict(),
            "seed": self.seed,
            "profile": self.profile,
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        arch = dict(d.get("arch", {}))
        if "block_channels" in arch:
            arch["block_channels"] = tuple(arch["block_channels"])
        return cls(
            train=TrainConfig(**d.get("train", {})),
            arch=ArchConfig(**arch),
            adapt=AdaptConfig(**d.get("adapt", {})),
            seed=int(d.get("seed", 0)),
            jobs=int(d.get("jobs", 1)),
            profile=d.get("profile", "gap9"),
        )


@dataclass
class FoldRecord:
    protocol: str
    target_user: int
    target_session: int = None
    status: str = "ok"
    seed: int = 0
    pre_odp_acc: float = None
    post_odp_acc: float = None
    improvement: float = None
    pre_correct: int = 0
    post_correct: int = 0
    n_train: int = 0
    n_adapt: int = 0
    n_test: int = 0
    steps: int = 0
    faults: int = 0
    backbone_unchanged: bool = True
    warnings: list = field(default_factory=list)
    error: str = None
    cost: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def fold_seeds(seed: int, index: int):
    """``(train_seed, split_seed)`` for fold ``index``, independent of every other fold."""
    a, b = np.random.SeedSequence([seed, index]).generate_state(2, np.uint32)
    return int(a), int(b)


def run_fold(ws: WindowSet, classes: int, plan: SplitPlan, cfg: ExperimentConfig, index: int,
             keep_model: bool = False):
    """One fold. Returns the record, plus ``(model, adapted_state, split)`` when ``keep_model``."""
    train_seed, _ = fold_seeds(cfg.seed, index)
    split = normalize_split(make_split(ws, plan))
    tcfg = TrainConfig(**{**cfg.train.to_dict(), "seed": train_seed})
    model = train_general_model(split.train.x, split.train.y, classes, tcfg, cfg.arch)
    pre = evaluate(model, split.test.x, split.test.y)

    state = AdaptState.from_classifier(model.classifier, cfg.adapt.learning_rate, cfg.adapt.ema_decay)
    rec = FoldRecord(plan.protocol, plan.target_user, plan.target_session, seed=train_seed)
    unchanged = True
    for _ in range(cfg.adapt.epochs):
        rep = adapt_session(state, model.backbone, zip(split.adapt.x, split.adapt.y))
        unchanged &= rep.backbone_unchanged
        rec.faults += rep.faults
    post = evaluate(Model(model.backbone, state.classifier), split.test.x, split.test.y)

    rec.pre_odp_acc, rec.post_odp_acc = pre.accuracy, post.accuracy
    rec.improvement = post.accuracy - pre.accuracy
    rec.pre_correct, rec.post_correct = pre.correct, post.correct
    rec.n_train, rec.n_adapt, rec.n_test = len(split.train), len(split.adapt), len(split.test)
    rec.steps = state.step_count
    rec.backbone_unchanged = bool(unchanged)
    rec.warnings = split.warnings + model.metadata.get("warnings", [])
    profile = load_profile(cfg.profile)
    per_step = estimate_update(profile, model.classifier)
    placement = place_model(model, strict=False)
    rec.cost = {
        "profile": profile.name,
        "update_latency_s": per_step.latency_s,
        "update_energy_j": per_step.energy_j,
        "session_latency_s": per_step.latency_s * rec.steps,
        "session_energy_j": per_step.energy_j * rec.steps,
        "l1_used": placement.l1_used,
        "l2_used": placement.l2_used,
        "l1_ok": placement.l1_ok,
        "l2_ok": placement.l2_ok,
    }
    if keep_model:
        return rec, (model, state, split)
    return rec


def _safe_fold(args):
    ws, classes, plan, cfg, index = args
    try:
        return run_fold(ws, classes, plan, cfg, index)
    except Exception as exc:  # a failed fold must not stop the sweep
        log.error("fold %d (%s user %s) failed: %s", index, plan.protocol, plan.target_user, exc)
        return FoldRecord(
            plan.protocol, plan.target_user, plan.target_session, status="failed",
            seed=fold_seeds(cfg.seed, index)[0], error=f"{type(exc).__name__}: {exc}",
            warnings=[traceback.format_exc(limit=3)],
        )


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    protocol: str
    dataset: str
    manifest_sha256: str
    config: dict
    folds: list
    warnings: list = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        return aggregate(self.folds)

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "dataset": self.dataset,
            "manifest_sha256": self.manifest_sha256,
            "config": self.config,
            "folds": [asdict(f) for f in self.folds],
            "aggregates": self.aggregates,
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(d["protocol"], d["dataset"], d["manifest_sha256"], d["config"],
                   [FoldRecord(**f) for f in d["folds"]], d.get("warnings", []))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aggregate(folds) -> dict:
    ok = [f for f in folds if f.ok]
    out = {"folds": len(folds), "failed": len(folds) - len(ok)}
    if not ok:
        return out
    n = sum(f.n_test for f in ok)
    imp = [f.improvement for f in ok]
    mean_pre = sum(f.pre_correct for f in ok) / n
    mean_post = sum(f.post_correct for f in ok) / n
    mean_imp = float(np.mean(imp))
    if len({f.n_test for f in ok}) == 1:
        assert abs(mean_imp - (mean_post - mean_pre)) < 1e-9, "improvement readings disagree at equal test sizes"
    out.update(
        mean_pre=mean_pre,
        mean_post=mean_post,
        mean_improvement=mean_imp,
        diff_of_means=mean_post - mean_pre,
        min_improvement=min(imp),
        max_improvement=max(imp),
        total_steps=sum(f.steps for f in ok),
    )
    return out


def manifest_digest(manifest: Manifest) -> str:
    """SHA-256 over the canonical manifest JSON and every recording's bytes, in manifest order."""
    h = hashlib.sha256(json.dumps(manifest.to_dict(), sort_keys=True).encode())
    for r in manifest.recordings:
        h.update((manifest.root / r.path).read_bytes())
    return h.hexdigest()


def _run(manifest: Manifest, protocol: str, plans, cfg: ExperimentConfig, ws=None, warnings=()):
    ws = ws if ws is not None else window_dataset(manifest)
    jobs = [(ws, manifest.classes, p, cfg, i) for i, p in enumerate(plans)]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            folds = list(pool.map(_safe_fold, jobs))
    else:
        folds = [_safe_fold(j) for j in jobs]
    return EvalReport(protocol, manifest.name, manifest_digest(manifest), cfg.to_dict(), folds, list(warnings))


def run_l1po(manifest: Manifest, cfg: ExperimentConfig = None, ws: WindowSet = None) -> EvalReport:
    """One fold per user: train on every other user."""
    cfg = cfg or ExperimentConfig()
    if len(manifest.users) < 2:
        raise ParameterError("L1PO needs at least two users")
    plans = [SplitPlan(L1PO, u, adapt_fraction=cfg.adapt.adapt_fraction, seed=fold_seeds(cfg.seed, i)[1])
             for i, u in enumerate(manifest.users)]
    return _run(manifest, L1PO, plans, cfg, ws)


def run_l1so(manifest: Manifest, cfg: ExperimentConfig = None, ws: WindowSet = None) -> EvalReport:
    """One fold per (user, session) for users with at least two sessions; others are skipped."""
    cfg = cfg or ExperimentConfig()
    plans, notes = [], []
    for u in manifest.users:
        sessions = manifest.sessions.get(u, [])
        if len(sessions) < 2:
            notes.append(f"user {u} has a single session; skipped")
            log.warning(notes[-1])
            continue
        for s in sessions:
            plans.append((u, s))
    if not plans:
        raise DataError("no user has two or more sessions")
    plans = [SplitPlan(L1SO, u, s, cfg.adapt.adapt_fraction, fold_seeds(cfg.seed, i)[1])
             for i, (u, s) in enumerate(plans)]
    return _run(manifest, L1SO, plans, cfg, ws, notes)


def run_protocol(manifest, protocol: str, cfg=None, ws=None) -> EvalReport:
    protocol = protocol.upper()
    if protocol == L1PO:
        return run_l1po(manifest, cfg, ws)
    if protocol == L1SO:
        return run_l1so(manifest, cfg, ws)
    raise ParameterError(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# drift and summaries


def _pooled_pre_by_user(report: EvalReport) -> dict:
    acc = {}
    for f in report.folds:
        if f.ok:
            c, n = acc.get(f.target_user, (0, 0))
            acc[f.target_user] = (c + f.pre_correct, n + f.n_test)
    return {u: c / n for u, (c, n) in acc.items()}


def quantify_drift(l1po: EvalReport, l1so: EvalReport) -> dict:
    """User-induced drift: L1SO mean pre-adaptation accuracy minus L1PO's, overall and per user."""
    if l1po.manifest_sha256 != l1so.manifest_sha256:
        raise ParameterError("reports were produced from different manifests")
    a, b = l1po.aggregates, l1so.aggregates
    if "mean_pre" not in a or "mean_pre" not in b:
        raise DataError("a report has no successful folds")
    po, so = _pooled_pre_by_user(l1po), _pooled_pre_by_user(l1so)
    return {
        "dataset": l1po.dataset,
        "manifest_sha256": l1po.manifest_sha256,
        "l1po_mean_pre": a["mean_pre"],
        "l1so_mean_pre": b["mean_pre"],
        "drift": b["mean_pre"] - a["mean_pre"],
        "per_user": {str(u): so[u] - po[u] for u in sorted(set(po) & set(so))},
    }


def _pct(v) -> str:
    return f"{100 * v:.2f}"


def _signed(v) -> str:
    return f"{100 * v:+.2f}"


def summary_row(report: EvalReport) -> dict:
    agg = report.aggregates
    if "mean_pre" not in agg:
        raise DataError("report has no successful folds to summarise")
    return {
        "dataset": report.dataset,
        "protocol": report.protocol,
        "pre": _pct(agg["mean_pre"]),
        "post": _pct(agg["mean_post"]),
        "improvement": _signed(agg["mean_improvement"]),
        "diff_of_means": _signed(agg["diff_of_means"]),
        "range": f"[{_signed(agg['min_improvement'])}, {_signed(agg['max_improvement'])}]",
        "folds": agg["folds"],
        "failed": agg["failed"],
    }


def summarize(reports, drift: dict = None) -> str:
    """Markdown table, one row per report: pre, post, mean per-fold improvement, difference of means, range."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    if not reports:
        raise ParameterError("nothing to summarise")
    lines = [
        "| Dataset | Protocol | Pre-ODP (%) | Post-ODP (%) | Improvement (mean of folds) | Post - Pre (means) | Range | Folds |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in reports:
        row = summary_row(r)
        folds = f"{row['folds']}" + (f" ({row['failed']} failed)" if row["failed"] else "")
        lines.append(
            f"| {row['dataset']} | {row['protocol']} | {row['pre']} | {row['post']} | {row['improvement']} "
            f"| {row['diff_of_means']} | {row['range']} | {folds} |"
        )
    if drift is not None:
        lines += ["", f"User-induced drift (L1SO - L1PO, pre-ODP): {_signed(drift['drift'])} points"]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    if "mean_pre" in report.aggregates:
        md = summarize(report)
    else:
        md = f"{report.dataset} {report.protocol}: all {len(report.folds)} folds failed\n"
    (out / "report.md").write_text(md)
    return out / "report.json"
