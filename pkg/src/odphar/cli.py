"""``odphar`` command line: synth, convert, train, adapt, eval, drift, cost, calibrate.

Exit codes: 0 success, 1 experiment failure, 2 usage error (bad flags,
missing or malformed inputs). Experiment parameters come from ``--config``
(JSON, same layout as a report's ``config`` block) with explicit flags winning.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adapt import AdaptState, adapt_session, place_model
from .container import load_model, save_model
from .convert import PRESETS, ColumnMap, convert_long_csv
from .cost import REFERENCE_CLASSES, REFERENCE_INPUT, calibrate_builtin, fmt_si, load_profile, model_cost
from .data import (
    L1PO,
    ChannelStats,
    SplitPlan,
    fit_channel_stats,
    load_manifest,
    make_split,
    normalize_per_channel,
    window_dataset,
)
from .errors import OdpharError
from .harness import (
    EvalReport,
    ExperimentConfig,
    quantify_drift,
    run_l1po,
    run_l1so,
    run_protocol,
    summarize,
    write_report,
)
from .nn import ArchConfig, Model
from .synth import DriftProfile, SynthConfig, synth_drift_dataset
from .train import TrainConfig, evaluate, init_weights, train_general_model

log = logging.getLogger("odphar")

MODEL_FILE = "model.odfs"


class UsageError(Exception):
    pass


class ExperimentFailure(Exception):
    pass


# flag dest -> (config section, key)
OVERRIDES = {
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "train_lr": ("train", "learning_rate"),
    "momentum": ("train", "momentum"),
    "weight_decay": ("train", "weight_decay"),
    "clip_norm": ("train", "clip_norm"),
    "patience": ("train", "patience"),
    "val_fraction": ("train", "val_fraction"),
    "stem_filters": ("arch", "stem_filters"),
    "stem_kernel": ("arch", "stem_kernel"),
    "blocks": ("arch", "block_channels"),
    "block_kernel": ("arch", "block_kernel"),
    "dropout": ("arch", "dropout"),
    "lr": ("adapt", "learning_rate"),
    "ema_decay": ("adapt", "ema_decay"),
    "adapt_epochs": ("adapt", "epochs"),
    "adapt_frac": ("adapt", "adapt_fraction"),
    "seed": (None, "seed"),
    "jobs": (None, "jobs"),
    "profile": (None, "profile"),
}


def _channels_list(s):
    try:
        return [int(v) for v in s.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _add_experiment_flags(p, adapt=True):
    p.add_argument("--config", type=Path, help="JSON experiment config; flags override it")
    p.add_argument("--seed", type=int)
    g = p.add_argument_group("offline training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--train-lr", type=float, help="offline SGD learning rate")
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--clip-norm", type=float, help="global gradient-norm clip, 0 disables")
    g.add_argument("--patience", type=int, help="early-stopping patience (needs --val-fraction)")
    g.add_argument("--val-fraction", type=float)
    g = p.add_argument_group("architecture")
    g.add_argument("--stem-filters", type=int)
    g.add_argument("--stem-kernel", type=int)
    g.add_argument("--blocks", type=_channels_list, help="three residual block widths, e.g. 32,64,64")
    g.add_argument("--block-kernel", type=int)
    g.add_argument("--dropout", type=float)
    if adapt:
        g = p.add_argument_group("on-device adaptation")
        g.add_argument("--lr", type=float, help="head learning rate")
        g.add_argument("--ema-decay", type=float)
        g.add_argument("--adapt-epochs", type=int, help="passes over the adapt split")
        g.add_argument("--adapt-frac", type=float, help="fraction of target windows streamed for adaptation")
        g.add_argument("--profile", help="device profile name or JSON path for cost estimates")


def experiment_config(args) -> ExperimentConfig:
    base = {}
    if getattr(args, "config", None) is not None:
        try:
            base = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        if not isinstance(base, dict):
            raise UsageError("config must be a JSON object")
    d = {k: dict(base.get(k, {})) for k in ("train", "arch", "adapt")}
    for k in ("seed", "jobs", "profile"):
        if k in base:
            d[k] = base[k]
    for dest, (section, key) in OVERRIDES.items():
        v = getattr(args, dest, None)
        if v is None:
            continue
        if section is None:
            d[key] = v
        else:
            d[section][key] = v
    try:
        return ExperimentConfig.from_dict(d)
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}")


def _manifest(path):
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    return load_manifest(path)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}")
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    if args.users < 2:
        raise UsageError("--users must be at least 2 (leave-one-person-out needs two users)")
    drift = DriftProfile(magnitude=args.drift)
    cfg = SynthConfig(users=args.users, classes=args.classes, drift=drift, seed=args.seed, sessions=args.sessions,
                      channels=args.channels, sampling_rate_hz=args.rate, seconds=args.seconds, noise=args.noise)
    m = synth_drift_dataset(_out_dir(args.out), cfg)
    print(f"{m.name}: {len(m.users)} users {m.users}, {m.classes} classes, {len(m.recordings)} recordings")
    print(f"manifest: {Path(args.out) / 'manifest.json'}")


def cmd_convert(args):
    if args.preset:
        cols = PRESETS[args.preset]
    else:
        if not (args.user_col and args.label_col and args.channel_cols):
            raise UsageError("without --preset, --user-col, --label-col and --channel-cols are required")
        cols = ColumnMap(args.user_col, args.label_col, args.channel_cols.split(","), args.session_col)
    for p in args.inputs:
        if not Path(p).is_file():
            raise UsageError(f"input not found: {p}")
    m = convert_long_csv(args.inputs, _out_dir(args.out), cols, args.name or Path(args.out).name, args.rate)
    print(f"{m.name}: {len(m.users)} users, {m.classes} classes, {len(m.recordings)} recordings")


def cmd_train(args):
    cfg = experiment_config(args)
    m = _manifest(args.manifest)
    ws = window_dataset(m)
    if args.exclude_user is not None:
        ws = ws.subset(np.flatnonzero(ws.users != args.exclude_user))
    if len(ws) == 0:
        raise UsageError("no training windows")
    stats = fit_channel_stats(ws.x)
    tcfg = TrainConfig(**{**cfg.train.to_dict(), "seed": cfg.seed})
    try:
        model = train_general_model(normalize_per_channel(ws.x, stats), ws.y, m.classes, tcfg, cfg.arch)
    except FloatingPointError as exc:
        raise ExperimentFailure(f"training failed: {exc}")
    if not np.isfinite(model.metadata["final_loss"]):
        raise ExperimentFailure("training diverged (non-finite loss)")
    model.metadata.update(
        arch=cfg.arch.to_dict(),
        dataset=m.name,
        excluded_user=args.exclude_user,
        channel_mean=stats.mean.tolist(),
        channel_std=stats.std.tolist(),
    )
    out = _out_dir(args.out)
    save_model(out / MODEL_FILE, model)
    acc = evaluate(model, normalize_per_channel(ws.x, stats), ws.y).accuracy
    print(f"trained on {len(ws)} windows, final loss {model.metadata['final_loss']:.4f}, train accuracy {100 * acc:.2f}%")
    print(f"weights: {out / MODEL_FILE}")


def _load_model(path) -> Model:
    if not Path(path).is_file():
        raise UsageError(f"model not found: {path}")
    return load_model(path)


def cmd_adapt(args):
    cfg = experiment_config(args)
    model = _load_model(args.model)
    meta = model.metadata
    if "channel_mean" not in meta:
        raise UsageError("model has no normalisation statistics (train it with `odphar train`)")
    stats = ChannelStats(np.asarray(meta["channel_mean"]), np.asarray(meta["channel_std"]))
    m = _manifest(args.manifest)
    ws = window_dataset(m)
    ws = ws.with_x(normalize_per_channel(ws.x, stats))
    if args.user not in m.users:
        raise UsageError(f"user {args.user} not in manifest")
    split = make_split(ws, SplitPlan(L1PO, args.user, adapt_fraction=cfg.adapt.adapt_fraction, seed=cfg.seed))
    pre = evaluate(model, split.test.x, split.test.y)
    state = AdaptState.from_classifier(model.classifier, cfg.adapt.learning_rate, cfg.adapt.ema_decay)
    sessions = [adapt_session(state, model.backbone, zip(split.adapt.x, split.adapt.y)).to_dict()
                for _ in range(cfg.adapt.epochs)]
    adapted = Model(model.backbone, state.classifier, dict(meta, adapted_user=args.user, adapt=cfg.adapt.to_dict()))
    post = evaluate(adapted, split.test.x, split.test.y)
    out = _out_dir(args.out)
    save_model(out / MODEL_FILE, adapted)
    state.save(out / "adapt_state.odfs")
    report = {
        "user": args.user,
        "pre_odp_acc": pre.accuracy,
        "post_odp_acc": post.accuracy,
        "improvement": post.accuracy - pre.accuracy,
        "n_adapt": len(split.adapt),
        "n_test": len(split.test),
        "sessions": sessions,
        "warnings": split.warnings,
        "cost": model_cost(load_profile(cfg.profile), adapted),
    }
    _write_json(out / "session.json", report)
    print(f"user {args.user}: pre-ODP {100 * pre.accuracy:.2f}%  post-ODP {100 * post.accuracy:.2f}%  "
          f"({100 * report['improvement']:+.2f})")


def _check_report(report: EvalReport):
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    failed = [f for f in report.folds if not f.ok]
    for f in failed:
        print(f"fold user {f.target_user} failed: {f.error}", file=sys.stderr)
    if len(failed) == len(report.folds):
        raise ExperimentFailure("every fold failed")


def cmd_eval(args):
    cfg = experiment_config(args)
    cfg.jobs = args.jobs
    m = _manifest(args.manifest)
    report = run_protocol(m, args.protocol, cfg)
    path = write_report(report, _out_dir(args.out))
    _check_report(report)
    print(summarize(report), end="")
    print(f"report: {path}")


def cmd_drift(args):
    cfg = experiment_config(args)
    cfg.jobs = args.jobs
    m = _manifest(args.manifest)
    out = _out_dir(args.out)
    ws = window_dataset(m)
    l1po, l1so = run_l1po(m, cfg, ws), run_l1so(m, cfg, ws)
    write_report(l1po, out / "l1po")
    write_report(l1so, out / "l1so")
    _check_report(l1po)
    _check_report(l1so)
    drift = quantify_drift(l1po, l1so)
    _write_json(out / "drift.json", drift)
    table = summarize([l1po, l1so], drift)
    (out / "summary.md").write_text(table)
    print(table, end="")


def cmd_cost(args):
    profile = load_profile(args.profile)
    if args.model:
        model = _load_model(args.model)
    else:
        model = init_weights(ArchConfig(), REFERENCE_INPUT, REFERENCE_CLASSES, 0)
    cost = model_cost(profile, model)
    placement = place_model(model, strict=False)
    cost["placement"] = placement.to_dict()
    inf, upd = cost["inference"], cost["update"]
    print(f"profile {profile.name}, input {tuple(model.backbone.input_shape)}, head "
          f"{model.classifier.in_features}x{model.classifier.out_features}")
    print(f"inference: {inf['macs']:,} MACs  {fmt_si(inf['latency_s'], 's')}  {fmt_si(inf['energy_j'], 'J')}")
    print(f"update:    {upd['macs']:,} MACs  {fmt_si(upd['latency_s'], 's')}  {fmt_si(upd['energy_j'], 'J')}")
    print(f"L1 {placement.l1_used:,} / {placement.l1_capacity:,} B ({'ok' if placement.l1_ok else 'OVERFLOW'})  "
          f"L2 {placement.l2_used:,} / {placement.l2_capacity:,} B ({'ok' if placement.l2_ok else 'OVERFLOW'})")
    if args.json:
        _write_json(args.json, cost)


def cmd_calibrate(args):
    out = _out_dir(args.out)
    for name, res in calibrate_builtin().items():
        res.profile.save(out / f"{name}.json")
        worst = max(abs(v) for v in res.residuals.values())
        print(f"{name}: converged={res.success} in {res.seconds:.3f}s, worst anchor error {100 * worst:.3f}% "
              f"-> {out / (name + '.json')}")
        if not res.success:
            raise ExperimentFailure(f"calibration of {name} did not converge")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="odphar", description="Train a general HAR model, personalise its head on-device.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-user dataset with user-induced drift")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=6)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--drift", type=float, default=0.8, help="user transform magnitude, 0 = no drift")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sessions", type=int, default=2)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--rate", type=float, default=10.0, help="sampling rate in Hz")
    p.add_argument("--seconds", type=float, default=24.0, help="length of each recording")
    p.add_argument("--noise", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert long-format CSV files to a manifest and recordings")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--user-col")
    p.add_argument("--session-col")
    p.add_argument("--label-col")
    p.add_argument("--channel-cols", help="comma-separated channel column names")
    p.add_argument("--rate", type=float, help="sampling rate in Hz (required without a preset)")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train the general model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude-user", type=int, help="leave this user out of training")
    _add_experiment_flags(p, adapt=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="personalise a trained model's head on one user's data")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="cross-validate with pre/post adaptation accuracy per fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", choices=["l1po", "l1so"], default="l1po", type=str.lower)
    p.add_argument("--jobs", type=int, default=1, help="folds run in parallel")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("drift", help="run both protocols and report user-induced drift")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("cost", help="MACs, latency and energy of a model on a device profile")
    p.add_argument("--model", help="weight file (default: untrained default architecture at the reference input)")
    p.add_argument("--profile", default="gap9")
    p.add_argument("--json", help="also write the estimates to this file")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("calibrate", help="refit the shipped device profiles from their measured anchors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, OdpharError, FileNotFoundError) as exc:
        print(f"odphar {args.command}: {exc}", file=sys.stderr)
        return 2
    except ExperimentFailure as exc:
        print(f"odphar {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a failure of the run itself
        log.exception("unexpected error")
        print(f"odphar {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
