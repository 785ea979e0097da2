"""``kampnet`` command line: generate, encode, train, evaluate, sweep-alpha, cam, selftest.

Every command reads one JSON config (``--config FILE`` or ``--preset NAME``)
and ``--set key=value`` overrides; environment variables are never read.
Failures print one line ``kampnet: error: <kind>: <message>`` to stderr and
exit non-zero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, dsn, experiment, fusion, gradcheck, hu_coding, stats
from .config import PRESETS, ConfigError, load_config
from .dataset import (MetadataError, VolumeFormatError, center_input, generate_phantoms, load_volume,
                      make_phantom, prepare_subject, write_dataset)

EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING, EXIT_FORMAT = 1, 2, 3, 4


class CommandError(Exception):
    def __init__(self, kind, message, code=EXIT_FAILURE):
        super().__init__(message)
        self.kind, self.code = kind, code


def _config(args):
    return load_config(args.config, args.preset, args.set)


def _out_dir(args, config):
    return Path(args.out) if args.out else Path(config.output_dir)


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"phantom.seed={args.seed}")
    config = load_config(args.config, args.preset, overrides)
    volumes = generate_phantoms(config.phantom)
    digest = write_dataset(volumes, config.phantom, args.out)
    print(f"wrote {len(volumes)} subjects to {args.out}")
    print(f"dataset sha256 {digest}")


def cmd_encode(args):
    vol = load_volume(args.volume)
    r = vol.meta["roi"]
    out = Path(args.out)
    for k, z in enumerate(vol.meta["selected_slices"]):
        coded = hu_coding.encode_slice(vol.voxels[z])
        hu_coding.save_png(coded, out / f"{vol.subject_id}_slice{k}.png")
        hu_coding.save_png(coded[:, r["y"]:r["y"] + r["h"], r["x"]:r["x"] + r["w"]],
                           out / f"{vol.subject_id}_patch{k}.png")
        if args.grayscale:
            hu_coding.save_png(hu_coding.encode_grayscale(vol.voxels[z]), out / f"{vol.subject_id}_gray{k}.png")
    print(f"wrote coded images of {vol.subject_id} to {out}")


def _parse_folds(text, k):
    if text is None:
        return None
    folds = sorted({int(x) for x in text.split(",") if x.strip()})
    if any(f < 0 or f >= k for f in folds):
        raise ConfigError(f"fold indices must lie in [0, {k - 1}]")
    return folds


def cmd_train(args):
    config = _config(args)
    out = _out_dir(args, config)
    subjects = experiment.load_subjects(config)
    plan = experiment.make_fold_plan(subjects, config.folds, config.seed)
    folds = _parse_folds(args.folds, plan.k)
    results = experiment.run_folds(subjects, config, plan, out / "checkpoints", args.jobs, folds)
    for r in results:
        experiment.atomic_write(out / "checkpoints" / f"fold{r.fold}_records.json",
                                json.dumps(r.records, indent=2, sort_keys=True) + "\n")
        best = {name: rec["best_epoch"] for name, rec in r.records.items() if rec}
        print(f"fold {r.fold}: checkpoints {sorted(r.checkpoints.values())} best epochs {best}")


def cmd_evaluate(args):
    if args.manifest:
        if args.config or args.preset or args.set:
            raise ConfigError("--manifest carries its own config; drop --config/--preset/--set")
        config, doc = experiment.load_manifest(args.manifest)
        out = Path(args.out) if args.out else Path(args.manifest).parent / "rerun"
    else:
        config, doc = _config(args), None
        out = _out_dir(args, config)
    result = experiment.run_experiment(config, out_dir=out, jobs=args.jobs)
    print(f"wrote reports to {out}")
    for m in experiment.METHODS:
        print(f"  {m:12s} AUC {result.mean_auc(m):.4f} +/- {result.std_auc(m):.4f}")
    if doc is not None:
        reports = [n for n in doc["artifacts"] if not n.startswith("checkpoints/")]
        bad = experiment.verify_manifest(doc, out, reports)
        if bad:
            raise CommandError("not-reproduced", f"outputs differ from the manifest: {', '.join(bad)}")
        print(f"reproduced {len(reports)} report files byte-exactly")
    if args.golden:
        golden = Path(args.golden)
        produced = (out / "summary.csv").read_bytes()
        if args.bless:
            experiment.atomic_write(golden, produced)
            print(f"blessed {golden}")
        elif not golden.exists():
            raise CommandError("missing-file", f"golden file {golden} does not exist (use --bless)", EXIT_MISSING)
        elif golden.read_bytes() != produced:
            raise CommandError("golden-mismatch", f"{out / 'summary.csv'} differs from {golden}")
        else:
            print(f"summary.csv matches {golden}")
    elif args.bless:
        raise ConfigError("--bless needs --golden")


def cmd_sweep_alpha(args):
    run = Path(args.run)
    path = run / "predictions.csv"
    if not path.exists():
        raise CommandError("missing-file", f"{path} not found; run `kampnet evaluate` first", EXIT_MISSING)
    per_fold = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            f = per_fold.setdefault(int(row["fold"]), ([], [], []))
            f[0].append(float(row["dsn"]))
            f[1].append(float(row["svm"]))
            f[2].append(int(row["label"]))
    folds = [fusion.FoldScores(np.array(a), np.array(b), np.array(y)) for _, (a, b, y) in sorted(per_fold.items())]
    rows = fusion.sweep_alpha(folds, args.step)
    out = Path(args.out) if args.out else run / "alpha_sweep.csv"
    experiment.atomic_write(out, fusion.sweep_csv(rows))
    best = max(rows, key=lambda r: (r.mean_auc, -abs(r.alpha - fusion.DEFAULT_ALPHA)))
    print(f"wrote {len(rows)} alphas to {out}; best alpha {best.alpha:.2f} mean AUC {best.mean_auc:.4f}")


def _subject_volume(args, config):
    if config.dataset or args.dataset:
        return load_volume(Path(args.dataset or config.dataset) / args.subject)
    try:
        index = int(args.subject.lstrip("S"))
    except ValueError:
        raise ConfigError(f"subject id {args.subject!r} is not of the form S<index>") from None
    if not 0 <= index < config.phantom.subjects:
        raise ConfigError(f"subject index {index} outside the phantom cohort")
    return make_phantom(config.phantom, index)


def cmd_cam(args):
    model, input_stats, _ = dsn.load_model(args.checkpoint)
    config = load_config(args.config, args.preset, args.set)
    vol = _subject_volume(args, config)
    subject = prepare_subject(vol)
    size = model.patch_config.input_size if isinstance(model, dsn.DsnModel) else model.config.input_size
    coded = subject.patches[args.slice]
    x = hu_coding.normalize(center_input(coded, size), input_stats.patch)
    cam = dsn.compute_cam(model, x, args.class_index)
    z = vol.meta["selected_slices"][args.slice]
    r = vol.meta["roi"]
    hu_patch = vol.voxels[z, r["y"]:r["y"] + r["h"], r["x"]:r["x"] + r["w"]]
    gray = center_input(hu_coding.encode_grayscale(hu_patch), size)[0]
    gray = (gray - gray.min()) / max(float(np.ptp(gray)), 1e-12)
    heat = np.round(cam * 255).astype(np.uint8)
    strength = 0.6 * cam
    rgb = np.stack([gray * (1 - strength) + strength, gray * (1 - strength), gray * (1 - strength)])
    out = Path(args.out)
    stem = f"{subject.subject_id}_slice{args.slice}_class{args.class_index}"
    hu_coding.save_png(heat[None], out / f"{stem}_cam.png")
    hu_coding.save_png(np.round(rgb * 255).astype(np.uint8), out / f"{stem}_overlay.png")
    print(f"wrote {stem}_cam.png and {stem}_overlay.png to {out}")


def oracle_checks():
    """Reference examples with independently known answers: (name, passed, detail)."""
    checks = []
    for hu, want in ((-1024, (0, 0, 0)), (500, (0, 255, 0)), (-450, (0, 0, 128))):
        got = tuple(int(v) for v in hu_coding.encode_slice(np.array([[hu]]))[:, 0, 0])
        checks.append((f"encode HU {hu}", got == want, f"{got}"))
    for pos, neg, want in (([0.9, 0.8], [0.2, 0.1], 1.0), ([0.5], [0.5], 0.5), ([0.8, 0.3], [0.5, 0.1], 0.75)):
        got = stats.auc(pos + neg, [1] * len(pos) + [0] * len(neg))
        checks.append((f"auc {pos} vs {neg}", abs(got - want) < 1e-12, f"{got!r}"))
    d = np.array([0.3, 0.1, 0.2, 0.4, 0.0])
    t = stats.paired_t_test_one_sided(d, np.zeros(5))
    checks.append(("paired t worked example", abs(t.t - 2.8284271) < 1e-6 and abs(t.p - 0.0237103) < 1e-6
                   and t.df == 4 and t.reject_at_5pct, f"t={t.t:.7f} p={t.p:.7f}"))
    nd = statistics.NormalDist()
    quantiles = [nd.inv_cdf((i - 0.5) / 20) for i in range(1, 21)]
    ad = stats.anderson_darling_normal(quantiles)
    checks.append(("anderson-darling normal quantiles", not ad.reject_at_5pct, f"A2*={ad.adjusted:.4f}"))
    ad = stats.anderson_darling_normal([0.0] * 10 + [100.0] * 10)
    checks.append(("anderson-darling bimodal", ad.reject_at_5pct, f"A2*={ad.adjusted:.4f}"))
    plan = experiment.make_fold_plan([(f"S{i:04d}", i % 2) for i in range(180)], 10, 0)
    balanced = all(len(p) == 18 and sum(int(s[1:]) % 2 for s in p) == 9 for p in plan.parts)
    checks.append(("fold plan 180 / 10", balanced, "10 parts of 9 + 9"))
    return checks


def cmd_selftest(args):
    failed = 0
    errors = gradcheck.run_all(points=args.points, seed=args.seed)
    for op, err in errors.items():
        ok = err < 1e-4
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} gradient {op:20s} max rel error {err:.3e}")
    for name, ok, detail in oracle_checks():
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:36s} {detail}")
    if failed:
        raise CommandError("selftest", f"{failed} check(s) failed")
    print("all checks passed")


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="kampnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="JSON config file")
        g.add_argument("--preset", choices=sorted(PRESETS), help="built-in config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    sp = sub.add_parser("generate", help="write a synthetic phantom dataset")
    add_config(sp)
    sp.add_argument("--seed", type=int, help="phantom seed (shorthand for --set phantom.seed=N)")
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("encode", help="export coded slices and patches of one volume as PNG")
    sp.add_argument("volume", help="path to <subject>.kvol (sidecar .json alongside)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--grayscale", action="store_true", help="also write the single-channel baseline")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("train", help="train all models of the given folds and save checkpoints")
    add_config(sp)
    sp.add_argument("--out", help="run directory (default: config output_dir)")
    sp.add_argument("--folds", help="comma-separated fold indices (default: all)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="cross-validate every method and write reports")
    add_config(sp)
    sp.add_argument("--manifest", help="re-run the experiment recorded in a run_manifest.json and verify it")
    sp.add_argument("--out", help="run directory (default: config output_dir)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--golden", help="compare summary.csv with this file byte for byte")
    sp.add_argument("--bless", action="store_true", help="overwrite the golden file instead of comparing")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep-alpha", help="recompute the fusion-weight sweep from a run's predictions")
    sp.add_argument("run", help="run directory holding predictions.csv")
    sp.add_argument("--step", type=float, default=0.05)
    sp.add_argument("--out", help="output CSV (default: <run>/alpha_sweep.csv)")
    sp.set_defaults(func=cmd_sweep_alpha)

    sp = sub.add_parser("cam", help="class activation map of one subject's patch")
    add_config(sp)
    sp.add_argument("checkpoint", help="DSN or patch-stream checkpoint (.ktnsr)")
    sp.add_argument("--subject", required=True, help="subject id, e.g. S0004")
    sp.add_argument("--dataset", help="dataset directory (default: config dataset or regenerated phantom)")
    sp.add_argument("--slice", type=int, default=1, choices=(0, 1, 2))
    sp.add_argument("--class-index", type=int, default=dsn.DECEASED, choices=(0, 1))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cam)

    sp = sub.add_parser("selftest", help="gradient checks and reference-example oracles")
    sp.add_argument("--points", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CommandError as exc:
        return _fail(exc.kind, exc, exc.code)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail("missing-file", f"{exc.filename}: {exc.strerror}", EXIT_MISSING)
    except (checkpoint.CheckpointError, VolumeFormatError, MetadataError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_FORMAT)
    except experiment.FoldError as exc:
        return _fail("fold", exc, EXIT_FAILURE)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_FAILURE)
    return 0


def _fail(kind, message, code):
    print(f"kampnet: error: {kind}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
