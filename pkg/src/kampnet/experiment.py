"""Balanced k-fold cross-validation of every method, plus the reports.

Per fold: one part is the test set, one (seeded draw) the validation set,
the rest train. On the training parts we fit input statistics, both
streams (stage one), the assembled DSN (stage two), a DSN trained from
scratch, and the clinical SVM (C picked on validation AUC). The fusion
weight alpha is picked on the validation subjects, then every method
scores the test part.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint, dsn, fusion, plots, stats, svm
from .config import ExperimentConfig
from .dataset import generate_phantoms, load_dataset, prepare_subject

logger = logging.getLogger(__name__)

METHODS = ("slice", "patch", "dsn", "dsn_scratch", "svm", "kamp")
COMPARISONS = (("kamp", "dsn"), ("kamp", "svm"))
PACKAGE_VERSION = "0.1.0"


class FoldError(RuntimeError):
    def __init__(self, fold, exc):
        self.fold = fold
        super().__init__(f"fold {fold}: {type(exc).__name__}: {exc}")


# --------------------------------------------------------------- fold plan

@dataclass
class FoldPlan:
    parts: list          # k lists of subject ids
    val_parts: list      # validation part index for each fold
    seed: int

    @property
    def k(self):
        return len(self.parts)

    def roles(self, fold):
        """(train ids, val ids, test ids) of one fold."""
        v = self.val_parts[fold]
        train = [sid for j, part in enumerate(self.parts) if j not in (fold, v) for sid in part]
        return train, list(self.parts[v]), list(self.parts[fold])

    def to_dict(self):
        return {"parts": self.parts, "val_parts": self.val_parts, "seed": self.seed}


def make_fold_plan(subjects, k=10, seed=0) -> FoldPlan:
    """Shuffle each class with ``seed`` and deal it evenly into k parts.

    ``subjects`` is a sequence of ``(subject_id, label)`` pairs or objects
    with ``subject_id`` and ``label`` attributes.
    """
    pairs = [(s.subject_id, s.label) if hasattr(s, "subject_id") else tuple(s) for s in subjects]
    if k < 3:
        raise ValueError("need at least 3 parts (test, validation, training)")
    ids = [sid for sid, _ in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    by_class = {c: [sid for sid, y in pairs if y == c] for c in (0, 1)}
    if len(by_class[0]) + len(by_class[1]) != len(pairs):
        raise ValueError("labels must be 0 or 1")
    if len(by_class[0]) != len(by_class[1]):
        raise ValueError(f"classes are imbalanced: {len(by_class[0])} vs {len(by_class[1])}")
    if len(by_class[0]) % k:
        raise ValueError(f"{len(pairs)} subjects cannot form {k} class-balanced parts")
    rng = np.random.default_rng(seed)
    m = len(by_class[0]) // k
    shuffled = {c: [by_class[c][i] for i in rng.permutation(len(by_class[c]))] for c in (0, 1)}
    parts = [shuffled[0][i * m:(i + 1) * m] + shuffled[1][i * m:(i + 1) * m] for i in range(k)]
    val_parts = []
    for fold in range(k):
        others = [j for j in range(k) if j != fold]
        val_parts.append(int(others[rng.integers(len(others))]))
    return FoldPlan(parts=parts, val_parts=val_parts, seed=int(seed))


def fold_seed(seed, fold):
    return int(seed) ^ int(fold)


def _derive(seed, tag):
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag]).generate_state(1)[0])


# -------------------------------------------------------------- one fold

@dataclass
class FoldResult:
    fold: int
    test_ids: list
    test_labels: list
    test_probs: dict          # method -> list of survival probabilities
    val_probs: dict           # "dsn" / "svm" -> list
    val_labels: list
    alpha: float
    svm_c: float
    records: dict             # model name -> TrainRecord dict
    checkpoints: dict = field(default_factory=dict)

    def aucs(self):
        return {m: stats.auc(self.test_probs[m], self.test_labels) for m in METHODS}


class _Store:
    """Per-fold checkpoint directory; reuses files written for the same config."""

    def __init__(self, root, fold, config_hash):
        self.root = Path(root) if root is not None else None
        self.fold, self.hash = fold, config_hash
        self.paths = {}

    def path(self, name, suffix=".ktnsr"):
        return self.root / f"fold{self.fold}_{name}{suffix}"

    def model(self, name, train_fn):
        if self.root is not None and self.path(name).exists():
            model, input_stats, meta = dsn.load_model(self.path(name))
            if meta["extra"].get("config_hash") != self.hash:
                raise checkpoint.CheckpointError(
                    f"{self.path(name)} was written for a different config; use a fresh output directory")
            self.paths[name] = str(self.path(name).name)
            return model, input_stats, meta["extra"]["record"]
        model, input_stats, stage, record = train_fn()
        rec = record.to_dict() if record is not None else None
        if self.root is not None:
            dsn.save_model(model, self.path(name), input_stats, stage,
                           extra={"config_hash": self.hash, "fold": self.fold, "record": rec})
            self.paths[name] = str(self.path(name).name)
        return model, input_stats, rec

    def svm(self, train_fn):
        p = self.path("svm", ".json") if self.root is not None else None
        if p is not None and p.exists():
            d = json.loads(p.read_text())
            if d.get("config_hash") != self.hash:
                raise checkpoint.CheckpointError(f"{p} was written for a different config")
            self.paths["svm"] = p.name
            return svm.SvmModel.from_json(json.dumps(d["model"])), d["val_aucs"]
        model, val_aucs = train_fn()
        if p is not None:
            doc = {"config_hash": self.hash, "model": json.loads(model.to_json()), "val_aucs": val_aucs}
            atomic_write(p, json.dumps(doc, indent=2, sort_keys=True) + "\n")
            self.paths["svm"] = p.name
        return model, val_aucs


def run_fold(fold, subjects, plan: FoldPlan, config: ExperimentConfig, checkpoint_dir=None) -> FoldResult:
    """Train and score every method on one fold; errors are tagged with the fold."""
    try:
        with threadpool_limits(limits=1):
            return _run_fold(fold, subjects, plan, config, checkpoint_dir)
    except FoldError:
        raise
    except Exception as exc:
        raise FoldError(fold, exc) from exc


def _run_fold(fold, subjects, plan, config, checkpoint_dir):
    by_id = {s.subject_id: s for s in subjects}
    train_ids, val_ids, test_ids = plan.roles(fold)
    train = [by_id[i] for i in train_ids]
    val = [by_id[i] for i in val_ids]
    test = [by_id[i] for i in test_ids]
    seed = fold_seed(config.seed, fold)
    store = _Store(checkpoint_dir, fold, config.hash())
    input_stats = dsn.fit_input_stats(train)
    sc, pc = config.slice_stream, config.patch_stream
    records = {}

    def stream_job(cfg, tag):
        def fn():
            net, rec = dsn.train_stream(cfg, train, val, _derive(seed, tag), config.stage1, input_stats)
            return net, input_stats, 1, rec
        return fn

    slice_net, _, records["slice"] = store.model("slice", stream_job(sc, 1))
    patch_net, _, records["patch"] = store.model("patch", stream_job(pc, 2))

    def dsn_job():
        model = dsn.assemble_dsn(slice_net.trunk, patch_net.trunk, sc, pc, _derive(seed, 3))
        model, rec = dsn.train_dsn(model, train, val, _derive(seed, 3), config.stage2, input_stats)
        return model, input_stats, 2, rec

    def scratch_job():
        s = _derive(seed, 4)
        fresh_s, fresh_p = dsn.build_stream(sc, _derive(s, 1)), dsn.build_stream(pc, _derive(s, 2))
        model = dsn.assemble_dsn(fresh_s.trunk, fresh_p.trunk, sc, pc, s)
        model, rec = dsn.train_dsn(model, train, val, s, config.scratch, input_stats)
        return model, input_stats, 2, rec

    dsn_model, _, records["dsn"] = store.model("dsn", dsn_job)
    scratch_model, _, records["dsn_scratch"] = store.model("dsn_scratch", scratch_job)

    def clin(group):
        return np.stack([s.clinical for s in group]), np.array([s.label for s in group])

    x_tr, y_tr = clin(train)
    x_va, y_va = clin(val)
    x_te, y_te = clin(test)

    def svm_job():
        best, val_aucs = None, {}
        for c in config.svm.c_grid:
            model = svm.train_svm(x_tr, y_tr, C=c, iterations=config.svm.iterations, seed=seed)
            score = stats.auc(svm.predict_proba(model, x_va), y_va)
            val_aucs[repr(c)] = score
            if best is None or score > best[0]:        # ties keep the earlier (smaller) C
                best = (score, model)
        return best[1], val_aucs

    svm_model, _ = store.svm(svm_job)

    def subject_scores(model, group):
        if isinstance(model, dsn.DsnModel):
            return dsn.subject_probability(dsn.dsn_probabilities(model, group, input_stats))
        return dsn.subject_probability(dsn.stream_probabilities(model, group, input_stats))

    val_dsn = subject_scores(dsn_model, val)
    val_svm = svm.predict_proba(svm_model, x_va)
    alpha = fusion.select_alpha(val_dsn, val_svm, y_va, config.fusion.step, prefer=config.fusion.alpha)

    test_probs = {
        "slice": subject_scores(slice_net, test),
        "patch": subject_scores(patch_net, test),
        "dsn": subject_scores(dsn_model, test),
        "dsn_scratch": subject_scores(scratch_model, test),
        "svm": svm.predict_proba(svm_model, x_te),
    }
    test_probs["kamp"] = np.asarray(fusion.fuse(test_probs["dsn"], test_probs["svm"], alpha))
    return FoldResult(
        fold=fold, test_ids=test_ids, test_labels=y_te.tolist(),
        test_probs={m: np.asarray(p, dtype=np.float64).tolist() for m, p in test_probs.items()},
        val_probs={"dsn": val_dsn.tolist(), "svm": val_svm.tolist()}, val_labels=y_va.tolist(),
        alpha=float(alpha), svm_c=float(svm_model.C), records=records, checkpoints=dict(store.paths),
    )


def _fold_job(args):
    return run_fold(*args)


def run_folds(subjects, config: ExperimentConfig, plan: FoldPlan, checkpoint_dir=None, jobs=1, folds=None):
    folds = list(range(plan.k)) if folds is None else list(folds)
    args = [(f, subjects, plan, config, checkpoint_dir) for f in folds]
    if jobs <= 1 or len(folds) <= 1:
        return [_fold_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_fold_job, args))


# ---------------------------------------------------------------- dataset

def load_subjects(config: ExperimentConfig):
    """Prepared subjects from ``config.dataset`` or freshly generated phantoms."""
    if config.dataset:
        volumes, _ = load_dataset(config.dataset)
    else:
        volumes = generate_phantoms(config.phantom)
    return [prepare_subject(v) for v in volumes]


def subjects_hash(subjects) -> str:
    """Content hash of everything the experiment consumes from the subjects."""
    h = hashlib.sha256()
    for s in subjects:
        h.update(f"{s.subject_id}:{s.label}".encode())
        for arr in (s.slices, s.patches, s.clinical, s.calc_masks):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- reports

def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    tmp.replace(path)


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    plan: FoldPlan
    folds: list
    auc_table: dict           # method -> per-fold AUCs
    tests: dict
    sweep: list
    output_dir: Path | None = None

    def mean_auc(self, method):
        return float(np.mean(self.auc_table[method]))

    def std_auc(self, method):
        return float(np.std(self.auc_table[method], ddof=1))


def summary_csv(auc_table, k) -> str:
    rows = [["fold", *METHODS]]
    for f in range(k):
        rows.append([f, *(repr(float(auc_table[m][f])) for m in METHODS)])
    rows.append(["mean", *(repr(float(np.mean(auc_table[m]))) for m in METHODS)])
    rows.append(["std", *(repr(float(np.std(auc_table[m], ddof=1))) for m in METHODS)])
    return _csv(rows)


def read_summary(path):
    """method -> per-fold AUCs, parsed back from ``summary.csv``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    table = {m: [] for m in header[1:]}
    for r in rows[1:]:
        if r[0] in ("mean", "std"):
            continue
        for m, v in zip(header[1:], r[1:]):
            table[m].append(float(v))
    return table


def compare_methods(auc_table, comparisons=COMPARISONS) -> dict:
    """Anderson-Darling on the paired differences, then the one-sided paired t-test."""
    out = {}
    for a, b in comparisons:
        x, y = np.asarray(auc_table[a]), np.asarray(auc_table[b])
        entry = {"alternative": f"mean AUC({a}) > mean AUC({b})", "differences": (x - y).tolist()}
        try:
            ad = stats.anderson_darling_normal(x - y)
            entry["anderson_darling"] = {"statistic": ad.statistic, "adjusted": ad.adjusted,
                                         "critical_5pct": ad.critical_5pct, "reject_normality": ad.reject_at_5pct}
        except ValueError as exc:
            entry["anderson_darling"] = {"error": str(exc)}
        try:
            t = stats.paired_t_test_one_sided(x, y)
            entry["t_test"] = {"t": t.t, "p": t.p, "df": t.df, "mean_diff": t.mean_diff, "reject": t.reject_at_5pct}
        except stats.ConstantDifferencesError as exc:
            entry["t_test"] = {"error": str(exc), "df": len(x) - 1}
        out[f"{a}_vs_{b}"] = entry
    return out


def mean_roc(folds, method, grid=101):
    xs = np.linspace(0.0, 1.0, grid)
    curves = []
    for f in folds:
        roc = stats.roc_curve(f.test_probs[method], f.test_labels)
        # keep the top of each vertical step so interpolation sees increasing x
        keep = np.r_[roc.fpr[1:] != roc.fpr[:-1], True]
        curves.append(np.interp(xs, roc.fpr[keep], roc.tpr[keep], left=0.0))
    ys = np.mean(curves, axis=0)
    return np.r_[0.0, xs], np.r_[0.0, ys]


def assemble(config, plan, folds) -> ExperimentResult:
    folds = sorted(folds, key=lambda f: f.fold)
    table = {m: [] for m in METHODS}
    for f in folds:
        for m, v in f.aucs().items():
            table[m].append(v)
    sweep = fusion.sweep_alpha(
        [fusion.FoldScores(np.asarray(f.test_probs["dsn"]), np.asarray(f.test_probs["svm"]),
                           np.asarray(f.test_labels)) for f in folds], config.fusion.step)
    return ExperimentResult(config=config, plan=plan, folds=folds, auc_table=table,
                            tests=compare_methods(table), sweep=sweep)


def write_reports(result: ExperimentResult, out_dir, dataset_digest) -> dict:
    """Write every report file plus ``run_manifest.json``; returns artifact hashes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    k = len(result.folds)
    files["summary.csv"] = summary_csv(result.auc_table, k)
    for f in result.folds:
        for m in METHODS:
            roc = stats.roc_curve(f.test_probs[m], f.test_labels)
            rows = [["fpr", "tpr", "threshold"]] + [[repr(float(a)), repr(float(b)), repr(float(t))]
                                                     for a, b, t in zip(roc.fpr, roc.tpr, roc.thresholds)]
            files[f"roc_fold{f.fold}_{m}.csv"] = _csv(rows)
    files["alpha_sweep.csv"] = fusion.sweep_csv(result.sweep)
    tests = dict(result.tests)
    tests["alpha_per_fold"] = [f.alpha for f in result.folds]
    tests["mean_auc"] = {m: result.mean_auc(m) for m in METHODS}
    tests["std_auc"] = {m: result.std_auc(m) for m in METHODS}
    files["tests.json"] = json.dumps(tests, indent=2, sort_keys=True) + "\n"
    pred = [["fold", "subject_id", "label", *METHODS]]
    for f in result.folds:
        for i, sid in enumerate(f.test_ids):
            pred.append([f.fold, sid, f.test_labels[i], *(repr(f.test_probs[m][i]) for m in METHODS)])
    files["predictions.csv"] = _csv(pred)
    folds_doc = [{"fold": f.fold, "alpha": f.alpha, "svm_c": f.svm_c, "auc": f.aucs(), "val_ids": result.plan.roles(
        f.fold)[1], "test_ids": f.test_ids, "checkpoints": f.checkpoints, "records": f.records}
        for f in result.folds]
    files["folds.json"] = json.dumps({"plan": result.plan.to_dict(), "folds": folds_doc}, indent=2,
                                     sort_keys=True) + "\n"
    roc_series = []
    for m in ("kamp", "dsn", "svm"):
        xs, ys = mean_roc(result.folds, m)
        roc_series.append((f"{m} {result.mean_auc(m):.3f}", xs, ys))
    files["roc_mean.svg"] = plots.line_plot(roc_series, "Mean test ROC", "false positive rate",
                                            "true positive rate", diagonal=True)
    lo = min(r.mean_auc for r in result.sweep)
    files["alpha_sweep.svg"] = plots.line_plot(
        [("mean AUC", [r.alpha for r in result.sweep], [r.mean_auc for r in result.sweep])],
        "Fusion weight sweep", "alpha (DSN weight)", "mean test AUC",
        ylim=(max(0.0, np.floor(lo * 20) / 20 - 0.05), 1.0))
    hashes = {}
    for name, text in files.items():
        atomic_write(out / name, text)
        hashes[name] = hashlib.sha256(text.encode()).hexdigest()
    ckpt = out / "checkpoints"
    if ckpt.is_dir():
        for p in sorted(ckpt.iterdir()):
            if p.is_file() and not p.name.startswith("."):
                hashes[f"checkpoints/{p.name}"] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {
        "package_version": PACKAGE_VERSION,
        "seed": result.config.seed,
        "config_hash": result.config.hash(),
        "config": result.config.to_dict(),
        "dataset_hash": dataset_digest,
        "artifacts": hashes,
    }
    atomic_write(out / "run_manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return hashes


def run_experiment(config: ExperimentConfig, out_dir=None, jobs=1, subjects=None) -> ExperimentResult:
    """Full cross-validation run; writes reports when ``out_dir`` is given."""
    subjects = subjects if subjects is not None else load_subjects(config)
    plan = make_fold_plan(subjects, config.folds, config.seed)
    ckpt = Path(out_dir) / "checkpoints" if out_dir is not None else None
    folds = run_folds(subjects, config, plan, ckpt, jobs)
    result = assemble(config, plan, folds)
    if out_dir is not None:
        write_reports(result, out_dir, subjects_hash(subjects))
        result.output_dir = Path(out_dir)
    return result


def load_manifest(path):
    doc = json.loads(Path(path).read_text())
    for key in ("config", "config_hash", "artifacts"):
        if key not in doc:
            raise ValueError(f"{path}: manifest lacks {key!r}")
    config = ExperimentConfig.from_dict(doc["config"])
    if config.hash() != doc["config_hash"]:
        raise ValueError(f"{path}: embedded config does not match its recorded hash")
    return config, doc


def verify_manifest(doc, out_dir, names=None):
    """Names of artifacts whose bytes differ from the manifest's hashes."""
    out = Path(out_dir)
    bad = []
    for name, digest in sorted(doc["artifacts"].items()):
        if names is not None and name not in names:
            continue
        p = out / name
        if not p.exists() or hashlib.sha256(p.read_bytes()).hexdigest() != digest:
            bad.append(name)
    return bad
