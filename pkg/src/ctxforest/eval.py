"""Metrics and experiment harness: DSC, subject-grouped cross-validation,
pass-count/landmark/graph-cut ablations, and report emission."""

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .cascade import (CascadeConfig, argmax_labels, infer_cascade_passes,
                      train_cascade)
from .distance import load_landmarks
from .errors import ValidationError
from .features import CLASS_NAMES, FeatureConfig, FeatureContext, N_CLASSES
from .forest import ForestConfig
from .graphcut import EnergyParams, refine
from .phantom import load_manifest
from .util import check_fields, parallel_map, substream
from .volume import (LabelVolume, load_label_volume, load_volume,
                     require_same_geometry)

CSV_COLUMNS = ["fold", "subject", "volume", "class", "dsc", "config_hash"]


def dsc(pred, gt, cls):
    """Dice similarity 2|A∩B|/(|A|+|B|) for one class; 1.0 when both
    sets are empty, 0.0 when exactly one is."""
    require_same_geometry(pred, gt, "ground truth")
    a = pred.labels == cls
    b = gt.labels == cls
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / (na + nb)


# ---------------------------------------------------------------------------
# configuration bundle

@dataclass
class PipelineConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    energy: EnergyParams = field(default_factory=EnergyParams)
    use_graphcut: bool = True

    def validate(self):
        self.features.validate()
        self.forest.validate()
        self.cascade.validate()
        self.energy.validate()
        return self

    def to_dict(self):
        return {"features": self.features.to_dict(), "forest": self.forest.to_dict(),
                "cascade": self.cascade.to_dict(), "energy": self.energy.to_dict(),
                "use_graphcut": self.use_graphcut}

    @classmethod
    def from_dict(cls, d):
        check_fields(cls, d, "pipeline config")
        return cls(features=FeatureConfig.from_dict(d.get("features", {})),
                   forest=ForestConfig.from_dict(d.get("forest", {})),
                   cascade=CascadeConfig.from_dict(d.get("cascade", {})),
                   energy=EnergyParams.from_dict(d.get("energy", {})),
                   use_graphcut=bool(d.get("use_graphcut", True))).validate()


def config_hash(cfg):
    """Short stable digest of a fully resolved configuration."""
    payload = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# folds

@dataclass
class FoldPlan:
    folds: list  # list of sorted subject-id lists

    def fold_of(self, subject):
        for f, members in enumerate(self.folds):
            if subject in members:
                return f
        raise ValidationError(f"subject {subject} not in fold plan")

    def digest(self):
        payload = json.dumps(self.folds, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def make_folds(subjects, k, seed):
    """Shuffle subjects into k near-equal folds (larger folds first).
    All volumes of a subject land in one fold by construction."""
    subjects = sorted(set(subjects))
    if k < 2:
        raise ValidationError("need at least 2 folds")
    if len(subjects) < k:
        raise ValidationError("fewer subjects than folds")
    rng = substream(seed, "folds")
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    base = len(subjects) // k
    extra = len(subjects) % k
    folds = []
    at = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        folds.append(sorted(order[at:at + size]))
        at += size
    return FoldPlan(folds)


# ---------------------------------------------------------------------------
# dataset loading

def load_case(row, feat_cfg):
    """Read one manifest row into a FeatureContext plus ground truth."""
    vol = load_volume(row.volume_path)
    bone = load_label_volume(row.bone_mask_path,
                             palette={0: "background", 1: "femur", 2: "tibia",
                                      3: "patella"})
    landmarks = load_landmarks(row.landmarks_path)
    gt = load_label_volume(row.gt_path,
                           palette={i: n for i, n in enumerate(CLASS_NAMES)})
    ctx = FeatureContext(vol, bone, landmarks, feat_cfg)
    return ctx, gt


def load_cases(rows, feat_cfg, threads=None):
    """Contexts for all manifest rows, keyed by volume path."""
    pairs = parallel_map(lambda r: load_case(r, feat_cfg), rows, threads=threads)
    return {row.volume_path: pair for row, pair in zip(rows, pairs)}


# ---------------------------------------------------------------------------
# reports

class EvalReport:
    """Per-volume DSC rows plus aggregates recomputable from them."""

    def __init__(self, rows, feature_frequency=None, fold_digest=None):
        self.rows = list(rows)
        self.feature_frequency = feature_frequency
        self.fold_digest = fold_digest

    def class_values(self, cls_name, fold=None):
        return [r["dsc"] for r in self.rows
                if r["class"] == cls_name and (fold is None or r["fold"] == fold)]

    def mean_dsc(self, cls_name=None, fold=None):
        vals = ([r["dsc"] for r in self.rows if fold is None or r["fold"] == fold]
                if cls_name is None else self.class_values(cls_name, fold))
        if not vals:
            raise ValidationError("no rows to aggregate")
        return float(np.mean(vals))

    def std_dsc(self, cls_name=None, fold=None):
        vals = ([r["dsc"] for r in self.rows if fold is None or r["fold"] == fold]
                if cls_name is None else self.class_values(cls_name, fold))
        if len(vals) < 2:
            return 0.0
        return float(np.std(vals, ddof=1))

    def folds(self):
        return sorted({r["fold"] for r in self.rows})

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r["fold"], r["subject"], r["volume"], r["class"],
                            repr(r["dsc"]), r["config_hash"]])

    def format_text(self):
        lines = ["per-class DSC (mean +/- std):"]
        for cls_name in CLASS_NAMES[1:]:
            lines.append(f"  {cls_name:<20s} {self.mean_dsc(cls_name):.4f} "
                         f"+/- {self.std_dsc(cls_name):.4f}")
        for f in self.folds():
            per = " ".join(f"{cls_name.split('_')[0]}={self.mean_dsc(cls_name, f):.4f}"
                           for cls_name in CLASS_NAMES[1:])
            lines.append(f"  fold {f}: {per}")
        if self.feature_frequency is not None:
            lines.append("feature kind frequency per pass:")
            for p, row in enumerate(self.feature_frequency):
                lines.append(f"  pass {p}: " + " ".join(str(int(c)) for c in row))
        return "\n".join(lines) + "\n"


def _volume_tag(path):
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------------------
# cross-validation

def _fold_rows(plan, rows):
    """Manifest rows grouped into (train_rows, test_rows) per fold."""
    out = []
    for f, members in enumerate(plan.folds):
        train = [r for r in rows if r.subject_id not in members]
        test = [r for r in rows if r.subject_id in members]
        if not train or not test:
            raise ValidationError("empty train or test split")
        out.append((train, test))
    return out


def cross_validate(rows, cfg, k=3, seed=0, threads=None, cases=None):
    """Subject-grouped k-fold CV of the full pipeline on a manifest.

    Trains a cascade per fold on the out-of-fold volumes, then infers
    (and graph-cut refines when configured) each held-out volume.
    """
    cfg.validate()
    if isinstance(rows, (str, os.PathLike)):
        rows = load_manifest(rows)
    plan = make_folds([r.subject_id for r in rows], k, seed)
    if cases is None:
        cases = load_cases(rows, cfg.features, threads=threads)
    chash = config_hash(cfg)
    report_rows = []
    freq = None
    for f, (train, test) in enumerate(_fold_rows(plan, rows)):
        contexts = [cases[r.volume_path][0] for r in train]
        gts = [cases[r.volume_path][1] for r in train]
        model = train_cascade(contexts, gts, cfg.cascade, cfg.forest,
                              cfg.features, threads=threads)
        freq = model.feature_frequency() if freq is None \
            else freq + model.feature_frequency()
        for r in test:
            ctx, gt = cases[r.volume_path]
            posts = infer_cascade_passes(model, ctx)
            post = posts[-1]
            if cfg.use_graphcut:
                trace = []
                pred = refine(post, ctx, cfg.energy, trace=trace)
            else:
                pred = _argmax_pred(post, ctx, gt)
            for c in range(1, N_CLASSES):
                report_rows.append({"fold": f, "subject": r.subject_id,
                                    "volume": _volume_tag(r.volume_path),
                                    "class": CLASS_NAMES[c],
                                    "dsc": dsc(pred, gt, c),
                                    "config_hash": chash})
    return EvalReport(report_rows, feature_frequency=freq, fold_digest=plan.digest())


# ---------------------------------------------------------------------------
# ablation: pass count x landmark features x graph cuts

ABLATION_CONFIGS = ("1pass_noLM", "2pass_noLM", "1pass_LM", "2pass_LM",
                    "3pass_LM", "2pass_LM_graphcut")


def ablation(rows, cfg, k=3, seed=0, threads=None, cases=None):
    """Evaluate the six pass-count/landmark/graph-cut variants under one
    fold plan and seed.

    Pass-k training never depends on later passes, so one 3-pass
    landmark cascade and one 2-pass no-landmark cascade per fold supply
    all configurations by slicing; per-pass posteriors from a single
    inference sweep serve the 1/2/3-pass variants.
    """
    cfg.validate()
    if isinstance(rows, (str, os.PathLike)):
        rows = load_manifest(rows)
    plan = make_folds([r.subject_id for r in rows], k, seed)
    if cases is None:
        cases = load_cases(rows, cfg.features, threads=threads)

    variants = {
        "1pass_noLM": replace(cfg, features=replace(cfg.features, use_landmarks=False),
                              cascade=replace(cfg.cascade, num_passes=1),
                              use_graphcut=False),
        "2pass_noLM": replace(cfg, features=replace(cfg.features, use_landmarks=False),
                              cascade=replace(cfg.cascade, num_passes=2),
                              use_graphcut=False),
        "1pass_LM": replace(cfg, cascade=replace(cfg.cascade, num_passes=1),
                            use_graphcut=False),
        "2pass_LM": replace(cfg, cascade=replace(cfg.cascade, num_passes=2),
                            use_graphcut=False),
        "3pass_LM": replace(cfg, cascade=replace(cfg.cascade, num_passes=3),
                            use_graphcut=False),
        "2pass_LM_graphcut": replace(cfg, cascade=replace(cfg.cascade, num_passes=2),
                                     use_graphcut=True),
    }
    hashes = {name: config_hash(v) for name, v in variants.items()}
    rows_by_config = {name: [] for name in ABLATION_CONFIGS}
    fold_digests = {name: plan.digest() for name in ABLATION_CONFIGS}

    for f, (train, test) in enumerate(_fold_rows(plan, rows)):
        contexts = [cases[r.volume_path][0] for r in train]
        gts = [cases[r.volume_path][1] for r in train]
        lm_cfg = variants["3pass_LM"]
        model_lm = train_cascade(contexts, gts, lm_cfg.cascade, lm_cfg.forest,
                                 lm_cfg.features, threads=threads)
        nolm_cfg = variants["2pass_noLM"]
        model_nolm = train_cascade(contexts, gts, nolm_cfg.cascade, nolm_cfg.forest,
                                   nolm_cfg.features, threads=threads)
        for r in test:
            ctx, gt = cases[r.volume_path]
            posts_lm = infer_cascade_passes(model_lm, ctx)
            posts_nolm = infer_cascade_passes(model_nolm, ctx)
            preds = {}
            preds["1pass_LM"] = _argmax_pred(posts_lm[0], ctx, gt)
            preds["2pass_LM"] = _argmax_pred(posts_lm[1], ctx, gt)
            preds["3pass_LM"] = _argmax_pred(posts_lm[2], ctx, gt)
            preds["1pass_noLM"] = _argmax_pred(posts_nolm[0], ctx, gt)
            preds["2pass_noLM"] = _argmax_pred(posts_nolm[1], ctx, gt)
            preds["2pass_LM_graphcut"] = refine(posts_lm[1], ctx, cfg.energy)
            for name, pred in preds.items():
                for c in range(1, N_CLASSES):
                    rows_by_config[name].append(
                        {"fold": f, "subject": r.subject_id,
                         "volume": _volume_tag(r.volume_path),
                         "class": CLASS_NAMES[c], "dsc": dsc(pred, gt, c),
                         "config_hash": hashes[name]})
    reports = {name: EvalReport(rows_by_config[name], fold_digest=fold_digests[name])
               for name in ABLATION_CONFIGS}
    return reports


def _argmax_pred(post, ctx, gt):
    lab = argmax_labels(post, ctx.band, ctx.volume.n_voxels)
    return LabelVolume(ctx.volume.dims, ctx.volume.spacing, ctx.volume.origin,
                       lab, palette=dict(gt.palette))


def ablation_table(reports):
    """Plain-text comparison of ablation configurations."""
    lines = ["config               overall  femoral  tibial   patellar"]
    for name in ABLATION_CONFIGS:
        rep = reports[name]
        lines.append(f"{name:<20s} {rep.mean_dsc():.4f}  "
                     + "  ".join(f"{rep.mean_dsc(c):.4f}" for c in CLASS_NAMES[1:]))
    return "\n".join(lines) + "\n"
