"""Command-line entry point.

Subcommands: phantom, train, predict, refine, eval, inspect. One master
--seed feeds named substreams; a JSON config file supplies module
settings with individual flags winning over it. Every stage writes its
artifact plus a resolved-config JSON log next to it.

Exit codes: 0 success, 2 usage, 3 I/O or file-format, 4 data validation.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import _kernels, __version__
from .cascade import infer_cascade_passes, load_cascade, save_cascade, train_cascade
from .distance import load_landmarks
from .errors import FileFormatError, ValidationError
from .eval import (ABLATION_CONFIGS, PipelineConfig, ablation, ablation_table,
                   config_hash, cross_validate, load_cases)
from .features import CLASS_NAMES, FeatureContext, FeatureKind
from .forest import load_forest
from .graphcut import format_trace, refine
from .phantom import PhantomSpec, generate_dataset, load_manifest
from .util import default_threads
from .volume import (load_label_volume, load_volume, require_same_geometry,
                     save_label_volume, save_volume)

log = logging.getLogger("ctxforest")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4


class UsageError(Exception):
    pass


def _load_config(args):
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as e:
            raise FileFormatError(f"{args.config}: invalid JSON: {e}") from None
        cfg = PipelineConfig.from_dict(data)
    # flags win over the config file
    if getattr(args, "seed", None) is not None:
        cfg.features.seed = args.seed
    if getattr(args, "passes", None) is not None:
        cfg.cascade.num_passes = args.passes
    if getattr(args, "trees", None) is not None:
        cfg.forest.num_trees = args.trees
    if getattr(args, "depth", None) is not None:
        cfg.forest.max_depth = args.depth
    if getattr(args, "samples", None) is not None:
        cfg.cascade.samples_per_class_per_volume = args.samples
    if getattr(args, "pool", None) is not None:
        cfg.features.pool_size = args.pool
    if getattr(args, "thresholds", None) is not None:
        cfg.forest.thresholds_per_feature = args.thresholds
    if getattr(args, "lam", None) is not None:
        cfg.energy.lam = args.lam
    if getattr(args, "sigma", None) is not None:
        cfg.energy.sigma = args.sigma
    if getattr(args, "no_landmarks", False):
        cfg.features.use_landmarks = False
    if getattr(args, "no_graphcut", False):
        cfg.use_graphcut = False
    return cfg.validate()


def _prep_out(path):
    """Create the parent directory of an output path if needed."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _write_config_log(path, cfg, extra=None):
    payload = {"resolved_config": cfg.to_dict() if cfg is not None else None,
               "config_hash": config_hash(cfg) if cfg is not None else None}
    if extra:
        payload.update(extra)
    with open(_prep_out(path), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("resolved config -> %s", path)


def cmd_phantom(args):
    if args.subjects < 1:
        raise UsageError("--subjects must be >= 1")
    if args.volumes_per_subject < 1:
        raise UsageError("--volumes-per-subject must be >= 1")
    dims = tuple(int(x) for x in args.dims.split(","))
    if len(dims) != 3:
        raise UsageError("--dims needs three comma-separated counts")
    spec = PhantomSpec(seed=args.seed, dims=dims)
    rows = generate_dataset(spec, args.subjects, args.out,
                            volumes_per_subject=args.volumes_per_subject)
    _write_config_log(os.path.join(args.out, "phantom_config.json"), None,
                      extra={"phantom_spec": {"seed": spec.seed, "dims": list(dims),
                                              "subjects": args.subjects,
                                              "volumes_per_subject": args.volumes_per_subject}})
    log.info("wrote %d volumes under %s", len(rows), args.out)
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    rows = load_manifest(args.manifest)
    cases = load_cases(rows, cfg.features, threads=args.threads)
    contexts = [cases[r.volume_path][0] for r in rows]
    gts = [cases[r.volume_path][1] for r in rows]
    model = train_cascade(contexts, gts, cfg.cascade, cfg.forest, cfg.features,
                          threads=args.threads)
    save_cascade(_prep_out(args.out), model)
    _write_config_log(args.out + ".config.json", cfg)
    log.info("trained %d-pass cascade on %d volumes -> %s",
             model.num_passes, len(rows), args.out)
    return EXIT_OK


def _prob_paths(prefix):
    return {c: f"{prefix}_prob_{CLASS_NAMES[c]}.mhd" for c in range(len(CLASS_NAMES))}


def cmd_predict(args):
    cfg = _load_config(args)
    model = load_cascade(args.model)
    vol = load_volume(args.volume)
    spacing_meta = model.meta.get("training_spacing")
    if spacing_meta and tuple(spacing_meta) != tuple(vol.spacing):
        log.warning("volume spacing %s differs from training spacing %s; "
                    "features are mm-based, proceeding",
                    tuple(vol.spacing), tuple(spacing_meta))
    feat_cfg = model.forests[0].feat_cfg
    bone = load_label_volume(args.bone_mask)
    landmarks = load_landmarks(args.landmarks)
    ctx = FeatureContext(vol, bone, landmarks, feat_cfg)
    post = infer_cascade_passes(model, ctx)[-1]
    paths = _prob_paths(_prep_out(args.out_prefix))
    for c, path in paths.items():
        full = np.zeros(vol.n_voxels, dtype=np.float32)
        if c == 0:
            full[:] = 1.0
        full[ctx.band] = post[:, c].astype(np.float32)
        save_volume(vol.like(full), path)
    _write_config_log(args.out_prefix + ".config.json", cfg,
                      extra={"model": os.path.basename(args.model)})
    log.info("wrote probability volumes %s", ", ".join(paths.values()))
    return EXIT_OK


def cmd_refine(args):
    cfg = _load_config(args)
    vol = load_volume(args.volume)
    bone = load_label_volume(args.bone_mask)
    landmarks = load_landmarks(args.landmarks)
    ctx = FeatureContext(vol, bone, landmarks, cfg.features)
    paths = _prob_paths(args.probs_prefix)
    post = np.zeros((ctx.band.size, len(CLASS_NAMES)), dtype=np.float64)
    for c, path in paths.items():
        pv = load_volume(path)
        require_same_geometry(vol, pv, what=f"volume and {path}")
        post[:, c] = pv.data[ctx.band]
    trace = []
    pred = refine(post, ctx, cfg.energy, trace=trace)
    save_label_volume(pred, _prep_out(args.out))
    audit = args.audit_log or (args.out + ".energy.log")
    with open(_prep_out(audit), "w") as fh:
        fh.write(format_trace(trace))
    _write_config_log(args.out + ".config.json", cfg)
    log.info("refined labels -> %s (energy audit %s)", args.out, audit)
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    rows = load_manifest(args.manifest)
    _prep_out(args.out_csv)
    if args.ablation:
        reports = ablation(rows, cfg, k=args.folds, seed=args.fold_seed,
                           threads=args.threads)
        table = ablation_table(reports)
        sys.stdout.write(table)
        base, ext = os.path.splitext(args.out_csv)
        for name in ABLATION_CONFIGS:
            reports[name].to_csv(f"{base}_{name}{ext}")
        if args.emit_gnuplot:
            _write_ablation_gnuplot(base, reports)
        _write_config_log(args.out_csv + ".config.json", cfg)
        return EXIT_OK
    report = cross_validate(rows, cfg, k=args.folds, seed=args.fold_seed,
                            threads=args.threads)
    sys.stdout.write(report.format_text())
    report.to_csv(args.out_csv)
    if args.emit_gnuplot:
        _write_report_gnuplot(os.path.splitext(args.out_csv)[0], report)
    _write_config_log(args.out_csv + ".config.json", cfg)
    log.info("report -> %s", args.out_csv)
    return EXIT_OK


def _write_report_gnuplot(base, report):
    script = base + ".gp"
    data = base + ".dat"
    with open(data, "w") as fh:
        for i, cls_name in enumerate(CLASS_NAMES[1:]):
            fh.write(f"{i} \"{cls_name}\" {report.mean_dsc(cls_name)!r} "
                     f"{report.std_dsc(cls_name)!r}\n")
    with open(script, "w") as fh:
        fh.write(f"set style data histogram\nset yrange [0:1]\n"
                 f"set title 'per-class DSC'\n"
                 f"plot '{os.path.basename(data)}' using 3:xtic(2) with boxes, "
                 f"'' using 0:3:4 with errorbars notitle\n")


def _write_ablation_gnuplot(base, reports):
    script = base + "_ablation.gp"
    data = base + "_ablation.dat"
    with open(data, "w") as fh:
        for i, name in enumerate(ABLATION_CONFIGS):
            fh.write(f"{i} \"{name}\" {reports[name].mean_dsc()!r}\n")
    with open(script, "w") as fh:
        fh.write(f"set style data histogram\nset yrange [0:1]\n"
                 f"set title 'ablation mean DSC'\n"
                 f"plot '{os.path.basename(data)}' using 3:xtic(2) with boxes\n")


def cmd_inspect(args):
    try:
        model = load_cascade(args.model)
        forests = model.forests
        kind = "cascade"
    except FileFormatError:
        forests = [load_forest(args.model)]
        kind = "forest"
    out = [f"{kind}: {len(forests)} pass(es), backend={_kernels.BACKEND}"]
    for k, f in enumerate(forests):
        depths = _depth_histogram(f)
        freq = f.kind_histogram()
        out.append(f"pass {k}: trees={f.num_trees} "
                   f"nodes={sum(t.n_nodes for t in f.trees)} "
                   f"leaves={sum(t.n_leaves for t in f.trees)}")
        out.append("  depth histogram: "
                   + " ".join(f"{d}:{c}" for d, c in enumerate(depths) if c))
        out.append("  feature frequency:")
        for fk in FeatureKind:
            out.append(f"    {fk.name:<14s} {int(freq[int(fk)])}")
    sys.stdout.write("\n".join(out) + "\n")
    return EXIT_OK


def _depth_histogram(forest):
    """Leaf-depth counts aggregated over trees."""
    hist = {}
    for t in forest.trees:
        depth = np.zeros(t.n_nodes, dtype=np.int32)
        for node in range(t.n_nodes):
            if t.kind[node] >= 0:
                depth[t.left[node]] = depth[node] + 1
                depth[t.right[node]] = depth[node] + 1
            else:
                hist[depth[node]] = hist.get(int(depth[node]), 0) + 1
    return [hist.get(d, 0) for d in range(max(hist) + 1)] if hist else []


def _add_common(p, config=True):
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: CTXFOREST_THREADS or cores)")
    p.add_argument("--verbose", action="store_true")
    if config:
        p.add_argument("--config", help="JSON config file (flags win)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--passes", type=int, default=None)
        p.add_argument("--trees", type=int, default=None)
        p.add_argument("--depth", type=int, default=None)
        p.add_argument("--samples", type=int, default=None)
        p.add_argument("--pool", type=int, default=None)
        p.add_argument("--thresholds", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--no-landmarks", action="store_true")
        p.add_argument("--no-graphcut", action="store_true")


def build_parser():
    p = argparse.ArgumentParser(prog="ctxforest",
                                description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dims", default="64,64,64")
    sp.add_argument("--volumes-per-subject", type=int, default=2)
    _add_common(sp, config=False)
    sp.set_defaults(fn=cmd_phantom)

    sp = sub.add_parser("train", help="train a cascade on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("predict", help="probability volumes for one scan")
    sp.add_argument("--model", required=True)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--bone-mask", required=True)
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--out-prefix", required=True)
    _add_common(sp)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("refine", help="graph-cut refinement of predictions")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--bone-mask", required=True)
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--probs-prefix", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--audit-log", default=None)
    _add_common(sp)
    sp.set_defaults(fn=cmd_refine)

    sp = sub.add_parser("eval", help="cross-validated evaluation")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out-csv", required=True)
    sp.add_argument("--folds", type=int, default=3)
    sp.add_argument("--fold-seed", type=int, default=0)
    sp.add_argument("--ablation", action="store_true")
    sp.add_argument("--emit-gnuplot", action="store_true")
    _add_common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("inspect", help="summarize a model file")
    sp.add_argument("--model", required=True)
    _add_common(sp, config=False)
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is None:
        args.threads = default_threads()
    try:
        return args.fn(args)
    except UsageError as e:
        log.error("usage: %s", e)
        return EXIT_USAGE
    except (FileFormatError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        log.error("%s", e)
        return EXIT_IO
    except OSError as e:
        log.error("%s", e)
        return EXIT_IO
    except ValidationError as e:
        log.error("%s", e)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
