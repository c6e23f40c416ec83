"""msfuse command line: synth, train, eval, ablate, explain, gradcheck."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import vocab
from .cohort_io import atomic_write_bytes, atomic_write_text, encode_msv, read_cohort, write_cohort
from .config import PROFILES, RunConfig, dump_run_config, load_run_config
from .image import grad_cam
from .metrics import METRIC_NAMES, SingleClassError, summary_table_csv
from .model import featurize_cohort, load_checkpoint, save_checkpoint
from .synth import SIGNAL_LEVELS, SynthConfig, Volume, generate_cohort

log = logging.getLogger("msfuse")


class CommandError(Exception):
    pass


def _threads():
    raw = os.environ.get("MSFUSE_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise CommandError(f"MSFUSE_THREADS must be an integer, got {raw!r}")
        if n < 1:
            raise CommandError("MSFUSE_THREADS must be >= 1")
        torch.set_num_threads(n)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _out_dir(path, artifacts, force):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CommandError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    clash = [a for a in artifacts if (out / a).exists()]
    if clash and not force:
        raise CommandError(f"{out / clash[0]} already exists (use --force to overwrite)")
    return out


def _run_config(args):
    run = RunConfig()
    run.train = PROFILES[args.profile](seed=args.seed, milestone=args.milestone)
    if args.config:
        if not Path(args.config).is_file():
            raise CommandError(f"config file not found: {args.config}")
        run = load_run_config(args.config, run)
    if getattr(args, "folds", None) is not None:
        run.train.folds = args.folds
    run.train.validate()
    return run


def _load_features(path):
    root = Path(path)
    if not (root / "cohort.json").is_file():
        raise CommandError(f"not a cohort directory (missing {root / 'cohort.json'})")
    return featurize_cohort(read_cohort(root))


# -- commands --------------------------------------------------------------

def cmd_synth(args):
    cfg = SynthConfig(
        patient_count=args.patients, seed=args.seed, signal_strength=args.signal,
        weight_ehr=args.weights[0], weight_mri=args.weights[1], weight_notes=args.weights[2],
        volume_dims=tuple(args.dims),
    )
    if args.config:
        run = load_run_config(args.config, RunConfig(synth=cfg))
        cfg = run.synth
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError(f"{out} is not empty (use --force to overwrite)")
    write_cohort(out, generate_cohort(cfg), cfg, force=args.force)
    print(f"wrote {cfg.patient_count} patients to {out}")


def cmd_train(args):
    from .train import train_model
    run = _run_config(args)
    out = _out_dir(args.out, ["model.msfd", "train_log.json", "run.ini"], args.force)
    features = _load_features(args.cohort)
    model, info = train_model(features, run.train)
    save_checkpoint(out / "model.msfd", model, run.train, {"milestone": run.train.milestone})
    atomic_write_text(out / "train_log.json", json.dumps(info, indent=1, sort_keys=True) + "\n")
    atomic_write_text(out / "run.ini", dump_run_config(run))
    print(f"checkpoint: {out / 'model.msfd'}")


def cmd_eval(args):
    from .train import cross_validate, milestone_sweep
    run = _run_config(args)
    outputs = ["metrics.csv"] + (["milestones.csv"] if args.sweep else [])
    out = _out_dir(args.out, outputs, args.force)
    features = _load_features(args.cohort)
    res = cross_validate(features, run.train)
    atomic_write_text(out / "metrics.csv", res.report.to_csv())
    print(res.report.summary_line())
    if args.sweep:
        thresholds = [float(t) for t in args.sweep.split(",")]
        table = milestone_sweep(features, thresholds, run.train)
        atomic_write_text(out / "milestones.csv",
                          summary_table_csv("milestone", {f"{k:g}": v for k, v in table.items()}))


def cmd_ablate(args):
    from .train import ablate, group_subsets, table_subsets
    run = _run_config(args)
    out = _out_dir(args.out, ["ablation.csv", "ablation_sd.csv"], args.force)
    if args.table:
        subsets = table_subsets()
    else:
        groups = [g.strip() for g in args.groups.split(",") if g.strip()]
        unknown = [g for g in groups if g not in vocab.GROUPS]
        if unknown or not groups:
            raise CommandError(f"--groups must list names from {sorted(vocab.GROUPS)}, got {args.groups!r}")
        subsets = group_subsets(groups)
    features = _load_features(args.cohort)
    res = ablate(features, subsets, run.train)
    atomic_write_text(out / "ablation.csv", summary_table_csv("subset", res.reports))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", *METRIC_NAMES])
    for name, rep in res.reports.items():
        w.writerow([name, *(repr(rep.sd()[k]) for k in METRIC_NAMES)])
    atomic_write_text(out / "ablation_sd.csv", buf.getvalue())
    for name, rep in res.reports.items():
        print(f"{name:<16} {rep.summary_line()}")


def cmd_explain(args):
    from .train import cohort_importance
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CommandError(f"checkpoint not found: {ckpt}")
    out = _out_dir(args.out, [f"importance_{c}.csv" for c in vocab.CATEGORIES] + ["gradcam"], args.force)
    model, train_cfg, _ = load_checkpoint(ckpt)
    features = _load_features(args.cohort)
    for c, ranking in cohort_importance(model, features).items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "importance"])
        for name, value in ranking:
            w.writerow([name, repr(value)])
        atomic_write_text(out / f"importance_{c}.csv", buf.getvalue())
    cam_dir = out / "gradcam"
    cam_dir.mkdir(exist_ok=True)
    anchor = model.anchor()
    imaged = [f for f in features if f.volumes][:args.patients]
    for f in imaged:
        for tag in vocab.SEQUENCE_TAGS:
            heat = grad_cam(f.volumes[tag], model.images[tag], anchor)
            vox = heat.voxels.astype(np.float32)
            stem = f"{f.patient_id}_{tag}"
            atomic_write_bytes(cam_dir / f"{stem}.msv", encode_msv(Volume(vox.shape, vox)))
            side = {"patient_id": f.patient_id, "tag": tag, "dims": list(vox.shape),
                    "argmax": [int(i) for i in heat.argmax()], "max": float(vox.max())}
            atomic_write_text(cam_dir / f"{stem}.json", json.dumps(side, sort_keys=True) + "\n")
    print(f"wrote importances and {len(imaged) * len(vocab.SEQUENCE_TAGS)} Grad-CAM volumes to {out}")


def cmd_gradcheck(args):
    from .gradcheck import run_all
    results = run_all(args.seed)
    for r in results:
        print(r.line())
    if not all(r.passed for r in results):
        raise CommandError("gradient check failed")


# -- parser ----------------------------------------------------------------

def _weights(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated weights: ehr,mri,notes")
    return parts


def _dims(text):
    parts = [int(p) for p in text.replace("x", ",").split(",")]
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError("expected three positive dims, e.g. 32,32,16")
    return parts


def _add_training_flags(p, folds=False):
    p.add_argument("--cohort", required=True, help="cohort directory written by synth")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="INI file overriding [train]/[image]/[text]/[fusion]/[model] keys")
    p.add_argument("--profile", choices=sorted(PROFILES), default="paper",
                   help="base hyperparameters; 'desk' is a reduced budget for one CPU core")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--milestone", type=float, default=4.0)
    if folds:
        p.add_argument("--folds", type=_positive_int, default=5)
    p.add_argument("--force", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="msfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort directory")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=_positive_int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--signal", choices=SIGNAL_LEVELS, default="strong")
    p.add_argument("--weights", type=_weights, default=[1 / 3, 1 / 3, 1 / 3], help="ehr,mri,notes signal weights")
    p.add_argument("--dims", type=_dims, default=[32, 32, 16], help="volume dims X,Y,Z")
    p.add_argument("--config", help="INI file with a [synth] section")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit one model and write a checkpoint")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-fold cross-validation, writes metrics.csv")
    _add_training_flags(p, folds=True)
    p.add_argument("--sweep", help="comma-separated milestones for milestones.csv, e.g. 4,6,7")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="cross-validate modality subsets, writes ablation.csv")
    _add_training_flags(p, folds=True)
    p.add_argument("--groups", default="mri,notes,ehr", help="groups whose non-empty combinations are run")
    p.add_argument("--table", action="store_true", help="run the 11-row per-sequence grid instead")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("explain", help="feature importances and Grad-CAM volumes from a checkpoint")
    p.add_argument("--cohort", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=_positive_int, default=10, help="patients with MRI to map")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", help="run all finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        _threads()
        args.func(args)
    except (CommandError, FileNotFoundError, FileExistsError, SingleClassError, ValueError) as exc:
        print(f"msfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
