"""Command-line entry points: cohort generation, training, evaluation,
gradient self-check, and attention export."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import build_samples, kfold_split, load_cohort, save_cohort
from .evaluate import (evaluate_identity, evaluate_samples, export_attention,
                       summarize, write_report, write_summary)
from .models import ModelVariant
from .phantom import generate_phantom_cohort
from .training import TrainConfig, load_checkpoint, restore_models, train_run


def _add_phantom(sub):
    p = sub.add_parser("phantom-gen", help="generate a synthetic cohort on disk")
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--extents", type=int, nargs=3, default=(32, 32, 32))
    p.add_argument("--lesions", type=int, default=3)
    p.add_argument("--timepoints", type=int, default=3)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _add_train(sub):
    p = sub.add_parser("train", help="train one variant on one fold")
    p.add_argument("--variant", required=True,
                   choices=[v.value for v in ModelVariant])
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, nargs=3, default=(128, 128, 128))
    p.add_argument("--dtype", default="float64")
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--lr-g", type=float, default=2e-4)
    p.add_argument("--lr-d", type=float, default=1e-5)
    p.add_argument("--kv-pool", type=int, default=1)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--resume")
    p.add_argument("--out", required=True)


def _add_eval(sub):
    p = sub.add_parser("eval", help="score a checkpoint on its held-out fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, default=None,
                   help="defaults to the fold recorded in the checkpoint")
    p.add_argument("--report", required=True, help="output directory for CSVs")


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="finite-difference self-check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)


def _add_attn(sub):
    p = sub.add_parser("attn-export", help="write attention volumes for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--out", required=True)


def _cmd_phantom(args) -> int:
    cohort = generate_phantom_cohort(args.subjects, tuple(args.extents),
                                     args.lesions, args.seed, args.timepoints)
    folds = kfold_split([s.subject_id for s in cohort], args.folds, args.seed)
    manifest = save_cohort(cohort, folds, args.out, seed=args.seed)
    print(f"wrote {len(cohort)} subjects to {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig(epochs=args.epochs, lr_g=args.lr_g, lr_d=args.lr_d,
                      seed=args.seed, patch_extents=tuple(args.patch),
                      augment=not args.no_augment, dtype=args.dtype)
    kwargs = {"base_channels": args.base_channels, "levels": args.levels,
              "attn_kv_pool_g": args.kv_pool, "attn_kv_pool_d": args.kv_pool}
    result = train_run(ModelVariant(args.variant), cfg, args.manifest, args.fold,
                       args.out, model_kwargs=kwargs,
                       resume=Path(args.resume) if args.resume else None)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def _load_validation(checkpoint, manifest, fold_arg):
    header, arrays = load_checkpoint(checkpoint)
    vspec, gen, disc = restore_models(header, arrays)
    fold = header["fold"] if fold_arg is None else fold_arg
    cohort, folds = load_cohort(manifest)
    samples = [s for s in build_samples(cohort, folds, vspec.concat_t0_roi)
               if s.fold == fold]
    if not samples:
        raise ValueError(f"no validation samples in fold {fold}")
    patch = tuple(header["train_config"]["patch_extents"])
    dtype = header["train_config"]["dtype"]
    return header, vspec, gen, disc, samples, patch, dtype


def _cmd_eval(args) -> int:
    header, vspec, gen, disc, samples, patch, dtype = _load_validation(
        args.checkpoint, args.manifest, args.fold)
    variant = header["variant"]
    rows = evaluate_samples(gen, samples, patch, variant, dtype)
    baseline = evaluate_identity(samples)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    write_report(rows + baseline, out / f"{variant}_per_sample.csv")
    summaries = {variant: summarize(rows), "identity": summarize(baseline)}
    write_summary(summaries, out / f"{variant}_summary.csv")
    for name, s in summaries.items():
        print(f"{name}: PSNR {s['psnr_whole_mean']:.3f}+-{s['psnr_whole_std']:.3f}  "
              f"SSIM {s['ssim_whole_mean']:.4f}  ROI PSNR {s['psnr_roi_mean']:.3f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from . import autodiff as ad
    from .gradcheck import finite_difference_check

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.points):
        x = rng.normal(size=(2, 6, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3, 3)) * 0.5

        def f(xt, kt):
            return ad.tanh(ad.conv3d(xt, kt, stride=1, padding=1)).sum()

        err = finite_difference_check(f, (ad.Tensor(x), ad.Tensor(k)))
        worst = max(worst, err)
    status = "ok" if worst <= args.tolerance else "FAIL"
    print(f"gradcheck max relative error {worst:.3e} ({status})")
    return 0 if worst <= args.tolerance else 1


def _cmd_attn(args) -> int:
    header, vspec, gen, disc, samples, patch, dtype = _load_validation(
        args.checkpoint, args.manifest, args.fold)
    if disc is None or not vspec.use_attention_loss:
        raise ValueError("attention export needs a guided-discriminator checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        path = out / f"{sample.sample_id}_attention.lvol"
        ratio = export_attention(disc, sample, patch, path, dtype)
        print(f"{sample.sample_id}: inside/outside attention ratio {ratio:.3f}")
    return 0


_COMMANDS = {"phantom-gen": _cmd_phantom, "train": _cmd_train, "eval": _cmd_eval,
             "gradcheck": _cmd_gradcheck, "attn-export": _cmd_attn}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dgagan",
        description="longitudinal lesion-image synthesis toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_phantom, _add_train, _add_eval, _add_gradcheck, _add_attn):
        add(sub)
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
