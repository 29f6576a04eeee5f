"""Held-out evaluation: patch-wise prediction, metric reports, and
attention-map export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import extract_attention
from .autodiff import Tensor
from .data import (TrainingSample, Volume, aggregate_patches, extract_patch,
                   split_patches, write_volume)
from .metrics import psnr, rescale_unit, ssim


@dataclass
class SampleMetrics:
    variant: str
    fold: int
    sample_id: str
    psnr_whole: float
    ssim_whole: float
    psnr_roi: float


def _to_unit(v: np.ndarray) -> np.ndarray:
    try:
        return rescale_unit(v)
    except ValueError:           # constant prediction: fall back to the tanh range
        return np.clip((np.asarray(v, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def predict_volume(gen, sample: TrainingSample, patch_extents,
                   dtype="float64") -> np.ndarray:
    """Corner-patch predictions averaged back into one volume."""
    dtype = np.dtype(dtype)
    grid = split_patches(sample.y.shape[1:], patch_extents)
    patches = []
    with ad.no_grad():
        for i in range(len(grid.offsets)):
            x = Tensor(extract_patch(sample.x, grid, i).astype(dtype))
            patches.append(gen(x).data[0].astype(np.float64))
    return aggregate_patches(patches, grid)


def identity_prediction(sample: TrainingSample) -> np.ndarray:
    """Copy-forward baseline: the normalized baseline FLAIR channel."""
    return np.asarray(sample.x[0], dtype=np.float64)


def score_prediction(pred: np.ndarray, sample: TrainingSample, variant: str) -> SampleMetrics:
    """PSNR/SSIM on unit-rescaled volumes; ROI PSNR over the follow-up lesion mask."""
    y = _to_unit(sample.y[0])
    g = _to_unit(pred)
    roi = sample.r_les.astype(bool)
    return SampleMetrics(
        variant=variant, fold=sample.fold, sample_id=sample.sample_id,
        psnr_whole=psnr(y, g), ssim_whole=ssim(y, g),
        psnr_roi=psnr(y, g, roi) if roi.any() else float("nan"))


def evaluate_samples(gen, samples: list[TrainingSample], patch_extents,
                     variant: str, dtype="float64") -> list[SampleMetrics]:
    return [score_prediction(predict_volume(gen, s, patch_extents, dtype), s, variant)
            for s in samples]


def evaluate_identity(samples: list[TrainingSample]) -> list[SampleMetrics]:
    return [score_prediction(identity_prediction(s), s, "identity") for s in samples]


def summarize(rows: list[SampleMetrics]) -> dict:
    """Mean and standard deviation per metric, over finite values only."""
    out = {}
    for key in ("psnr_whole", "ssim_whole", "psnr_roi"):
        vals = np.array([getattr(r, key) for r in rows], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        out[f"{key}_mean"] = float(vals.mean()) if vals.size else float("nan")
        out[f"{key}_std"] = float(vals.std()) if vals.size else float("nan")
    return out


REPORT_FIELDS = ("variant", "fold", "sample", "psnr_whole", "ssim_whole", "psnr_roi")


def write_report(rows: list[SampleMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in rows:
            w.writerow([r.variant, r.fold, r.sample_id,
                        repr(r.psnr_whole), repr(r.ssim_whole), repr(r.psnr_roi)])


def write_summary(summaries: dict[str, dict], path) -> None:
    keys = ("psnr_whole_mean", "psnr_whole_std", "ssim_whole_mean",
            "ssim_whole_std", "psnr_roi_mean", "psnr_roi_std")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant",) + keys)
        for variant, summary in summaries.items():
            w.writerow([variant] + [repr(summary[k]) for k in keys])


# ------------------------------------------------------------ attention export


def attention_volume(disc, sample: TrainingSample, patch_extents,
                     dtype="float64") -> np.ndarray:
    """Normalized attention over the real pair, aggregated across patches."""
    dtype = np.dtype(dtype)
    grid = split_patches(sample.y.shape[1:], patch_extents)
    patches = []
    for i in range(len(grid.offsets)):
        x = Tensor(extract_patch(sample.x, grid, i).astype(dtype))
        y = Tensor(extract_patch(sample.y, grid, i).astype(dtype))
        with ad.no_grad():
            out = disc(x, y)
            att = extract_attention(out, disc.head, grid.patch_extents)
        patches.append(att.A_up.data.astype(np.float64))
    return aggregate_patches(patches, grid)


def attention_roi_ratio(att: np.ndarray, r_les: np.ndarray) -> float:
    """Mean attention inside the lesion ROI over the mean outside it."""
    inside = np.asarray(r_les).astype(bool)
    if not inside.any() or inside.all():
        raise ValueError("ROI ratio needs voxels on both sides of the mask")
    outside_mean = float(att[~inside].mean())
    return float(att[inside].mean()) / max(outside_mean, 1e-12)


def export_attention(disc, sample: TrainingSample, patch_extents, out_path,
                     dtype="float64") -> float:
    att = attention_volume(disc, sample, patch_extents, dtype)
    write_volume(Volume(att.astype(np.float32), role="attention"), out_path)
    return attention_roi_ratio(att, sample.r_les)
