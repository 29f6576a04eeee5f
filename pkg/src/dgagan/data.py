"""Volume containers, .lvol file I/O, normalization, augmentation,
patch protocol, and fold assignment."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy import ndimage

ROLES = ("modality", "lesion_mask", "wm_mask", "prediction", "attention")
MODALITIES = ("flair", "t1", "t2", "pd")   # flair first: channel 0 is the copy baseline

LVOL_MAGIC = b"LVOL"
LVOL_VERSION = 1


@dataclass
class Volume:
    data: np.ndarray           # 3-D float32 raster, row major
    role: str = "modality"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volumes are 3-D, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")
        if self.role.endswith("_mask") and not np.isin(self.data, (0.0, 1.0)).all():
            raise ValueError("mask volumes must be binary")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape


class VolumeFormatError(Exception):
    pass


def write_volume(vol: Volume, path) -> None:
    d, h, w = vol.extents
    header = LVOL_MAGIC + bytes([LVOL_VERSION]) + struct.pack("<III", d, h, w) + bytes([0])
    raster = np.ascontiguousarray(vol.data, dtype="<f4")
    Path(path).write_bytes(header + raster.tobytes())


def read_volume(path, role: str = "modality") -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 17:
        raise VolumeFormatError(f"{path}: truncated header")
    if raw[:4] != LVOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:4]!r}")
    if raw[4] != LVOL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {raw[4]}")
    d, h, w = struct.unpack("<III", raw[5:17])
    if min(d, h, w) < 1:
        raise VolumeFormatError(f"{path}: degenerate extents {(d, h, w)}")
    if raw[17] != 0:
        raise VolumeFormatError(f"{path}: unknown dtype byte {raw[17]}")
    expected = 18 + 4 * d * h * w
    if len(raw) != expected:
        raise VolumeFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw[18:], dtype="<f4").reshape(d, h, w)
    return Volume(data=data.copy(), role=role)


def volume_io(mode: str, path, vol: Volume | None = None, role: str = "modality"):
    if mode == "write":
        write_volume(vol, path)
        return vol
    if mode == "read":
        return read_volume(path, role=role)
    raise ValueError(f"unknown mode {mode!r}")


# ------------------------------------------------------------------- timelines


@dataclass
class Timepoint:
    modalities: dict[str, np.ndarray]     # raw intensities, keyed by MODALITIES
    lesion_mask: np.ndarray
    wm_mask: np.ndarray


@dataclass
class SubjectTimeline:
    subject_id: str
    timepoints: list[Timepoint]
    interval_label: str = "approximately one year apart"

    def __post_init__(self):
        if len(self.timepoints) < 2:
            raise ValueError("a timeline needs at least two timepoints")
        extents = {tp.lesion_mask.shape for tp in self.timepoints}
        extents |= {m.shape for tp in self.timepoints for m in tp.modalities.values()}
        if len(extents) != 1:
            raise ValueError("all volumes of a subject must share extents")


@dataclass
class TrainingSample:
    x: np.ndarray              # [C, D, H, W] stacked normalized t0 channels
    y: np.ndarray              # [1, D, H, W] normalized t1 FLAIR
    r_les: np.ndarray          # t1 lesion mask
    r_les_t0: np.ndarray
    r_wm: np.ndarray
    subject_id: str
    fold: int
    sample_id: str


# ---------------------------------------------------------------- normalization


def normalize_symmetric(v: np.ndarray) -> np.ndarray:
    """Affine map of [min, max] onto [-1, 1]."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        raise ValueError("cannot normalize a constant volume")
    return 2.0 * (v - lo) / (hi - lo) - 1.0


# ----------------------------------------------------------------- augmentation

ROTATION_MAX_DEG = 18.0
SCALE_RANGE = (0.85, 1.15)


def _rotation_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx     # x first, then y, then z


def _resample(vol: np.ndarray, matrix_inv: np.ndarray, center: np.ndarray,
              order: int, cval: float) -> np.ndarray:
    offset = center - matrix_inv @ center
    return ndimage.affine_transform(vol, matrix_inv, offset=offset, order=order,
                                    cval=cval, mode="constant")


def augment(sample: TrainingSample, seed: int) -> TrainingSample:
    """One random rigid-ish transform applied identically to every channel.

    Per-axis rotations in +-18 deg, isotropic scale in [0.85, 1.15] and
    independent axis flips; images resample trilinearly with background
    fill at the normalized floor, masks nearest-neighbour.
    """
    rng = np.random.default_rng(seed)
    angles = np.deg2rad(rng.uniform(-ROTATION_MAX_DEG, ROTATION_MAX_DEG, size=3))
    scale = rng.uniform(*SCALE_RANGE)
    flips = rng.random(3) < 0.5
    rot = _rotation_matrix(*angles)
    matrix_inv = rot.T / scale   # inverse of scale * rot, mapping output -> input
    center = (np.array(sample.y.shape[1:]) - 1) / 2.0

    def images(stack):
        out = np.stack([_resample(ch, matrix_inv, center, order=1, cval=-1.0)
                        for ch in stack])
        for ax, f in enumerate(flips):
            if f:
                out = np.flip(out, axis=ax + 1)
        return np.ascontiguousarray(out)

    def mask(m):
        out = _resample(m.astype(np.float64), matrix_inv, center, order=0, cval=0.0)
        for ax, f in enumerate(flips):
            if f:
                out = np.flip(out, axis=ax)
        return np.ascontiguousarray(np.rint(out))

    return TrainingSample(
        x=images(sample.x), y=images(sample.y),
        r_les=mask(sample.r_les), r_les_t0=mask(sample.r_les_t0),
        r_wm=mask(sample.r_wm),
        subject_id=sample.subject_id, fold=sample.fold, sample_id=sample.sample_id)


# -------------------------------------------------------------- patch protocol


@dataclass
class PatchGrid:
    vol_extents: tuple[int, int, int]
    patch_extents: tuple[int, int, int]
    offsets: list[tuple[int, int, int]]
    coverage: np.ndarray = field(repr=False)


def split_patches(vol_extents, patch_extents) -> PatchGrid:
    """Corner-anchored overlapping patches: start offsets {0, extent - patch}."""
    vol_extents = tuple(int(n) for n in vol_extents)
    patch_extents = tuple(int(n) for n in patch_extents)
    if any(p > v for p, v in zip(patch_extents, vol_extents)):
        raise ValueError(f"patch {patch_extents} larger than volume {vol_extents}")
    axis_offsets = [sorted({0, v - p}) for v, p in zip(vol_extents, patch_extents)]
    offsets = [tuple(o) for o in product(*axis_offsets)]
    coverage = np.zeros(vol_extents, dtype=np.float64)
    for od, oh, ow in offsets:
        coverage[od:od + patch_extents[0], oh:oh + patch_extents[1],
                 ow:ow + patch_extents[2]] += 1.0
    return PatchGrid(vol_extents, patch_extents, offsets, coverage)


def extract_patch(vol: np.ndarray, grid: PatchGrid, i: int) -> np.ndarray:
    od, oh, ow = grid.offsets[i]
    pd, ph, pw = grid.patch_extents
    return vol[..., od:od + pd, oh:oh + ph, ow:ow + pw]


def aggregate_patches(patches, grid: PatchGrid) -> np.ndarray:
    """Per-voxel mean over covering patches."""
    if len(patches) != len(grid.offsets):
        raise ValueError(f"expected {len(grid.offsets)} patches, got {len(patches)}")
    acc = np.zeros(grid.vol_extents, dtype=np.float64)
    pd, ph, pw = grid.patch_extents
    for patch, (od, oh, ow) in zip(patches, grid.offsets):
        if patch.shape != grid.patch_extents:
            raise ValueError(f"patch shape {patch.shape} != {grid.patch_extents}")
        acc[od:od + pd, oh:oh + ph, ow:ow + pw] += patch
    return acc / grid.coverage


# -------------------------------------------------------------------- k-fold


def kfold_split(subject_ids, k: int, seed: int) -> dict[str, int]:
    """Participant-level fold assignment; each subject validates in one fold."""
    ids = list(subject_ids)
    if k > len(ids):
        raise ValueError(f"k={k} exceeds {len(ids)} subjects")
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[int(idx)]: int(i % k) for i, idx in enumerate(order)}


# ------------------------------------------------------------ cohort manifest


def save_cohort(cohort: list[SubjectTimeline], folds: dict[str, int], out_dir,
                seed: int | None = None) -> Path:
    """Write every volume as .lvol plus a JSON manifest; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for subj in cohort:
        tp_entries = []
        for t, tp in enumerate(subj.timepoints):
            files = {}
            base = f"{subj.subject_id}_t{t}"
            for name in MODALITIES:
                rel = f"{base}_{name}.lvol"
                write_volume(Volume(tp.modalities[name], "modality"), out_dir / rel)
                files[name] = rel
            for role, arr in (("lesion_mask", tp.lesion_mask), ("wm_mask", tp.wm_mask)):
                rel = f"{base}_{role}.lvol"
                write_volume(Volume(arr, role), out_dir / rel)
                files[role] = rel
            tp_entries.append({"index": t, "files": files})
        subjects.append({"id": subj.subject_id, "fold": folds[subj.subject_id],
                         "interval": subj.interval_label, "timepoints": tp_entries})
    manifest = {"version": 1, "seed": seed, "subjects": subjects}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_cohort(manifest_path) -> tuple[list[SubjectTimeline], dict[str, int]]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    cohort, folds = [], {}
    for entry in manifest["subjects"]:
        tps = []
        for tp in entry["timepoints"]:
            files = tp["files"]
            tps.append(Timepoint(
                modalities={n: read_volume(root / files[n]).data for n in MODALITIES},
                lesion_mask=read_volume(root / files["lesion_mask"], "lesion_mask").data,
                wm_mask=read_volume(root / files["wm_mask"], "wm_mask").data))
        cohort.append(SubjectTimeline(entry["id"], tps,
                                      entry.get("interval", "approximately one year apart")))
        folds[entry["id"]] = int(entry["fold"])
    return cohort, folds


def build_samples(cohort: list[SubjectTimeline], folds: dict[str, int],
                  concat_t0_roi: bool = False) -> list[TrainingSample]:
    """Consecutive-timepoint pairs as (t0 stack -> t1 FLAIR) samples."""
    samples = []
    for subj in cohort:
        for t in range(len(subj.timepoints) - 1):
            t0, t1 = subj.timepoints[t], subj.timepoints[t + 1]
            channels = [normalize_symmetric(t0.modalities[n]) for n in MODALITIES]
            if concat_t0_roi:
                channels.append(2.0 * t0.lesion_mask.astype(np.float64) - 1.0)
            samples.append(TrainingSample(
                x=np.stack(channels),
                y=normalize_symmetric(t1.modalities["flair"])[None],
                r_les=t1.lesion_mask.astype(np.float64),
                r_les_t0=t0.lesion_mask.astype(np.float64),
                r_wm=t1.wm_mask.astype(np.float64),
                subject_id=subj.subject_id,
                fold=folds[subj.subject_id],
                sample_id=f"{subj.subject_id}_t{t}to{t + 1}"))
    return samples
