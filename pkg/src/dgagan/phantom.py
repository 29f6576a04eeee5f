"""Synthetic longitudinal lesion phantoms.

Each subject is a smooth spherical "brain" field with an annular white
matter shell and a handful of ellipsoidal hyperintense lesions seeded
inside the shell.  Across timepoints, lesions grow, shrink, or develop a
central hypointensity; every follow-up additionally brightens lesion
tissue by a fixed amount, so part of the longitudinal change is
systematic and learnable while the geometry stays subject-specific.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import SubjectTimeline, Timepoint

LESION_BUMP_T0 = 0.55
LESION_BUMP_FOLLOWUP = 0.85   # deterministic brightening at every follow-up
HYPO_DEPTH = 0.9              # central dip factor for hypointensity lesions
NOISE_SIGMA = 0.004
EVOLUTIONS = ("grow", "shrink", "hypo")


@dataclass
class _Lesion:
    center: np.ndarray
    radii: np.ndarray      # ellipsoid semi-axes in voxels
    hypo: bool = False

    def field(self, grids) -> np.ndarray:
        """Normalized squared ellipsoid distance (<= 1 inside)."""
        zz, yy, xx = grids
        return (((zz - self.center[0]) / self.radii[0]) ** 2 +
                ((yy - self.center[1]) / self.radii[1]) ** 2 +
                ((xx - self.center[2]) / self.radii[2]) ** 2)


def _evolve(lesion: _Lesion, kind: str) -> _Lesion:
    if kind == "grow":
        return _Lesion(lesion.center.copy(), lesion.radii * 1.35, lesion.hypo)
    if kind == "shrink":
        return _Lesion(lesion.center.copy(), lesion.radii * 0.7, lesion.hypo)
    if kind == "hypo":
        return _Lesion(lesion.center.copy(), lesion.radii * 1.1, hypo=True)
    raise ValueError(f"unknown evolution {kind!r}")


def _lesion_bump(lesions, grids, wm_band, amplitude: float) -> np.ndarray:
    bump = np.zeros(wm_band.shape)
    for les in lesions:
        d2 = les.field(grids)
        inside = (d2 <= 1.0) & wm_band
        profile = np.zeros_like(bump)
        profile[inside] = amplitude * (1.0 - 0.3 * d2[inside])
        if les.hypo:
            # carve a dip in the inner half of the lesion
            core = (d2 <= 0.35) & wm_band
            profile[core] *= 1.0 - HYPO_DEPTH * (1.0 - d2[core] / 0.35)
        bump = np.maximum(bump, profile)
    return bump


def _lesion_mask(lesions, grids, wm_band) -> np.ndarray:
    mask = np.zeros(wm_band.shape, dtype=bool)
    for les in lesions:
        mask |= (les.field(grids) <= 1.0) & wm_band
    return mask.astype(np.float32)


def generate_phantom_cohort(n_subjects: int, extents=(32, 32, 32),
                            lesions_per_subject: int = 3, seed: int = 0,
                            timepoints: int = 3) -> list[SubjectTimeline]:
    """Deterministic synthetic cohort; identical seeds give identical volumes."""
    extents = tuple(int(n) for n in extents)
    if min(extents) < 16:
        raise ValueError(f"extents {extents} too small for a phantom (min 16)")
    n = min(extents)
    grids = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in extents),
                        indexing="ij")
    center = (np.array(extents) - 1) / 2.0
    r = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))

    brain_r = 0.44 * n
    wm_in, wm_out = 0.17 * n, 0.36 * n
    brain = r < brain_r
    wm_band = (r >= wm_in) & (r <= wm_out) & brain

    rng = np.random.default_rng(seed)
    cohort = []
    for si in range(n_subjects):
        texture = ndimage.gaussian_filter(rng.normal(size=extents), sigma=3.0)
        texture = 0.08 * texture / (np.abs(texture).max() + 1e-12)
        anatomy = np.where(brain, 0.45 + texture, 0.02)
        anatomy = np.where(wm_band, anatomy + 0.18, anatomy)

        lesions = []
        max_radius = 0.09 * n
        for li in range(lesions_per_subject):
            for attempt in range(200):
                radii = rng.uniform(0.055 * n, max_radius, size=3)
                direction = rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                rc = rng.uniform(wm_in + radii.max(), wm_out - radii.max())
                les = _Lesion(center + rc * direction, radii)
                if _lesion_mask([les], grids, wm_band).sum() >= 8:
                    lesions.append(les)
                    break
            else:
                raise ValueError("lesions cannot fit inside the WM band; extents too small")

        tps = []
        current = lesions
        for t in range(timepoints):
            if t > 0:
                evolved = []
                for li, les in enumerate(current):
                    # first lesion always changes geometry between timepoints
                    kind = "grow" if li == 0 else EVOLUTIONS[rng.integers(len(EVOLUTIONS))]
                    evolved.append(_evolve(les, kind))
                current = evolved
            amplitude = LESION_BUMP_T0 if t == 0 else LESION_BUMP_FOLLOWUP
            bump = _lesion_bump(current, grids, wm_band, amplitude)
            flair = anatomy + bump
            t1w = 0.9 - 0.7 * anatomy ** 1.2 - 0.4 * bump
            t2w = 0.15 + 0.6 * np.sqrt(np.clip(anatomy, 0, None)) + 0.8 * bump
            pdw = 0.25 + 0.5 * anatomy + 0.35 * bump ** 1.5
            mods = {}
            for name, vol in (("flair", flair), ("t1", t1w), ("t2", t2w), ("pd", pdw)):
                mods[name] = (vol + rng.normal(0.0, NOISE_SIGMA, size=extents)
                              ).astype(np.float32)
            tps.append(Timepoint(modalities=mods,
                                 lesion_mask=_lesion_mask(current, grids, wm_band),
                                 wm_mask=wm_band.astype(np.float32)))
        cohort.append(SubjectTimeline(subject_id=f"subj{si:02d}", timepoints=tps))
    return cohort
