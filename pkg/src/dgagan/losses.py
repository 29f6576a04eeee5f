"""Training objectives: adversarial cross-entropy with one-sided label
smoothing, the per-patch region-weighted L1, and the supervision-weight
schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHT_FLOOR = 0.05
OMEGA_PEAK = 10.0


@dataclass
class RegionWeights:
    m: int
    m_les: int
    m_wm: int
    m_other: int
    weights: np.ndarray    # one weight per voxel


@dataclass
class LossConfig:
    lambda_l1: float
    real_label: float = 0.9     # one-sided label smoothing target
    omega_peak: float = OMEGA_PEAK


def adversarial_losses(s_real: Tensor, s_fake: Tensor,
                       smoothing: float = 0.9) -> tuple[Tensor, Tensor]:
    """(discriminator loss, non-saturating generator adversarial loss).

    Both are assembled from softplus so extreme logits stay finite:
    -log sigmoid(s) = softplus(-s) and -log(1 - sigmoid(s)) = softplus(s).
    """
    l_d = smoothing * ad.softplus(-s_real) + ad.softplus(s_fake)
    l_g_adv = ad.softplus(-s_fake)
    return l_d, l_g_adv


def region_weights(r_les: np.ndarray, r_wm: np.ndarray) -> RegionWeights:
    """Per-voxel weights 1 - |region|/m over the lesion / WM / other partition.

    The lesion mask wins where the two masks overlap.  A patch collapsing to
    a single region would weight every voxel 0 and kill the loss, so those
    degenerate patches are floored at a small constant instead.
    """
    les = np.asarray(r_les).astype(bool)
    wm = np.asarray(r_wm).astype(bool)
    if les.shape != wm.shape:
        raise ValueError(f"mask extent mismatch: {les.shape} vs {wm.shape}")
    wm = wm & ~les
    other = ~(les | wm)
    m = les.size
    m_les = int(les.sum())
    m_wm = int(wm.sum())
    m_other = int(other.sum())

    w = np.zeros(les.shape, dtype=np.float64)
    w[les] = 1.0 - m_les / m
    w[wm] = 1.0 - m_wm / m
    w[other] = 1.0 - m_other / m
    if sum(1 for c in (m_les, m_wm, m_other) if c > 0) == 1:
        w[:] = WEIGHT_FLOOR
    return RegionWeights(m=m, m_les=m_les, m_wm=m_wm, m_other=m_other, weights=w)


def weighted_l1(y: Tensor, g: Tensor, rw: RegionWeights) -> Tensor:
    """(1 / 2m) * sum_i w_i |y_i - g_i|."""
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {g.shape}")
    w = Tensor(rw.weights.reshape(y.shape).astype(g.data.dtype))
    return (w * (y - g).abs()).sum() * (1.0 / (2.0 * rw.m))


def plain_l1(y: Tensor, g: Tensor) -> Tensor:
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {g.shape}")
    return (y - g).abs().mean()


def omega_schedule(epoch: float, total_epochs: float, peak: float = OMEGA_PEAK) -> float:
    """0 on the first third, linear ramp to ``peak`` on the second, flat after.

    At total=300 this reproduces the 100/200/300 breakpoint schedule.
    """
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    b1 = total_epochs / 3.0
    b2 = 2.0 * total_epochs / 3.0
    if epoch < b1:
        return 0.0
    if epoch < b2:
        return peak * (epoch - b1) / (b2 - b1)
    return peak


def generator_objective(l_g_adv: Tensor, l_l1: Tensor, lambda_l1: float) -> Tensor:
    return l_g_adv + lambda_l1 * l_l1


def discriminator_objective(l_d: Tensor, l_e: Tensor | None, omega: float) -> Tensor:
    if l_e is None or omega == 0.0:
        return l_d
    return l_d + omega * l_e
