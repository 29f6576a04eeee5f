"""Grad-CAM attention extraction from the discriminator and the pixel-level
supervision loss that trains the map toward the lesion ROI.

The channel weights come from a dedicated gradient pass over a detached
copy of the tapped features, so the main training tape and the parameter
gradients of the adversarial loss are untouched; the weights then enter
the attention map as constants and the supervision loss flows back into
the discriminator only through the tapped features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import DiscriminatorOutput


@dataclass
class GradCamWeights:
    w: np.ndarray      # one weight per tap channel


@dataclass
class AttentionMap:
    A: Tensor                      # raw non-negative map [d, h, w], on the live graph
    A_up: Tensor | None            # min-max normalized map at ROI resolution
    norm_min: float
    norm_max: float


RANGE_GUARD = 1e-12


def gradcam_weights(d_out: DiscriminatorOutput, head: Callable[[Tensor], Tensor]) -> GradCamWeights:
    """Per-channel global average of ds/df_l, computed on a dedicated tape."""
    if d_out.f_l is None:
        raise ValueError("discriminator output carries no tapped features")
    leaf = Tensor(d_out.f_l.data.copy(), requires_grad=True)
    with ad.enable_grad():
        s = head(leaf)
        s.backward()
    return GradCamWeights(w=leaf.grad.mean(axis=(1, 2, 3)))


def gradcam_map(f_l: Tensor, weights: GradCamWeights) -> Tensor:
    """A = ReLU(sum_k w_k f_{l,k}): a 1x1x1 convolution of the tap by w."""
    k = f_l.shape[0]
    if weights.w.shape != (k,):
        raise ValueError(f"weight length {weights.w.shape} does not match {k} tap channels")
    kernel = Tensor(weights.w.reshape(1, k, 1, 1, 1).astype(f_l.data.dtype))
    a = ad.relu(ad.conv3d(f_l, kernel))
    return ad.reshape(a, f_l.shape[1:])


def normalize_map(a: Tensor) -> tuple[Tensor, float, float]:
    """Min-max normalize to [0, 1]; an (almost) constant map collapses to zero."""
    lo = float(a.data.min())
    hi = float(a.data.max())
    if hi - lo < RANGE_GUARD:
        return a * 0.0, lo, hi
    amin = ad.tmin(a)
    amax = ad.tmax(a)
    return (a - amin) / (amax - amin), lo, hi


def extract_attention(d_out: DiscriminatorOutput, head: Callable[[Tensor], Tensor],
                      target_extents=None) -> AttentionMap:
    """Full Grad-CAM pipeline: weights -> map -> normalize -> upsample."""
    w = gradcam_weights(d_out, head)
    a = gradcam_map(d_out.f_l, w)
    a_norm, lo, hi = normalize_map(a)
    a_up = None
    if target_extents is not None:
        a4 = ad.reshape(a_norm, (1, *a_norm.shape))
        a_up = ad.reshape(ad.upsample_trilinear(a4, tuple(target_extents)),
                          tuple(target_extents))
    return AttentionMap(A=a, A_up=a_up, norm_min=lo, norm_max=hi)


def attention_supervision_loss(att: AttentionMap, r_les: np.ndarray) -> Tensor:
    """Mean squared difference between the upsampled normalized map and the ROI."""
    mask = np.asarray(r_les)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("lesion mask must be binary")
    if att.A_up is None:
        raise ValueError("attention map was extracted without a target resolution")
    if att.A_up.shape != mask.shape:
        raise ValueError(f"extent mismatch: map {att.A_up.shape} vs mask {mask.shape}")
    diff = att.A_up - Tensor(mask.astype(att.A_up.data.dtype))
    return (diff * diff).mean()
