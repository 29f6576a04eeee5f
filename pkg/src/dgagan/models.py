"""Generator and discriminator architectures for the four compared methods.

The generator is an encoder/decoder U-Net with skip connections and an
optional pair of self-attention layers in the decoder.  The guided
discriminator is a stride-1 stack of dilated conv blocks with a
self-attention layer ahead of the tapped block, so the tapped features
keep the full input resolution for attention extraction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv3dLayer, ConvBlock, Module, SelfAttention3d


class ModelVariant(enum.Enum):
    UNET = "unet"
    CGAN = "cgan"
    CFSAGAN = "cfsagan"
    DGAGAN = "dgagan"


@dataclass
class GeneratorConfig:
    levels: int = 4
    base_channels: int = 16
    in_channels: int = 4
    self_attention_levels: tuple[int, ...] = ()   # decoder level indices, 0 = full res
    attn_reduction: int = 4
    attn_kv_pool: int = 1
    dtype: type = np.float64

    def level_channels(self, i: int) -> int:
        return self.base_channels * 2 ** i


@dataclass
class DiscriminatorConfig:
    in_channels: int = 5                      # |x stack| + 1 target/fake channel
    channels: tuple[int, ...] = (8, 16, 16, 16, 16)
    dilations: tuple[int, ...] = (1, 1, 2, 4, 8)
    attn_reduction: int = 4
    attn_kv_pool: int = 1
    dtype: type = np.float64


@dataclass
class DiscriminatorOutput:
    s: Tensor          # pre-sigmoid realness logit, shape ()
    f_l: Tensor        # tapped features [K, D, H, W]


class Generator(Module):
    """3D U-Net; self-attention inserted at configured decoder levels."""

    def __init__(self, cfg: GeneratorConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        L = cfg.levels
        ch = [cfg.level_channels(i) for i in range(L)]
        dt = cfg.dtype

        self.enc_in = ConvBlock(cfg.in_channels, ch[0], rng, dtype=dt)
        self.downs = [ConvBlock(ch[i - 1], ch[i], rng, stride=2, dtype=dt)
                      for i in range(1, L)]
        self.enc_blocks = [ConvBlock(ch[i], ch[i], rng, dtype=dt) for i in range(1, L)]
        self.up_convs = [ConvBlock(ch[i + 1], ch[i], rng, act="relu", dtype=dt)
                         for i in range(L - 2, -1, -1)]
        self.dec_blocks = [ConvBlock(2 * ch[i], ch[i], rng, act="relu", dtype=dt)
                           for i in range(L - 2, -1, -1)]
        self.attn = [SelfAttention3d(ch[i], cfg.attn_reduction, cfg.attn_kv_pool,
                                     rng=rng, dtype=dt)
                     if i in cfg.self_attention_levels else None
                     for i in range(L - 2, -1, -1)]
        self.out_conv = Conv3dLayer(ch[0], 1, kernel=3, padding=1, rng=rng, dtype=dt)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.shape[0] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[0]}")
        div = 2 ** (cfg.levels - 1)
        if any(n % div for n in x.shape[1:]):
            raise ValueError(f"spatial extents {x.shape[1:]} not divisible by {div}")

        skips = [self.enc_in(x)]
        h = skips[0]
        for down, block in zip(self.downs, self.enc_blocks):
            h = block(down(h))
            skips.append(h)

        for j, (up, block, attn) in enumerate(zip(self.up_convs, self.dec_blocks, self.attn)):
            skip = skips[-(j + 2)]
            h = ad.upsample_trilinear(h, skip.shape[1:])
            h = up(h)
            h = block(ad.concat([h, skip], axis=0))
            if attn is not None:
                h = attn(h)
        return ad.tanh(self.out_conv(h))


class GuidedDiscriminator(Module):
    """Stride-1 dilated conv stack -> self-attention -> tap block -> GAP -> dense."""

    def __init__(self, cfg: DiscriminatorConfig, seed: int):
        if len(cfg.channels) != len(cfg.dilations):
            raise ValueError("channel and dilation schedules must align")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        dt = cfg.dtype
        chans = [cfg.in_channels, *cfg.channels]
        self.blocks = [ConvBlock(chans[i], chans[i + 1], rng, dilation=cfg.dilations[i],
                                 norm=(i > 0), dtype=dt)
                       for i in range(len(cfg.channels) - 1)]
        self.attn = SelfAttention3d(chans[-2], cfg.attn_reduction, cfg.attn_kv_pool,
                                    rng=rng, dtype=dt)
        self.tap = ConvBlock(chans[-2], chans[-1], rng, dilation=cfg.dilations[-1], dtype=dt)
        k = cfg.channels[-1]
        self.dense_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / k), size=(1, k)).astype(dt),
                              requires_grad=True)
        self.dense_b = Tensor(np.zeros((1, 1), dtype=dt), requires_grad=True)

    def tap_features(self, x: Tensor, y_or_fake: Tensor) -> Tensor:
        if x.shape[1:] != y_or_fake.shape[1:]:
            raise ValueError(f"misaligned shapes: {x.shape[1:]} vs {y_or_fake.shape[1:]}")
        h = ad.concat([x, y_or_fake], axis=0)
        for block in self.blocks:
            h = block(h)
        h = self.attn(h)
        return self.tap(h)

    def head(self, f_l: Tensor) -> Tensor:
        """Realness logit from tapped features; also used by the Grad-CAM pass."""
        pooled = ad.reshape(ad.global_avg_pool(f_l), (-1, 1))
        s = self.dense_w @ pooled + self.dense_b
        return ad.reshape(s, ())

    def forward(self, x: Tensor, y_or_fake: Tensor) -> DiscriminatorOutput:
        f_l = self.tap_features(x, y_or_fake)
        return DiscriminatorOutput(s=self.head(f_l), f_l=f_l)


class PlainDiscriminator(Module):
    """Pix2pix-flavoured strided discriminator used by the cGAN / CF-SAGAN baselines."""

    def __init__(self, in_channels: int = 5, channels: tuple[int, ...] = (16, 32, 64),
                 seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        chans = [in_channels, *channels]
        self.blocks = [ConvBlock(chans[i], chans[i + 1], rng, stride=2,
                                 norm=(i > 0), dtype=dtype)
                       for i in range(len(channels))]
        self.post = ConvBlock(channels[-1], channels[-1], rng, dtype=dtype)
        k = channels[-1]
        self.dense_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / k), size=(1, k)).astype(dtype),
                              requires_grad=True)
        self.dense_b = Tensor(np.zeros((1, 1), dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor, y_or_fake: Tensor) -> DiscriminatorOutput:
        if x.shape[1:] != y_or_fake.shape[1:]:
            raise ValueError(f"misaligned shapes: {x.shape[1:]} vs {y_or_fake.shape[1:]}")
        h = ad.concat([x, y_or_fake], axis=0)
        for block in self.blocks:
            h = block(h)
        f_l = self.post(h)
        pooled = ad.reshape(ad.global_avg_pool(f_l), (-1, 1))
        s = ad.reshape(self.dense_w @ pooled + self.dense_b, ())
        return DiscriminatorOutput(s=s, f_l=f_l)


def build_generator(cfg: GeneratorConfig, seed: int) -> Generator:
    return Generator(cfg, seed)


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> GuidedDiscriminator:
    return GuidedDiscriminator(cfg, seed)


def generator_forward(g: Generator, x: Tensor) -> Tensor:
    return g(x)


def discriminator_forward(d, x: Tensor, y_or_fake: Tensor) -> DiscriminatorOutput:
    return d(x, y_or_fake)


@dataclass
class VariantSpec:
    """Everything a variant determines: architectures, loss stack, trade-offs."""

    variant: ModelVariant
    gen_config: GeneratorConfig
    disc_kind: str                     # "none" | "plain" | "guided"
    disc_config: DiscriminatorConfig | None
    lambda_l1: float
    l1_kind: str                       # "plain" | "weighted"
    use_attention_loss: bool
    concat_t0_roi: bool

    @property
    def has_discriminator(self) -> bool:
        return self.disc_kind != "none"


def variant_registry(variant: ModelVariant, modalities: int = 4, levels: int = 4,
                     base_channels: int = 16, disc_base_channels: int = 8,
                     attn_kv_pool_g: int = 1, attn_kv_pool_d: int = 1,
                     dtype=np.float64) -> VariantSpec:
    """Model + loss configuration per compared method."""
    attn_levels = (levels - 2, levels - 3) if levels >= 3 else (levels - 2,)
    dc = disc_base_channels
    guided_channels = (dc, 2 * dc, 2 * dc, 2 * dc, 2 * dc)
    plain_gen = dict(levels=levels, base_channels=base_channels, dtype=dtype)
    if variant is ModelVariant.UNET:
        # the t0 lesion ROI rides along as an extra input channel
        return VariantSpec(variant,
                           GeneratorConfig(in_channels=modalities + 1, **plain_gen),
                           "none", None, lambda_l1=1.0, l1_kind="plain",
                           use_attention_loss=False, concat_t0_roi=True)
    if variant is ModelVariant.CGAN:
        return VariantSpec(variant,
                           GeneratorConfig(in_channels=modalities, **plain_gen),
                           "plain",
                           DiscriminatorConfig(in_channels=modalities + 1, dtype=dtype),
                           lambda_l1=300.0, l1_kind="plain",
                           use_attention_loss=False, concat_t0_roi=False)
    attn_gen = GeneratorConfig(in_channels=modalities,
                               self_attention_levels=tuple(sorted(attn_levels)),
                               attn_kv_pool=attn_kv_pool_g, **plain_gen)
    if variant is ModelVariant.CFSAGAN:
        return VariantSpec(variant, attn_gen, "plain",
                           DiscriminatorConfig(in_channels=modalities + 1, dtype=dtype),
                           lambda_l1=1800.0, l1_kind="weighted",
                           use_attention_loss=False, concat_t0_roi=False)
    if variant is ModelVariant.DGAGAN:
        return VariantSpec(variant, attn_gen, "guided",
                           DiscriminatorConfig(in_channels=modalities + 1,
                                               channels=guided_channels,
                                               attn_kv_pool=attn_kv_pool_d, dtype=dtype),
                           lambda_l1=1800.0, l1_kind="weighted",
                           use_attention_loss=True, concat_t0_roi=False)
    raise ValueError(f"unknown variant {variant!r}")


def build_models(spec: VariantSpec, seed: int):
    """Instantiate (generator, discriminator-or-None) for a variant spec."""
    gen = Generator(spec.gen_config, seed)
    if spec.disc_kind == "none":
        return gen, None
    if spec.disc_kind == "plain":
        return gen, PlainDiscriminator(in_channels=spec.disc_config.in_channels,
                                       seed=seed + 1, dtype=spec.disc_config.dtype)
    return gen, GuidedDiscriminator(spec.disc_config, seed + 1)
