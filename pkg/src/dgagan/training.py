"""Optimization loop: alternating D/G updates, supervision-weight schedule,
per-epoch metric logging, and bit-exact checkpoint/resume."""

from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import attention_supervision_loss, extract_attention
from .autodiff import Tensor
from .data import (TrainingSample, augment, build_samples, extract_patch,
                   load_cohort, split_patches)
from .losses import (adversarial_losses, discriminator_objective,
                     generator_objective, omega_schedule, plain_l1,
                     region_weights, weighted_l1)
from .models import ModelVariant, build_models, variant_registry
from .optim import Adam

CKPT_MAGIC = b"LCKP"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 300
    lr_g: float = 2e-4
    lr_d: float = 1e-5
    weight_decay_g: float = 7e-8
    weight_decay_d: float = 1e-5
    batch_size: int = 1
    seed: int = 0
    patch_extents: tuple[int, int, int] = (128, 128, 128)
    augment: bool = True
    smoothing: float = 0.9
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class PatchSample:
    x: np.ndarray
    y: np.ndarray
    r_les: np.ndarray
    r_wm: np.ndarray
    sample_id: str


@dataclass
class RunResult:
    checkpoint_path: Path
    metrics_path: Path
    rows: list[dict]
    train_subjects: list[str]


def _patchify(sample: TrainingSample, patch_extents, dtype) -> list[PatchSample]:
    grid = split_patches(sample.y.shape[1:], patch_extents)
    out = []
    for i in range(len(grid.offsets)):
        out.append(PatchSample(
            x=extract_patch(sample.x, grid, i).astype(dtype),
            y=extract_patch(sample.y, grid, i).astype(dtype),
            r_les=extract_patch(sample.r_les, grid, i),
            r_wm=extract_patch(sample.r_wm, grid, i),
            sample_id=f"{sample.sample_id}#p{i}"))
    return out


def _check_finite(value: float, what: str, context: str) -> None:
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite {what} ({value}) at {context}")


def train_step_unet(patch: PatchSample, gen, opt_g: Adam) -> dict:
    pred = gen(Tensor(patch.x))
    loss = plain_l1(Tensor(patch.y), pred)
    _check_finite(loss.item(), "L1 loss", patch.sample_id)
    gen.zero_grad()
    loss.backward()
    opt_g.step()
    return {"l_l1": loss.item()}


def train_step_gan(patch: PatchSample, gen, disc, opt_g: Adam, opt_d: Adam,
                   vspec, omega: float, smoothing: float) -> dict:
    x = Tensor(patch.x)
    y = Tensor(patch.y)
    metrics: dict = {}

    # -- discriminator phase (generator output detached)
    with ad.no_grad():
        fake_data = gen(x).data
    out_real = disc(x, y)
    out_fake = disc(x, Tensor(fake_data))
    l_d, _ = adversarial_losses(out_real.s, out_fake.s, smoothing)
    l_e = None
    if vspec.use_attention_loss:
        att = extract_attention(out_real, disc.head, patch.r_les.shape)
        l_e = attention_supervision_loss(att, patch.r_les)
        metrics["l_e"] = l_e.item()
        inside = patch.r_les.astype(bool)
        a = att.A_up.data
        metrics["attn_inside"] = float(a[inside].mean()) if inside.any() else 0.0
        metrics["attn_outside"] = float(a[~inside].mean()) if (~inside).any() else 0.0
    loss_d = discriminator_objective(l_d, l_e, omega)
    _check_finite(loss_d.item(), "discriminator loss", patch.sample_id)
    disc.zero_grad()
    gen.zero_grad()
    loss_d.backward()
    opt_d.step()
    metrics["l_d"] = l_d.item()

    # -- generator phase (discriminator frozen)
    disc.set_requires_grad(False)
    try:
        fake = gen(x)
        out = disc(x, fake)
        l_g_adv = ad.softplus(-out.s)
        if vspec.l1_kind == "weighted":
            rw = region_weights(patch.r_les, patch.r_wm)
            l1 = weighted_l1(y, fake, rw)
        else:
            l1 = plain_l1(y, fake)
        loss_g = generator_objective(l_g_adv, l1, vspec.lambda_l1)
        _check_finite(loss_g.item(), "generator loss", patch.sample_id)
        gen.zero_grad()
        disc.zero_grad()
        loss_g.backward()
        opt_g.step()
    finally:
        disc.set_requires_grad(True)
    metrics["l_g_adv"] = l_g_adv.item()
    metrics["l_l1"] = l1.item()
    return metrics


METRIC_FIELDS = ("epoch", "l_d", "l_g_adv", "l_l1", "l_e", "omega", "wall_time")


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRIC_FIELDS})


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path, variant: ModelVariant, model_kwargs: dict, cfg: TrainConfig,
                    fold: int, epoch: int, gen, disc, opt_g: Adam,
                    opt_d: Adam | None, rng: np.random.Generator) -> Path:
    arrays: list[tuple[str, np.ndarray]] = []
    for group, module, opt in (("gen", gen, opt_g), ("disc", disc, opt_d)):
        if module is None:
            continue
        for name, p in module.params().items():
            arrays.append((f"{group}.param.{name}", p.data))
        if opt is not None:
            for name, m in opt.m.items():
                arrays.append((f"{group}.m.{name}", m))
            for name, v in opt.v.items():
                arrays.append((f"{group}.v.{name}", v))
    header = {
        "variant": variant.value,
        "model_kwargs": model_kwargs,
        "train_config": asdict(cfg),
        "fold": fold,
        "epoch": epoch,
        "adam_t": {"gen": opt_g.t, "disc": opt_d.t if opt_d else 0},
        "rng_state": rng.bit_generator.state,
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.str}
                   for n, a in arrays],
    }
    blob = json.dumps(header).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<I", len(blob)) + blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())
    return path


def load_checkpoint(path):
    """Returns (header, {array name: ndarray})."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC or raw[4] != CKPT_VERSION:
        raise ValueError(f"{path}: not a checkpoint file")
    hlen = struct.unpack("<I", raw[5:9])[0]
    header = json.loads(raw[9:9 + hlen].decode())
    offset = 9 + hlen
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        arrays[entry["name"]] = np.frombuffer(
            raw[offset:offset + nbytes], dtype=dt).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    return header, arrays


def restore_models(header: dict, arrays: dict):
    """Rebuild (vspec, gen, disc) from a checkpoint header and load parameters."""
    variant = ModelVariant(header["variant"])
    kwargs = dict(header["model_kwargs"])
    kwargs["dtype"] = np.dtype(kwargs.get("dtype", "float64")).type
    vspec = variant_registry(variant, **kwargs)
    gen, disc = build_models(vspec, header["train_config"]["seed"])
    for group, module in (("gen", gen), ("disc", disc)):
        if module is None:
            continue
        for name, p in module.params().items():
            p.data = arrays[f"{group}.param.{name}"].astype(p.data.dtype)
    return vspec, gen, disc


# ------------------------------------------------------------------- train_run


def train_run(variant: ModelVariant, cfg: TrainConfig, manifest_path, fold: int,
              out_dir, model_kwargs: dict | None = None,
              resume: Path | None = None) -> RunResult:
    """Full protocol for one variant on one fold; deterministic per seed."""
    model_kwargs = dict(model_kwargs or {})
    model_kwargs.setdefault("dtype", cfg.dtype)
    reg_kwargs = dict(model_kwargs)
    reg_kwargs["dtype"] = np.dtype(reg_kwargs["dtype"]).type
    vspec = variant_registry(variant, **reg_kwargs)

    cohort, folds = load_cohort(manifest_path)
    if fold not in set(folds.values()):
        raise ValueError(f"fold {fold} absent from manifest")
    samples = build_samples(cohort, folds, concat_t0_roi=vspec.concat_t0_roi)
    train_samples = [s for s in samples if s.fold != fold]
    val_subjects = {s.subject_id for s in samples if s.fold == fold}
    train_subjects = sorted({s.subject_id for s in train_samples})
    assert not val_subjects & set(train_subjects), "fold contamination"

    gen, disc = build_models(vspec, cfg.seed)
    opt_g = Adam(gen.params(), cfg.lr_g, weight_decay=cfg.weight_decay_g)
    opt_d = Adam(disc.params(), cfg.lr_d, weight_decay=cfg.weight_decay_d) if disc else None
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    rows: list[dict] = []

    if resume is not None:
        header, arrays = load_checkpoint(resume)
        if header["variant"] != variant.value or header["fold"] != fold:
            raise ValueError("checkpoint does not match the requested run")
        for group, module, opt in (("gen", gen, opt_g), ("disc", disc, opt_d)):
            if module is None:
                continue
            for name, p in module.params().items():
                p.data = arrays[f"{group}.param.{name}"].copy()
            if opt is not None:
                opt.t = header["adam_t"][group]
                opt.m = {n: arrays[f"{group}.m.{n}"].copy() for n in module.params()}
                opt.v = {n: arrays[f"{group}.v.{n}"].copy() for n in module.params()}
        rng.bit_generator.state = header["rng_state"]
        start_epoch = header["epoch"] + 1

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = cfg.np_dtype

    for epoch in range(start_epoch, cfg.epochs):
        t_start = time.perf_counter()
        omega = omega_schedule(epoch, cfg.epochs)
        sums: dict[str, float] = {}
        n_steps = 0
        for idx in rng.permutation(len(train_samples)):
            sample = train_samples[int(idx)]
            aug_seed = int(rng.integers(2 ** 31))
            if cfg.augment:
                sample = augment(sample, aug_seed)
            for patch in _patchify(sample, cfg.patch_extents, dtype):
                if disc is None:
                    step = train_step_unet(patch, gen, opt_g)
                else:
                    step = train_step_gan(patch, gen, disc, opt_g, opt_d, vspec,
                                          omega, cfg.smoothing)
                for k, v in step.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_steps += 1
        row = {"epoch": epoch, "omega": omega,
               "wall_time": round(time.perf_counter() - t_start, 3)}
        for k, total in sums.items():
            row[k] = total / n_steps
        rows.append(row)

    ckpt = save_checkpoint(out_dir / f"{variant.value}_fold{fold}.ckpt", variant,
                           {k: (v if k != "dtype" else np.dtype(v).name)
                            for k, v in model_kwargs.items()},
                           cfg, fold, cfg.epochs - 1, gen, disc, opt_g, opt_d, rng)
    metrics_path = out_dir / f"{variant.value}_fold{fold}_metrics.csv"
    write_metrics_csv(rows, metrics_path)
    return RunResult(checkpoint_path=ckpt, metrics_path=metrics_path, rows=rows,
                     train_subjects=train_subjects)
