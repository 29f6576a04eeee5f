"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-8 run the full desk-scale smoke protocol (seeded phantom cohort,
all four variants, 30 epochs) and take the bulk of the suite's runtime.
"""

import csv
import time
from types import SimpleNamespace

import numpy as np
import pytest

from dgagan import autodiff as ad
from dgagan.attention import (AttentionMap, attention_supervision_loss,
                              extract_attention)
from dgagan.autodiff import Tensor
from dgagan.data import (aggregate_patches, build_samples, extract_patch,
                         kfold_split, load_cohort, save_cohort, split_patches)
from dgagan.evaluate import (attention_roi_ratio, attention_volume,
                             evaluate_identity, evaluate_samples, write_report)
from dgagan.gradcheck import finite_difference_check
from dgagan.layers import InstanceNorm3d, SelfAttention3d
from dgagan.losses import (RegionWeights, adversarial_losses, omega_schedule,
                           region_weights, weighted_l1)
from dgagan.metrics import psnr, ssim
from dgagan.models import DiscriminatorOutput, ModelVariant
from dgagan.phantom import generate_phantom_cohort
from dgagan.training import TrainConfig, train_run

GRAD_TOL = 1e-4
GRAD_POINTS = 10

SMOKE_SEED = 0
SMOKE_EXTENTS = (32, 32, 32)
SMOKE_EPOCHS = 30
SMOKE_LR_G = 1e-3
SMOKE_LR_D = 3e-4
SMOKE_KWARGS = {"levels": 3, "base_channels": 4, "disc_base_channels": 4,
                "attn_kv_pool_g": 8, "attn_kv_pool_d": 8, "dtype": "float32"}


def _report(num: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {num}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(line)
    try:
        import conftest
        conftest.ACCEPTANCE_LINES.append(line)
    except ImportError:
        pass
    assert passed, f"criterion {num}: {detail}"


# ------------------------------------------------------------- criterion 1


def _grad_cases(rng):
    """One scalar-valued probe per operation family, at a fresh random point."""
    cases = {}

    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(3, 4)))
    cases["elementwise"] = (lambda x, y: (x * y + x / (ad.absolute(y) + 2.0)
                                          + ad.square(x) - ad.exp(-ad.square(y))
                                          + ad.softplus(x)
                                          + ad.log(ad.square(y) + 0.5)
                                          + ad.sqrt(ad.square(x) + 1.0)).sum(),
                            (a, b))

    m1 = Tensor(rng.normal(size=(2, 3)))
    m2 = Tensor(rng.normal(size=(3, 2)))
    cases["matmul"] = (lambda x, y: ad.square(x @ y).sum(), (m1, m2))

    for dil in (1, 2, 4):
        x = Tensor(rng.normal(size=(2, 6, 6, 6)))
        k = Tensor(rng.normal(size=(2, 2, 3, 3, 3)) * 0.5)
        cases[f"conv3d_dil{dil}"] = (
            lambda x, k, d=dil: ad.conv3d(x, k, stride=1, padding=d,
                                          dilation=d).sum(), (x, k))

    x = Tensor(rng.normal(size=(2, 6, 6, 6)))
    k = Tensor(rng.normal(size=(2, 2, 3, 3, 3)) * 0.5)
    cases["conv3d_stride2"] = (
        lambda x, k: ad.conv3d(x, k, stride=2, padding=1).sum(), (x, k))

    g = Tensor(rng.normal(size=(3, 4, 4, 4)))
    cases["global_avg_pool"] = (lambda x: ad.square(ad.global_avg_pool(x)).sum(), (g,))

    act = Tensor(rng.normal(size=(3, 5)) + np.where(rng.random((3, 5)) < 0.5, -2, 2))
    cases["activations"] = (
        lambda x: (ad.relu(x) + ad.leaky_relu(x, 0.2) + ad.tanh(x)
                   + ad.sigmoid(x) + ad.softmax(x, axis=1)).sum() * 1.0
                  + ad.square(ad.softmax(x, axis=0)).sum(), (act,))

    attn = SelfAttention3d(4, reduction=2, kv_pool=1,
                           rng=np.random.default_rng(int(rng.integers(1 << 30))),
                           dtype=np.float64)
    attn.gamma.data = np.asarray(0.7)
    ax = Tensor(rng.normal(size=(4, 3, 3, 3)))
    aw = rng.normal(size=(4, 3, 3, 3))
    cases["self_attention"] = (lambda x: (attn(x) * Tensor(aw)).sum(), (ax,))

    norm = InstanceNorm3d(3, dtype=np.float64)
    nx = Tensor(rng.normal(size=(3, 4, 4, 4)))
    nw = rng.normal(size=(3, 4, 4, 4))
    cases["instance_norm"] = (lambda x: (norm(x) * Tensor(nw)).sum(), (nx,))

    ux = Tensor(rng.normal(size=(2, 4, 3, 3)))
    uw = rng.normal(size=(2, 7, 6, 5))
    cases["trilinear_upsample"] = (
        lambda x: (ad.upsample_trilinear(x, (7, 6, 5)) * Tensor(uw)).sum(), (ux,))

    les = np.zeros((4, 4, 4))
    les[1:3, 1:3, 1:3] = 1.0
    wm = np.zeros((4, 4, 4))
    wm[0:3, 0:3, 0:3] = 1.0
    rw = region_weights(les, wm)
    wy = Tensor(rng.normal(size=(1, 4, 4, 4)))
    wg = Tensor(rng.normal(size=(1, 4, 4, 4)))
    cases["weighted_l1"] = (lambda y, g: weighted_l1(y, g, rw), (wy, wg))

    # L_e path: Grad-CAM weights -> map -> normalize -> upsample -> MSE,
    # differentiated w.r.t. the tapped features feeding the pipeline
    hw = rng.normal(size=(1, 4))
    fl = Tensor(rng.normal(size=(4, 3, 3, 3)))

    def head(f):
        pooled = ad.reshape(ad.global_avg_pool(f), (-1, 1))
        return ad.reshape(Tensor(hw) @ pooled, ())

    def le_path(f):
        out = DiscriminatorOutput(s=head(f), f_l=f)
        att = extract_attention(out, head, (6, 6, 6))
        return attention_supervision_loss(att, les_up)

    les_up = np.zeros((6, 6, 6))
    les_up[2:5, 2:5, 1:4] = 1.0
    cases["attention_supervision"] = (le_path, (fl,))

    return cases


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for point in range(GRAD_POINTS):
        rng = np.random.default_rng(1000 + point)
        for name, (f, at) in _grad_cases(rng).items():
            err = finite_difference_check(f, at)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    overall = max(worst.values())
    bad = {k: v for k, v in worst.items() if v > GRAD_TOL}
    _report(1, overall <= GRAD_TOL and elapsed < 120.0,
            f"max rel err {overall:.2e} over {len(worst)} op families x "
            f"{GRAD_POINTS} points in {elapsed:.1f}s"
            + (f"; failing: {bad}" if bad else ""))


# ------------------------------------------------------------- criterion 2


def test_criterion_2_gradcam_oracle():
    rng = np.random.default_rng(7)
    f_l = Tensor(rng.normal(size=(5, 4, 4, 4)))
    numel = 4 * 4 * 4

    def head_scaled(c):
        def head(f):
            # score = c * GAP of tap channel 0
            pooled = ad.reshape(ad.global_avg_pool(f), (-1, 1))
            sel = np.zeros((1, 5))
            sel[0, 0] = c
            return ad.reshape(Tensor(sel) @ pooled, ())
        return head

    out = DiscriminatorOutput(s=head_scaled(1.0)(f_l), f_l=f_l)
    att = extract_attention(out, head_scaled(1.0), (8, 8, 8))
    oracle = np.maximum(f_l.data[0], 0.0) / numel
    err_map = np.abs(att.A.data - oracle).max()

    att_scaled = extract_attention(
        DiscriminatorOutput(s=head_scaled(3.5)(f_l), f_l=f_l),
        head_scaled(3.5), (8, 8, 8))
    err_scale = np.abs(att_scaled.A_up.data - att.A_up.data).max()

    _report(2, err_map <= 1e-10 and err_scale <= 1e-9,
            f"A = ReLU(f_0)/numel within {err_map:.1e} (tol 1e-10); "
            f"positive score scaling moves the normalized map by {err_scale:.1e} "
            f"(tol 1e-9)")


# ------------------------------------------------------------- criterion 3


def test_criterion_3_loss_closed_forms():
    les = np.zeros((2, 2, 2))
    les[0, 0, :] = 1.0                       # m_Les = 2
    wm = les.copy()
    wm[1, 1, :] = 1.0                        # m_WM = 2 after precedence
    rw = region_weights(les, wm)
    y = Tensor(np.ones((1, 2, 2, 2)))
    g = Tensor(np.zeros((1, 2, 2, 2)))
    wl1 = weighted_l1(y, g, rw).item()

    zero = Tensor(np.asarray(0.0))
    l_d, _ = adversarial_losses(zero, zero, smoothing=1.0)
    ld_err = abs(l_d.item() - 2.0 * np.log(2.0))

    sched = [omega_schedule(e, 300) for e in (0, 99, 200, 300)]
    mid = omega_schedule(150, 300)

    ok = (wl1 == 0.3125 and ld_err <= 1e-12
          and sched == [0.0, 0.0, 10.0, 10.0] and mid == 5.0)
    _report(3, ok, f"weighted L1 = {wl1} (exact 0.3125); "
                   f"L_D(0,0) off 2ln2 by {ld_err:.1e} (tol 1e-12); "
                   f"omega at {{0,99,200,300}}/300 = {sched}, at 150 = {mid}")


# ------------------------------------------------------------- criterion 4


def test_criterion_4_patch_protocol():
    grid = split_patches((150, 190, 150), (128, 128, 128))
    offsets_ok = (len(grid.offsets) == 8 and
                  set(grid.offsets) == {(a, b, c) for a in (0, 22)
                                        for b in (0, 62) for c in (0, 22)})
    rng = np.random.default_rng(0)

    def round_trip(vol_shape, patch_shape):
        vol = rng.normal(size=vol_shape)
        g = split_patches(vol_shape, patch_shape)
        parts = [extract_patch(vol, g, i) for i in range(len(g.offsets))]
        return np.abs(aggregate_patches(parts, g) - vol).max()

    err_clin = round_trip((150, 190, 150), (128, 128, 128))
    err_desk = round_trip((48, 48, 48), (32, 32, 32))
    desk = split_patches((48, 48, 48), (32, 32, 32))
    _report(4, offsets_ok and err_clin <= 1e-6 and err_desk <= 1e-6
               and len(desk.offsets) == 8,
            f"8 patches at {{0,22}}x{{0,62}}x{{0,22}}; round-trip err "
            f"clinical {err_clin:.1e}, desk {err_desk:.1e} (tol 1e-6)")


# ------------------------------------------------------------- criterion 5


def test_criterion_5_metric_closed_forms():
    y = np.zeros((8, 8, 8))
    g = np.full((8, 8, 8), 0.1)
    p_err = abs(psnr(y, g) - 20.0)

    v = np.random.default_rng(3).random((12, 12, 12))
    s_err = abs(ssim(v, v) - 1.0)

    mask = np.zeros((8, 8, 8))
    mask[2:5, 2:5, 2:5] = 1.0
    g2 = v2 = np.random.default_rng(4).random((8, 8, 8))
    g2 = g2.copy()
    g2[mask.astype(bool)] += 0.05
    before = psnr(v2, g2, mask)
    g2[0, 0, 0] += 123.0
    invariant = psnr(v2, g2, mask) == before

    _report(5, p_err <= 1e-9 and s_err <= 1e-12 and invariant,
            f"PSNR(const 0.1) off 20 dB by {p_err:.1e} (tol 1e-9); "
            f"SSIM(identical) off 1 by {s_err:.1e} (tol 1e-12); "
            f"ROI PSNR exactly invariant to outside-mask edits: {invariant}")


# --------------------------------------------------------- criteria 6, 7, 8


def _smoke_cfg():
    return TrainConfig(epochs=SMOKE_EPOCHS, lr_g=SMOKE_LR_G, lr_d=SMOKE_LR_D,
                       seed=SMOKE_SEED, patch_extents=SMOKE_EXTENTS,
                       augment=False, dtype="float32")


def run_smoke(root):
    """Seeded protocol: 5 subjects, 32^3, k=5; the guided variant on all folds,
    comparison variants on fold 0."""
    cohort = generate_phantom_cohort(5, SMOKE_EXTENTS, seed=SMOKE_SEED,
                                     timepoints=2)
    folds = kfold_split([s.subject_id for s in cohort], 5, seed=SMOKE_SEED)
    man = save_cohort(cohort, folds, root / "cohort", seed=SMOKE_SEED)

    runs = {}
    for fold in range(5):
        runs[("dgagan", fold)] = train_run(
            ModelVariant.DGAGAN, _smoke_cfg(), man, fold,
            root / f"dgagan_f{fold}", model_kwargs=dict(SMOKE_KWARGS))
    for variant in (ModelVariant.UNET, ModelVariant.CGAN, ModelVariant.CFSAGAN):
        runs[(variant.value, 0)] = train_run(
            variant, _smoke_cfg(), man, 0, root / f"{variant.value}_f0",
            model_kwargs=dict(SMOKE_KWARGS))

    from dgagan.training import load_checkpoint, restore_models
    cohort_back, folds_back = load_cohort(man)
    evals, attn_stats = {}, {}
    for (variant, fold), res in runs.items():
        header, arrays = load_checkpoint(res.checkpoint_path)
        vspec, gen, disc = restore_models(header, arrays)
        val = [s for s in build_samples(cohort_back, folds_back,
                                        vspec.concat_t0_roi) if s.fold == fold]
        rows = evaluate_samples(gen, val, SMOKE_EXTENTS, variant, "float32")
        ident = evaluate_identity(val)
        preds = {s.sample_id: (np.asarray(s.y[0]),
                               np.asarray(_pred(gen, s))) for s in val}
        evals[(variant, fold)] = (rows, ident, preds, val)
        write_report(rows + ident,
                     res.checkpoint_path.parent / f"{variant}_f{fold}_eval.csv")
        if variant == "dgagan":
            stats = []
            for s in val:
                att = attention_volume(disc, s, SMOKE_EXTENTS, "float32")
                inside = s.r_les.astype(bool)
                stats.append((float(att[inside].mean()),
                              float(att[~inside].mean())))
            attn_stats[fold] = stats
    return SimpleNamespace(root=root, manifest=man, runs=runs, evals=evals,
                           attn_stats=attn_stats)


def _pred(gen, sample):
    from dgagan.evaluate import predict_volume
    return predict_volume(gen, sample, SMOKE_EXTENTS, "float32")


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    return run_smoke(tmp_path_factory.mktemp("smoke_a"))


def test_criterion_6_smoke_gates(smoke):
    # (a) final-epoch L1 below epoch-1 L1 for every variant
    l1_drops = {}
    for (variant, fold), res in smoke.runs.items():
        l1_drops[(variant, fold)] = (res.rows[0]["l_l1"], res.rows[-1]["l_l1"])
    gate_a = all(last < first for first, last in l1_drops.values())

    # (b) guided variant beats the identity-copy baseline at the lesion ROI
    deltas = []
    for fold in range(5):
        rows, ident, _, _ = smoke.evals[("dgagan", fold)]
        fold_deltas = [r.psnr_roi - b.psnr_roi for r, b in zip(rows, ident)
                       if np.isfinite(r.psnr_roi) and np.isfinite(b.psnr_roi)]
        deltas.append(float(np.mean(fold_deltas)))
    mean_delta = float(np.mean(deltas))
    gate_b = mean_delta >= 0.5

    # (c) exported attention concentrates inside the lesion ROI
    inside = [i for stats in smoke.attn_stats.values() for i, _ in stats]
    outside = [o for stats in smoke.attn_stats.values() for _, o in stats]
    ratio = float(np.mean(inside)) / max(float(np.mean(outside)), 1e-12)
    gate_c = ratio >= 2.0

    _report(6, gate_a and gate_b and gate_c,
            f"(a) L1 drops on all {len(l1_drops)} runs: {gate_a}; "
            f"(b) ROI PSNR over identity baseline by {mean_delta:+.3f} dB "
            f"mean over folds (per-fold {[round(d, 2) for d in deltas]}, "
            f"need >= +0.5): {gate_b}; "
            f"(c) attention inside/outside ratio {ratio:.2f} (need >= 2): {gate_c}")


def test_criterion_7_roi_error_spread_report(smoke):
    """Observational: ordering of lesion-ROI error spread across variants."""
    spread = {}
    for (variant, fold), (rows, _, preds, val) in smoke.evals.items():
        if fold != 0:
            continue
        stds = []
        for s in val:
            y, g = preds[s.sample_id]
            roi = s.r_les.astype(bool)
            if roi.any():
                stds.append(float(np.std(y[roi] - g[roi])))
        spread[variant] = float(np.mean(stds))
    order = sorted(spread, key=spread.get)
    expectation_met = order[0] == "dgagan"
    detail = (f"fold-0 lesion-ROI error std by variant: "
              + ", ".join(f"{v}={spread[v]:.4f}" for v in order)
              + f"; guided variant lowest: {expectation_met}"
              + ("" if expectation_met else
                 " (mismatch with the clinical-scale claim; desk-scale "
                 "observation only, documented, not gated)"))
    _report(7, True, detail)


def test_criterion_8_determinism(smoke, tmp_path_factory):
    repeat = run_smoke(tmp_path_factory.mktemp("smoke_b"))
    diffs = []
    for key, res in smoke.runs.items():
        res2 = repeat.runs[key]
        a = _strip_wall_time(res.metrics_path)
        b = _strip_wall_time(res2.metrics_path)
        if a != b:
            diffs.append(f"{key} training log")
        variant, fold = key
        pa = res.checkpoint_path.parent / f"{variant}_f{fold}_eval.csv"
        pb = res2.checkpoint_path.parent / f"{variant}_f{fold}_eval.csv"
        if pa.read_text() != pb.read_text():
            diffs.append(f"{key} eval report")
    _report(8, not diffs,
            f"two complete smoke runs compared over {2 * len(smoke.runs)} CSVs "
            f"(wall_time column excluded): "
            + ("identical" if not diffs else f"differences in {diffs}"))


def _strip_wall_time(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    idx = rows[0].index("wall_time")
    return [[c for i, c in enumerate(row) if i != idx] for row in rows]
