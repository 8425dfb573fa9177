"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 to 10 train real models; their results are cached (see
``acceptance_runs.py``) so repeated sessions only re-score them.
"""

import math

import numpy as np
import pytest
import torch

import acceptance_runs as runs
from histoseg.evaluation import build_report
from histoseg.losses import (
    LossConfig,
    bootstrap_loss,
    bootstrap_terms,
    bootstrap_weights,
    fuzzy_boundary_weights,
    total_loss,
    weighted_ce,
)
from histoseg.model import ModelConfig, build_baseline_unet, build_model, count_parameters
from histoseg.patching import extract_rotated_patch, plan_tiles, stitch
from oracles import dense_fuzzy_oracle, gradient_check_errors, loop_weighted_ce

# published per-slide test IoUs and their printed averages, by model and target
TABLE1 = {
    "U-Net GC": ([0.6123, 0.7618, 0.4212, 0.8299, 0.4333], 0.6117),
    "Attention U-Net GC": ([0.7192, 0.7912, 0.6614, 0.5982, 0.4602], 0.64604),
    "MS U-Net GC": ([0.8027, 0.8210, 0.7916, 0.9011, 0.6046], 0.7842),
    "U-Net sinus": ([0.2222, 0.2836, 0.1983, 0.3422, 0.4500], 0.2993),
    "Attention U-Net sinus": ([0.4823, 0.4418, 0.3908, 0.3742, 0.5518], 0.4482),
    "MS U-Net sinus": ([0.7218, 0.6710, 0.4856, 0.5122, 0.6330], 0.6047),
}


def _masks_with_iou(value: float, n: int = 10_000):
    """A (pred, gt) pair whose IoU is exactly ``value`` (pred is a prefix of gt)."""
    k = round(value * n)
    assert k / n == pytest.approx(value, abs=1e-12)
    gt = np.ones((100, n // 100), dtype=np.uint8)
    pred = np.zeros_like(gt)
    pred.ravel()[:k] = 1
    return pred, gt


def _blob_mask(rng, size=64):
    yy, xx = np.mgrid[:size, :size]
    m = np.zeros((size, size), dtype=np.uint8)
    for _ in range(rng.integers(1, 5)):
        if rng.random() < 0.5:
            cy, cx, r = rng.integers(0, size, 2).tolist() + [int(rng.integers(2, size // 2))]
            m[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
        else:
            r0, c0 = rng.integers(0, size - 4, 2)
            m[r0 : r0 + rng.integers(3, size // 2), c0 : c0 + rng.integers(3, size // 2)] = 1
    return m


def _check(number, checks):
    """Record one line for the criterion and assert every named check."""
    failed = [name for name, ok in checks if not ok]
    runs.record(number, not failed, "; ".join(name if ok else f"[failed] {name}" for name, ok in checks))
    assert not failed, "; ".join(failed)


# ---------------------------------------------------------------------------

def test_criterion_01_table_arithmetic():
    checks = []
    for column, (values, printed) in TABLE1.items():
        pairs = [(f"Test WSI {i + 1}", *_masks_with_iou(v)) for i, v in enumerate(values)]
        report = build_report(pairs)
        assert [v for _, v in report.per_slide] == pytest.approx(values, abs=1e-12)
        checks.append((f"{column}: {report.average:.5f} vs {printed}", abs(report.average - printed) <= 5e-5))
    _check(1, checks)


def test_criterion_02_fuzzy_boundary_suite():
    rng = np.random.default_rng(2)
    in_range = True
    for _ in range(1000):
        h, w = rng.integers(4, 48, 2)
        m = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        for k in (21, 61):
            wf = fuzzy_boundary_weights(m, k)
            in_range &= bool(wf.min() >= 0 and wf.max() <= 1)

    constant = all(
        np.all(fuzzy_boundary_weights(np.full((30, 40), v, dtype=np.uint8), k) == 1) for v in (0, 1) for k in (21, 61)
    )

    edge = np.zeros((128, 128), dtype=np.uint8)
    edge[:, 64:] = 1
    monotone = True
    for k in (21, 61):
        row = fuzzy_boundary_weights(edge, k)[64]
        r = k // 2
        monotone &= bool(np.all(np.diff(row[64 - r : 64][::-1]) >= -1e-12))
        monotone &= bool(np.all(np.diff(row[64 : 64 + r]) >= -1e-12))

    wider = True
    for _ in range(300):
        m = _blob_mask(rng)
        if m.all() or not m.any():
            continue
        wider &= bool(fuzzy_boundary_weights(m, 61).mean() <= fuzzy_boundary_weights(m, 21).mean())

    oracle_err = 0.0
    for seed in range(4):
        m = _blob_mask(np.random.default_rng(100 + seed), size=40)
        for k in (5, 21):
            oracle_err = max(oracle_err, float(np.abs(fuzzy_boundary_weights(m, k) - dense_fuzzy_oracle(m, k)).max()))

    _check(2, [
        ("range on 1000 random masks", in_range),
        ("w == 1 on constant masks", constant),
        ("monotone away from a straight edge", monotone),
        ("kernel 61 mean <= kernel 21 mean on 300 blob masks", wider),
        (f"dense convolution oracle (max err {oracle_err:.1e})", oracle_err <= 1e-6),
    ])


def test_criterion_03_bootstrap_weight_suite():
    rng = np.random.default_rng(3)
    p = rng.random((64, 64))
    w = bootstrap_weights(p)
    d = rng.random(100) * 0.5
    _check(3, [
        ("w(0.5) == 0", bootstrap_weights(0.5) == 0),
        ("w(0) == w(1) == 1", bootstrap_weights(0.0) == 1 and bootstrap_weights(1.0) == 1),
        ("linear in |0.5 - p|", np.allclose(bootstrap_weights(0.5 + d), 2 * d, atol=1e-15)
         and np.allclose(bootstrap_weights(0.5 - d), 2 * d, atol=1e-15)),
        ("range on random maps", bool(w.min() >= 0 and w.max() <= 1)),
    ])


def _loop_bootstrap(logits, crop):
    num = den = 0.0
    b, _, h, w = logits.shape
    for n in range(b):
        for i in range(h):
            for j in range(w):
                if not crop[i, j]:
                    continue
                l0, l1 = float(logits[n, 0, i, j]), float(logits[n, 1, i, j])
                p = 1.0 / (1.0 + math.exp(l0 - l1))
                wbs = 2 * abs(0.5 - p)
                pseudo = 1 if p > 0.5 else 0
                num += wbs * -math.log(p if pseudo else 1 - p)
                den += wbs
    return num / den


def test_criterion_04_loss_suite():
    cfg = LossConfig()
    n = cfg.bootstrap_start_epoch
    g = torch.Generator().manual_seed(4)
    logits = torch.randn(2, 2, 32, 32, generator=g, dtype=torch.float64) * 2
    target = torch.zeros(2, 32, 32, dtype=torch.long)
    target[:, 9:21, 11:26] = 1
    crop = np.zeros((32, 32), dtype=bool)
    crop[8:24, 8:24] = True

    uniform = weighted_ce(torch.zeros(1, 2, 4, 4, dtype=torch.float64), torch.randint(0, 2, (1, 4, 4)))
    at_n, _ = total_loss(logits, target, n, "clean", cfg)
    w_fb = torch.ones(2, 32, 32, dtype=torch.float64)
    inner = target[:, 8:24, 8:24].double()
    w_fb[:, 8:24, 8:24] = fuzzy_boundary_weights(inner, cfg.kernel_clean)
    expected = weighted_ce(logits, target, (cfg.w_bg, cfg.w_fg), w_fb * torch.from_numpy(crop).double())

    before, _ = total_loss(logits, target, n, "clean", cfg)
    after, diag = total_loss(logits, target, n + 1, "clean", cfg)
    l_bs = bootstrap_loss(logits, n + 1, n, torch.from_numpy(crop).double())

    noisy = target.clone()
    flips = torch.from_numpy(~crop & (np.random.default_rng(4).random((2, 32, 32)) < 0.5))
    noisy[flips] = 1 - noisy[flips]
    perturbed, _ = total_loss(logits, noisy, n + 1, "noisy", cfg)
    reference, _ = total_loss(logits, target, n + 1, "noisy", cfg)

    small = logits[:, :, :6, :6].contiguous()
    small_t = torch.randint(0, 2, (2, 6, 6), generator=g)
    pw = torch.rand(2, 6, 6, generator=g, dtype=torch.float64)
    wce_err = abs(float(weighted_ce(small, small_t, (1.0, 10.0), pw)) - loop_weighted_ce(small, small_t, (1.0, 10.0), pw))
    bs_err = abs(float(l_bs) - _loop_bootstrap(logits, crop))
    nll, weight, _ = bootstrap_terms(torch.tensor([0.0, math.log(99.0)], dtype=torch.float64).view(1, 2, 1, 1))
    confident = float(nll * weight)

    _check(4, [
        ("uniform logits give ln 2 exactly", float(uniform) == math.log(2)),
        ("epoch <= n equals the w_fb weighted CE", abs(float(at_n) - float(expected)) <= 1e-12),
        ("bootstrap term appears exactly at n + 1",
         abs(float(after - before) - float(l_bs)) <= 1e-12 and float(l_bs) > 0 and diag["l_bs"] is not None),
        ("margin label perturbations leave the loss unchanged", float(perturbed) == float(reference)),
        (f"weighted CE loop oracle (err {wce_err:.1e})", wce_err <= 1e-6),
        (f"bootstrap loop oracle (err {bs_err:.1e})", bs_err <= 1e-6),
        ("p = 0.99 pixel contributes 0.98 * -ln 0.99", abs(confident - 0.98 * -math.log(0.99)) <= 1e-12),
    ])


def test_criterion_05_gradient_check():
    element, tensor = gradient_check_errors()
    _check(5, [
        (f"max element-wise relative error {element:.2e}", element < 1e-4),
        (f"max per-tensor relative error {tensor:.2e}", tensor < 1e-4),
    ])


def test_criterion_06_architecture_suite():
    rng = np.random.default_rng(6)
    cfg = ModelConfig(depth=2, base_channels=4)
    model = build_model(cfg).eval()
    shapes = True
    for _ in range(6):
        h, w = (rng.integers(1, 5, 2) * cfg.divisor).tolist()
        with torch.no_grad():
            shapes &= tuple(model(torch.rand(1, 3, h, w)).shape) == (1, 2, h, w)

    torch.manual_seed(6)
    model = build_model(cfg).train()
    model(torch.rand(2, 3, 32, 32))[:, 1].sum().backward()
    branch_grads = all(
        float(branch[0].weight.grad.abs().sum()) > 0 for blk in model.encoder_blocks for branch in blk.branches
    )
    counts = []
    for depth, base in ((1, 4), (2, 8), (4, 32)):
        c = ModelConfig(depth=depth, base_channels=base)
        counts.append((count_parameters(build_model(c)), count_parameters(build_baseline_unet(c))))
    _check(6, [
        ("output size equals input size", shapes),
        ("all three branches get nonzero gradients", branch_grads),
        (f"MS U-Net has more parameters than the baseline {counts}", all(a > b for a, b in counts)),
    ])


def test_criterion_07_geometry_round_trips():
    rng = np.random.default_rng(7)
    coverage = True
    for _ in range(200):
        h, w = rng.integers(64, 1200, 2).tolist()
        ps = int(rng.choice([32, 64]))
        cover = np.zeros((h, w), dtype=bool)
        for t in plan_tiles(h, w, ps, 0.5):
            cover[t.row : t.row + ps, t.col : t.col + ps] = True
        coverage &= bool(cover.all())

    exact = True
    for _ in range(20):
        h, w = rng.integers(64, 400, 2).tolist()
        gt = (rng.random((h, w)) < 0.4).astype(np.uint8)
        tiles = plan_tiles(h, w, 64, 0.5)
        exact &= bool(np.array_equal(stitch([(t, t.window(gt)) for t in tiles], (h, w), 16).mask, gt))

    image = rng.integers(0, 256, (600, 600, 3), dtype=np.uint8)
    mask = (rng.random((600, 600)) < 0.3).astype(np.uint8)
    zero = extract_rotated_patch(image, mask, (300, 300), 256, 0.0)
    identity = np.array_equal(zero.mask, mask[172:428, 172:428]) and np.array_equal(
        zero.image, np.moveaxis(image[172:428, 172:428], -1, 0) / np.float32(255))
    quarter = extract_rotated_patch(image, mask, (300, 300), 256, 90.0)
    rot90 = np.array_equal(quarter.mask, np.rot90(zero.mask)) and np.array_equal(
        quarter.image, np.rot90(zero.image, axes=(1, 2)))

    cr = cc = 400
    yy, xx = np.mgrid[:800, :800]
    dist = np.hypot(yy - (cr - 0.5), xx - (cc - 0.5))
    disk = (dist <= 90).astype(np.uint8)
    disk_img = np.repeat(disk[..., None] * 255, 3, axis=2).astype(np.uint8)
    plain = extract_rotated_patch(disk_img, disk, (cr, cc), 256, 0.0).mask
    local = dist[cr - 128 : cr + 128, cc - 128 : cc + 128]
    rim = True
    for angle in (13.0, 37.5, 45.0, 151.0, 299.0):
        diff = plain != extract_rotated_patch(disk_img, disk, (cr, cc), 256, angle).mask
        rim &= bool(np.all(np.abs(local[diff] - 90) <= 2))

    _check(7, [
        ("plan_tiles covers 200 random slides", coverage),
        ("stitching ground-truth crops is bit-exact", exact),
        ("0 degree rotation is the identity crop", identity),
        ("90 degree rotation matches np.rot90", rot90),
        ("rotated disk differs only within 2 px of the rim", rim),
    ])


# ---------------------------------------------------------------------------
# end-to-end runs

def test_criterion_08_end_to_end_segmentation():
    res = runs.criterion8()
    iou, minutes = res["test_iou"], res["runtime_s"] / 60
    _check(8, [
        (f"test-split mean WSI IoU {iou:.4f} >= 0.80", iou >= 0.80),
        (f"runtime {minutes:.1f} min <= 90 min CPU", minutes <= 90),
    ])


def test_criterion_09_noise_robustness_trend():
    res = runs.criterion9()
    by_cfg = runs.mean_by(res["runs"], "config")
    fb_on = (by_cfg["fb"] + by_cfg["fb+bs"]) / 2
    fb_off = (by_cfg["plain"] + by_cfg["bs"]) / 2
    bs_on = (by_cfg["bs"] + by_cfg["fb+bs"]) / 2
    bs_off = (by_cfg["plain"] + by_cfg["fb"]) / 2
    ratio = res["runtime_s"] / runs.criterion8()["runtime_s"]
    means = ", ".join(f"{k} {v:.4f}" for k, v in sorted(by_cfg.items()))
    _check(9, [
        (f"fuzzy boundary on {fb_on:.4f} >= off {fb_off:.4f} - 0.01", fb_on >= fb_off - 0.01),
        (f"bootstrapping on {bs_on:.4f} >= off {bs_off:.4f} - 0.01", bs_on >= bs_off - 0.01),
        (f"combined has the highest mean ({means})", by_cfg["fb+bs"] >= max(by_cfg.values())),
        (f"runtime {ratio:.2f}x criterion 8 <= 4x", ratio <= 4),
    ])


def test_criterion_10_multiscale_vs_baseline_trend():
    res = runs.criterion10()
    by_arch = runs.mean_by(res["runs"], "arch")
    ratio = res["runtime_s"] / runs.criterion8()["runtime_s"]
    _check(10, [
        (f"MS U-Net {by_arch['msunet']:.4f} >= U-Net {by_arch['unet']:.4f} - 0.01",
         by_arch["msunet"] >= by_arch["unet"] - 0.01),
        (f"runtime {ratio:.2f}x criterion 8 <= 2x", ratio <= 2),
    ])
