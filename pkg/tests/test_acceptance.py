"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run just this file with ``pytest tests/test_acceptance.py -v`` (criteria 6
and 7 train networks and take tens of minutes on a CPU; ``-m "not slow"``
skips them). The collected lines are repeated in the terminal summary.
Running the file as a script prints the same lines without pytest.
"""
from __future__ import annotations

import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from samr.data import one_hot_encode
from samr.discriminator import PAPER_D, TEST_D, build_bank, condition_inputs
from samr.evaluate import ABLATION_ARMS, CLASSES, EXP1_ARMS, METRICS, SuiteConfig, dice, hd95, run_experiment
from samr.evaluate import sensitivity_specificity
from samr.generator import PAPER_PRESET, TEST_PRESET, build_generator, synthesize
from samr.losses import feature_matching, gdl
from samr.maskops import is_valid_label_map, mirror_lesion, reorganize_rois, scale_tumor
from samr.phantom import PhantomParams, make_dataset
from samr.segmenter import segment
from samr.trainer import SegTrainConfig, SynthesisTrainer, SynthTrainConfig, load_split

from test_evaluate import dice_oracle, hd_oracle, random_masks, sens_spec_oracle
from test_losses import ToyD, fm_oracle, gdl_oracle

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str, elapsed: float) -> None:
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s]"
    RESULTS[n] = line
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# 1 ---------------------------------------------------------------------------------

def test_criterion_01_loss_oracles():
    t0 = time.time()
    rng = np.random.default_rng(101)
    torch.manual_seed(101)
    worst_fm = worst_gdl = 0.0
    d = ToyD()
    for _ in range(10):
        fr, ff = d(torch.randn(2, 3, 8, 8)), d(torch.randn(2, 3, 8, 8))
        worst_fm = max(worst_fm, abs(feature_matching(fr, ff).item() - fm_oracle(fr, ff)))
        r, s = rng.uniform(0, 1, (2, 5, 6, 6)), rng.uniform(0, 1, (2, 5, 6, 6))
        worst_gdl = max(worst_gdl, abs(gdl(torch.from_numpy(r), torch.from_numpy(s)).item() - gdl_oracle(r, s)))

    h = 1e-5
    worst_rel = 0.0
    for _ in range(3):
        r = torch.from_numpy(rng.uniform(0, 1, (5, 4, 4)))
        s = torch.from_numpy(rng.uniform(0.05, 0.95, (5, 4, 4))).requires_grad_(True)
        gdl(r, s).backward()
        base = s.detach().numpy().ravel()
        num = np.empty_like(base)
        for i in range(base.size):
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            num[i] = (gdl(r, torch.from_numpy(up.reshape(5, 4, 4))).item()
                      - gdl(r, torch.from_numpy(dn.reshape(5, 4, 4))).item()) / (2 * h)
        worst_rel = max(worst_rel, np.linalg.norm(s.grad.numpy().ravel() - num) / np.linalg.norm(num))
    elapsed = time.time() - t0
    ok = worst_fm <= 1e-6 and worst_gdl <= 1e-6 and worst_rel < 1e-4 and elapsed < 60
    report(1, ok, f"FM err {worst_fm:.1e}, GDL err {worst_gdl:.1e}, grad rel err {worst_rel:.1e}", elapsed)


# 2 ---------------------------------------------------------------------------------

def test_criterion_02_gdl_anchors():
    t0 = time.time()
    same = gdl(torch.tensor([1.0, 0, 0, 1]), torch.tensor([1.0, 0, 0, 1])).item()
    disjoint = gdl(torch.tensor([1.0, 1, 0, 0]), torch.tensor([0.0, 0, 1, 1])).item()
    flat = gdl(torch.tensor([1.0, 0, 0, 1]), torch.tensor([1.0, 1, 0, 0])).item()
    errs = (abs(same), abs(disjoint - 1), abs(flat - 0.5))
    report(2, max(errs) < 1e-5, f"GDL(R,R)={same:.2e} disjoint={disjoint:.7f} flat={flat:.7f}", time.time() - t0)


# 3 ---------------------------------------------------------------------------------

def test_criterion_03_architecture_contract():
    t0 = time.time()
    torch.manual_seed(0)
    g = build_generator(PAPER_PRESET)
    y = synthesize(g, torch.zeros(1, 5, 256, 256), torch.zeros(1, 15, 256, 256))
    counts = g.layer_counts()
    del g
    bank = build_bank(PAPER_D)
    x = torch.zeros(1, 5, 256, 256)
    x[:, 1] = 1
    with torch.no_grad():
        outs = bank(x, torch.zeros(1, 5, 256, 256))
    depths = {len(o.features) for o in outs}
    expected = {"mask_encoder_layers": 1 + PAPER_PRESET.stages, "atlas_encoder_layers": 1 + PAPER_PRESET.stages,
                "trunk_blocks": PAPER_PRESET.res_blocks, "decoders": 5,
                "decoder_res_blocks": [1] * 5, "decoder_layers": [1 + PAPER_PRESET.stages] * 5}
    elapsed = time.time() - t0
    ok = (tuple(y.shape) == (1, 5, 256, 256) and len(bank) == 6 and depths == {PAPER_D.depth}
          and counts == expected and elapsed < 60)
    report(3, ok, f"G out {tuple(y.shape)}, D members {len(bank)}, T={depths}, layers {counts == expected}",
           elapsed)


# 4 ---------------------------------------------------------------------------------

def test_criterion_04_partition_and_masking():
    t0 = time.time()
    rng = np.random.default_rng(404)
    maps = [rng.integers(0, 5, (16, 16)).astype(np.uint8) for _ in range(50)]
    from samr.phantom import generate_patient

    maps += [i.labels for i in generate_patient(PhantomParams(size=64, seed=4), 0)]
    partition = recon_err = 0.0
    outside = 0.0
    for m in maps:
        x = torch.from_numpy(one_hot_encode(m)).float()[None]
        y = torch.from_numpy(rng.uniform(-1, 1, (1, 5) + m.shape)).float()
        c = reorganize_rois(x)
        partition = max(partition, (c.sum(dim=1) - 1).abs().max().item())
        recon = sum(c[:, k:k + 1] * y for k in range(3))
        recon_err = max(recon_err, (recon - y).abs().max().item())
        for k in range(6):
            xh, yh = condition_inputs(x, y, c, k)
            roi = c[:, k // 2:k // 2 + 1]
            if k % 2:
                roi = F.max_pool2d(roi, 2)
            outside = max(outside, (xh * (1 - roi)).abs().max().item(), (yh * (1 - roi)).abs().max().item())
    ok = partition == 0 and recon_err <= 1e-6 and outside == 0
    report(4, ok, f"partition err {partition}, reconstruction err {recon_err:.1e}, outside-ROI max {outside}",
           time.time() - t0)


# 5 ---------------------------------------------------------------------------------

def test_criterion_05_gradient_plumbing(tmp_path):
    t0 = time.time()
    man = make_dataset(PhantomParams(size=64, seed=5, slices=5), 3, tmp_path)
    data = load_split(man, "train")
    # the lesion-ROI discriminators only see signal when the batch contains lesion pixels
    idx = torch.as_tensor([i for i in range(len(data)) if (data.labels[i] >= 2).any()][:4])
    assert len(idx) == 4
    tr = SynthesisTrainer(SynthTrainConfig(), data)
    x, y, a = data.masks[idx], data.images[idx], data.atlases[idx]
    params = list(tr.G.parameters())

    def grads(loss):
        g = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
        return [torch.zeros_like(p) if gi is None else gi for p, gi in zip(params, g)]

    fake = tr.G(x, a)
    total, _, _ = tr.losses(x, y, a, fake=fake)
    g_total = grads(total)
    n = sum(p.numel() for p in params)
    frac = sum(int((gi != 0).sum()) for gi in g_total) / n

    # L_C second term alone
    from samr.losses import consistency_loss

    _, c_fake = consistency_loss(x, y, fake, tr.U)
    lc_frac = sum(int((gi != 0).sum()) for gi in grads(c_fake)) / n

    # each discriminator's feature-matching term alone
    rois = tr.D.roi_planes(x)
    fm_fracs = []
    for k in range(len(tr.D)):
        with torch.no_grad():
            real = tr.D.forward_member(k, tr.D.condition(x, y, rois, k))
        out = tr.D.forward_member(k, tr.D.condition(x, fake, rois, k))
        fm_fracs.append(sum(int((gi != 0).sum()) for gi in grads(feature_matching(real.features, out.features))) / n)
    elapsed = time.time() - t0
    ok = frac >= 0.99 and lc_frac > 0 and len(fm_fracs) == 6 and min(fm_fracs) > 0 and elapsed < 120
    report(5, ok, f"nonzero grad fraction {frac:.4f}; L_C path {lc_frac:.3f}; "
                  f"FM paths min {min(fm_fracs):.3f} over {len(fm_fracs)} discriminators", elapsed)


# 6 ---------------------------------------------------------------------------------

OVERFIT_STEPS = 2000
OVERFIT_CFG = SynthTrainConfig(max_epochs=OVERFIT_STEPS, constant_epochs=OVERFIT_STEPS // 2, batch_size=8)


def overfit_instances(root):
    man = make_dataset(PhantomParams(size=64, seed=0), 4, root)
    data = load_split(man, "train")
    lesion = [i for i in range(len(data)) if (data.labels[i] >= 2).any()]
    pick = [lesion[int(round(j))] for j in np.linspace(0, len(lesion) - 1, 8)]
    return data.subset(pick)


@pytest.mark.slow
def test_criterion_06_overfit(tmp_path):
    t0 = time.time()
    data = overfit_instances(tmp_path)
    assert len(data) == 8
    tr = SynthesisTrainer(OVERFIT_CFG, data)
    hist = tr.fit()
    fake = synthesize(tr.G, data.masks, data.atlases)
    mae = (fake - data.images).abs().mean().item()
    g = gdl(data.masks, segment(tr.U, fake)).item()
    elapsed = time.time() - t0
    ok = len(hist) == OVERFIT_STEPS and mae < 0.05 and g < 0.15 and elapsed < 3600
    report(6, ok, f"{len(hist)} steps: MAE {mae:.4f} (<0.05), GDL(x,U(G(x))) {g:.4f} (<0.15)", elapsed)


# 7 ---------------------------------------------------------------------------------

EXP_SEEDS = (0, 1, 2)
EXP_PHANTOM = PhantomParams(size=32, slices=15)
EXP_SYNTH = SynthTrainConfig(max_epochs=16, constant_epochs=8, batch_size=8,
                             generator=replace(TEST_PRESET, size=32), discriminator=TEST_D)
EXP_SEG = SegTrainConfig(max_epochs=20, constant_epochs=10, batch_size=16)
EXP_ARMS = EXP1_ARMS + tuple(a for a in ABLATION_ARMS if a.name == "wo_atlas")


@pytest.mark.slow
def test_criterion_07_augmentation_experiment(tmp_path):
    t0 = time.time()
    wins, cells_ok, lines = 0, True, []
    for seed in EXP_SEEDS:
        suite = SuiteConfig(experiment="exp1", seed=seed, n_patients=60, phantom=EXP_PHANTOM,
                            synth=EXP_SYNTH, seg=EXP_SEG, arms=EXP_ARMS, out_dir=str(tmp_path / f"seed{seed}"))
        rep = run_experiment(suite)
        for name, arm in rep.arms.items():
            rows = {r["cls"]: r for r in arm["rows"]}
            cells = [rows[c][m] for c in CLASSES for m in METRICS if c in rows]
            cells_ok &= len(cells) == 12 and arm["reference"] in rep.reference
        text = (tmp_path / f"seed{seed}" / "report.txt").read_text()
        cells_ok &= "(ref, 90 pts)" in text and "0.794" in text
        full, wo = rep.arms["our"]["mean_lesion_dice"], rep.arms["wo_atlas"]["mean_lesion_dice"]
        wins += full >= wo
        lines.append(f"seed {seed}: full {full:.4f} vs w/o atlas {wo:.4f}")
        print(rep.table(), file=sys.__stdout__, flush=True)
    elapsed = time.time() - t0
    ok = cells_ok and wins >= 2 and elapsed < 7200
    report(7, ok, f"full >= w/o-atlas in {wins}/3 seeds ({'; '.join(lines)}); 12 cells + reference: {cells_ok}",
           elapsed)


# 8 ---------------------------------------------------------------------------------

def test_criterion_08_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(808)
    worst = 0.0
    mismatched_nan = 0
    for _ in range(100):
        p, t = random_masks(rng)
        pairs = [(dice(p, t), dice_oracle(p, t)), (hd95(p, t), hd_oracle(p, t))]
        pairs += list(zip(sensitivity_specificity(p, t), sens_spec_oracle(p, t)))
        for a, b in pairs:
            if math.isnan(a) or math.isnan(b):
                mismatched_nan += math.isnan(a) != math.isnan(b)
            else:
                worst = max(worst, abs(a - b))
    p = np.zeros((8, 8), bool)
    t = np.zeros((8, 8), bool)
    p[0, 0] = t[3, 4] = True
    single = hd95(p, t)
    ok = worst <= 1e-9 and mismatched_nan == 0 and single == 5.0
    report(8, ok, f"max oracle diff {worst:.1e}, NaN mismatches {mismatched_nan}, single-pixel hd95 {single}",
           time.time() - t0)


# 9 ---------------------------------------------------------------------------------

def _symmetric_case(rng, n=64):
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    a, b = rng.uniform(0.3, 0.45) * n, rng.uniform(0.35, 0.45) * n
    brain = ((yy - n / 2) / b) ** 2 + ((xx - n / 2) / a) ** 2 <= 1
    m = brain.astype(np.uint8)
    r_t = rng.uniform(5, 8)
    margin = rng.uniform(1, 3)
    # keep the whole lesion (and a 2x tumor) well inside the brain
    span = max(0.0, min(a, b) - 1.5 * (r_t + margin) - 2)
    cy = n / 2 + rng.uniform(-span, span) * 0.5
    cx = n / 2 + rng.uniform(-span, span) * 0.5
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    m[(d2 <= (r_t + margin) ** 2) & brain] = 2
    m[(d2 <= r_t ** 2) & brain] = 4
    return m


def test_criterion_09_mask_op_invariants():
    t0 = time.time()
    rng = np.random.default_rng(909)
    failures = []
    ratios = []
    for case in range(1000):
        m = _symmetric_case(rng)
        twice = mirror_lesion(mirror_lesion(m))
        if not np.array_equal(twice, m):
            failures.append(f"{case}: mirror twice")
        if not np.array_equal(scale_tumor(m, 1.0), m):
            failures.append(f"{case}: scale 1.0")
        area = (m == 4).sum()
        for f in (2.0, 0.5):
            out = scale_tumor(m, f)
            r = (out == 4).sum() / area
            ratios.append(r / f)
            if not 0.8 * f <= r <= 1.2 * f:
                failures.append(f"{case}: scale {f} ratio {r:.3f}")
            if not is_valid_label_map(out):
                failures.append(f"{case}: invalid output")
        if not is_valid_label_map(twice):
            failures.append(f"{case}: invalid mirror output")
    elapsed = time.time() - t0
    ok = not failures and elapsed < 60
    report(9, ok, f"1000 cases, {len(failures)} failures {failures[:3]}, "
                  f"relative area ratio range [{min(ratios):.3f}, {max(ratios):.3f}]", elapsed)


# 10 --------------------------------------------------------------------------------

def test_criterion_10_resume_reproducibility(tmp_path):
    t0 = time.time()
    man = make_dataset(PhantomParams(size=64, seed=10, slices=4), 3, tmp_path / "data")
    data = load_split(man, "train")
    cfg = replace(SynthTrainConfig(max_epochs=4, constant_epochs=1, batch_size=3), max_steps=3)
    reference = SynthesisTrainer(cfg, data).fit()
    part = SynthesisTrainer(replace(cfg, max_steps=2), data)
    part.fit()
    ckpt = part.save(tmp_path / "mid.ckpt")
    torch.manual_seed(999)
    np.random.seed(999)
    resumed = SynthesisTrainer.resume(ckpt, data, cfg).fit()
    same = resumed[-1] == reference[-1]
    report(10, same, f"step {resumed[-1]['step']} report bit-identical after resume: {same}", time.time() - t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
