"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import csv
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cacps import experiment as ex
from cacps import gridmath as gm
from cacps import losses as L
from cacps import phantom, segnet, spectral
from cacps import train as tr
from conftest import record
from fdcheck import check
from oracles import brute_dft2, brute_mix
from test_phantom import ring_oracle

PROBES = 20
RTOL = 1e-4


def _simplex(rng, shape):
    x = rng.exponential(size=shape)
    return x / x.sum(axis=1, keepdims=True)


# --- 1. gradients -----------------------------------------------------------


def _gradient_cases():
    rng = np.random.default_rng(2024)
    cases = {}

    x = rng.normal(size=(2, 3, 6, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    w = rng.normal(size=(2, 4, 6, 6))
    cases["conv2d"] = (lambda x, k, b: gm.reduce(gm.conv2d(x, k, b) * w, "sum"), [x, k, b])

    logits = rng.normal(size=(2, 4, 5, 5))
    w2 = rng.normal(size=(2, 4, 5, 5))
    cases["softmax"] = (lambda t: gm.reduce(gm.softmax_channels(t) * w2, "sum"), [logits])

    y = L.labels_to_onehot(rng.integers(0, 4, size=(2, 5, 5)))
    wc = rng.normal(size=(2, 5, 5))
    cases["cross-entropy"] = (lambda t: gm.reduce(L.cross_entropy(gm.softmax_channels(t), y) * wc, "sum"), [logits.copy()])

    cases["dice_loss"] = (lambda t: L.dice_loss(gm.softmax_channels(t), y), [logits.copy()])

    lf, lo = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(2, 4, 5, 5))
    wv = rng.normal(size=(2, 5, 5))
    cases["V"] = (
        lambda a, b: gm.reduce(L.confidence_variance(gm.softmax_channels(a), gm.softmax_channels(b)) * wv, "sum"),
        [lf, lo],
    )

    # L_a + L_b with the variance differentiable, over the logits of both networks and both views
    la = [rng.normal(size=(2, 4, 5, 5)) for _ in range(4)]

    def pair(o_a, f_a, o_b, f_b):
        a = L.bundle_from_probs(gm.softmax_channels(o_a), gm.softmax_channels(f_a))
        bb = L.bundle_from_probs(gm.softmax_channels(o_b), gm.softmax_channels(f_b))
        return L.cacps_pair_loss(a, bb, grad_through_variance=True)

    cases["L_a/L_b"] = (pair, la)

    # the same terms with V and Y detached: oracle holds the teacher statistics fixed
    base = [a.copy() for a in la]
    with gm.no_grad():
        frozen_a = L.bundle_from_probs(*(gm.softmax_channels(gm.Tensor(t)) for t in base[:2]))
        frozen_b = L.bundle_from_probs(*(gm.softmax_channels(gm.Tensor(t)) for t in base[2:]))

    def pair_detached(o_a, f_a, o_b, f_b):
        a = L.bundle_from_probs(gm.softmax_channels(o_a), gm.softmax_channels(f_a))
        bb = L.bundle_from_probs(gm.softmax_channels(o_b), gm.softmax_channels(f_b))
        ta = L.PseudoBundle(a.P_O, a.P_F, a.P_E, frozen_a.V, frozen_a.Y)
        tb = L.PseudoBundle(bb.P_O, bb.P_F, bb.P_E, frozen_b.V, frozen_b.Y)
        return L.cacps_pair_loss(ta, tb)

    cases["L_a/L_b detached"] = (pair_detached, [a.copy() for a in base])

    # full training objective through both networks
    imgs = rng.uniform(size=(3, 1, 8, 8))
    aug = np.clip(imgs + rng.normal(scale=0.05, size=imgs.shape), 0, 1)
    masks = np.stack([phantom.generate_phantom(s, 1, 32, 32).mask[12:20, 12:20] for s in range(3)])
    onehot = L.labels_to_onehot(masks)
    labeled = np.array([True, False, True])
    n_a, n_b = segnet.init(11), segnet.init(12)
    params = [t.data.copy() for t in n_a.tensors + n_b.tensors]
    half = len(n_a.tensors)

    def composed(*ts):
        nets = (segnet.SegNetParams(list(ts[:half]), 11), segnet.SegNetParams(list(ts[half:]), 12))
        return tr.compute_losses(nets, imgs, aug, onehot, labeled, 1.5, grad_through_variance=True)[0]

    cases["composed loss"] = (composed, params)
    return cases


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    failures, worst = [], 0.0
    for i, (name, (build, arrays)) in enumerate(_gradient_cases().items()):
        ratio, ana, _ = check(build, arrays, n_probes=PROBES, seed=i, rtol=RTOL)
        worst = max(worst, ratio)
        if ratio > 1 or not np.any(ana != 0):
            failures.append(f"{name} ratio={ratio:.3g}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    detail = f"8 cases x {PROBES} probes, worst |ana-num|/tol={worst:.3f}, {elapsed:.1f}s" + (f"; {failures}" if failures else "")
    record(1, "gradient suite", ok, detail)
    assert ok, detail


# --- 2. spectral -------------------------------------------------------------


def test_criterion_2_spectral():
    rng = np.random.default_rng(7)
    img = rng.uniform(size=(64, 64))
    round_trip = float(np.max(np.abs(spectral.idft2(spectral.dft2(img), clip=False) - img)))
    other = rng.uniform(size=(64, 64))
    identity = float(np.max(np.abs(spectral.fourier_augment(img, other, spectral.MixConfig(0.0, 0.1)) - img)))

    x = spectral.fourier_augment(img, other, spectral.MixConfig(0.7, 0.2), clip=False)
    fx, fi = spectral.dft2(x), spectral.dft2(img)
    keep = (spectral.low_freq_mask(64, 64, 0.2) == 0) & (fi.amplitude > 1e-6)
    phase_err = float(np.max(np.abs(np.angle(np.exp(1j * (fx.phase - fi.phase))))[keep]))

    mix_err = 0.0
    for _ in range(10):
        a, b = rng.uniform(size=(16, 20)), rng.uniform(size=(16, 20))
        amp_a, amp_b = np.abs(brute_dft2(a)), np.abs(brute_dft2(b))
        np.testing.assert_allclose(spectral.dft2(a).amplitude, amp_a, atol=1e-9)
        lam, ratio = rng.uniform(), rng.uniform(0.05, 0.5)
        for mode in spectral.MODES:
            got = spectral.mix_amplitude(amp_a, amp_b, spectral.MixConfig(lam, ratio, mode))
            mix_err = max(mix_err, float(np.max(np.abs(got - brute_mix(amp_a, amp_b, lam, ratio, mode)))))

    ok = round_trip < 1e-9 and identity <= 1e-6 and phase_err < 1e-9 and mix_err < 1e-12
    detail = f"round trip {round_trip:.2e}, lambda=0 identity {identity:.2e}, phase drift {phase_err:.2e}, mix vs oracle {mix_err:.2e} (10 pairs)"
    record(2, "spectral suite", ok, detail)
    assert ok, detail


# --- 3. loss algebra --------------------------------------------------------


def test_criterion_3_loss_algebra():
    rng = np.random.default_rng(3)
    checks = {}
    p_f, p_o = _simplex(rng, (1000, 4, 1, 1)), _simplex(rng, (1000, 4, 1, 1))
    v = L.confidence_variance(gm.Tensor(p_f), gm.Tensor(p_o)).data
    checks["V>=0 on 1000 pairs"] = bool(v.min() >= 0)
    v_self = L.confidence_variance(gm.Tensor(p_f), gm.Tensor(p_f)).data
    checks["V==0 iff equal"] = bool(np.all(v_self == 0) and np.all(v[np.abs(p_f - p_o).max(axis=1) > 1e-9] > 0))

    dice_ok = True
    for _ in range(50):
        p = _simplex(rng, (2, 4, 8, 8))
        g = L.labels_to_onehot(rng.integers(0, 4, size=(2, 8, 8)))
        d = L.dice_loss(gm.Tensor(p), g).item()
        dice_ok &= 0.0 <= d <= 1.0 and L.dice_loss(gm.Tensor(g), g).item() == 0.0
    checks["dice in [0,1], 0 at equality"] = bool(dice_ok)

    dec = 0.0
    for _ in range(100):
        ls, lc, beta = rng.uniform(0, 3, size=3)
        dec = max(dec, abs(L.total_loss(gm.Tensor(ls), gm.Tensor(lc), beta).item() - (ls + beta * lc)))
    checks["total_loss decomposition"] = dec <= 1e-12

    def one(p):
        return gm.Tensor(np.array(p, float).reshape(1, -1, 1, 1))

    v_ex = L.confidence_variance(one([0.5, 0.5]), one([0.25, 0.75])).item()
    teacher = L.bundle_from_probs(one([0.25, 0.75]), one([0.5, 0.5]))
    student = L.bundle_from_probs(one([0.5, 0.5]), one([0.5, 0.5]))
    term = L.confidence_weighted_term(teacher, student).item()
    checks["worked examples"] = abs(v_ex - 0.14384) <= 1e-4 and abs(term - 0.74411) <= 1e-4

    ok = all(checks.values())
    detail = ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()) + f" (V={v_ex:.5f}, L_a={term:.5f})"
    record(3, "loss algebra", ok, detail)
    assert ok, detail


# --- 4. determinism -----------------------------------------------------------


def test_criterion_4_determinism(tmp_path):
    data = phantom.build_dataset(
        phantom.DatasetConfig(n_per_domain=6, labeled_fraction=0.5, val_fraction=[0, 0, 1 / 3, 1 / 3], H=32, W=32),
        tmp_path / "data",
    )
    cfg = tr.TrainConfig(epochs=2, steps_per_epoch=3, batch_size=4)
    digests = []
    for run in ("a", "b"):
        tr.train(data, cfg, tmp_path / run)
        files = sorted(p for p in (tmp_path / run).rglob("*") if p.suffix in (".csv", ".ckpt"))
        digests.append({p.relative_to(tmp_path / run).as_posix(): p.read_bytes() for p in files})
    ok = digests[0] == digests[1] and len(digests[0]) == 7
    record(4, "determinism", ok, f"{len(digests[0])} CSV/checkpoint files compared byte for byte")
    assert ok


# --- 5. trend reproduction --------------------------------------------------------


TREND_SEEDS = (0, 1, 2, 3, 4)


def test_criterion_5_trend(tmp_path):
    cfg = ex.trend_train_config()
    t0 = time.perf_counter()
    outcome = ex.run_trend(TREND_SEEDS, cfg, tmp_path)
    elapsed = time.perf_counter() - t0
    ex.write_summary(outcome, tmp_path / "trend.csv")
    base, single, double = (outcome.column(m) for m in ex.METHODS)
    for s, a, b, c in zip(TREND_SEEDS, base, single, double):
        print(f"seed {s}: supervised {a:.4f}  single {b:.4f}  double {c:.4f}")
    wins = outcome.single_beats_baseline()
    ok_a = wins >= 4
    ok_b = outcome.double_mean_ge_single_mean()
    detail = (
        f"(a) single > supervised in {wins}/5 seeds; (b) double mean {double.mean():.4f} vs single mean "
        f"{single.mean():.4f}; supervised mean {base.mean():.4f}; {elapsed / 60:.1f} min"
    )
    record(5, "trend reproduction", ok_a and ok_b, detail)
    assert ok_a and ok_b, detail


# --- 6. phantoms ----------------------------------------------------------------


def test_criterion_6_phantoms():
    det = all(
        np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
        for a, b in ((phantom.generate_phantom(s, d), phantom.generate_phantom(s, d)) for s in range(5) for d in phantom.DOMAINS)
    )
    rings = sum(ring_oracle(phantom.generate_phantom(s, 1).mask) and phantom.lv_enclosed(phantom.generate_phantom(s, 1).mask) for s in range(20))
    psnr_wins = 0
    for s in range(20):
        clean, d1, _ = phantom.render(s, 1)
        _, d4, _ = phantom.render(s, 4)
        psnr_wins += phantom.psnr(clean, d4) < phantom.psnr(clean, d1)
    ok = det and rings == 20 and psnr_wins == 20
    record(6, "phantom suite", ok, f"deterministic={det}, ring check {rings}/20, PSNR d4<d1 {psnr_wins}/20")
    assert ok


# --- 7. CLI end to end ------------------------------------------------------------


def _cli(*args, cwd):
    env = dict(os.environ)
    return subprocess.run([sys.executable, "-m", "cacps", *map(str, args)], capture_output=True, text=True, cwd=cwd, env=env)


def test_criterion_7_cli(tmp_path):
    steps = []

    def step(name, proc, want):
        steps.append((name, proc.returncode, want))
        return proc

    cfg = tmp_path / "config.json"
    cfg.write_text(
        '{"data.n_per_domain": 4, "data.H": 32, "data.W": 32, "data.labeled_fraction": 0.5,'
        ' "data.val_fraction": [0, 0, 0.25, 0.25], "epochs": 1, "steps_per_epoch": 2, "batch_size": 4}'
    )
    step("gen-data", _cli("gen-data", "--config", cfg, "--out", "data", cwd=tmp_path), 0)
    n_files = len(list((tmp_path / "data/images").iterdir())) + len(list((tmp_path / "data/masks").iterdir()))
    step("train bad lr", _cli("train", "--config", cfg, "--data", "data", "--out", "bad", "lr_max=0", cwd=tmp_path), 2)
    step("train missing data", _cli("train", "--config", cfg, "--data", "nodata", "--out", "bad2", cwd=tmp_path), 3)
    step("train", _cli("train", "--config", cfg, "--data", "data", "--out", "run", cwd=tmp_path), 0)
    step("infer", _cli("infer", "--data", "data", "--run", "run", "--out", "pred", cwd=tmp_path), 0)
    step("eval", _cli("eval", "--data", "data", "--pred", "pred", "--out", "ev", "--method", "double", cwd=tmp_path), 0)
    step("eval ground truth", _cli("eval", "--data", "data", "--pred", "data", "--out", "gt", "--method", "truth", cwd=tmp_path), 0)
    rep = step("report", _cli("report", "ev/summary.csv", "gt/summary.csv", "--out", "rep", cwd=tmp_path), 0)
    (tmp_path / "broken.csv").write_text("method,dice_LV\nx,1\n")
    bad = step("report missing column", _cli("report", "broken.csv", cwd=tmp_path), 3)

    codes_ok = all(code == want for _, code, want in steps)
    files_ok = (
        n_files == 16 + 10
        and not (tmp_path / "bad").exists()
        and all((tmp_path / "run" / f).is_file() for f in ("metrics.csv", "config.json", "model1/net_a.ckpt", "model2/net_b.ckpt"))
        and len(list((tmp_path / "pred/masks").iterdir())) == 2
    )
    rows = {r["method"]: r for r in csv.DictReader(open(tmp_path / "rep/report.csv"))} if (tmp_path / "rep/report.csv").exists() else {}
    report_ok = rows.get("truth", {}).get("dice_avg") == "1.0" and "double" in rows and "dice_RV" in bad.stderr
    ok = codes_ok and files_ok and report_ok
    detail = ", ".join(f"{n}->{c}" for n, c, _ in steps)
    record(7, "CLI end to end", ok, detail)
    assert ok, detail + "\n" + rep.stdout
