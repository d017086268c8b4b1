"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines
appear under "acceptance criteria" at the end of the pytest output.
"""

import os
import time

import numpy as np
import pytest
from scipy import ndimage as ndi
from scipy import stats

from conftest import max_rel_err, numerical_grad
from f2fdenoise import synth
from f2fdenoise.autodiff import (Parameter, RunningStats, Tape, batch_norm, conv2d, l2_loss,
                                 masked_l1_loss, relu)
from f2fdenoise.cli import main as cli_main
from f2fdenoise.flow import FlowConfig, FlowField, tvl1_flow
from f2fdenoise.model import ModelConfig, init_params, predict
from f2fdenoise.noise import (Constant, NoiseSpec, SeededRng, Switch, apply_noise, awgn,
                              correlated_noise, jpeg_coefficients, salt_pepper)
from f2fdenoise.trainer import (FinetuneConfig, compute_pairs, corrupt_video, denoising_gain,
                                finetune_offline, finetune_online, run_lifelong)
from f2fdenoise.warp import (OcclusionConfig, build_pair, divergence, occlusion_mask,
                             warp_bilinear)

pytestmark = pytest.mark.acceptance

SP = NoiseSpec("salt_pepper", p=0.25)
LATE = slice(29, 40)  # frames 30..40, 1-based


# -- 1. gradient suite -----------------------------------------------------------

def _float64_net(rng):
    params = init_params(ModelConfig(depth=3, width=2), int(rng.integers(1 << 30)))
    for layer in params.layers:
        for p in layer.parameters():
            p.value = p.value.astype(np.float64) + 0.1 * rng.standard_normal(p.shape)
            p.grad = np.zeros_like(p.value)
        if layer.has_norm:
            layer.running = RunningStats.create(layer.weight.shape[0], np.float64)
    return params


def _grad_cases(rng):
    """One random instance per operator: (name, loss(tape), output seed, [(array, analytic)])."""
    b, c, o = (int(v) for v in rng.integers(1, 4, 3))
    h, w = (int(v) for v in rng.integers(3, 7, 2))
    k = int(rng.choice([1, 3, 5]))

    x = rng.standard_normal((b, c, h, w))
    wt, bias = Parameter(rng.standard_normal((o, c, k, k))), Parameter(rng.standard_normal(o))
    r = rng.standard_normal((b, o, h, w))
    yield ("conv2d", lambda tape=None: (conv2d(x, wt, bias, tape=tape) * r).sum(), r,
           [(x, None), (wt.value, lambda: wt.grad), (bias.value, lambda: bias.grad)])

    xr = rng.standard_normal((b, c, h, w))
    xr[np.abs(xr) < 1e-2] = 0.5  # keep finite differences off the kink
    rr = rng.standard_normal(xr.shape)
    yield "relu", lambda tape=None: (relu(xr, tape=tape) * rr).sum(), rr, [(xr, None)]

    xb = rng.standard_normal((2, c, 3, 4)) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
    g, be = Parameter(rng.uniform(0.5, 2, c)), Parameter(rng.standard_normal(c))
    rb = rng.standard_normal(xb.shape)
    running = RunningStats.create(c, np.float64)
    yield ("batch_norm",
           lambda tape=None: (batch_norm(xb, g, be, running, update_running=False, tape=tape)
                              * rb).sum(),
           rb, [(xb, None), (g.value, lambda: g.grad), (be.value, lambda: be.grad)])

    pred = rng.standard_normal((b, 1, h, w))
    target = pred + rng.choice([-1, 1], pred.shape) * rng.uniform(0.05, 1, pred.shape)
    mask = rng.integers(0, 2, pred.shape)
    mask.flat[0] = 1
    for name, fn in (("masked_l1_loss", masked_l1_loss), ("l2_loss", l2_loss)):
        yield name, lambda tape=None, fn=fn: fn(pred, target, mask, tape=tape), None, [(pred, None)]

    net = _float64_net(rng)
    frames = rng.random((2, 5, 6))
    rp = rng.standard_normal(frames.shape)
    yield ("model",
           lambda tape=None: (predict(net, frames, mode="train", update_running=False, tape=tape)
                              * rp).sum(),
           rp, [(p.value, lambda p=p: p.grad) for p in net.parameters()])


def test_criterion_1_gradient_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, counts = {}, {}
    for _ in range(20):
        for name, loss, seed_grad, checks in _grad_cases(rng):
            tape = Tape()
            loss(tape)
            dx = tape.backward(1.0 if seed_grad is None else seed_grad)
            for arr, analytic in checks:
                got = dx if analytic is None else analytic()
                err = max_rel_err(got, numerical_grad(loss, arr))
                worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-3 for e in worst.values()) and min(counts.values()) >= 20 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e} (n={counts[k]})" for k, v in worst.items())
    report(1, ok, f"max rel err: {detail}; {elapsed:.1f}s")
    assert ok


# -- 2. registration suite -------------------------------------------------------

def _texture(n, seed):
    t = ndi.gaussian_filter(np.random.default_rng(seed).standard_normal((n, n)), 2, mode="wrap")
    return (t - t.min()) / (t.max() - t.min())


def test_criterion_2_registration(report):
    t0 = time.perf_counter()
    clean_epe, noisy_epe = [], []
    n = 64
    inner = (slice(n // 10, n - n // 10),) * 2
    for seed in range(3):
        target = _texture(n, seed)
        reference = np.roll(target, (1, 2), axis=(0, 1))  # true flow (u, v) = (2, 1)
        f = tvl1_flow(target, reference)
        clean_epe.append(np.hypot(f.u - 2, f.v - 1)[inner].mean())
        rng = np.random.default_rng(100 + seed)
        f = tvl1_flow(target + 25 / 255 * rng.standard_normal(target.shape),
                      reference + 25 / 255 * rng.standard_normal(target.shape),
                      FlowConfig(prefilter_downscale=2))
        noisy_epe.append(np.hypot(f.u - 2, f.v - 1)[inner].mean())
    elapsed = time.perf_counter() - t0
    ok = max(clean_epe) < 0.3 and max(noisy_epe) < 0.6 and elapsed < 120
    report(2, ok, f"EPE clean max {max(clean_epe):.3f} px (<0.3), noisy max {max(noisy_epe):.3f} px "
                  f"(<0.6); {elapsed:.1f}s")
    assert ok


# -- 3. mask / warp suite --------------------------------------------------------

def test_criterion_3_mask_warp(report):
    t0 = time.perf_counter()
    H, W = 24, 32
    rr, cc = np.mgrid[0:H, 0:W].astype(float)
    rng = np.random.default_rng(3)
    checks = {}
    ref = rng.random((H, W))
    out, valid = warp_bilinear(ref, FlowField.zeros((H, W)))
    checks["zero flow identity"] = np.array_equal(out, ref) and valid.all()
    out, valid = warp_bilinear(cc / W, FlowField.constant((H, W), 0.5, 0))
    checks["ramp exact"] = np.allclose(out[:, :-1], (cc[:, :-1] + 0.5) / W, rtol=0, atol=1e-15)
    checks["out of view invalid"] = not warp_bilinear(ref, FlowField.constant((H, W), W, 0))[1].any()
    affine = 0.3 * rr - 0.7 * cc + 0.1
    ok_affine = True
    for s in range(20):
        r2 = np.random.default_rng(s)
        f = FlowField(r2.uniform(-3, 3, (H, W)), r2.uniform(-3, 3, (H, W)))
        o, v = warp_bilinear(affine, f)
        e = 0.3 * (rr + f.v) - 0.7 * (cc + f.u) + 0.1
        ok_affine &= np.allclose(o[v == 1], e[v == 1], atol=1e-9)
    checks["affine exactness"] = ok_affine

    checks["constant divergence 0"] = not divergence(FlowField.constant((H, W), 1.5, -2)).any()
    radial = FlowField(0.5 * (cc - (W - 1) / 2), 0.5 * (rr - (H - 1) / 2))
    checks["radial divergence 2a"] = np.allclose(divergence(radial), 1.0)
    checks["quadratic divergence 2c"] = np.allclose(
        divergence(FlowField(cc ** 2, np.zeros((H, W))))[:, 1:-1], 2 * cc[:, 1:-1])

    checks["zero flow mask ones"] = occlusion_mask(FlowField.zeros((H, W)), OcclusionConfig(0.5, 0)).all()
    checks["radial masked"] = not occlusion_mask(radial, OcclusionConfig(0.5, 0))[1:-1, 1:-1].any()
    band_ok = True
    no_div = OcclusionConfig(1e9, 0)
    for a in range(-4, 5):
        for b in range(-3, 4):
            k = occlusion_mask(FlowField.constant((H, W), a, b), no_div)
            exp = np.ones((H, W), bool)
            if a > 0:
                exp[:, W - a:] = False
            if a < 0:
                exp[:, :-a] = False
            if b > 0:
                exp[H - b:, :] = False
            if b < 0:
                exp[:-b, :] = False
            band_ok &= np.array_equal(k.astype(bool), exp)
    checks["domain exit bands"] = band_ok
    mono = True
    for s in range(20):
        r2 = np.random.default_rng(s)
        f = FlowField(ndi.gaussian_filter(r2.standard_normal((H, W)), 2) * 4,
                      ndi.gaussian_filter(r2.standard_normal((H, W)), 2) * 4)
        masks = [occlusion_mask(f, OcclusionConfig(0.3, r)) for r in range(4)]
        mono &= all(np.all(masks[i + 1] <= masks[i]) for i in range(3))
    checks["dilation monotone"] = mono
    tex = _texture(64, 0)
    pair = build_pair(tex, tex.copy())
    checks["static pair"] = pair.mask.mean() >= 0.95 and np.abs(pair.target - tex).mean() < 1e-3
    pair = build_pair(tex, np.roll(tex, (1, 2), axis=(0, 1)))
    m = pair.mask.astype(bool)
    checks["translated pair"] = np.abs(pair.target - tex)[m].mean() < 0.02
    pair = build_pair(tex, tex, flow=FlowField.constant(tex.shape, 64, 0))
    checks["skipped pair"] = pair.skipped
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 10
    report(3, ok, f"{len(checks) - len(failed)}/{len(checks)} checks"
                  + (f", failed: {failed}" if failed else "") + f"; {elapsed:.1f}s")
    assert ok


# -- 4. noise statistics suite ---------------------------------------------------

def _lag1(x):
    return np.corrcoef(x[:, :-1].ravel(), x[:, 1:].ravel())[0, 1]


def test_criterion_4_noise_statistics(report):
    t0 = time.perf_counter()
    mega = (1000, 1000)
    checks = {}
    u = np.full(mega, 0.5)
    d = apply_noise(u, awgn(25 / 255), SeededRng(11), 1) - u
    checks["awgn std 1%"] = abs(d.std() / (25 / 255) - 1) < 0.01
    checks["awgn mean 1e-3"] = abs(d.mean()) < 1e-3
    d = apply_noise(np.ones(mega), NoiseSpec("multiplicative", sigma=75 / 255), SeededRng(11), 1) - 1
    checks["multiplicative std 2%"] = abs(d.std() / (75 / 255) - 1) < 0.02
    n = correlated_noise(mega, 25 / 255, 2, np.random.default_rng(11))
    checks["correlated std 2%"] = abs(n.std() / (25 / 255) - 1) < 0.02
    checks["correlated lag-1 > 0.3"] = _lag1(n) > 0.3
    white = np.random.default_rng(12).standard_normal(mega)
    checks["white lag-1 < 0.01"] = abs(_lag1(white)) < 0.01
    unit = correlated_noise(mega, 0.1, 0.5, np.random.default_rng(13))
    checks["unit kernel KS < 0.01"] = stats.ks_2samp(unit.ravel(), 0.1 * white.ravel()).statistic < 0.01
    f = salt_pepper(np.full(mega, 2.0), 0.25, np.random.default_rng(14))
    checks["s&p fraction 0.25+-0.005"] = abs((f != 2.0).mean() - 0.25) < 0.005
    f = salt_pepper(np.zeros(mega), 1.0, np.random.default_rng(15))
    checks["s&p p=1 moments"] = abs(f.mean() / 0.5 - 1) < 0.01 and f.min() >= 0 and f.max() <= 1
    multiples = True
    for q in (1, 10, 50, 90, 100):
        coeffs, table = jpeg_coefficients(np.random.default_rng(q).random((40, 48)), q)
        ratio = coeffs / table
        multiples &= bool(np.abs(ratio - np.round(ratio)).max() < 1e-9)
    checks["jpeg table multiples"] = multiples
    a = apply_noise(np.zeros(mega), awgn(0.1), SeededRng(16), 7)
    b = apply_noise(np.zeros(mega), awgn(0.1), SeededRng(16), 8)
    checks["frame independence"] = abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 0.01
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 60
    report(4, ok, f"{len(checks) - len(failed)}/{len(checks)} Monte Carlo checks"
                  + (f", failed: {failed}" if failed else "") + f"; {elapsed:.1f}s")
    assert ok


# -- shared desk-scale runs ------------------------------------------------------

@pytest.fixture(scope="module")
def sp_runs(desk_pretrained):
    """Online and offline fine-tuning on three 40-frame salt-and-pepper videos."""
    params0 = desk_pretrained[0]
    runs = []
    t0 = time.perf_counter()
    for seed in range(3):
        clean = synth.video(40, (64, 64), seed=7 + seed)
        noisy = corrupt_video(clean, Constant(SP), seed=3 + seed)
        pairs = compute_pairs(noisy)
        online = finetune_online(noisy, params0, cfg=FinetuneConfig(), clean=clean, pairs=pairs)
        offline = finetune_offline(noisy, params0, cfg=FinetuneConfig(mode="offline", seed=seed),
                                   clean=clean, pairs=pairs)
        runs.append(dict(clean=clean, noisy=noisy, pairs=pairs, online=online, offline=offline))
    return runs, time.perf_counter() - t0


# -- 5. matched-noise no-harm ----------------------------------------------------

def test_criterion_5_matched_noise_no_harm(report, desk_pretrained):
    t0 = time.perf_counter()
    params0, _, held_out = desk_pretrained
    gain = denoising_gain(params0, held_out)
    clean = synth.video(40, (64, 64), seed=7)
    noisy = corrupt_video(clean, Constant(awgn(25 / 255)), seed=3)
    res = finetune_online(noisy, params0, cfg=FinetuneConfig(), clean=clean)
    ft = res.psnr()[-10:].mean()
    pre = res.column("psnr_pretrained")[-10:].mean()
    elapsed = time.perf_counter() - t0
    ok = gain >= 3.0 and ft - pre > -0.3
    report(5, ok, f"pretrain gain {gain:.2f} dB (>=3); last-10 PSNR fine-tuned {ft:.2f} vs "
                  f"pretrained {pre:.2f} dB, delta {ft - pre:+.2f} (>-0.3); {elapsed:.0f}s "
                  f"after pretraining")
    assert ok


# -- 6. unseen-noise adaptation --------------------------------------------------

def test_criterion_6_unseen_noise_adaptation(report, sp_runs):
    runs, elapsed = sp_runs
    gains, on_mean, off_mean, on_std, off_std = [], [], [], [], []
    for r in runs:
        on, off = r["online"], r["offline"]
        gains.append(on.psnr()[LATE].mean() - on.column("psnr_pretrained")[LATE].mean())
        on_mean.append(on.psnr()[LATE].mean())
        off_mean.append(off.psnr()[LATE].mean())
        on_std.append(on.psnr()[LATE].std())
        off_std.append(off.psnr()[LATE].std())
    gain = float(np.mean(gains))
    d_off = float(np.mean(off_mean) - np.mean(on_mean))
    ok = gain >= 2.0 and d_off >= -0.2 and np.mean(off_std) <= np.mean(on_std)
    report(6, ok, f"online gain frames 30-40 {gain:.2f} dB (>=2; per seed "
                  f"{', '.join(f'{g:.2f}' for g in gains)}); offline-online {d_off:+.2f} dB (>=-0.2); "
                  f"std offline {np.mean(off_std):.3f} vs online {np.mean(on_std):.3f}; 3 seeds; "
                  f"{elapsed:.0f}s")
    assert ok


# -- 7. pretrained start matters -------------------------------------------------

def test_criterion_7_random_init_underperforms(report, sp_runs):
    t0 = time.perf_counter()
    run = sp_runs[0][0]
    random0 = init_params(ModelConfig(), seed=12345)
    res = finetune_online(run["noisy"], random0, cfg=FinetuneConfig(), clean=run["clean"],
                          pairs=run["pairs"])
    pre = run["online"].psnr()[LATE].mean()
    rnd = res.psnr()[LATE].mean()
    elapsed = time.perf_counter() - t0
    ok = pre - rnd >= 1.0
    report(7, ok, f"frames 30-40 PSNR pretrained start {pre:.2f} dB vs random start {rnd:.2f} dB, "
                  f"gap {pre - rnd:.2f} (>=1); {elapsed:.0f}s")
    assert ok


# -- 8. lifelong switch ----------------------------------------------------------

def test_criterion_8_lifelong_switch(report, desk_pretrained):
    t0 = time.perf_counter()
    params0 = desk_pretrained[0]
    t_switch = 30
    clean = synth.video(60, (64, 64), seed=31)
    res = run_lifelong(clean, Switch(awgn(50 / 255), SP, t_switch), params0, seed=9)
    p = res.psnr()
    pre_mean = p[:t_switch - 1].mean()  # frames 1..29
    threshold = pre_mean - 3.0
    recovered = [t for t in range(t_switch, t_switch + 10) if p[t - 1] >= threshold]
    elapsed = time.perf_counter() - t0
    ok = bool(recovered)
    first = recovered[0] - t_switch if recovered else None
    report(8, ok, f"pre-switch mean {pre_mean:.2f} dB, threshold {threshold:.2f}; PSNR at switch "
                  f"{p[t_switch - 1]:.2f}; recovered after {first} frames (<10); "
                  f"frozen net post-switch {res.column('psnr_pretrained')[t_switch - 1:].mean():.2f} dB; "
                  f"{elapsed:.0f}s")
    assert ok


# -- 9. determinism --------------------------------------------------------------

def _pipeline(workdir):
    """corrupt -> pretrain (few steps) -> finetune -> eval through the CLI, relative paths."""
    from f2fdenoise.frames import save_sequence
    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        save_sequence(synth.video(8, (48, 48), seed=2), "clean/%02d.pgm", bits=16)
        save_sequence(synth.corpus(3, (48, 48), seed=3), "corpus/%02d.pgm", bits=16)
        common = ["--seed", "17", "--threads", "1"]
        codes = [
            cli_main(["corrupt", "clean/%02d.pgm", "noisy/%02d.pgm", "--noise", "salt_pepper",
                      "--p", "0.25"] + common),
            cli_main(["pretrain", "corpus", "--out", "w.f2fw", "--steps", "20", "--batch", "4",
                      "--crop", "32"] + common),
            cli_main(["finetune", "noisy/%02d.pgm", "--weights", "w.f2fw", "--iters", "5",
                      "--clean", "clean/%02d.pgm", "--out-frames", "out/%02d.pgm",
                      "--out-csv", "ft.csv", "--out-weights", "ft.f2fw"] + common),
            cli_main(["eval", "out/%02d.pgm", "clean/%02d.pgm", "--out-csv", "eval.csv"] + common),
        ]
    finally:
        os.chdir(cwd)
    files = {}
    for path in sorted(workdir.rglob("*")):
        if path.is_file():
            files[str(path.relative_to(workdir))] = path.read_bytes()
    return codes, files


def test_criterion_9_determinism(report, tmp_path):
    t0 = time.perf_counter()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = _pipeline(tmp_path / "a")
    codes_b, files_b = _pipeline(tmp_path / "b")
    elapsed = time.perf_counter() - t0
    differing = [k for k in files_a if files_a.get(k) != files_b.get(k)]
    ok = (codes_a == codes_b == [0, 0, 0, 0] and files_a.keys() == files_b.keys() and not differing
          and elapsed < 600)
    report(9, ok, f"{len(files_a)} output files byte-identical across two runs"
                  + (f"; differing: {differing}" if differing else "")
                  + f"; exit codes {codes_a}; {elapsed:.0f}s")
    assert ok
