"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (visible with
``pytest -s`` or in the ``-v`` log) before asserting.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import force_identity, write_sweep_toml
from oracles import central_diff_grad, max_rel_err
from shortframe import sweep as sweep_mod
from shortframe.audio import CorpusSpec, load_split, make_synthetic_corpus, read_manifest, wav_read
from shortframe.cli import main
from shortframe.metrics import estoi, evaluate_triplet
from shortframe.model import EnhancerModel, ModelConfig, parameter_count
from shortframe.nn import BatchNorm, Dense, DSConv1d, ReLU, ResidualBlock, Sigmoid
from shortframe.stft import StftConfig, istft, stft
from shortframe.sweep import load_config, run_sweep
from shortframe.training import TrainConfig, loss_batch, si_sdr, train

GRID_MS = [1, 2, 4, 8, 16, 32]
SEEDS = [0, 1, 2]
# desk-scale optimiser settings; see the README for why these differ from the defaults
TOY_TRAIN = TrainConfig(lr=1e-3, batch_size=16, patience=10, max_epochs=12)


def verdict(capsys, n, ok, detail):
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# ------------------------------------------------------------------ 1

def test_criterion_1_stft_round_trip(capsys):
    t0 = time.perf_counter()
    worst32 = worst64 = 0.0
    for ms in GRID_MS:
        cfg = StftConfig.from_ms(ms)
        rng = np.random.default_rng(1000 + ms)
        for _ in range(50):
            x = rng.standard_normal(16000)
            y = istft(stft(x, cfg))
            worst64 = max(worst64, np.linalg.norm(y - x) / np.linalg.norm(x))
            x32 = x.astype(np.float32)
            y32 = istft(stft(x32, cfg)).astype(np.float64)
            worst32 = max(worst32, np.linalg.norm(y32 - x32) / np.linalg.norm(x32.astype(np.float64)))
    dt = time.perf_counter() - t0
    ok = worst64 < 1e-10 and worst32 < 1e-6 and dt < 10
    verdict(capsys, 1, ok, f"max rel err double {worst64:.2e} (<1e-10), single {worst32:.2e} (<1e-6), "
                           f"{dt:.1f} s (<10 s)")


# ------------------------------------------------------------------ 2

def _fd_check(fn, tensors, subset=None, floor=1e-6, h=1e-5):
    for t in tensors:
        t.grad = None
    fn().backward()
    fd = central_diff_grad(fn, [t.detach() for t in tensors], h=h, index_subset=subset)
    return max(max_rel_err(t.grad.numpy(), g.numpy(), floor=floor) for t, g in zip(tensors, fd))


def test_criterion_2_gradients(capsys):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    errs = {}
    layers = {"dense": Dense(5, 4, g), "dsconv": DSConv1d(5, 4, 5, 2, g), "batch_norm": BatchNorm(5),
              "relu": ReLU(), "sigmoid": Sigmoid(), "residual": ResidualBlock(5, 3, 1, g)}
    for name, layer in layers.items():
        layer.double()
        x = torch.randn(2, 5, 7, generator=g, dtype=torch.float64, requires_grad=True)
        w = torch.randn(*layer(x).shape, generator=g, dtype=torch.float64)
        errs[name] = _fd_check(lambda: (layer(x) * w).sum(), [x, *layer.parameters()])

    k33 = ModelConfig(n_bins=33, mag_blocks=2, mag_channels=6, phase_blocks=2, phase_channels=5,
                      kernel_size=3, seed=1)
    model = EnhancerModel(k33).double()
    mag = torch.rand(2, 33, 6, generator=g, dtype=torch.float64) + 0.1
    ang = torch.rand(2, 33, 6, generator=g, dtype=torch.float64) * 6.28
    cos, sin = torch.cos(ang), torch.sin(ang)
    w = [torch.randn(2, 33, 6, generator=g, dtype=torch.float64) for _ in range(3)]

    def model_fn():
        _, m, c, s = model(mag, cos, sin)
        return (m * w[0]).sum() + (c * w[1]).sum() + (s * w[2]).sum()

    errs["model_k33"] = _fd_check(model_fn, list(model.parameters()))

    stft_cfg = StftConfig(frame_len=32, hop=16, n_fft=64)
    assert stft_cfg.n_bins == 33
    rng = np.random.default_rng(2)
    clean = torch.from_numpy(np.sin(np.arange(400) * rng.uniform(0.1, 0.5, (3, 1))))
    noisy = clean + 0.3 * torch.from_numpy(rng.standard_normal((3, 400)))
    params = list(model.parameters())
    subset = {i: sorted(rng.choice(p.numel(), size=max(1, p.numel() // 20), replace=False).tolist())
              for i, p in enumerate(params)}
    errs["loss_batch"] = _fd_check(lambda: loss_batch(model, noisy, clean, stft_cfg), params, subset,
                                   floor=1e-4, h=1e-6)
    dt = time.perf_counter() - t0
    ok = all(v < 1e-4 for k, v in errs.items() if k != "loss_batch") and errs["loss_batch"] < 1e-3 and dt < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    verdict(capsys, 2, ok, f"max rel err {detail}; {dt:.1f} s (<120 s)")


# ------------------------------------------------------------------ 3

def test_criterion_3_si_sdr_contract(capsys):
    rng = np.random.default_rng(3)
    s = rng.standard_normal(4000)
    e = s + 0.5 * rng.standard_normal(4000)
    scale_dev = abs(si_sdr(s, 1e3 * e, clamp=False) - si_sdr(s, e, clamp=False))
    v = rng.standard_normal(4000)
    v -= np.dot(v, s) / np.dot(s, s) * s
    v *= np.sqrt(np.dot(s, s) / np.dot(v, v) / 10 ** 0.7)  # 7 dB
    ortho_dev = abs(si_sdr(s, s + v) - 10 * np.log10(np.dot(s, s) / np.dot(v, v)))
    hand = si_sdr([1.0, 0.0], [0.5, 0.5])
    ok = scale_dev < 1e-6 and ortho_dev < 1e-9 and abs(hand) < 1e-12
    verdict(capsys, 3, ok, f"scale x1e3 shift {scale_dev:.1e} dB, orthogonal dev {ortho_dev:.1e} dB, "
                           f"hand example {hand:.1e} dB")


# ------------------------------------------------------------------ 4

def test_criterion_4_phase_consistency(capsys):
    cfg = ModelConfig(n_bins=257, mag_blocks=1, mag_channels=8, phase_blocks=1, phase_channels=8, seed=4)
    model = EnhancerModel(cfg).double()
    g = torch.Generator().manual_seed(4)
    B, L = 4, 1000
    mag = torch.rand(B, 257, L, generator=g, dtype=torch.float64) * 2
    ang = torch.rand(B, 257, L, generator=g, dtype=torch.float64) * 2 * np.pi
    with torch.no_grad():
        c, s = model.phase_subnet(mag, torch.cos(ang), torch.sin(ang))
        dev = float(torch.max(torch.abs(c * c + s * s - 1)))
        force_identity(model)
        c0, s0 = model.phase_subnet(mag, torch.cos(ang), torch.sin(ang))
    exact = torch.equal(c0, torch.cos(ang)) and torch.equal(s0, torch.sin(ang))
    n = B * 257 * L
    ok = n >= 10 ** 6 and dev <= 1e-6 and exact
    verdict(capsys, 4, ok, f"{n} bins, max |cos^2+sin^2-1| = {dev:.1e}; zero-residual passthrough "
                           f"{'bit-exact' if exact else 'NOT exact'}")


# ------------------------------------------------------------------ 5

def test_criterion_5_constant_parameter_count(capsys):
    counts, shapes = {}, {}
    for ms in (4, 32):
        k = StftConfig.from_ms(ms, n_fft=512).n_bins
        cfg = ModelConfig(n_bins=k)
        m = EnhancerModel(cfg)
        counts[ms] = (parameter_count(cfg), m.n_parameters())
        shapes[ms] = [(n, tuple(p.shape)) for n, p in m.named_parameters()]
    ok = counts[4] == counts[32] and counts[4][0] == counts[4][1] and shapes[4] == shapes[32]
    verdict(capsys, 5, ok, f"formula/instantiated 4 ms {counts[4]}, 32 ms {counts[32]}; "
                           f"layer shapes {'identical' if shapes[4] == shapes[32] else 'differ'}")


# ------------------------------------------------------------- 6 and 7

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_corpus")
    paths = make_synthetic_corpus(out, CorpusSpec(), seed=0)
    recs = read_manifest(paths["trainval"])
    data = {split: load_split(recs, out, split) for split in ("train", "val")}
    test = load_split(read_manifest(paths["test"]), out, None, dtype=np.float64)
    return {"out": out, "paths": paths, "train": data["train"], "val": data["val"], "test": test,
            "models": {}, "logs": {}, "seconds": {}}


def trained(toy, ms, seed):
    key = (ms, seed)
    if key not in toy["models"]:
        stft_cfg = StftConfig.from_ms(ms)
        model = EnhancerModel(ModelConfig(n_bins=stft_cfg.n_bins, seed=seed))
        t0 = time.perf_counter()
        res = train(model, toy["train"][1:], toy["val"][1:], stft_cfg, replace(TOY_TRAIN, seed=seed))
        toy["seconds"][key] = time.perf_counter() - t0
        toy["models"][key] = res.checkpoint.build_model()
        toy["logs"][key] = res.log
    return toy["models"][key]


def mean_improvement(model, split, ms):
    recs, noisy, clean = split
    cfg = StftConfig.from_ms(ms)
    out = {"joint": [], "mag_only": [], "phase_only": []}
    for r, x, s in zip(recs, noisy, clean):
        for rec in evaluate_triplet(model, x.astype(np.float64), s.astype(np.float64), cfg, r.uid,
                                    r.snr_db, with_estoi=False):
            if rec.kind in out:
                out[rec.kind].append(rec.si_sdr_improvement)
    return {k: float(np.mean(v)) for k, v in out.items()}


def test_criterion_6_toy_training(toy, capsys):
    n_train, n_val = len(toy["train"][0]), len(toy["val"][0])
    model = trained(toy, 4, 0)
    imp = mean_improvement(model, toy["val"], 4)["joint"]
    # determinism: an independent rerun reproduces the first epochs exactly
    stft_cfg = StftConfig.from_ms(4)
    rerun = train(EnhancerModel(ModelConfig(n_bins=257, seed=0)), toy["train"][1:], toy["val"][1:],
                  stft_cfg, replace(TOY_TRAIN, seed=0, max_epochs=2))
    strip = lambda log: [(r["epoch"], r["train_loss"], r["val_loss"]) for r in log]  # noqa: E731
    same = strip(rerun.log) == strip(toy["logs"][(4, 0)][:2])
    secs = toy["seconds"][(4, 0)]
    ok = n_train >= 200 and n_val >= 50 and imp >= 3.0 and secs < 1800 and same
    verdict(capsys, 6, ok, f"{n_train} train / {n_val} val excerpts; mean val SI-SDR improvement "
                           f"{imp:.2f} dB (>=3), {secs:.0f} s (<1800 s), rerun "
                           f"{'identical' if same else 'DIFFERS'}")


def test_criterion_7_frame_length_trend(toy, capsys):
    res = {}
    for ms in (4, 32):
        per_seed = [mean_improvement(trained(toy, ms, seed), toy["test"], ms) for seed in SEEDS]
        res[ms] = {k: float(np.mean([p[k] for p in per_seed])) for k in per_seed[0]}
        res[ms]["per_seed_phase"] = [round(p["phase_only"], 2) for p in per_seed]
    a = res[4]["phase_only"] > res[32]["phase_only"]
    b = res[32]["mag_only"] > res[32]["phase_only"]
    verdict(capsys, 7, a and b,
            f"phase-only 4 ms {res[4]['phase_only']:.2f} dB vs 32 ms {res[32]['phase_only']:.2f} dB "
            f"({'ok' if a else 'wrong direction'}); at 32 ms mag-only {res[32]['mag_only']:.2f} dB vs "
            f"phase-only {res[32]['phase_only']:.2f} dB ({'ok' if b else 'wrong direction'}); "
            f"joint 4/32 ms {res[4]['joint']:.2f}/{res[32]['joint']:.2f} dB; "
            f"per-seed phase-only 4 ms {res[4]['per_seed_phase']}, 32 ms {res[32]['per_seed_phase']}")


# ------------------------------------------------------------------ 8

def test_criterion_8_estoi_sanity(toy, capsys):
    out = toy["out"]
    clean = [wav_read(p).samples for p in sorted((out / "test_clean").glob("*.wav"))]
    s = clean[0][:3 * 16000]
    self_score = estoi(s, s)
    noise_scores = [estoi(s, np.random.default_rng(seed).standard_normal(len(s))) for seed in range(20)]
    grid = [-10, -5, 0, 5, 10, 15, 20]
    noises = [wav_read(p).samples for p in sorted((out / "test_noise").glob("*.wav"))]
    means = []
    for snr in grid:
        vals = []
        for i, c in enumerate(clean):
            x = c[:2 * 16000]
            v = noises[i % len(noises)][:len(x)]
            v = v * np.sqrt(np.sum(x ** 2) / np.sum(v ** 2) / 10 ** (snr / 10))
            vals.append(estoi(x, x + v))
        means.append(float(np.mean(vals)))
    mono = all(b >= a for a, b in zip(means, means[1:]))
    worst = max(abs(v) for v in noise_scores)
    ok = self_score >= 0.99 and worst < 0.1 and mono
    verdict(capsys, 8, ok, f"estoi(s,s) {self_score:.4f} (>=0.99); max |estoi(s, noise)| {worst:.3f} "
                           f"(<0.1, 20 seeds); mean by SNR {[round(m, 3) for m in means]} "
                           f"{'non-decreasing' if mono else 'NOT monotone'}")


# ------------------------------------------------------------------ 9

def test_criterion_9_determinism_and_resume(tiny_corpus, tmp_path, monkeypatch, capsys):
    _, paths = tiny_corpus
    runs = []
    for name in ("a", "b"):
        cfg = write_sweep_toml(tmp_path / f"{name}.toml", paths, [4, 32], epochs=2, out=f"run_{name}",
                               estoi=True)
        assert main(["sweep", "--config", str(cfg), "--seed", "7", "--quiet"]) == 0
        runs.append(tmp_path / f"run_{name}" / "report")
    same = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
               for f in ("records.csv", "agg_by_framelen.csv", "agg_by_snr.csv", "report.json"))

    # interrupt the second cell mid-training, then resume through the CLI
    cfg_c = write_sweep_toml(tmp_path / "c.toml", paths, [4, 32], epochs=2, out="run_c", estoi=True)
    real_train = sweep_mod.train

    def interrupted(model, tr, va, stft_cfg, tcfg, **kw):
        if stft_cfg.frame_len == 512:
            def stop(rec):
                raise KeyboardInterrupt
            kw["on_epoch"] = stop
        return real_train(model, tr, va, stft_cfg, tcfg, **kw)

    monkeypatch.setattr(sweep_mod, "train", interrupted)
    cfg = load_config(cfg_c)
    cfg.seed = 7
    with pytest.raises(KeyboardInterrupt):
        run_sweep(cfg)
    monkeypatch.setattr(sweep_mod, "train", real_train)
    assert not (tmp_path / "run_c" / "cells" / "32ms.json").exists()
    assert (tmp_path / "run_c" / "cells" / "4ms.json").exists()
    assert main(["sweep", "--config", str(cfg_c), "--seed", "7", "--quiet"]) == 0
    resumed = tmp_path / "run_c" / "report"
    equal = all((runs[0] / f).read_bytes() == (resumed / f).read_bytes()
                for f in ("records.csv", "agg_by_framelen.csv", "agg_by_snr.csv", "report.json"))
    # a different seed on the same directory must be refused
    refused = main(["sweep", "--config", str(cfg_c), "--seed", "8", "--quiet"]) == 1
    ok = same and equal and refused
    verdict(capsys, 9, ok, f"repeat run {'byte-identical' if same else 'DIFFERS'}; interrupted+resumed "
                           f"{'equals' if equal else 'DIFFERS FROM'} uninterrupted run; "
                           f"changed seed on resume {'refused' if refused else 'NOT refused'}")
