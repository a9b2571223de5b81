import shutil
import subprocess
import sys

import numpy as np
import pytest

from conftest import write_sweep_toml
from shortframe.audio import AudioClip, mix_at_snr, read_manifest, synth_noise, synth_speech, wav_read, \
    wav_write
from shortframe.cli import main
from shortframe.metrics import records_from_csv
from shortframe.model import EnhancerModel, ModelConfig
from shortframe.stft import StftConfig, combine, istft, polar_split, stft
from shortframe.sweep import enhance_clip, load_model
from shortframe.training import make_checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    cfg = StftConfig.from_ms(4)
    model = EnhancerModel(ModelConfig(mag_blocks=1, mag_channels=16, phase_blocks=1, phase_channels=12, seed=4))
    p = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    save_checkpoint(p, make_checkpoint(model, None, {"model": model.cfg.to_dict(), "stft": cfg.describe()},
                                       1, 0.0))
    return p


def test_unknown_command_and_flag(capsys):
    assert main(["bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["sweep", "--nope"]) == 1
    assert "--nope" in capsys.readouterr().err
    assert main([]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "corpus" in capsys.readouterr().out


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "where" / "sweep.toml"
    assert main(["sweep", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_global_flags_before_or_after_subcommand(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "a"), "--seed", "2", "corpus", "make", "--config",
                 str(_corpus_toml(tmp_path))]) == 0
    assert main(["corpus", "make", "--out", str(tmp_path / "b"), "--seed", "2", "--config",
                 str(_corpus_toml(tmp_path))]) == 0
    assert (tmp_path / "a" / "trainval.jsonl").read_bytes() == (tmp_path / "b" / "trainval.jsonl").read_bytes()


def _corpus_toml(tmp_path):
    p = tmp_path / "corpus.toml"
    p.write_text("[corpus]\nn_clean = 2\nclean_seconds = 2.0\nn_noise = 3\nnoise_seconds = 2.0\n"
                 "n_test_clean = 1\ntest_snr_grid = [0.0]\n")
    return p


def test_corpus_unknown_key(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("[corpus]\nsize = 3\n")
    assert main(["corpus", "make", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path)]) == 1
    assert "size" in capsys.readouterr().err


def test_corpus_manifest_from_folders(tiny_corpus, tmp_path, capsys):
    out, _ = tiny_corpus
    rc = main(["corpus", "manifest", "--clean", str(out / "clean"), "--noise", str(out / "noise"),
               "--snr", "0", "10", "--out", str(tmp_path), "--seed", "1"])
    assert rc == 0
    recs = read_manifest(tmp_path / "manifest.jsonl")
    assert len(recs) == 10 and {r.snr_db for r in recs} == {0.0, 10.0}
    assert sum(r.split == "val" for r in recs) == 2
    assert main(["corpus", "manifest", "--clean", str(tmp_path / "empty"), "--noise",
                 str(out / "noise"), "--out", str(tmp_path)]) == 1


def test_enhance_recombination_audit(checkpoint, tmp_path, capsys):
    rng = np.random.default_rng(0)
    s = synth_speech(2.0, rng)
    v = synth_noise("pink", 2.0, rng)
    noisy = mix_at_snr(AudioClip(s), AudioClip(v), 0.0).noisy.astype(np.float32)
    wav_write(tmp_path / "mix.wav", AudioClip(noisy))
    assert main(["enhance", "--checkpoint", str(checkpoint), "--out", str(tmp_path),
                 str(tmp_path / "mix.wav")]) == 0
    outs = {k: wav_read(tmp_path / f"mix_{k}.wav").samples for k in ("joint", "mag_only", "phase_only")}
    # recompute the reconstructions independently of the CLI from the same inputs
    model, cfg = load_model(checkpoint)
    clip = wav_read(tmp_path / "mix.wav")
    ref = enhance_clip(clip, model, cfg)
    xn = ref["noisy"]
    spec = stft(xn, cfg)
    mag, cos, sin = polar_split(spec)
    from shortframe.model import enhance
    m, c, sn = enhance(spec, model)
    expect = {"joint": istft(combine(m, c, sn, cfg, len(xn))),
              "mag_only": istft(combine(m, cos, sin, cfg, len(xn))),
              "phase_only": istft(combine(mag, c, sn, cfg, len(xn)))}
    for k in outs:
        np.testing.assert_array_equal(outs[k], np.clip(expect[k], -1, 1).astype(np.float32))
    # the phase-only estimate keeps the noisy magnitude: with the noisy phase put back, it is the input
    np.testing.assert_allclose(istft(combine(mag, cos, sin, cfg, len(xn))), xn, atol=1e-9)


def test_enhance_rejects_wrong_rate(checkpoint, tmp_path, capsys):
    from scipy.io import wavfile
    wavfile.write(tmp_path / "x.wav", 8000, np.zeros(8000, np.float32))
    assert main(["enhance", "--checkpoint", str(checkpoint), str(tmp_path / "x.wav")]) == 1
    assert "8000" in capsys.readouterr().err


def test_evaluate_writes_records(checkpoint, tiny_corpus, tmp_path):
    _, paths = tiny_corpus
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--manifest", str(paths["test"]),
                 "--no-estoi", "--out", str(tmp_path)]) == 0
    recs = records_from_csv((tmp_path / "records.csv").read_text())
    assert len(recs) == 8 * 4
    assert {r.frame_ms for r in recs} == {4.0}
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--manifest", str(paths["test"]),
                 "--split", "val", "--out", str(tmp_path)]) == 1


def test_train_sweep_report_commands(tiny_corpus, tmp_path, capsys):
    _, paths = tiny_corpus
    cfg = write_sweep_toml(tmp_path / "s.toml", paths, [32], epochs=1)
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    assert (tmp_path / "out" / "checkpoints" / "32ms.ckpt").is_file()
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "sw"), "--quiet"]) == 0
    rep = tmp_path / "sw" / "report"
    before = {p.name: p.read_bytes() for p in rep.iterdir()}
    (rep / "fig_snr.svg").unlink()
    assert main(["report", "--out", str(tmp_path / "sw")]) == 0
    assert {p.name: p.read_bytes() for p in rep.iterdir()} == before
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 1


def test_runtime_failure_exits_two(tiny_corpus, tmp_path, monkeypatch, capsys):
    import shortframe.training as tr
    _, paths = tiny_corpus
    cfg = write_sweep_toml(tmp_path / "s.toml", paths, [32], epochs=1)

    def boom(*a, **k):
        raise FloatingPointError("synthetic divergence")

    monkeypatch.setattr(tr, "train", boom)
    assert main(["train", "--config", str(cfg), "--quiet"]) == 2
    assert "synthetic divergence" in capsys.readouterr().err


@pytest.mark.skipif(shutil.which("shortframe") is None, reason="console script not installed")
def test_console_script():
    r = subprocess.run(["shortframe", "bogus"], capture_output=True, text=True)
    assert r.returncode == 1 and "usage" in r.stderr
    r = subprocess.run([sys.executable, "-m", "shortframe.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
