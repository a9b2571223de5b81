"""WAV I/O, SNR-controlled mixing, manifests and the synthetic desk-scale corpus."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
PEAK = 0.95


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError("only mono audio is supported")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"unsupported sample rate {self.sample_rate} Hz "
                                   f"(pipeline runs at {SAMPLE_RATE} Hz; resampling is not done)")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("audio contains NaN or Inf samples")

    def __len__(self):
        return len(self.samples)

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


# --------------------------------------------------------------------------- wav

def wav_read(path) -> AudioClip:
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError/struct errors on bad headers
        raise AudioFormatError(f"{path}: malformed or unsupported WAV file ({exc})") from exc
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: {data.shape[1]} channels, only mono is supported")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: unsupported sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype} "
                               "(16-bit PCM or 32-bit float only)")
    return AudioClip(samples, rate)


def wav_write(path, clip: AudioClip, pcm16: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(path, clip.sample_rate, data)


# ----------------------------------------------------------------------- mixing

def energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Crop longer noise at a random offset, loop shorter noise from a random offset."""
    if len(noise) == 0:
        raise ValueError("empty noise")
    if len(noise) >= length:
        start = int(rng.integers(0, len(noise) - length + 1))
        return noise[start:start + length]
    start = int(rng.integers(0, len(noise)))
    reps = int(np.ceil((start + length) / len(noise)))
    return np.tile(noise, reps)[start:start + length]


@dataclass
class Mixture:
    clean: np.ndarray
    noise: np.ndarray
    noisy: np.ndarray
    gain: float
    scale: float = 1.0
    snr_db: float = 0.0


def mix_at_snr(clean: AudioClip, noise: AudioClip, snr_db: float,
               rng: np.random.Generator | None = None, peak: float | None = PEAK) -> Mixture:
    """Scale the noise by ``gain`` so the mixture has exactly ``snr_db``.

    If ``peak`` is set and the mixture would exceed it, clean, noise and mixture
    are scaled jointly (the SNR is unaffected); the factor is kept in ``scale``.
    """
    s = clean.samples
    v = noise.samples
    if len(v) != len(s):
        v = fit_noise(v, len(s), rng if rng is not None else np.random.default_rng(0))
    es, ev = energy(s), energy(v)
    if es == 0:
        raise ValueError("clean signal is silent")
    if ev == 0:
        raise ValueError("noise signal is silent")
    gain = float(np.sqrt(es / (ev * 10.0 ** (snr_db / 10.0))))
    v = gain * v
    noisy = s + v
    scale = 1.0
    top = float(np.max(np.abs(noisy)))
    if peak is not None and top > peak:
        scale = peak / top
    return Mixture(clean=s * scale, noise=v * scale, noisy=noisy * scale,
                   gain=gain, scale=scale, snr_db=snr_db)


def peak_normalize(noisy: np.ndarray, clean: np.ndarray, peak: float = PEAK):
    """Jointly scale a noisy/clean pair so the noisy peak equals ``peak``."""
    top = float(np.max(np.abs(noisy)))
    if top == 0:
        return noisy, clean
    f = peak / top
    return noisy * f, clean * f


def slice_excerpts(clip: AudioClip, length_s: float, hop_s: float | None = None) -> list[AudioClip]:
    if length_s <= 0:
        raise ValueError("excerpt length must be positive")
    n = int(round(length_s * clip.sample_rate))
    hop = n if hop_s is None else int(round(hop_s * clip.sample_rate))
    if hop <= 0:
        raise ValueError("excerpt hop must be positive")
    return [AudioClip(clip.samples[i:i + n], clip.sample_rate)
            for i in range(0, len(clip) - n + 1, hop)]


# -------------------------------------------------------------------- manifests

@dataclass
class MixRecord:
    clean: str
    noise: str
    snr_db: float
    offset: float
    length: float
    split: str
    seed: int

    @property
    def uid(self) -> str:
        return f"{Path(self.clean).stem}@{self.offset:.3f}"


def write_manifest(path, records: list[MixRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_manifest(path) -> list[MixRecord]:
    path = Path(path)
    records = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                records.append(MixRecord(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{i + 1}: bad manifest record ({exc})") from exc
    return records


def resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def build_manifest(clean_files: list[Path], noise_files: list[Path], snr_grid, *,
                   excerpt_s: float = 2.0, val_fraction: float = 0.2, split: str | None = None,
                   seed: int = 0, base: Path | None = None) -> list[MixRecord]:
    """Index clean/noise WAVs into excerpt-level mixing records.

    Every non-overlapping ``excerpt_s`` excerpt of every clean file becomes one
    record. SNRs cycle through ``snr_grid`` over a seeded permutation, so each
    grid value is used equally often. Unless ``split`` forces one tag, a seeded
    ``val_fraction`` of the records is tagged ``val`` and the rest ``train``.
    """
    if not clean_files or not noise_files:
        raise ValueError("need at least one clean and one noise file")
    rng = np.random.default_rng(seed)
    excerpts = []
    for f in sorted(clean_files):
        clip = wav_read(f)
        n_ex = len(slice_excerpts(clip, excerpt_s))
        excerpts += [(f, i * excerpt_s) for i in range(n_ex)]
    noise_files = sorted(noise_files)
    order = rng.permutation(len(excerpts))
    n_val = int(round(val_fraction * len(excerpts))) if split is None else 0
    val_idx = set(order[:n_val].tolist())
    grid = list(snr_grid)
    records = []
    for rank, i in enumerate(order):
        f, off = excerpts[i]
        tag = split or ("val" if i in val_idx else "train")
        rel = (lambda p: str(p.relative_to(base)) if base else str(p))
        records.append(MixRecord(
            clean=rel(f), noise=rel(noise_files[int(rng.integers(len(noise_files)))]),
            snr_db=float(grid[rank % len(grid)]), offset=float(off), length=float(excerpt_s),
            split=tag, seed=int(rng.integers(2 ** 31))))
    records.sort(key=lambda r: (r.split, r.clean, r.offset))
    return records


def load_pair(record: MixRecord, base: Path, cache: dict | None = None):
    """Materialise one record as peak-normalised ``(noisy, clean)`` arrays."""
    def get(p):
        key = resolve(base, p)
        if cache is None:
            return wav_read(key).samples
        if key not in cache:
            cache[key] = wav_read(key).samples
        return cache[key]

    clean = get(record.clean)
    start = int(round(record.offset * SAMPLE_RATE))
    n = int(round(record.length * SAMPLE_RATE))
    s = clean[start:start + n]
    if len(s) != n:
        raise ValueError(f"record {record.uid} runs past the end of {record.clean}")
    rng = np.random.default_rng(record.seed)
    mix = mix_at_snr(AudioClip(s), AudioClip(get(record.noise)), record.snr_db, rng, peak=None)
    return peak_normalize(mix.noisy, mix.clean)


def load_split(records: list[MixRecord], base: Path, split: str | None = None,
               dtype=np.float32):
    recs = [r for r in records if split is None or r.split == split]
    cache: dict = {}
    pairs = [load_pair(r, base, cache) for r in recs]
    if not pairs:
        return recs, np.zeros((0, 0), dtype), np.zeros((0, 0), dtype)
    noisy = np.stack([p[0] for p in pairs]).astype(dtype)
    clean = np.stack([p[1] for p in pairs]).astype(dtype)
    return recs, noisy, clean


# ------------------------------------------------------------ synthetic corpus

@dataclass
class CorpusSpec:
    n_clean: int = 50
    clean_seconds: float = 10.0
    n_noise: int = 12
    noise_seconds: float = 10.0
    snr_grid: list = field(default_factory=lambda: [-5.0, 0.0, 5.0, 10.0])
    excerpt_seconds: float = 2.0
    val_fraction: float = 0.2
    n_test_clean: int = 14
    test_snr_grid: list = field(default_factory=lambda: [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0])


def synth_speech(seconds: float, rng: np.random.Generator, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Harmonic tone complexes with f0 glides, syllabic AM, formant colouring and pauses."""
    n = int(round(seconds * fs))
    out = np.zeros(n)
    t0 = int(rng.integers(int(0.05 * fs), int(0.3 * fs)))
    while t0 < n:
        seg = int(rng.uniform(0.25, 0.9) * fs)
        seg = min(seg, n - t0)
        if seg < int(0.05 * fs):
            break
        tt = np.arange(seg) / fs
        f0a, f0b = rng.uniform(80, 300, size=2)
        f0 = f0a + (f0b - f0a) * tt / max(tt[-1], 1e-9)
        rate = rng.uniform(2, 8)
        env = 0.5 * (1 - np.cos(2 * np.pi * rate * tt + rng.uniform(0, 0.5)))
        env *= np.sin(np.pi * np.arange(seg) / seg) ** 0.5
        phase = 2 * np.pi * np.cumsum(f0) / fs
        n_harm = int(7500 // max(f0a, f0b))
        formants = [rng.uniform(300, 900), rng.uniform(900, 2500), rng.uniform(2400, 3200)]
        sig = np.zeros(seg)
        mean_f0 = 0.5 * (f0a + f0b)
        for h in range(1, n_harm + 1):
            fh = h * mean_f0
            amp = 1.0 / h
            amp *= 1 + sum(a * np.exp(-0.5 * ((fh - fc) / 150.0) ** 2)
                           for a, fc in zip((6.0, 4.0, 2.0), formants))
            sig += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        out[t0:t0 + seg] += env * sig
        t0 += seg + int(rng.uniform(0.0, 0.4) * fs)
    top = np.max(np.abs(out))
    return out * (rng.uniform(0.3, 0.9) / top) if top > 0 else out


def synth_noise(kind: str, seconds: float, rng: np.random.Generator,
                fs: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(seconds * fs))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / fs)
        spec[1:] /= np.sqrt(f[1:])
        spec[0] = 0
        x = np.fft.irfft(spec, n)
    elif kind == "babble":
        x = sum(synth_speech(seconds, rng, fs) for _ in range(int(rng.integers(4, 8))))
        x = x * (1 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 3) * np.arange(n) / fs))
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return 0.5 * x / np.max(np.abs(x))


NOISE_KINDS = ("white", "pink", "babble")


def make_synthetic_corpus(out_dir, spec: CorpusSpec | None = None, seed: int = 0) -> dict:
    """Write clean/noise WAVs and train/val/test manifests under ``out_dir``.

    Returns a dict of manifest paths keyed by ``trainval`` and ``test``.
    """
    spec = spec or CorpusSpec()
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    ss = rng.bit_generator.seed_seq.spawn(4)
    gens = [np.random.default_rng(s) for s in ss]

    def write_set(sub, n, seconds, gen, fn):
        files = []
        for i in range(n):
            p = out / sub / f"{sub}_{i:04d}.wav"
            wav_write(p, AudioClip(fn(i, seconds, gen)))
            files.append(p)
        return files

    clean = write_set("clean", spec.n_clean, spec.clean_seconds, gens[0],
                      lambda i, s, g: synth_speech(s, g))
    noise = write_set("noise", spec.n_noise, spec.noise_seconds, gens[1],
                      lambda i, s, g: synth_noise(NOISE_KINDS[i % 3], s, g))
    test_clean = write_set("test_clean", spec.n_test_clean, spec.clean_seconds, gens[2],
                           lambda i, s, g: synth_speech(s, g))
    test_noise = write_set("test_noise", max(3, spec.n_noise // 4), spec.noise_seconds, gens[3],
                           lambda i, s, g: synth_noise(NOISE_KINDS[i % 3], s, g))
    trainval = build_manifest(clean, noise, spec.snr_grid, excerpt_s=spec.excerpt_seconds,
                              val_fraction=spec.val_fraction, seed=seed, base=out)
    test = build_manifest(test_clean, test_noise, spec.test_snr_grid,
                          excerpt_s=spec.excerpt_seconds, split="test", seed=seed + 1, base=out)
    paths = {"trainval": out / "trainval.jsonl", "test": out / "test.jsonl"}
    write_manifest(paths["trainval"], trainval)
    write_manifest(paths["test"], test)
    with open(out / "corpus.json", "w") as fh:
        json.dump({"seed": seed, **asdict(spec)}, fh, indent=2, sort_keys=True)
    log.info("synthetic corpus: %d train/val records, %d test records in %s",
             len(trainval), len(test), out)
    return paths
