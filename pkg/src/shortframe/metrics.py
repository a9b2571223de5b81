"""ESTOI, per-utterance scoring of the three reconstructions, and bootstrap aggregation.

SI-SDR improvement stands in for a perceptual quality score; nothing here
claims to estimate POLQA.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.signal import firwin, resample_poly

from .stft import ComplexSpectrogram, StftConfig, combine, istft, overlap_add, polar_split, stft
from .training import si_sdr

log = logging.getLogger(__name__)

# ESTOI constants (Jensen & Taal's extended STOI)
ESTOI = {
    "fs": 10000,          # internal sample rate, Hz
    "frame": 256,         # analysis frame, samples
    "hop": 128,           # 50 % overlap
    "nfft": 512,
    "n_bands": 15,        # one-third-octave bands
    "min_freq": 150.0,    # centre of the lowest band, Hz
    "segment": 30,        # frames per intermediate-intelligibility segment (384 ms)
    "dyn_range": 40.0,    # silent-frame threshold below the loudest frame, dB
    "resample_taps": 64,  # windowed-sinc prototype for the 16 -> 10 kHz polyphase resampler
}
_EPS = np.finfo(np.float64).eps

KINDS = ("noisy", "joint", "mag_only", "phase_only")


def resample_16k_to_10k(x: np.ndarray) -> np.ndarray:
    # up 5 / down 8; cutoff at the 5 kHz output Nyquist, relative to the 40 kHz upsampled Nyquist
    h = firwin(ESTOI["resample_taps"], 1.0 / 8.0, window=("kaiser", 8.0))
    return resample_poly(x, 5, 8, window=h)


def third_octave_matrix(fs: int, nfft: int, n_bands: int, min_freq: float) -> np.ndarray:
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, len(f)))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _hann(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    # starts at range(0, len(x) - frame, hop): the reference implementation never
    # takes the final full frame, and scores are kept comparable with it
    n = (len(x) - frame - 1) // hop + 1
    if n <= 0:
        return np.zeros((0, frame))
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float, frame: int, hop: int):
    """Drop frames more than ``dyn_range`` dB below the loudest reference frame."""
    w = _hann(frame)
    xf, yf = _frames(x, frame, hop) * w, _frames(y, frame, hop) * w
    if len(xf) == 0:
        raise ValueError("signal shorter than one ESTOI frame")
    e = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = e > e.max() - dyn_range
    if not keep.any():
        raise ValueError("all frames are silent")
    return overlap_add(xf[keep], hop), overlap_add(yf[keep], hop)


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, ESTOI["frame"], ESTOI["hop"]) * _hann(ESTOI["frame"]),
                       n=ESTOI["nfft"], axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)


def _row_col_normalize(seg: np.ndarray) -> np.ndarray:
    seg = seg - seg.mean(axis=-1, keepdims=True)
    seg = seg / (np.linalg.norm(seg, axis=-1, keepdims=True) + _EPS)
    seg = seg - seg.mean(axis=-2, keepdims=True)
    return seg / (np.linalg.norm(seg, axis=-2, keepdims=True) + _EPS)


def estoi(reference, estimate, fs: int = 16000) -> float:
    """Extended short-time objective intelligibility of ``estimate`` w.r.t. ``reference``."""
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(estimate, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"reference and estimate must be 1-D of equal length, got {x.shape}, {y.shape}")
    if fs == 16000:
        x, y = resample_16k_to_10k(x), resample_16k_to_10k(y)
    elif fs != ESTOI["fs"]:
        raise ValueError(f"unsupported sample rate {fs}")
    x, y = remove_silent_frames(x, y, ESTOI["dyn_range"], ESTOI["frame"], ESTOI["hop"])
    obm = third_octave_matrix(ESTOI["fs"], ESTOI["nfft"], ESTOI["n_bands"], ESTOI["min_freq"])
    xb, yb = _band_envelopes(x, obm), _band_envelopes(y, obm)
    n = ESTOI["segment"]
    if xb.shape[1] < n:
        raise ValueError(f"too short for ESTOI: {xb.shape[1]} active frames, need {n}")
    idx = np.arange(n)[None, :] + np.arange(xb.shape[1] - n + 1)[:, None]
    xs = _row_col_normalize(xb[:, idx].transpose(1, 0, 2))
    ys = _row_col_normalize(yb[:, idx].transpose(1, 0, 2))
    score = float(np.sum(xs * ys) / (n * xs.shape[0]))
    return float(np.clip(score, -1.0, 1.0))


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalRecord:
    utterance_id: str
    frame_ms: float
    snr_db: float
    kind: str
    si_sdr: float
    si_sdr_improvement: float
    estoi: float


RECORD_FIELDS = [f.name for f in fields(EvalRecord)]


def triplet_signals(noisy_spec: ComplexSpectrogram, mag_est, cos_est, sin_est) -> dict:
    """The joint, magnitude-only and phase-only reconstructions plus the noisy passthrough."""
    cfg, n = noisy_spec.config, noisy_spec.original_len
    mag, cos, sin = polar_split(noisy_spec)
    return {
        "noisy": istft(noisy_spec),
        "joint": istft(combine(mag_est, cos_est, sin_est, cfg, n)),
        "mag_only": istft(combine(mag_est, cos, sin, cfg, n)),
        "phase_only": istft(combine(mag, cos_est, sin_est, cfg, n)),
    }


def score_signals(signals: dict, clean: np.ndarray, noisy: np.ndarray, uid: str,
                  frame_ms: float, snr_db: float, with_estoi: bool = True) -> list[EvalRecord]:
    base = si_sdr(clean, noisy)
    out = []
    for kind in KINDS:
        sig = noisy if kind == "noisy" else signals[kind]
        if len(sig) != len(clean):
            raise RuntimeError(f"{uid}/{kind}: reconstructed length {len(sig)} != {len(clean)}")
        s = si_sdr(clean, sig)
        out.append(EvalRecord(uid, float(frame_ms), float(snr_db), kind, s, s - base,
                              estoi(clean, sig) if with_estoi else float("nan")))
    return out


def evaluate_triplet(model, noisy: np.ndarray, clean: np.ndarray, cfg: StftConfig, uid: str = "",
                     snr_db: float = float("nan"), with_estoi: bool = True) -> list[EvalRecord]:
    """Score the three reconstructions from one eval-mode pass, plus the noisy baseline."""
    from .model import enhance

    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if noisy.shape != clean.shape:
        raise ValueError("noisy and clean clips differ in length")
    spec = stft(noisy, cfg)
    m, c, s = enhance(spec, model)
    sigs = triplet_signals(spec, m, c, s)
    return score_signals(sigs, clean, noisy, uid, cfg.frame_seconds * 1000.0, snr_db, with_estoi)


def sort_records(records: list[EvalRecord]) -> list[EvalRecord]:
    return sorted(records, key=lambda r: (r.utterance_id, r.frame_ms, KINDS.index(r.kind)
                                          if r.kind in KINDS else len(KINDS), r.kind))


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def records_to_csv(records: list[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in sort_records(records):
        w.writerow([_fmt(getattr(r, f)) for f in RECORD_FIELDS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[EvalRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [EvalRecord(r["utterance_id"], float(r["frame_ms"]), float(r["snr_db"]), r["kind"],
                       float(r["si_sdr"]), float(r["si_sdr_improvement"]), float(r["estoi"]))
            for r in rows]


def records_to_jsonl(records: list[EvalRecord]) -> str:
    return "".join(json.dumps(asdict(r)) + "\n" for r in sort_records(records))


# ----------------------------------------------------------------- aggregation

@dataclass
class AggRow:
    frame_ms: float
    snr_db: float | str
    kind: str
    metric: str
    n: int
    mean: float
    ci_low: float
    ci_high: float


AGG_FIELDS = [f.name for f in fields(AggRow)]


def bootstrap_ci(values, n_resamples: int = 10000, seed: int = 0, level: float = 0.95):
    """Mean and percentile-bootstrap confidence interval."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty sample")
    mean = float(v.mean())
    if v.size == 1 or np.all(v == v[0]):
        return mean, mean, mean
    rng = np.random.default_rng(seed)
    means = np.empty(n_resamples)
    chunk = max(1, 2_000_000 // v.size)
    for i in range(0, n_resamples, chunk):
        k = min(chunk, n_resamples - i)
        means[i:i + k] = v[rng.integers(0, v.size, size=(k, v.size))].mean(axis=1)
    a = (1 - level) / 2
    lo, hi = np.quantile(means, [a, 1 - a])
    return mean, float(lo), float(hi)


def _group_seed(seed: int, key) -> int:
    return (seed * 1_000_003 + zlib.crc32(repr(key).encode())) % (2 ** 32)


METRICS = ("si_sdr_improvement", "si_sdr", "estoi")


def aggregate(records: list[EvalRecord], by_snr: bool = False, metrics=METRICS,
              n_resamples: int = 10000, seed: int = 0) -> list[AggRow]:
    """Group means with bootstrap CIs.

    ``by_snr=False`` pools all input SNRs per (frame length, kind); ``by_snr=True``
    keeps one group per (frame length, SNR, kind). Groups whose values are all
    NaN are skipped with a warning.
    """
    groups: dict = {}
    for r in records:
        key = (r.frame_ms, r.snr_db if by_snr else "all", r.kind)
        groups.setdefault(key, []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: (k[0], str(k[1]) if k[1] == "all" else k[1],
                                             KINDS.index(k[2]) if k[2] in KINDS else 99)):
        fm, snr, kind = key
        for metric in metrics:
            # canonical order, so resampling depends on the record set, not its order
            members = sorted(groups[key], key=lambda r: (r.utterance_id, r.snr_db))
            vals = np.array([getattr(r, metric) for r in members], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                log.warning("empty group %s/%s omitted", key, metric)
                continue
            mean, lo, hi = bootstrap_ci(vals, n_resamples, _group_seed(seed, (key, metric)))
            rows.append(AggRow(fm, snr, kind, metric, int(vals.size), mean, lo, hi))
    return rows


def agg_to_csv(rows: list[AggRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGG_FIELDS)
    for r in rows:
        w.writerow([_fmt(getattr(r, f)) for f in AGG_FIELDS])
    return buf.getvalue()


def agg_from_csv(text: str) -> list[AggRow]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        snr = r["snr_db"] if r["snr_db"] == "all" else float(r["snr_db"])
        out.append(AggRow(float(r["frame_ms"]), snr, r["kind"], r["metric"], int(r["n"]),
                          float(r["mean"]), float(r["ci_low"]), float(r["ci_high"])))
    return out
