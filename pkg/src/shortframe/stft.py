"""Zero-padded STFT analysis, weighted overlap-add synthesis and polar views.

Framing is causal: the head of the signal is padded with ``M - H`` zeros (the
initial state of a streaming analysis buffer) and the tail is zero-filled to
complete the last frame, so every input sample is covered by the same number
of frames. No centre padding is applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

WSUM_FLOOR = 1e-8


def sqrt_hann(frame_len: int) -> np.ndarray:
    """Periodic square-root Hann window, ``sin(pi n / M)``."""
    n = np.arange(frame_len)
    return np.sin(np.pi * n / frame_len)


@dataclass(frozen=True)
class StftConfig:
    frame_len: int
    hop: int
    n_fft: int
    sample_rate: int = 16000
    window: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.frame_len <= 0 or self.hop <= 0 or self.n_fft <= 0:
            raise ValueError("frame_len, hop and n_fft must be positive")
        if self.hop > self.frame_len:
            raise ValueError(f"hop {self.hop} exceeds frame length {self.frame_len}")
        if self.n_fft < self.frame_len:
            raise ValueError(f"DFT size {self.n_fft} is smaller than frame length {self.frame_len}")
        if self.n_fft % 2:
            raise ValueError(f"DFT size must be even, got {self.n_fft}")
        if self.window is None:
            object.__setattr__(self, "window", sqrt_hann(self.frame_len))
        else:
            w = np.asarray(self.window, dtype=np.float64)
            if w.shape != (self.frame_len,):
                raise ValueError(f"window must have length {self.frame_len}, got {w.shape}")
            object.__setattr__(self, "window", w)

    @classmethod
    def from_ms(cls, frame_ms: float, n_fft: int = 512, overlap: float = 0.5,
                sample_rate: int = 16000) -> "StftConfig":
        """Build a config from a physical frame length, pinned DFT size and overlap ratio."""
        m = frame_ms * sample_rate / 1000.0
        if abs(m - round(m)) > 1e-9:
            raise ValueError(f"{frame_ms} ms at {sample_rate} Hz is not an integer number of samples")
        m = int(round(m))
        h = m * (1.0 - overlap)
        if abs(h - round(h)) > 1e-9 or round(h) < 1:
            raise ValueError(f"overlap {overlap} does not give an integer hop for M={m}")
        return cls(frame_len=m, hop=int(round(h)), n_fft=n_fft, sample_rate=sample_rate)

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def overlap(self) -> float:
        return (self.frame_len - self.hop) / self.frame_len

    @property
    def frame_seconds(self) -> float:
        return self.frame_len / self.sample_rate

    @property
    def head_pad(self) -> int:
        return self.frame_len - self.hop

    def n_frames(self, length: int) -> int:
        return math.ceil(length / self.hop)

    def describe(self) -> dict:
        return {"frame_len": self.frame_len, "hop": self.hop, "n_fft": self.n_fft,
                "sample_rate": self.sample_rate, "n_bins": self.n_bins}


@dataclass
class ComplexSpectrogram:
    """One-sided complex spectrogram of shape ``(K, L)``."""

    data: np.ndarray
    config: StftConfig
    original_len: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def _check_length(length: int, cfg: StftConfig):
    if length < cfg.hop:
        raise ValueError(
            f"signal of {length} samples is shorter than one frame after padding "
            f"(needs at least {cfg.hop} samples for M={cfg.frame_len}, H={cfg.hop})")


def frame_signal(signal: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Return the unwindowed frames, shape ``(L, M)``."""
    x = np.asarray(signal)
    n_frames = cfg.n_frames(len(x))
    total = (n_frames - 1) * cfg.hop + cfg.frame_len
    padded = np.zeros(total, dtype=x.dtype)
    padded[cfg.head_pad:cfg.head_pad + len(x)] = x
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(signal, cfg: StftConfig) -> ComplexSpectrogram:
    x = np.asarray(signal)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("stft expects a non-empty 1-D signal")
    _check_length(len(x), cfg)
    frames = frame_signal(x, cfg) * cfg.window.astype(x.dtype if x.dtype.kind == "f" else np.float64)
    data = np.fft.rfft(frames, n=cfg.n_fft, axis=1).T
    return ComplexSpectrogram(data=data, config=cfg, original_len=len(x))


def window_sum(cfg: StftConfig, n_frames: int) -> np.ndarray:
    total = (n_frames - 1) * cfg.hop + cfg.frame_len
    acc = np.zeros(total)
    w2 = cfg.window ** 2
    for l in range(n_frames):
        acc[l * cfg.hop:l * cfg.hop + cfg.frame_len] += w2
    return acc


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, m = frames.shape
    out = np.zeros((n_frames - 1) * hop + m, dtype=frames.dtype)
    # m / hop accumulations instead of n_frames; hop divides m in every grid config
    if m % hop == 0:
        for j in range(m // hop):
            seg = frames[:, j * hop:(j + 1) * hop].reshape(-1)
            out[j * hop:j * hop + seg.size] += seg
    else:
        for l in range(n_frames):
            out[l * hop:l * hop + m] += frames[l]
    return out


def istft(spec: ComplexSpectrogram) -> np.ndarray:
    cfg = spec.config
    if spec.data.ndim != 2 or spec.data.shape[0] != cfg.n_bins:
        raise ValueError(f"spectrogram has {spec.data.shape[0] if spec.data.ndim else 0} bins, "
                         f"config expects {cfg.n_bins}")
    n_frames = spec.data.shape[1]
    frames = np.fft.irfft(spec.data.T, n=cfg.n_fft, axis=1)[:, :cfg.frame_len]
    real_dtype = frames.dtype
    frames = frames * cfg.window.astype(real_dtype)
    out = overlap_add(frames, cfg.hop)
    out = out / np.maximum(window_sum(cfg, n_frames), WSUM_FLOOR).astype(real_dtype)
    start = cfg.head_pad
    return out[start:start + spec.original_len]


def polar_split(spec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Magnitude, cosine and sine of the phase; zero bins get phase (1, 0)."""
    data = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    mag = np.abs(data)
    nz = mag > 0
    safe = np.where(nz, mag, 1.0)
    cos = np.where(nz, data.real / safe, 1.0)
    sin = np.where(nz, data.imag / safe, 0.0)
    return mag, cos, sin


def combine(magnitude, cos_phase, sin_phase, config: StftConfig,
            original_len: int) -> ComplexSpectrogram:
    magnitude = np.asarray(magnitude)
    cos_phase = np.asarray(cos_phase)
    sin_phase = np.asarray(sin_phase)
    if not (magnitude.shape == cos_phase.shape == sin_phase.shape):
        raise ValueError(f"shape mismatch: {magnitude.shape}, {cos_phase.shape}, {sin_phase.shape}")
    if np.any(magnitude < 0):
        raise ValueError("magnitude must be non-negative")
    data = magnitude * cos_phase + 1j * (magnitude * sin_phase)
    return ComplexSpectrogram(data=data, config=config, original_len=original_len)


# Differentiable twins used by the training loss. They mirror stft/istft above
# on batched tensors of shape (B, T) and (B, K, L).

def stft_torch(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    _check_length(x.shape[-1], cfg)
    n_frames = cfg.n_frames(x.shape[-1])
    total = (n_frames - 1) * cfg.hop + cfg.frame_len
    padded = torch.nn.functional.pad(x, (cfg.head_pad, total - cfg.head_pad - x.shape[-1]))
    frames = padded.unfold(-1, cfg.frame_len, cfg.hop)
    win = torch.as_tensor(cfg.window, dtype=x.dtype)
    return torch.fft.rfft(frames * win, n=cfg.n_fft, dim=-1).transpose(-1, -2)


def istft_torch(real: torch.Tensor, imag: torch.Tensor, cfg: StftConfig,
                length: int) -> torch.Tensor:
    """Inverse of :func:`stft_torch` from real and imaginary parts, shape (B, K, L)."""
    n_frames = real.shape[-1]
    spec = torch.complex(real, imag).transpose(-1, -2)
    frames = torch.fft.irfft(spec, n=cfg.n_fft, dim=-1)[..., :cfg.frame_len]
    win = torch.as_tensor(cfg.window, dtype=frames.dtype)
    frames = frames * win
    total = (n_frames - 1) * cfg.hop + cfg.frame_len
    out = torch.nn.functional.fold(
        frames.transpose(-1, -2), output_size=(1, total),
        kernel_size=(1, cfg.frame_len), stride=(1, cfg.hop)).reshape(real.shape[0], total)
    wsum = torch.as_tensor(np.maximum(window_sum(cfg, n_frames), WSUM_FLOOR), dtype=out.dtype)
    out = out / wsum
    return out[:, cfg.head_pad:cfg.head_pad + length]


def polar_split_torch(spec: torch.Tensor):
    mag = spec.abs()
    nz = mag > 0
    safe = torch.where(nz, mag, torch.ones_like(mag))
    cos = torch.where(nz, spec.real / safe, torch.ones_like(mag))
    sin = torch.where(nz, spec.imag / safe, torch.zeros_like(mag))
    return mag, cos, sin
