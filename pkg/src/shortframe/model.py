"""Two-branch enhancer: a magnitude-masking CNN followed by a phase-residual CNN."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .nn import Dense, ResidualBlock
from .stft import ComplexSpectrogram, polar_split

PHASE_NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    n_bins: int = 257
    mag_blocks: int = 2
    mag_channels: int = 64
    phase_blocks: int = 2
    phase_channels: int = 48
    kernel_size: int = 5
    dilation: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_bins", "mag_blocks", "mag_channels", "phase_blocks",
                     "phase_channels", "kernel_size", "dilation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @classmethod
    def full_scale(cls, n_bins: int = 257, seed: int = 0) -> "ModelConfig":
        return cls(n_bins=n_bins, mag_blocks=15, mag_channels=1536,
                   phase_blocks=6, phase_channels=1024, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars for ``cfg``."""
    k, ks = cfg.n_bins, cfg.kernel_size

    def block(c):
        # batch-norm scale/shift + depthwise taps + pointwise weights and bias
        return 2 * c + c * ks + c * c + c

    cm, cp = cfg.mag_channels, cfg.phase_channels
    mag = (k * cm + cm) + cfg.mag_blocks * block(cm) + (cm * k + k)
    phase = (3 * k * cp + cp) + cfg.phase_blocks * block(cp) + (cp * 2 * k + 2 * k)
    return mag + phase


class EnhancerModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        k = cfg.n_bins
        self.mag_in = Dense(k, cfg.mag_channels, gen)
        self.mag_blocks = nn.ModuleList(
            ResidualBlock(cfg.mag_channels, cfg.kernel_size, cfg.dilation, gen)
            for _ in range(cfg.mag_blocks))
        self.mag_out = Dense(cfg.mag_channels, k, gen)
        self.phase_in = Dense(3 * k, cfg.phase_channels, gen)
        self.phase_blocks = nn.ModuleList(
            ResidualBlock(cfg.phase_channels, cfg.kernel_size, cfg.dilation, gen)
            for _ in range(cfg.phase_blocks))
        self.phase_out = Dense(cfg.phase_channels, 2 * k, gen)

    def _check(self, x: torch.Tensor):
        if x.dim() != 3 or x.shape[1] != self.cfg.n_bins:
            raise ValueError(f"expected (B, {self.cfg.n_bins}, L) input, got {tuple(x.shape)}")

    def mag_subnet(self, mag: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the real mask in (0, 1) and the masked magnitude."""
        self._check(mag)
        h = self.mag_in(mag)
        for blk in self.mag_blocks:
            h = blk(h)
        mask = torch.sigmoid(self.mag_out(h))
        return mask, mask * mag

    def phase_subnet(self, mag_est: torch.Tensor, cos: torch.Tensor,
                     sin: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Add the predicted (cos, sin) residual to the noisy phase and renormalise.

        Bins whose summed vector is shorter than ``PHASE_NORM_FLOOR`` keep the
        noisy phase, as do bins with an exactly zero residual (the input is
        already a unit vector there, so it passes through bit for bit).
        """
        self._check(mag_est)
        if not (mag_est.shape == cos.shape == sin.shape):
            raise ValueError("magnitude, cos and sin inputs must share a shape")
        h = self.phase_in(torch.cat([mag_est, cos, sin], dim=1))
        for blk in self.phase_blocks:
            h = blk(h)
        dc, ds = torch.chunk(self.phase_out(h), 2, dim=1)
        return normalize_phase(cos, sin, dc, ds)

    def forward(self, mag, cos, sin):
        mask, mag_est = self.mag_subnet(mag)
        cos_est, sin_est = self.phase_subnet(mag_est, cos, sin)
        return mask, mag_est, cos_est, sin_est

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def normalize_phase(cos, sin, dc, ds):
    c, s = cos + dc, sin + ds
    norm = torch.sqrt(c * c + s * s)
    keep = (norm < PHASE_NORM_FLOOR) | ((dc == 0) & (ds == 0))
    safe = torch.where(keep, torch.ones_like(norm), norm)
    return torch.where(keep, cos, c / safe), torch.where(keep, sin, s / safe)


def enhance(spec: ComplexSpectrogram, model: EnhancerModel):
    """Run one utterance through the model in eval mode.

    Returns ``(|S_hat|, cos, sin)`` as numpy arrays of shape ``(K, L)``.
    """
    if spec.data.shape[0] != model.cfg.n_bins:
        raise ValueError(f"spectrogram has {spec.data.shape[0]} bins, model expects {model.cfg.n_bins}")
    mag, cos, sin = polar_split(spec)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            args = [torch.as_tensor(a, dtype=dtype)[None] for a in (mag, cos, sin)]
            _, m, c, s = model(*args)
    finally:
        model.train(was_training)
    return m[0].numpy().astype(np.float64), c[0].numpy().astype(np.float64), s[0].numpy().astype(np.float64)
