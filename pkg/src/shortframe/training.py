"""SI-SDR loss, the joint training loop with early stopping, and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import EnhancerModel, ModelConfig
from .nn import Adam, backward
from .stft import StftConfig, istft_torch, polar_split_torch, stft_torch

log = logging.getLogger(__name__)

SI_SDR_CLAMP = 60.0
LOSS_EPS = 1e-9


def si_sdr(reference, estimate, clamp: bool = True, zero_mean: bool = False) -> float:
    """Scale-invariant SDR in dB, clamped to +-60 dB unless ``clamp`` is off."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: reference {s.shape}, estimate {e.shape}")
    if zero_mean:
        s, e = s - s.mean(), e - e.mean()
    ss = float(np.dot(s, s))
    if ss == 0:
        raise ValueError("reference signal is all zeros")
    alpha = float(np.dot(e, s)) / ss
    target = alpha * s
    err = e - target
    num, den = float(np.dot(target, target)), float(np.dot(err, err))
    if den == 0:
        return SI_SDR_CLAMP if clamp else math.inf
    if num == 0:
        return -SI_SDR_CLAMP if clamp else -math.inf
    val = 10.0 * math.log10(num / den)
    return float(np.clip(val, -SI_SDR_CLAMP, SI_SDR_CLAMP)) if clamp else val


def si_sdr_torch(reference: torch.Tensor, estimate: torch.Tensor, eps: float = LOSS_EPS,
                 zero_mean: bool = False) -> torch.Tensor:
    """Batched SI-SDR over the last axis, with energies floored at ``eps``."""
    if zero_mean:
        reference = reference - reference.mean(-1, keepdim=True)
        estimate = estimate - estimate.mean(-1, keepdim=True)
    ss = (reference * reference).sum(-1, keepdim=True).clamp_min(eps)
    alpha = (estimate * reference).sum(-1, keepdim=True) / ss
    target = alpha * reference
    err = estimate - target
    num = (target * target).sum(-1).clamp_min(eps)
    den = (err * err).sum(-1).clamp_min(eps)
    return 10.0 * torch.log10(num / den)


def reconstruct(model: EnhancerModel, noisy: torch.Tensor, cfg: StftConfig):
    """Noisy waveforms (B, T) -> enhanced waveforms plus the intermediate views."""
    spec = stft_torch(noisy, cfg)
    mag, cos, sin = polar_split_torch(spec)
    _, m, c, s = model(mag, cos, sin)
    est = istft_torch(m * c, m * s, cfg, noisy.shape[-1])
    return est, (mag, cos, sin), (m, c, s)


def loss_batch(model: EnhancerModel, noisy: torch.Tensor, clean: torch.Tensor,
               cfg: StftConfig, batch_index: int = -1, zero_mean: bool = False) -> torch.Tensor:
    """Mean negative SI-SDR of the enhanced batch, floored at -60."""
    est, _, _ = reconstruct(model, noisy, cfg)
    scores = si_sdr_torch(clean, est, zero_mean=zero_mean).clamp(max=SI_SDR_CLAMP)
    loss = -scores.mean()
    if not torch.isfinite(loss):
        norms = {n: float(p.detach().norm()) for n, p in model.named_parameters()}
        raise FloatingPointError(f"non-finite loss at batch {batch_index}; parameter norms: {norms}")
    return loss


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    excerpt_seconds: float = 2.0
    val_fraction: float = 0.2
    zero_mean_si_sdr: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.patience <= 0 or self.max_epochs <= 0:
            raise ValueError("lr, batch_size, patience and max_epochs must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


class EarlyStopping:
    """Stop once the validation loss has not strictly decreased for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; return True if it is the new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ------------------------------------------------------------------ checkpoints

MAGIC = b"SFCKPT01"


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    best_val_loss: float = math.inf
    metrics: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config["model"])

    def stft_config(self) -> StftConfig:
        c = self.config["stft"]
        return StftConfig(frame_len=c["frame_len"], hop=c["hop"], n_fft=c["n_fft"],
                          sample_rate=c["sample_rate"])

    def build_model(self, dtype=torch.float32) -> EnhancerModel:
        model = EnhancerModel(self.model_config()).to(dtype)
        state = {k[len("model."):]: torch.from_numpy(v.copy()).to(dtype)
                 for k, v in self.tensors.items() if k.startswith("model.")}
        model.load_state_dict(state)
        model.eval()
        return model


def make_checkpoint(model: EnhancerModel, optimizer: Adam | None, config: dict, epoch: int,
                    best_val_loss: float, metrics: dict | None = None) -> Checkpoint:
    tensors = {f"model.{k}": v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        moments = optimizer.moments()
        half = len(moments) // 2
        for n, m, v in zip(names, moments[:half], moments[half:]):
            tensors[f"adam_m.{n}"] = m.detach().cpu().numpy().copy()
            tensors[f"adam_v.{n}"] = v.detach().cpu().numpy().copy()
        metrics = dict(metrics or {}, adam_step=optimizer.state.get("t", 0))
    return Checkpoint(config=config, tensors=tensors, epoch=epoch,
                      best_val_loss=float(best_val_loss), metrics=dict(metrics or {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """JSON header followed by little-endian arrays in declaration order."""
    entries, blobs = [], []
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape)})
        blobs.append(a.astype(dt, copy=False).tobytes())
    header = {"config": ckpt.config, "epoch": ckpt.epoch,
              "best_val_loss": _json_float(ckpt.best_val_loss),
              "metrics": ckpt.metrics, "tensors": entries}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + n])
    pos = 16 + n
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
        pos += count * dt.itemsize
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return Checkpoint(config=header["config"], tensors=tensors, epoch=header["epoch"],
                      best_val_loss=_from_json_float(header["best_val_loss"]),
                      metrics=header["metrics"])


def _json_float(x: float):
    return x if math.isfinite(x) else str(x)


def _from_json_float(x):
    return float(x)


# ------------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    status: str
    best_epoch: int


def evaluate_loss(model: EnhancerModel, noisy: np.ndarray, clean: np.ndarray, cfg: StftConfig,
                  batch_size: int = 32, zero_mean: bool = False) -> float:
    """Mean per-utterance loss over a whole split, batch norm in eval mode."""
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    total = 0.0
    try:
        with torch.no_grad():
            for i in range(0, len(noisy), batch_size):
                x = torch.as_tensor(noisy[i:i + batch_size], dtype=dtype)
                y = torch.as_tensor(clean[i:i + batch_size], dtype=dtype)
                loss = loss_batch(model, x, y, cfg, i // batch_size, zero_mean)
                total += loss.item() * len(x)
    finally:
        model.train(was)
    return total / len(noisy)


def train(model: EnhancerModel, train_set, val_set, stft_cfg: StftConfig, cfg: TrainConfig,
          log_path=None, extra_config: dict | None = None, on_epoch=None) -> TrainResult:
    """Train jointly on ``(noisy, clean)`` arrays of shape (N, T).

    Each epoch reshuffles with a generator seeded by ``(seed, epoch)``. The best
    model (lowest validation loss) is kept; training stops after ``patience``
    epochs without strict improvement, at ``max_epochs``, or on divergence.
    """
    tr_noisy, tr_clean = train_set
    va_noisy, va_clean = val_set
    if len(tr_noisy) == 0 or len(va_noisy) == 0:
        raise ValueError("training and validation splits must be non-empty")
    config = {"model": model.cfg.to_dict(), "stft": stft_cfg.describe(), "train": asdict(cfg),
              **(extra_config or {})}
    dtype = next(model.parameters()).dtype
    opt = Adam(model.parameters(), lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    best = make_checkpoint(model, opt, config, 0, math.inf)
    records: list[dict] = []
    status = "max_epochs"
    fh = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w")
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            model.train()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(tr_noisy))
            losses = []
            try:
                for b, i in enumerate(range(0, len(order), cfg.batch_size)):
                    idx = order[i:i + cfg.batch_size]
                    x = torch.as_tensor(tr_noisy[idx], dtype=dtype)
                    y = torch.as_tensor(tr_clean[idx], dtype=dtype)
                    opt.zero_grad()
                    loss = loss_batch(model, x, y, stft_cfg, b, cfg.zero_mean_si_sdr)
                    backward(loss)
                    opt.step()
                    losses.append(loss.item() * len(idx))
                val = evaluate_loss(model, va_noisy, va_clean, stft_cfg, cfg.batch_size,
                                    cfg.zero_mean_si_sdr)
                if not math.isfinite(val):
                    raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
            except FloatingPointError as exc:
                log.error("training diverged: %s", exc)
                status = "diverged"
                break
            rec = {"epoch": epoch, "train_loss": sum(losses) / len(order), "val_loss": val,
                   "seconds": round(time.perf_counter() - t0, 3)}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            improved = stopper.update(epoch, val)
            if improved:
                best = make_checkpoint(model, opt, config, epoch, val)
            log.info("epoch %d train %.3f val %.3f%s", epoch, rec["train_loss"], val,
                     " *" if improved else "")
            if on_epoch:
                on_epoch(rec)
            if stopper.should_stop:
                status = "early_stopped"
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(checkpoint=best, log=records, status=status, best_epoch=stopper.best_epoch)
