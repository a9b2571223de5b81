"""Layers, reverse-mode gradients and the Adam optimizer.

Tensors are ``torch.Tensor`` laid out as ``(batch, channels, frames)``; the
frequency bins of a spectrogram are the channels and every convolution runs
along the frame axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

LAYER_KINDS = ("dense", "depthwise_separable_conv1d", "batch_norm", "relu", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 5
    dilation: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "depthwise_separable_conv1d", "batch_norm"):
            if self.in_channels <= 0:
                raise ValueError("channel counts must be positive")
        if self.kind in ("dense", "depthwise_separable_conv1d") and self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.kind == "depthwise_separable_conv1d" and self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")


def _uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator | None):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)


class Dense(nn.Module):
    """Per-frame affine map ``y[b, :, l] = W x[b, :, l] + bias``."""

    def __init__(self, in_channels: int, out_channels: int, gen: torch.Generator | None = None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels))
        self.bias = nn.Parameter(torch.empty(out_channels))
        _uniform_(self.weight, in_channels, gen)
        _uniform_(self.bias, in_channels, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.in_channels:
            raise ValueError(f"Dense expects (B, {self.in_channels}, L), got {tuple(x.shape)}")
        return torch.matmul(self.weight, x) + self.bias[:, None]


class DSConv1d(nn.Module):
    """Depthwise k-tap filter per channel along time, then pointwise channel mixing.

    Same-padding with zeros keeps the number of frames unchanged.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 5,
                 dilation: int = 1, gen: torch.Generator | None = None):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.dilation = kernel_size, dilation
        self.depthwise = nn.Parameter(torch.empty(in_channels, kernel_size))
        self.pointwise = nn.Parameter(torch.empty(out_channels, in_channels))
        self.bias = nn.Parameter(torch.empty(out_channels))
        _uniform_(self.depthwise, kernel_size, gen)
        _uniform_(self.pointwise, in_channels, gen)
        _uniform_(self.bias, in_channels, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.in_channels:
            raise ValueError(f"DSConv1d expects (B, {self.in_channels}, L), got {tuple(x.shape)}")
        pad = self.dilation * (self.kernel_size // 2)
        h = F.conv1d(x, self.depthwise[:, None, :], padding=pad,
                     dilation=self.dilation, groups=self.in_channels)
        return torch.matmul(self.pointwise, h) + self.bias[:, None]


class BatchNorm(nn.Module):
    """Per-channel normalisation over batch and time.

    Running variance is tracked with the unbiased estimate; the normalisation in
    train mode uses the biased one.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.channels:
            raise ValueError(f"BatchNorm expects (B, {self.channels}, L), got {tuple(x.shape)}")
        if self.training:
            n = x.shape[0] * x.shape[2]
            if n == 0:
                raise ValueError("batch norm on an empty batch")
            mean = x.mean(dim=(0, 2))
            var = ((x - mean[None, :, None]) ** 2).mean(dim=(0, 2))
            with torch.no_grad():
                unbiased = var * (n / (n - 1)) if n > 1 else var
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased.detach())
        else:
            mean, var = self.running_mean, self.running_var
        scale = self.gamma / torch.sqrt(var + self.eps)
        return (x - mean[None, :, None]) * scale[None, :, None] + self.beta[None, :, None]


class ReLU(nn.Module):
    def forward(self, x):
        return torch.relu(x)


class Sigmoid(nn.Module):
    def forward(self, x):
        return torch.sigmoid(x)


def build_layer(spec: LayerSpec, gen: torch.Generator | None = None) -> nn.Module:
    if spec.kind == "dense":
        return Dense(spec.in_channels, spec.out_channels, gen)
    if spec.kind == "depthwise_separable_conv1d":
        return DSConv1d(spec.in_channels, spec.out_channels, spec.kernel_size, spec.dilation, gen)
    if spec.kind == "batch_norm":
        return BatchNorm(spec.in_channels, **spec.params)
    if spec.kind == "relu":
        return ReLU()
    return Sigmoid()


class ResidualBlock(nn.Module):
    """``y = x + conv(bn(relu(x)))`` with equal input and output channels."""

    def __init__(self, channels: int, kernel_size: int = 5, dilation: int = 1,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.bn = BatchNorm(channels)
        self.conv = DSConv1d(channels, channels, kernel_size, dilation, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"block has {self.channels} channels, input has {x.shape[1]}")
        return x + self.conv(self.bn(torch.relu(x)))


def backward(loss: torch.Tensor) -> None:
    """Reverse-mode pass from a scalar loss; fills ``.grad`` on every leaf."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise RuntimeError("no recorded forward pass: loss does not depend on any parameter")
    loss.backward()


@torch.no_grad()
def adam_step(params, grads, state: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Adam update with bias correction, applied to ``params`` in place.

    ``state`` carries the step count ``t`` and first/second moments ``m``/``v``;
    it is created on the first call. A non-finite gradient aborts the step
    before anything is modified.
    """
    for i, g in enumerate(grads):
        if not torch.isfinite(g).all():
            raise FloatingPointError(
                f"non-finite gradient in parameter {i} (shape {tuple(g.shape)}); step aborted")
    if "m" not in state:
        state["t"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["t"] += 1
    c1 = 1 - beta1 ** state["t"]
    c2 = 1 - beta2 ** state["t"]
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return params


class Adam:
    def __init__(self, params, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, *self.betas, self.eps)

    def moments(self) -> list[torch.Tensor]:
        if "m" not in self.state:
            self.state.update(t=0, m=[torch.zeros_like(p) for p in self.params],
                              v=[torch.zeros_like(p) for p in self.params])
        return self.state["m"] + self.state["v"]
