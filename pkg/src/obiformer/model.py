"""OBIFormer network: channel-wise self-attention blocks, glyph structural
blocks and selective kernel fusion wired into a U-shaped encoder-decoder."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Mapping, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, ShapeError

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    encoder_depth: int = 4
    base_channels: int = 16
    csab_per_ofb: int = 2
    gsnb_per_ofb: int = 2
    attention_temperature_init: float = 1.0
    io_channels: int = 3
    skeleton_channels: int = 1
    ffn_expansion: float = 2.66
    skff_reduction: int = 8
    skff_min_channels: int = 4
    # L2-normalise queries and keys over the spatial axis before the
    # channel Gram matrix; off gives the raw softmax(KQ / alpha).
    qk_normalize: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("encoder_depth", "base_channels", "csab_per_ofb", "gsnb_per_ofb",
                     "io_channels", "skeleton_channels", "skff_reduction", "skff_min_channels"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"{name} must be an integer >= 1, got {value!r}")
        if not math.isfinite(self.attention_temperature_init) or self.attention_temperature_init == 0:
            raise ConfigurationError("attention_temperature_init must be finite and non-zero")
        if not self.ffn_expansion > 0:
            raise ConfigurationError("ffn_expansion must be positive")

    @property
    def size_multiple(self) -> int:
        return 2 ** self.encoder_depth

    def stage_channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, object]) -> "ModelConfig":
        """Build from a (possibly string-valued) mapping; unknown keys are ignored."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.type in ("bool", bool):
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        return cls(**kwargs)


class DualStream(NamedTuple):
    recon: torch.Tensor
    glyph: torch.Tensor


def _check_channels(x: torch.Tensor, channels: int, where: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{where} expects B x {channels} x H x W, got {tuple(x.shape)}")


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis at every spatial position."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        centered = x - x.mean(1, keepdim=True)
        var = centered.pow(2).mean(1, keepdim=True)
        x = centered / torch.sqrt(var + NORM_EPS)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ChannelSelfAttention(nn.Module):
    """Single-head transposed attention: the map is C x C, never HW x HW."""

    def __init__(self, channels: int, temperature: float = 1.0, qk_normalize: bool = True):
        super().__init__()
        self.channels = channels
        self.qk_normalize = qk_normalize
        self.qkv = nn.Conv2d(channels, channels * 3, 1, bias=False)
        self.qkv_dw = nn.Conv2d(channels * 3, channels * 3, 3, padding=1, groups=channels * 3, bias=False)
        self.temperature = nn.Parameter(torch.full((1,), float(temperature)))

    def qkv_maps(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q, k, v = (t.reshape(b, c, h * w) for t in (q, k, v))
        if self.qk_normalize:
            q = F.normalize(q, dim=-1)
            k = F.normalize(k, dim=-1)
        return q, k, v

    def attention_map(self, x):
        """Row-stochastic B x C x C map softmax(K Q / alpha)."""
        _check_channels(x, self.channels, "channel_self_attention")
        q, k, _ = self.qkv_maps(x)
        return self._softmax(k, q)

    def _softmax(self, k, q):
        logits = k @ q.transpose(1, 2) / self.temperature
        return logits.softmax(dim=-1)

    def forward(self, x):
        _check_channels(x, self.channels, "channel_self_attention")
        b, c, h, w = x.shape
        q, k, v = self.qkv_maps(x)
        attn = self._softmax(k, q)
        return (attn @ v).reshape(b, c, h, w)


class GatedFeedForward(nn.Module):
    def __init__(self, channels: int, expansion: float):
        super().__init__()
        hidden = int(channels * expansion)
        self.hidden = hidden
        self.project_in = nn.Conv2d(channels, hidden * 2, 1, bias=False)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2, bias=False)
        self.project_out = nn.Conv2d(hidden, channels, 1, bias=False)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class CSAB(nn.Module):
    """Residual channel-wise self-attention block.

    ``y = x + Wp CSA(LN(x))`` followed by ``y + FN(LN(y))``.
    """

    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        self.channels = channels
        self.norm1 = LayerNorm2d(channels)
        self.attn = ChannelSelfAttention(channels, cfg.attention_temperature_init, cfg.qk_normalize)
        self.project = nn.Conv2d(channels, channels, 1, bias=False)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = GatedFeedForward(channels, cfg.ffn_expansion)

    def forward(self, x):
        _check_channels(x, self.channels, "csab")
        x = x + self.project(self.attn(self.norm1(x)))
        return x + self.ffn(self.norm2(x))


class GSNB(nn.Module):
    """Conv-BN-ReLU-Conv-BN with an identity shortcut."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels, eps=NORM_EPS)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels, eps=NORM_EPS)

    def forward(self, x):
        _check_channels(x, self.channels, "gsnb")
        y = F.relu(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(y))


class SKFF(nn.Module):
    """Selective kernel fusion of the reconstruction and glyph streams.

    Returns ``(fused_recon, fused_glyph, fused)``; the two branch weights
    come from one softmax over the branch axis, so they sum to one.
    """

    def __init__(self, channels: int, reduction: int = 8, min_channels: int = 4):
        super().__init__()
        self.channels = channels
        squeezed = max(channels // reduction, min_channels)
        self.squeeze = nn.Conv2d(channels, squeezed, 1, bias=False)
        self.recon_logits = nn.Conv2d(squeezed, channels, 1, bias=False)
        self.glyph_logits = nn.Conv2d(squeezed, channels, 1, bias=False)

    def branch_weights(self, recon, glyph):
        compact = self.squeeze(F.adaptive_avg_pool2d(recon + glyph, 1))
        logits = torch.stack([self.recon_logits(compact), self.glyph_logits(compact)], dim=0)
        weights = logits.softmax(dim=0)
        return weights[0], weights[1]

    def forward(self, recon, glyph):
        if recon.shape != glyph.shape:
            raise ShapeError(f"skff streams differ: {tuple(recon.shape)} vs {tuple(glyph.shape)}")
        _check_channels(recon, self.channels, "skff")
        attn_r, attn_g = self.branch_weights(recon, glyph)
        fused_recon = attn_r * recon
        fused_glyph = attn_g * glyph
        return fused_recon, fused_glyph, fused_recon + fused_glyph


class OFB(nn.Module):
    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        self.channels = channels
        self.recon = nn.Sequential(*[CSAB(channels, cfg) for _ in range(cfg.csab_per_ofb)])
        self.glyph = nn.Sequential(*[GSNB(channels) for _ in range(cfg.gsnb_per_ofb)])
        self.skff = SKFF(channels, cfg.skff_reduction, cfg.skff_min_channels)

    def forward(self, x):
        _check_channels(x, self.channels, "ofb")
        fused_recon, fused_glyph, fused = self.skff(self.recon(x), self.glyph(x))
        return fused, DualStream(fused_recon, fused_glyph)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(channels, channels * 2, 4, stride=2, padding=1, bias=False)

    def forward(self, x):
        _check_channels(x, self.channels, "downsample")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"downsample needs even H and W, got {tuple(x.shape[2:])}")
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"upsample needs an even channel count, got {channels}")
        self.channels = channels
        self.deconv = nn.ConvTranspose2d(channels, channels // 2, 2, stride=2, bias=False)

    def forward(self, x):
        _check_channels(x, self.channels, "upsample")
        return self.deconv(x)


def resample(x: torch.Tensor, direction: str, layer: nn.Module) -> torch.Tensor:
    if direction == "down":
        if not isinstance(layer, Downsample):
            raise ConfigurationError("direction 'down' needs a Downsample layer")
    elif direction == "up":
        if not isinstance(layer, Upsample):
            raise ConfigurationError("direction 'up' needs an Upsample layer")
        if x.shape[1] % 2:
            raise ShapeError(f"upsample needs an even channel count, got {x.shape[1]}")
    else:
        raise ConfigurationError(f"unknown resample direction {direction!r}")
    return layer(x)


class OBIFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c, n = cfg.base_channels, cfg.encoder_depth
        self.input_proj = nn.Conv2d(cfg.io_channels, c, 3, padding=1)
        self.encoders = nn.ModuleList(OFB(cfg.stage_channels(l), cfg) for l in range(n))
        self.downs = nn.ModuleList(Downsample(cfg.stage_channels(l)) for l in range(n))
        self.bottleneck = OFB(cfg.stage_channels(n), cfg)
        # decoder modules are indexed by level, deepest last
        self.ups = nn.ModuleList(Upsample(cfg.stage_channels(l + 1)) for l in range(n))
        self.decoders = nn.ModuleList(OFB(cfg.stage_channels(l), cfg) for l in range(n))
        self.output_proj = nn.Conv2d(c, cfg.io_channels, 3, padding=1)
        self.corrector = nn.Conv2d(c, cfg.skeleton_channels, 3, padding=1)

    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.io_channels or x.shape[0] < 1:
            raise ShapeError(f"expected B x {cfg.io_channels} x H x W input, got {tuple(x.shape)}")
        m = cfg.size_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"H and W must be divisible by {m}, got {tuple(x.shape[2:])}")
        if not torch.isfinite(x).all():
            raise InputError("input image contains non-finite values")

    def forward(self, x):
        self.check_input(x)
        f0 = F.leaky_relu(self.input_proj(x), LEAKY_SLOPE)
        h, skips = f0, []
        for ofb, down in zip(self.encoders, self.downs):
            h, _ = ofb(h)
            skips.append(h)
            h = resample(h, "down", down)
        h, streams = self.bottleneck(h)
        for level in reversed(range(self.cfg.encoder_depth)):
            h = resample(h, "up", self.ups[level]) + skips[level]
            h, streams = self.decoders[level](h)
        denoised = self.output_proj(f0 + streams.recon)
        skeleton = self.corrector(streams.glyph)
        return denoised, skeleton


def _fan_in(weight: torch.Tensor) -> int:
    return int(weight[0].numel())


@torch.no_grad()
def init_parameters(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            w = module.weight
            std = 1.0 / math.sqrt(_fan_in(w))
            w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64).to(w.dtype) * std)
            if module.bias is not None:
                module.bias.zero_()
        elif isinstance(module, (LayerNorm2d, nn.BatchNorm2d)):
            module.weight.fill_(1.0)
            module.bias.zero_()
            if isinstance(module, nn.BatchNorm2d):
                module.reset_running_stats()
        elif isinstance(module, ChannelSelfAttention):
            module.temperature.fill_(getattr(model, "cfg", ModelConfig()).attention_temperature_init)


def build_model(cfg: ModelConfig, seed: int = 0) -> OBIFormer:
    if not isinstance(cfg, ModelConfig):
        raise ConfigurationError("build_model expects a ModelConfig")
    cfg.validate()
    model = OBIFormer(cfg)
    init_parameters(model, seed)
    return model


def forward(model: OBIFormer, image: torch.Tensor, mode: str = "eval"):
    """Run the network; ``mode`` only switches normalisation statistics."""
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(image)
    return model(image)


def parameter_store(model: nn.Module) -> "OrderedDict[str, np.ndarray]":
    """Named learnable arrays as numpy copies, in registration order."""
    return OrderedDict((name, p.detach().cpu().numpy().copy()) for name, p in model.named_parameters())


def count_parameters(params) -> int:
    if isinstance(params, nn.Module):
        return sum(p.numel() for p in params.parameters())
    return int(sum(int(np.prod(np.shape(v))) for v in params.values()))


def no_decay(name: str) -> bool:
    """Biases, normalisation affines and attention temperatures skip weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("temperature", "bias"):
        return True
    return ".norm" in name or ".bn" in name or name.startswith(("norm", "bn"))


# Functional entry points over the module parameters.

def channel_self_attention(x: torch.Tensor, attn: ChannelSelfAttention) -> torch.Tensor:
    return attn(x)


def skff_fuse(recon: torch.Tensor, glyph: torch.Tensor, skff: SKFF):
    return skff(recon, glyph)


def csab_forward(x: torch.Tensor, block: CSAB) -> torch.Tensor:
    return block(x)


def gsnb_forward(x: torch.Tensor, block: GSNB) -> torch.Tensor:
    return block(x)


def ofb_forward(x: torch.Tensor, block: OFB):
    return block(x)
