"""Training objective: negated PSNR plus VGG-16 perceptual distance, applied
to both the restored image and the restored skeleton."""

from __future__ import annotations

import math
import os
from dataclasses import astuple, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ConfigurationError, ResourceError, ShapeError

VGG16_WEIGHTS_FILE = "vgg16-397923af.pth"
# index one past the ReLU closing each VGG-16 block in torchvision's `features`
VGG16_LAYERS = {"relu1_2": 4, "relu2_2": 9, "relu3_3": 16, "relu4_3": 23, "relu5_3": 30}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LossWeights:
    a1: float = 100.0
    a2: float = 100.0
    a3: float = 1.0
    a4: float = 1.0

    def __post_init__(self):
        for name, value in zip("a1 a2 a3 a4".split(), astuple(self)):
            try:
                value = float(value)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"loss weight {name} must be a number, got {value!r}") from exc
            if not (math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"loss weight {name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)

    @property
    def needs_extractor(self) -> bool:
        return self.a2 > 0 or self.a4 > 0


def default_weight_paths():
    paths = []
    cache = os.environ.get("OBIFORMER_CACHE")
    if cache:
        paths.append(Path(cache) / VGG16_WEIGHTS_FILE)
    torch_home = os.environ.get("TORCH_HOME", os.path.join(os.path.expanduser("~"), ".cache", "torch"))
    paths.append(Path(torch_home) / "hub" / "checkpoints" / VGG16_WEIGHTS_FILE)
    return paths


def _vgg16_trunk(layer: str) -> nn.Sequential:
    from torchvision.models import vgg16

    if layer not in VGG16_LAYERS:
        raise ConfigurationError(f"unknown VGG layer {layer!r}; choose from {sorted(VGG16_LAYERS)}")
    return vgg16(weights=None).features[: VGG16_LAYERS[layer]]


class FeatureExtractor(nn.Module):
    """Frozen VGG-16 trunk; callers pass [0, 1] images, normalisation is internal."""

    def __init__(self, trunk: nn.Sequential, layer: str = "relu3_3", source: str = "pretrained"):
        super().__init__()
        self.trunk = trunk
        self.layer = layer
        self.source = source
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def pretrained(cls, path: str | os.PathLike | None = None, layer: str = "relu3_3") -> "FeatureExtractor":
        """Load ImageNet VGG-16 weights from ``path``, $OBIFORMER_CACHE or the torch hub cache.

        Never downloads; a missing file raises ResourceError.
        """
        candidates = [Path(path)] if path is not None else default_weight_paths()
        found = next((p for p in candidates if p.is_file()), None)
        if found is None:
            tried = ", ".join(str(p) for p in candidates)
            raise ResourceError(
                f"VGG-16 weights not found (tried: {tried}). Download {VGG16_WEIGHTS_FILE} from "
                "https://download.pytorch.org/models/ and place it in $OBIFORMER_CACHE, "
                "or set the perceptual weights a2=a4=0."
            )
        trunk = _vgg16_trunk(layer)
        state = torch.load(found, map_location="cpu", weights_only=True)
        prefix = "features."
        trunk_state = {k[len(prefix):]: v for k, v in state.items()
                       if k.startswith(prefix) and int(k.split(".")[1]) < VGG16_LAYERS[layer]}
        try:
            trunk.load_state_dict(trunk_state)
        except RuntimeError as exc:
            raise ResourceError(f"VGG-16 weights at {found} do not match the architecture: {exc}") from exc
        return cls(trunk, layer, source=str(found))

    @classmethod
    def untrained(cls, seed: int = 0, layer: str = "relu3_3") -> "FeatureExtractor":
        """Randomly initialised trunk for tests and offline smoke runs only."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            trunk = _vgg16_trunk(layer)
        return cls(trunk, layer, source=f"untrained:{seed}")

    def train(self, mode: bool = True):
        # stays in eval mode; there is nothing to train
        return super().train(False)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] not in (1, 3):
            raise ShapeError(f"feature extractor expects B x 1|3 x H x W, got {tuple(x.shape)}")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.trunk(x)


def _same_shape(pred, gt, what):
    if pred.shape != gt.shape:
        raise ShapeError(f"{what}: shapes differ {tuple(pred.shape)} vs {tuple(gt.shape)}")


def psnr_loss(pred, gt, dynamic_range: float = 1.0, mse_floor: float = 1e-8):
    """Negative PSNR in dB; minimising it maximises PSNR."""
    _same_shape(pred, gt, "psnr_loss")
    if dynamic_range <= 0 or mse_floor <= 0:
        raise ConfigurationError("dynamic_range and mse_floor must be positive")
    mse = (pred - gt).pow(2).mean().clamp_min(mse_floor)
    return -10.0 * torch.log10(dynamic_range ** 2 / mse)


def perceptual_loss(pred, gt, fx: FeatureExtractor, gt_features=None):
    """Mean absolute difference of extractor features; gradients reach ``pred`` only."""
    _same_shape(pred, gt, "perceptual_loss")
    if gt_features is None:
        with torch.no_grad():
            gt_features = fx(gt)
    return (fx(pred) - gt_features).abs().mean()


def total_loss(denoised, gt_image, skeleton, gt_skeleton, w: LossWeights, fx: FeatureExtractor | None = None):
    """Weighted sum of the four terms; terms with zero weight are skipped entirely.

    The predicted skeleton is clamped to [0, 1] here, not inside the network.
    """
    if w.needs_extractor and fx is None:
        raise ResourceError("perceptual terms have non-zero weight but no feature extractor was given")
    skeleton = skeleton.clamp(0.0, 1.0)
    loss = denoised.new_zeros(())
    if w.a1:
        loss = loss + w.a1 * psnr_loss(denoised, gt_image)
    if w.a2:
        loss = loss + w.a2 * perceptual_loss(denoised, gt_image, fx)
    if w.a3:
        loss = loss + w.a3 * psnr_loss(skeleton, gt_skeleton)
    if w.a4:
        loss = loss + w.a4 * perceptual_loss(skeleton, gt_skeleton, fx)
    return loss
