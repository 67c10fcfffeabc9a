"""
Image encoder, release-date encoder and their cross-attention fusion.

The release-date embedding is the single query token; the W image tokens are
keys and values. The fused C-vector is what every denoiser block adds to the
output of its S4 layer.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config.errors import ConfigError, ShapeError

BACKBONES = ("small", "resnet18")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MIN_IMAGE_SIZE = 32


@dataclass
class ConditioningConfig:
    backbone: str = "small"
    pretrained: bool = False
    base_width: int = 16
    pooled_size: int = 4
    heads: int = 4
    positional: bool = True
    feedforward_multiplier: int = 4
    use_image: bool = True
    use_temporal: bool = True

    def validate(self, channels: int) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown image backbone '{self.backbone}', expected one of {BACKBONES}")
        if not (self.use_image or self.use_temporal):
            raise ConfigError("use_image and use_temporal cannot both be false")
        if self.heads <= 0 or channels % self.heads:
            raise ConfigError(f"channels={channels} must be divisible by heads={self.heads}")
        if self.base_width <= 0 or self.pooled_size <= 0:
            raise ConfigError("base_width and pooled_size must be positive")


def _check_images(images: torch.Tensor) -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeError(f"images must be B×3×H×W, got {tuple(images.shape)}")
    if images.shape[2] != images.shape[3]:
        raise ShapeError(f"images must be square, got {images.shape[2]}×{images.shape[3]}")
    if images.shape[2] < MIN_IMAGE_SIZE:
        raise ShapeError(f"images must be at least {MIN_IMAGE_SIZE} pixels, got {images.shape[2]}")


class SmallConvNet(nn.Module):
    """Four stride-2 conv stages; a desk-scale stand-in with the ResNet feature-map contract."""

    def __init__(self, base_width: int = 16):
        super().__init__()
        widths = [base_width * 2 ** i for i in range(4)]
        layers = []
        in_channels = 3
        for width in widths:
            layers += [
                nn.Conv2d(in_channels, width, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(1, width),
                nn.ReLU(),
            ]
            in_channels = width
        self.features = nn.Sequential(*layers)
        self.out_channels = widths[-1]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features((images - 0.5) / 0.5)


class ResNetBackbone(nn.Module):
    """ResNet-18 trunk without its pooling and classification layers."""

    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision.models import ResNet18_Weights, resnet18

        model = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1 if pretrained else None)
        self.features = nn.Sequential(*list(model.children())[:-2])
        self.out_channels = 512
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features((images - self.mean) / self.std)


class ImageEncoder(nn.Module):
    """Backbone feature map -> spatial sequence -> Conv1D + Linear -> C×W tokens."""

    def __init__(self, channels: int, horizon: int, config: ConditioningConfig):
        super().__init__()
        if config.backbone == "resnet18":
            self.backbone = ResNetBackbone(config.pretrained)
        else:
            self.backbone = SmallConvNet(config.base_width)
        self.pool = nn.AdaptiveAvgPool2d(config.pooled_size)
        self.reduce = nn.Conv1d(self.backbone.out_channels, channels, kernel_size=1)
        self.project = nn.Linear(config.pooled_size ** 2, horizon)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images)
        features = self.pool(self.backbone(images))
        sequence = features.flatten(2)
        return self.project(F.relu(self.reduce(sequence)))


class TemporalEncoder(nn.Module):
    """One 1->C MLP per date component, concatenated and reduced 4C->C."""

    def __init__(self, channels: int):
        super().__init__()
        self.components = nn.ModuleList([
            nn.Sequential(nn.Linear(1, channels), nn.ReLU(), nn.Linear(channels, channels))
            for _ in range(4)
        ])
        self.reduce = nn.Sequential(
            nn.Linear(4 * channels, channels), nn.ReLU(), nn.Linear(channels, channels)
        )

    def forward(self, dates: torch.Tensor) -> torch.Tensor:
        if dates.dim() != 2 or dates.shape[1] != 4:
            raise ShapeError(f"dates must be B×4, got {tuple(dates.shape)}")
        if torch.any(dates < 0) or torch.any(dates > 1):
            raise ShapeError("scaled date components must lie in [0, 1]")
        parts = [mlp(dates[:, i:i + 1]) for i, mlp in enumerate(self.components)]
        return self.reduce(torch.cat(parts, dim=1))


class CrossAttentionFusion(nn.Module):
    """
    Transformer-decoder layer with a single query token.

    Self-attention over one token is degenerate (its softmax weight is always 1)
    but kept so the layer matches the standard decoder layer.
    """

    def __init__(self, channels: int, horizon: int, heads: int = 4, positional: bool = True,
                 feedforward_multiplier: int = 4):
        super().__init__()
        self.self_attention = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.cross_attention = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.feedforward = nn.Sequential(
            nn.Linear(channels, feedforward_multiplier * channels),
            nn.ReLU(),
            nn.Linear(feedforward_multiplier * channels, channels),
        )
        self.norm1 = nn.LayerNorm(channels)
        self.norm2 = nn.LayerNorm(channels)
        self.norm3 = nn.LayerNorm(channels)
        self.positional = nn.Parameter(torch.randn(horizon, channels) * 0.02) if positional else None

    def forward(self, image_tokens: torch.Tensor, query: torch.Tensor,
                return_weights: bool = False):
        """
        Args:
            image_tokens: B×C×W image embedding
            query: B×C temporal embedding
        Returns:
            B×C conditioning vector (and B×W attention weights when requested)
        """
        if image_tokens.dim() != 3 or query.dim() != 2 or image_tokens.shape[1] != query.shape[1]:
            raise ShapeError(f"fusion got tokens {tuple(image_tokens.shape)} and query {tuple(query.shape)}")
        memory = image_tokens.transpose(1, 2)
        if self.positional is not None:
            if memory.shape[1] > self.positional.shape[0]:
                raise ShapeError(f"{memory.shape[1]} image tokens but {self.positional.shape[0]} positions")
            memory = memory + self.positional[: memory.shape[1]]
        x = query.unsqueeze(1)
        attended, _ = self.self_attention(x, x, x, need_weights=False)
        x = self.norm1(x + attended)
        attended, weights = self.cross_attention(x, memory, memory, need_weights=True)
        x = self.norm2(x + attended)
        x = self.norm3(x + self.feedforward(x))
        fused = x.squeeze(1)
        if return_weights:
            return fused, weights.squeeze(1)
        return fused


class ConditioningEncoder(nn.Module):
    """Produces c_j from (image, release date); honours the use_image / use_temporal ablations."""

    def __init__(self, channels: int, horizon: int, config: Optional[ConditioningConfig] = None):
        super().__init__()
        config = config or ConditioningConfig()
        config.validate(channels)
        self.config = config
        self.channels = channels
        self.image_encoder = ImageEncoder(channels, horizon, config) if config.use_image else None
        self.temporal_encoder = TemporalEncoder(channels) if config.use_temporal else None
        self.fusion = None
        self.query = None
        if config.use_image:
            self.fusion = CrossAttentionFusion(channels, horizon, config.heads, config.positional,
                                               config.feedforward_multiplier)
            if not config.use_temporal:
                # Without dates a learned token asks the image tokens instead.
                self.query = nn.Parameter(torch.randn(channels) / math.sqrt(channels))

    def forward(self, images: torch.Tensor, dates: torch.Tensor,
                return_weights: bool = False):
        temporal = self.temporal_encoder(dates) if self.temporal_encoder is not None else None
        if self.image_encoder is None:
            return (temporal, None) if return_weights else temporal
        tokens = self.image_encoder(images)
        query = temporal if temporal is not None else self.query.expand(tokens.shape[0], -1)
        return self.fusion(tokens, query, return_weights=return_weights)

    def encode_parts(self, images: torch.Tensor, dates: torch.Tensor) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """(image tokens B×C×W, temporal embedding B×C), None for disabled modalities."""
        tokens = self.image_encoder(images) if self.image_encoder is not None else None
        temporal = self.temporal_encoder(dates) if self.temporal_encoder is not None else None
        return tokens, temporal
