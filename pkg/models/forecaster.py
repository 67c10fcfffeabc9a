"""
Stage-1 model: conditioning encoder plus S4 denoiser, trained end to end.
"""

from typing import Optional

import torch
import torch.nn as nn

from models.conditioning import ConditioningConfig, ConditioningEncoder
from models.denoiser import Denoiser, DenoiserConfig


class DiffusionForecaster(nn.Module):
    """Predicts the injected noise of x^t given the product's image and release date."""

    def __init__(self, denoiser_config: DenoiserConfig,
                 conditioning_config: Optional[ConditioningConfig] = None):
        super().__init__()
        self.denoiser = Denoiser(denoiser_config)
        self.encoder = ConditioningEncoder(denoiser_config.channels, denoiser_config.horizon,
                                           conditioning_config)
        self.horizon = denoiser_config.horizon

    def condition(self, images: torch.Tensor, dates: torch.Tensor) -> torch.Tensor:
        """B×C conditioning embeddings."""
        return self.encoder(images, dates)

    def forward(self, xt: torch.Tensor, t: torch.Tensor, images: torch.Tensor,
                dates: torch.Tensor) -> torch.Tensor:
        return self.denoiser(xt, t, self.condition(images, dates))

    def as_denoiser(self) -> "ConditionedDenoiser":
        return ConditionedDenoiser(self)


class ConditionedDenoiser:
    """Adapter taking precomputed embeddings, so sampling encodes each product once."""

    def __init__(self, forecaster: DiffusionForecaster):
        self.forecaster = forecaster
        self.horizon = forecaster.horizon

    def __call__(self, xt: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor]) -> torch.Tensor:
        return self.forecaster.denoiser(xt, t, cond)
