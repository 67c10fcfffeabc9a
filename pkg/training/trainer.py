"""
Stage-1 training: denoising score matching of the conditioned forecaster.
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
import torch

from config.console import get_logger
from config.errors import ConfigError, DivergenceError
from data.tensors import ProductTensors
from diffusion.schedule import PARAMETERIZATIONS, NoiseSchedule, forward_sample
from models.forecaster import DiffusionForecaster

logger = get_logger(__name__)

OPTIMIZERS = ("adamw",)


@dataclass
class TrainConfig:
    epochs: int = 150
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 32
    seed: Optional[int] = None
    optimizer: str = "adamw"
    validation_fraction: float = 0.0
    monitor_every: int = 10
    keep_best: bool = False
    log_every: int = 10
    deterministic: bool = True

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError(f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer '{self.optimizer}', expected one of {OPTIMIZERS}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        if self.monitor_every < 0 or self.log_every < 0:
            raise ConfigError("monitor_every and log_every must be >= 0")


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int = 0
    model_state: Dict = field(default_factory=dict)
    optimizer_state: Dict = field(default_factory=dict)
    generator_state: Optional[torch.Tensor] = None
    history: List[Dict] = field(default_factory=list)
    best_state: Optional[Dict] = None
    best_loss: Optional[float] = None

    def save(self, path: str) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.__dict__, target)
        return target

    @classmethod
    def load(cls, path: str) -> "TrainState":
        return cls(**torch.load(path, map_location="cpu", weights_only=False))


def build_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    # Decoupled decay: p <- p * (1 - lr * wd) independently of the gradient.
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)


def write_history(history: List[Dict], path: str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    columns = ["stage", "epoch", "train_loss", "monitor_loss"]
    pd.DataFrame(history, columns=columns).to_csv(target, index=False, na_rep="")
    return target


class DiffusionTrainer:
    """
    Trains a DiffusionForecaster with the epsilon (or x0) prediction MSE.

    All randomness (batch order, step indices, noise) comes from one CPU
    generator whose state is part of the TrainState, so a resumed run replays
    the same draws as an uninterrupted one.
    """

    def __init__(self, model: DiffusionForecaster, schedule: NoiseSchedule, config: TrainConfig,
                 parameterization: str = "epsilon", device: str = "cpu"):
        config.validate()
        if parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"unknown parameterization '{parameterization}'")
        self.model = model.to(device)
        self.schedule = schedule
        self.config = config
        self.parameterization = parameterization
        self.device = torch.device(device)
        self.optimizer = build_optimizer(self.model, config)
        self.generator = torch.Generator().manual_seed(config.seed if config.seed is not None else 0)
        self.state = TrainState()

    def _dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def batch_loss(self, batch: ProductTensors, generator: torch.Generator) -> torch.Tensor:
        dtype = self._dtype()
        x0 = batch.targets.to(dtype)
        t = torch.randint(1, self.schedule.T + 1, (len(batch),), generator=generator)
        noise = torch.randn(x0.shape, generator=generator, dtype=dtype)
        xt = forward_sample(x0, t, noise, self.schedule)
        predicted = self.model(xt.to(self.device), t.to(self.device),
                               batch.images.to(self.device, dtype), batch.dates.to(self.device, dtype))
        target = noise if self.parameterization == "epsilon" else x0
        return torch.mean((predicted - target.to(self.device)) ** 2)

    def train_step(self, batch: ProductTensors) -> float:
        """One AdamW update on ``batch``; returns the batch loss."""
        self.model.train()
        self.optimizer.zero_grad()
        loss = self.batch_loss(batch, self.generator)
        if not torch.isfinite(loss):
            shown = ", ".join(batch.ids[:8]) + (" ..." if len(batch) > 8 else "")
            raise DivergenceError(f"non-finite diffusion loss on batch [{shown}]")
        loss.backward()
        self.optimizer.step()
        return loss.item()

    @torch.no_grad()
    def monitor_loss(self, tensors: ProductTensors) -> float:
        """Loss under a fixed generator, comparable across epochs."""
        self.model.eval()
        generator = torch.Generator().manual_seed(
            (self.config.seed if self.config.seed is not None else 0) + 1
        )
        losses = []
        for start in range(0, len(tensors), self.config.batch_size):
            index = torch.arange(start, min(start + self.config.batch_size, len(tensors)))
            batch = tensors.subset(index)
            losses.append(float(self.batch_loss(batch, generator)) * len(batch))
        return sum(losses) / len(tensors)

    def snapshot(self) -> TrainState:
        self.state.model_state = copy.deepcopy(self.model.state_dict())
        self.state.optimizer_state = copy.deepcopy(self.optimizer.state_dict())
        self.state.generator_state = self.generator.get_state()
        return self.state

    def restore(self, state: TrainState) -> None:
        self.model.load_state_dict(state.model_state)
        self.optimizer.load_state_dict(state.optimizer_state)
        if state.generator_state is not None:
            self.generator.set_state(state.generator_state)
        self.state = state
        logger.info("resumed diffusion training after epoch %d", state.epoch)

    def fit(self, train: ProductTensors, monitor: Optional[ProductTensors] = None,
            epochs: Optional[int] = None, state_path: Optional[str] = None) -> TrainState:
        """
        Train until ``epochs`` (default: config.epochs) have been completed in total.

        When ``state_path`` is given the TrainState is written after every epoch.
        """
        if len(train) == 0:
            raise ConfigError("no training products")
        target_epochs = epochs if epochs is not None else self.config.epochs
        for epoch in range(self.state.epoch + 1, target_epochs + 1):
            order = torch.randperm(len(train), generator=self.generator)
            total = 0.0
            for start in range(0, len(train), self.config.batch_size):
                batch = train.subset(order[start:start + self.config.batch_size])
                total += self.train_step(batch) * len(batch)
            row = {"stage": "diffusion", "epoch": epoch, "train_loss": total / len(train)}

            monitored = (monitor is not None and len(monitor) > 0 and self.config.monitor_every
                         and (epoch % self.config.monitor_every == 0 or epoch == target_epochs))
            if monitored:
                row["monitor_loss"] = self.monitor_loss(monitor)
                if self.config.keep_best and (self.state.best_loss is None
                                              or row["monitor_loss"] < self.state.best_loss):
                    self.state.best_loss = row["monitor_loss"]
                    self.state.best_state = copy.deepcopy(self.model.state_dict())
            self.state.history.append(row)
            self.state.epoch = epoch
            if self.config.log_every and (epoch % self.config.log_every == 0 or epoch == target_epochs):
                logger.info("diffusion epoch %d/%d loss %.5f%s", epoch, target_epochs, row["train_loss"],
                            f" monitor {row['monitor_loss']:.5f}" if "monitor_loss" in row else "")
            if state_path:
                self.snapshot().save(state_path)

        if self.config.keep_best and self.state.best_state is not None:
            self.model.load_state_dict(self.state.best_state)
            logger.info("restored best monitored parameters (loss %.5f)", self.state.best_loss)
        self.model.eval()
        return self.state
