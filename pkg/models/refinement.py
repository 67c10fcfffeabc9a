"""
Refinement head: collapses the W×N sheet of diffusion draws into one W-week forecast.

A five-layer temporal stack works along the week dimension of every draw, its
output is added back to the sheet, and a three-layer sample stack reduces the
N draws of each week to a single value.
"""

import copy
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from config.console import get_logger
from config.errors import ConfigError, DivergenceError, ShapeError
from diffusion.sampler import SampleSheet

logger = get_logger(__name__)

INITS = ("mean", "random")


@dataclass
class RefinerHyper:
    epochs: int = 200
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 0  # 0 means full batch
    init: str = "mean"
    seed: Optional[int] = None
    log_every: int = 50

    def validate(self) -> None:
        if self.epochs <= 0:
            raise ConfigError(f"refiner epochs must be positive, got {self.epochs}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("refiner learning_rate and weight_decay must be non-negative")
        if self.batch_size < 0:
            raise ConfigError(f"refiner batch_size must be >= 0, got {self.batch_size}")
        if self.init not in INITS:
            raise ConfigError(f"unknown refiner init '{self.init}', expected one of {INITS}")


def temporal_widths(horizon: int) -> List[int]:
    return [horizon, 4 * horizon, 8 * horizon, 8 * horizon, 4 * horizon, horizon]


def sample_widths(n_samples: int) -> List[int]:
    return [n_samples, max(2, n_samples // 2), max(2, n_samples // 4), 1]


def _stack(widths: Sequence[int]) -> nn.Sequential:
    layers: List[nn.Module] = []
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(fan_in, fan_out))
        if index < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class RefinementHead(nn.Module):
    """Maps B×W×N sheets to B×W forecasts; parameters are specific to one (N, W)."""

    def __init__(self, n_samples: int, horizon: int):
        super().__init__()
        if n_samples < 1 or horizon < 1:
            raise ShapeError(f"refinement head needs N >= 1 and W >= 1, got N={n_samples}, W={horizon}")
        self.n_samples = n_samples
        self.horizon = horizon
        self.temporal = _stack(temporal_widths(horizon))
        self.temporal_bias = nn.Parameter(torch.zeros(horizon, n_samples))
        self.sample = _stack(sample_widths(n_samples))
        self.sample_bias = nn.Parameter(torch.zeros(1, horizon))

    @property
    def widths(self) -> dict:
        return {"temporal": temporal_widths(self.horizon), "sample": sample_widths(self.n_samples)}

    def _linears(self, stack: nn.Sequential) -> List[nn.Linear]:
        return [layer for layer in stack if isinstance(layer, nn.Linear)]

    def forward(self, sheets: torch.Tensor) -> torch.Tensor:
        if sheets.dim() != 3 or sheets.shape[1:] != (self.horizon, self.n_samples):
            raise ShapeError(
                f"refinement head trained for W={self.horizon}, N={self.n_samples}; "
                f"got sheets of shape {tuple(sheets.shape)}"
            )
        temporal = self.temporal(sheets.transpose(1, 2)).transpose(1, 2) + self.temporal_bias
        combined = sheets + temporal
        return self.sample(combined).squeeze(-1) + self.sample_bias

    @torch.no_grad()
    def load_mean_aggregator(self) -> "RefinementHead":
        """
        Overwrite the parameters so the head returns the per-week mean of the draws.

        The temporal stack's last layer and both free biases are zeroed, so only
        the skip path survives. The sample stack carries the mean as its positive
        and negative parts through the ReLUs and recombines them in the last layer.
        """
        last = self._linears(self.temporal)[-1]
        last.weight.zero_()
        last.bias.zero_()
        self.temporal_bias.zero_()
        self.sample_bias.zero_()

        first, middle, final = self._linears(self.sample)
        for layer in (first, middle, final):
            layer.weight.zero_()
            layer.bias.zero_()
        first.weight[0].fill_(1.0 / self.n_samples)
        first.weight[1].fill_(-1.0 / self.n_samples)
        middle.weight[0, 0] = 1.0
        middle.weight[1, 1] = 1.0
        final.weight[0, 0] = 1.0
        final.weight[0, 1] = -1.0
        return self

    @classmethod
    def mean_aggregator(cls, n_samples: int, horizon: int) -> "RefinementHead":
        return cls(n_samples, horizon).load_mean_aggregator()


def sheets_to_tensor(sheets: Sequence[SampleSheet], dtype=None) -> torch.Tensor:
    """Stack sheets as B×W×N in draw (rng substream) order."""
    if not sheets:
        raise ShapeError("no sheets to stack")
    shapes = {sheet.draws.shape for sheet in sheets}
    if len(shapes) != 1:
        raise ShapeError(f"sheets disagree on N×W: {sorted(shapes)}")
    stacked = np.stack([sheet.weeks_by_draws for sheet in sheets])
    return torch.as_tensor(stacked, dtype=dtype or torch.get_default_dtype())


@torch.no_grad()
def refine(sheet: SampleSheet, head: RefinementHead) -> np.ndarray:
    """Refined W-week forecast for one sheet, in normalized sales space."""
    if sheet.n_samples != head.n_samples:
        raise ShapeError(f"sheet {sheet.product_id} has N={sheet.n_samples}, head expects N={head.n_samples}")
    if sheet.horizon != head.horizon:
        raise ShapeError(f"sheet {sheet.product_id} has W={sheet.horizon}, head expects W={head.horizon}")
    dtype = next(head.parameters()).dtype
    return head(sheets_to_tensor([sheet], dtype))[0].double().numpy()


@torch.no_grad()
def refine_batch(sheets: Sequence[SampleSheet], head: RefinementHead) -> np.ndarray:
    if not sheets:
        return np.zeros((0, head.horizon))
    for sheet in sheets:
        if sheet.draws.shape != (head.n_samples, head.horizon):
            raise ShapeError(f"sheet {sheet.product_id} is {sheet.draws.shape}, head expects "
                             f"({head.n_samples}, {head.horizon})")
    dtype = next(head.parameters()).dtype
    return head(sheets_to_tensor(sheets, dtype)).double().numpy()


def mse_loss(y: torch.Tensor, yhat: torch.Tensor) -> torch.Tensor:
    if y.shape != yhat.shape:
        raise ShapeError(f"mse_loss length mismatch: {tuple(y.shape)} vs {tuple(yhat.shape)}")
    return torch.mean((y - yhat) ** 2)


def train_refiner(
    pairs: Sequence[Tuple[SampleSheet, np.ndarray]],
    hyper: Optional[RefinerHyper] = None,
) -> Tuple[RefinementHead, List[float]]:
    """
    Fit a refinement head on (sheet, true curve) pairs with AdamW and an MSE loss.

    Returns the head at its lowest full-data loss (the starting point included)
    and the per-epoch loss history.
    """
    hyper = hyper or RefinerHyper()
    hyper.validate()
    if not pairs:
        raise ShapeError("train_refiner needs at least one (sheet, truth) pair")
    if hyper.seed is not None:
        torch.manual_seed(hyper.seed)

    sheets = [sheet for sheet, _ in pairs]
    inputs = sheets_to_tensor(sheets)
    targets = torch.as_tensor(np.stack([np.asarray(truth, dtype=np.float64) for _, truth in pairs]),
                              dtype=inputs.dtype)
    n_samples, horizon = sheets[0].n_samples, sheets[0].horizon
    if targets.shape != (len(pairs), horizon):
        raise ShapeError(f"targets must be {len(pairs)}×{horizon}, got {tuple(targets.shape)}")

    head = RefinementHead(n_samples, horizon).to(inputs.dtype)
    if hyper.init == "mean":
        head.load_mean_aggregator()
    optimizer = torch.optim.AdamW(head.parameters(), lr=hyper.learning_rate, weight_decay=hyper.weight_decay)
    generator = torch.Generator().manual_seed(hyper.seed if hyper.seed is not None else 0)
    batch_size = hyper.batch_size or len(pairs)

    with torch.no_grad():
        best_loss = float(mse_loss(targets, head(inputs)))
    best_state = copy.deepcopy(head.state_dict())
    history: List[float] = []
    for epoch in range(1, hyper.epochs + 1):
        order = torch.randperm(len(pairs), generator=generator)
        for start in range(0, len(pairs), batch_size):
            index = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = mse_loss(targets[index], head(inputs[index]))
            if not torch.isfinite(loss):
                last = f"epoch {epoch - 1}" if history else "initialisation"
                raise DivergenceError(f"refiner loss became non-finite in epoch {epoch}; last finite: {last}")
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            epoch_loss = float(mse_loss(targets, head(inputs)))
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"refiner loss became non-finite in epoch {epoch}; last finite: epoch {epoch - 1}")
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_state = copy.deepcopy(head.state_dict())
        if hyper.log_every and epoch % hyper.log_every == 0:
            logger.info("refiner epoch %d/%d loss %.6f", epoch, hyper.epochs, epoch_loss)

    head.load_state_dict(best_state)
    logger.info("refiner trained on %d sheets, best loss %.6f", len(pairs), best_loss)
    return head, history
