"""
Sales normalization fitted on the training split.
"""

from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from config.console import get_logger
from config.errors import DataError

logger = get_logger(__name__)

MODES = ("zscore", "minmax")


@dataclass(frozen=True)
class NormalizationState:
    """Dataset-wide scalar statistics of the training sales; invertible by construction."""

    mode: str
    mean: float = 0.0
    std: float = 1.0
    minimum: float = 0.0
    maximum: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"unknown normalization mode '{self.mode}', expected one of {MODES}")

    @classmethod
    def fit(cls, train_sales: np.ndarray, mode: str = "zscore") -> "NormalizationState":
        values = np.asarray(train_sales, dtype=np.float64)
        if values.size == 0:
            raise DataError("cannot fit normalization on an empty training split")
        if mode == "zscore":
            std = float(values.std())
            if std == 0.0:
                raise DataError(
                    "training sales are constant, z-score is undefined; "
                    "use dataset.normalization: minmax instead"
                )
            return cls(mode=mode, mean=float(values.mean()), std=std)
        return cls(mode=mode, minimum=float(values.min()), maximum=float(values.max()))

    @property
    def _shift(self) -> float:
        return self.mean if self.mode == "zscore" else self.minimum

    @property
    def _scale(self) -> float:
        if self.mode == "zscore":
            return self.std
        span = self.maximum - self.minimum
        # Degenerate range: map everything to 0 and keep the inverse exact.
        return span if span > 0 else 1.0

    def transform(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self._shift) / self._scale

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self._scale + self._shift

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "NormalizationState":
        return cls(**data)


def normalize_sales(dataset, mode: str = "zscore"):
    """Fit the scaler on train sales only and return the dataset carrying it."""
    if dataset.scaler is not None:
        raise DataError("dataset scaler is already fitted")
    train = dataset.split("train")
    if not train:
        raise DataError("cannot normalize: train split is empty")
    scaler = NormalizationState.fit(dataset.raw_targets(train), mode=mode)
    logger.info("fitted %s scaler on %d train products", mode, len(train))
    return dataset.with_scaler(scaler)
