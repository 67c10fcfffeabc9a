"""
Forecast error metrics and draw-aggregation baselines, all in raw sales units.
"""

from typing import Dict, Optional, Sequence

import numpy as np

from config.errors import MetricError
from data.normalization import NormalizationState
from diffusion.sampler import SampleSheet


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise MetricError(f"length mismatch: {y.shape[0]} actuals vs {yhat.shape[0]} predictions")
    if y.size == 0:
        raise MetricError("metric of an empty series is undefined")
    return y, yhat


def mae(y, yhat) -> float:
    """Mean absolute error."""
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def wape(y, yhat) -> float:
    """Sum of absolute errors over sum of actuals."""
    y, yhat = _pair(y, yhat)
    total = float(np.sum(y))
    if total <= 0:
        raise MetricError(f"WAPE undefined: actuals sum to {total}")
    return float(np.sum(np.abs(y - yhat)) / total)


def pooled_wape(truths: Sequence, forecasts: Sequence) -> float:
    """WAPE pooled across products: all numerators and denominators are summed first."""
    if len(truths) != len(forecasts):
        raise MetricError(f"{len(truths)} truths vs {len(forecasts)} forecasts")
    if not truths:
        raise MetricError("WAPE of zero products is undefined")
    return wape(np.concatenate([np.ravel(t) for t in truths]),
                np.concatenate([np.ravel(f) for f in forecasts]))


def mean_mae(truths: Sequence, forecasts: Sequence) -> float:
    """MAE averaged per product, then across products."""
    if len(truths) != len(forecasts):
        raise MetricError(f"{len(truths)} truths vs {len(forecasts)} forecasts")
    if not truths:
        raise MetricError("MAE of zero products is undefined")
    return float(np.mean([mae(t, f) for t, f in zip(truths, forecasts)]))


def weekly_quantiles(draws: np.ndarray, levels: Sequence[float]) -> Dict[float, np.ndarray]:
    """
    Per-week quantiles of an N×W draw matrix (linear interpolation).

    Returns a mapping level -> length-W vector; monotone in the level by construction.
    """
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim != 2 or draws.shape[0] < 1:
        raise MetricError(f"draws must be N×W with N >= 1, got {draws.shape}")
    values = np.quantile(draws, list(levels), axis=0)
    return {float(level): values[i] for i, level in enumerate(levels)}


def aggregate_baselines(sheet: SampleSheet, scaler: Optional[NormalizationState] = None) -> Dict[str, np.ndarray]:
    """Per-week mean and median of the draws, denormalized when a scaler is given."""
    draws = sheet.draws if scaler is None else scaler.inverse(sheet.draws)
    return {"mean": draws.mean(axis=0), "median": np.median(draws, axis=0)}
