"""
Forecast reports: per-product numbers, aggregate metrics, quantile bands and plots.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from config.console import get_logger  # noqa: E402
from config.errors import ConfigError, ReportError  # noqa: E402
from config.settings import RunConfig  # noqa: E402
from data.records import Dataset  # noqa: E402
from diffusion.sampler import SampleSheet  # noqa: E402
from diffusion.schedule import schedule_hash  # noqa: E402
from evaluation.metrics import mae, mean_mae, pooled_wape, wape, weekly_quantiles  # noqa: E402
from models.refinement import refine_batch  # noqa: E402
from training.checkpoints import load_diffusion, load_refiner  # noqa: E402
from training.pipeline import draw_sheets, make_run_schedule, naive_mean_curve, tensors_for  # noqa: E402

logger = get_logger(__name__)

DEFAULT_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)
PREDICTORS = ("refined", "mean", "median", "naive")
REPORT_FILE = "report.json"
SUMMARY_FILE = "summary.md"


def quantile_key(level: float) -> str:
    return f"q{int(round(level * 100)):02d}"


@dataclass
class ProductForecast:
    """One product's truth, predictions (raw units, unclamped) and sheet quantiles."""

    product_id: str
    truth: List[float]
    forecast: List[float]
    quantiles: Dict[str, List[float]]
    baselines: Dict[str, List[float]]
    mae: float
    mae_raw: float
    abs_error: float
    abs_error_raw: float
    truth_sum: float
    wape: Optional[float] = None


@dataclass
class ForecastReport:
    split: str
    products: List[ProductForecast]
    aggregate: Dict[str, Dict[str, Optional[float]]]
    quantile_levels: List[float]
    clamp_negative: bool = True
    skipped: List[str] = field(default_factory=list)
    metadata: Dict = field(default_factory=dict)
    sheets: Dict[str, SampleSheet] = field(default_factory=dict, repr=False, compare=False)

    @property
    def wape(self) -> Optional[float]:
        return self.aggregate["refined"]["wape" if self.clamp_negative else "wape_raw"]

    @property
    def mae(self) -> Optional[float]:
        return self.aggregate["refined"]["mae" if self.clamp_negative else "mae_raw"]

    def recomputed_wape(self) -> float:
        """Pooled WAPE from the stored per-product sums."""
        errors = sum(p.abs_error if self.clamp_negative else p.abs_error_raw for p in self.products)
        return errors / sum(p.truth_sum for p in self.products)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.pop("sheets")
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ForecastReport":
        products = [ProductForecast(**p) for p in data.get("products", [])]
        return cls(
            split=data["split"],
            products=products,
            aggregate=data["aggregate"],
            quantile_levels=list(data["quantile_levels"]),
            clamp_negative=data.get("clamp_negative", True),
            skipped=list(data.get("skipped", [])),
            metadata=data.get("metadata", {}),
        )


def _aggregate(truths: List[np.ndarray], predictions: List[np.ndarray]) -> Dict[str, Optional[float]]:
    if not truths:
        return {key: None for key in ("mae", "wape", "mae_raw", "wape_raw", "wape_per_product_mean")}
    clamped = [np.clip(p, 0.0, None) for p in predictions]
    per_product = [wape(t, p) for t, p in zip(truths, clamped) if np.sum(t) > 0]
    return {
        "mae": mean_mae(truths, clamped),
        "wape": pooled_wape(truths, clamped),
        "mae_raw": mean_mae(truths, predictions),
        "wape_raw": pooled_wape(truths, predictions),
        "wape_per_product_mean": float(np.mean(per_product)) if per_product else None,
    }


def build_report(
    product_ids: Sequence[str],
    truths: Sequence,
    forecasts: Sequence,
    sheets_raw: Optional[Sequence[np.ndarray]] = None,
    naive_curve: Optional[np.ndarray] = None,
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
    clamp_negative: bool = True,
    split: str = "test",
    metadata: Optional[Dict] = None,
    skipped: Sequence[str] = (),
) -> ForecastReport:
    """
    Assemble a report from raw-unit truths and forecasts.

    ``sheets_raw`` holds each product's N×W draws in raw units; without it the
    forecast itself stands in for the draws. MAE is averaged per product,
    WAPE is pooled over the split.
    """
    if not len(product_ids) == len(truths) == len(forecasts):
        raise ConfigError("product_ids, truths and forecasts must have equal lengths")
    if sheets_raw is not None and len(sheets_raw) != len(product_ids):
        raise ConfigError("sheets_raw must have one entry per product")

    products: List[ProductForecast] = []
    series: Dict[str, List[np.ndarray]] = {name: [] for name in PREDICTORS}
    truth_arrays: List[np.ndarray] = []
    for index, product_id in enumerate(product_ids):
        truth = np.asarray(truths[index], dtype=np.float64)
        forecast = np.asarray(forecasts[index], dtype=np.float64)
        draws = forecast[None, :] if sheets_raw is None else np.asarray(sheets_raw[index], dtype=np.float64)
        bands = weekly_quantiles(draws, quantiles)
        baselines = {"mean": draws.mean(axis=0), "median": np.median(draws, axis=0)}
        if naive_curve is not None:
            baselines["naive"] = np.asarray(naive_curve, dtype=np.float64)
        shown = np.clip(forecast, 0.0, None) if clamp_negative else forecast
        truth_sum = float(truth.sum())
        products.append(ProductForecast(
            product_id=product_id,
            truth=truth.tolist(),
            forecast=forecast.tolist(),
            quantiles={quantile_key(level): band.tolist() for level, band in bands.items()},
            baselines={name: values.tolist() for name, values in baselines.items()},
            mae=mae(truth, shown),
            mae_raw=mae(truth, forecast),
            abs_error=float(np.abs(truth - np.clip(forecast, 0.0, None)).sum()),
            abs_error_raw=float(np.abs(truth - forecast).sum()),
            truth_sum=truth_sum,
            wape=wape(truth, shown) if truth_sum > 0 else None,
        ))
        truth_arrays.append(truth)
        series["refined"].append(forecast)
        for name, values in baselines.items():
            series[name].append(values)

    aggregate = {
        name: _aggregate(truth_arrays, values)
        for name, values in series.items()
        if name == "refined" or len(values) == len(truth_arrays)
    }
    return ForecastReport(
        split=split,
        products=products,
        aggregate=aggregate,
        quantile_levels=[float(q) for q in quantiles],
        clamp_negative=clamp_negative,
        skipped=list(skipped),
        metadata=dict(metadata or {}),
    )


def evaluate_split(
    dataset: Dataset,
    diffusion_path: str,
    refiner_path: str,
    config: RunConfig,
    split: Optional[str] = None,
    n_samples: Optional[int] = None,
    expected_diffusion_hash: Optional[str] = None,
    naive_curve: Optional[np.ndarray] = None,
) -> ForecastReport:
    """
    Sample, refine and score every product of a split.

    The refiner must be bound to the diffusion checkpoint; products whose image
    is missing are skipped and excluded from the aggregates.
    """
    split = split or config.evaluation.split
    forecaster, diffusion_hash = load_diffusion(diffusion_path, expected_diffusion_hash)
    head, refiner_hash, _ = load_refiner(refiner_path, diffusion_hash=diffusion_hash)
    n = n_samples or config.evaluation.n_samples
    if n != head.n_samples:
        raise ConfigError(f"refiner was trained on N={head.n_samples} draws, evaluation asks for N={n}")

    records = dataset.split(split)
    tensors = tensors_for(dataset, records, config)
    kept = set(tensors.ids)
    skipped = [r.id for r in records if r.id not in kept]
    schedule = make_run_schedule(config)
    sheets = draw_sheets(forecaster, tensors, schedule, config, n)
    scaler = dataset.scaler
    refined = scaler.inverse(refine_batch(sheets, head)) if sheets else np.zeros((0, dataset.horizon))
    truths = dataset.raw_targets([r for r in records if r.id in kept])

    report = build_report(
        tensors.ids,
        list(truths),
        list(refined),
        sheets_raw=[scaler.inverse(sheet.draws) for sheet in sheets],
        naive_curve=naive_mean_curve(dataset) if naive_curve is None else naive_curve,
        quantiles=config.evaluation.quantiles,
        clamp_negative=config.evaluation.clamp_negative,
        split=split,
        skipped=skipped,
        metadata={
            "diffusion_hash": diffusion_hash,
            "refiner_hash": refiner_hash,
            "schedule_hash": schedule_hash(schedule),
            "n_samples": n,
            "seed": config.seed,
            "ablation": config.ablation,
            "dataset_source": dataset.source,
            "config": config.to_dict(),
        },
    )
    report.sheets = {sheet.product_id: sheet for sheet in sheets}
    if report.products:
        logger.info("%s split: WAPE %.4f MAE %.4f over %d products (%d skipped)",
                    split, report.wape, report.mae, len(report.products), len(skipped))
    return report


def _plot_product(product: ProductForecast, levels: List[float], path: Path) -> None:
    weeks = np.arange(1, len(product.truth) + 1)
    bands = [np.asarray(product.quantiles[quantile_key(level)]) for level in levels]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(weeks, bands[0], bands[-1], color="tab:red", alpha=0.25,
                    label=f"{quantile_key(levels[0])}-{quantile_key(levels[-1])}")
    if len(bands) >= 4:
        ax.fill_between(weeks, bands[1], bands[-2], color="tab:red", alpha=0.35)
    if 0.5 in levels:
        ax.plot(weeks, product.quantiles[quantile_key(0.5)], color="tab:red", linestyle="--", label="median")
    ax.plot(weeks, product.truth, color="black", marker="o", label="truth")
    ax.plot(weeks, product.forecast, color="tab:blue", marker="s", label="refined")
    ax.set_xlabel("week")
    ax.set_ylabel("sales")
    ax.set_title(product.product_id)
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def summary_markdown(report: ForecastReport) -> str:
    lines = [f"# Forecast report: {report.split} split", ""]
    lines.append(f"Products: {len(report.products)} (skipped: {len(report.skipped)})")
    for key in ("diffusion_hash", "refiner_hash", "n_samples", "seed", "ablation"):
        if key in report.metadata:
            lines.append(f"- {key}: `{report.metadata[key]}`")
    lines += ["", "| predictor | MAE | WAPE | MAE (raw) | WAPE (raw) | mean per-product WAPE |",
              "|---|---|---|---|---|---|"]
    for name, values in report.aggregate.items():
        lines.append(f"| {name} | {_fmt(values['mae'])} | {_fmt(values['wape'])} | "
                     f"{_fmt(values['mae_raw'])} | {_fmt(values['wape_raw'])} | "
                     f"{_fmt(values['wape_per_product_mean'])} |")
    if report.products:
        lines += ["", "| product | MAE | WAPE |", "|---|---|---|"]
        for product in report.products:
            lines.append(f"| {product.product_id} | {product.mae:.4f} | {_fmt(product.wape)} |")
    if report.skipped:
        lines += ["", "Skipped (image missing): " + ", ".join(report.skipped)]
    return "\n".join(lines) + "\n"


def render_report(report: ForecastReport, out_dir: str) -> List[Path]:
    """Write report.json, summary.md, plots/<id>.png and sheets/<id>.csv; returns the written paths."""
    root = Path(out_dir)
    written: List[Path] = []
    try:
        (root / "plots").mkdir(parents=True, exist_ok=True)
        path = root / REPORT_FILE
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(report.to_dict(), handle, indent=2)
        written.append(path)
        path = root / SUMMARY_FILE
        path.write_text(summary_markdown(report), encoding="utf-8")
        written.append(path)
        for product in report.products:
            path = root / "plots" / f"{product.product_id}.png"
            _plot_product(product, report.quantile_levels, path)
            written.append(path)
        for product_id, sheet in report.sheets.items():
            written.append(sheet.to_csv(str(root / "sheets" / f"{product_id}.csv")))
    except OSError as exc:
        raise ReportError(f"cannot write report to {root}: {exc}") from exc
    logger.info("report written to %s (%d plots)", root, len(report.products))
    return written


def load_report(path: str) -> ForecastReport:
    target = Path(path)
    if target.is_dir():
        target = target / REPORT_FILE
    if not target.is_file():
        raise ReportError(f"report not found: {target}")
    with open(target, "r", encoding="utf-8") as handle:
        return ForecastReport.from_dict(json.load(handle))
