"""
Two-stage pipeline: train the diffusion model, freeze it, draw sheets for every
training product, train the refinement head on them, bind both in a manifest.
"""

import hashlib
import json
import platform
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config.console import get_logger
from config.errors import CheckpointError, ConfigError
from config.settings import RunConfig
from data.normalization import normalize_sales
from data.records import Dataset, ProductRecord
from data.synthetic import MANIFEST_NAME, generate_synthetic, load_synthetic
from data.tensors import ProductTensors, build_tensors
from data.visuelle import load_visuelle
from diffusion.sampler import SampleSheet, sample_batch
from diffusion.schedule import GuidanceSpec, NoiseSchedule, make_schedule, schedule_hash
from models.forecaster import DiffusionForecaster
from models.refinement import train_refiner
from training.checkpoints import module_hash, save_diffusion, save_refiner
from training.trainer import DiffusionTrainer, TrainState, write_history

logger = get_logger(__name__)

DIFFUSION_FILE = "diffusion.pt"
REFINER_FILE = "refiner.pt"
STATE_FILE = "train_state.pt"
MANIFEST_FILE = "run_manifest.json"
HISTORY_FILE = "loss_history.csv"
CONFIG_FILE = "resolved_config.yaml"


@dataclass
class PipelineResult:
    run_dir: Path
    diffusion_path: Path
    refiner_path: Path
    manifest_path: Path
    diffusion_hash: str
    refiner_hash: str
    history: List[Dict]


def dataset_fingerprint(dataset: Dataset) -> str:
    """Content hash of ids, splits, release dates and sales."""
    rows = [
        [r.id, r.split, r.release.to_dict(), list(r.sales.values)]
        for r in dataset.records
    ]
    return hashlib.sha256(json.dumps(rows, sort_keys=True).encode("utf-8")).hexdigest()


def load_dataset(config: RunConfig) -> Tuple[Dataset, str]:
    """Build the normalized dataset named by ``config.dataset`` and its content hash."""
    settings = config.dataset
    if settings.source == "visuelle":
        dataset = load_visuelle(settings.path, horizon=settings.horizon, column_map=settings.column_map,
                                year_range=(settings.year_min, settings.year_span))
        digest = dataset_fingerprint(dataset)
    elif settings.path and (Path(settings.path) / MANIFEST_NAME).is_file():
        catalog = load_synthetic(settings.path)
        dataset, digest = catalog.dataset, catalog.dataset_hash()
    else:
        catalog = generate_synthetic(settings.synthetic, config.seed)
        dataset, digest = catalog.dataset, catalog.dataset_hash()
    if dataset.horizon != settings.horizon:
        raise ConfigError(f"dataset horizon {dataset.horizon} != configured horizon {settings.horizon}")
    return normalize_sales(dataset, mode=settings.normalization), digest


def make_run_schedule(config: RunConfig) -> NoiseSchedule:
    s = config.schedule
    return make_schedule(T=s.T, kind=s.kind, beta_start=s.beta_start, beta_end=s.beta_end, variance=s.variance)


def build_forecaster(config: RunConfig) -> DiffusionForecaster:
    torch.manual_seed(config.train.seed if config.train.seed is not None else config.seed)
    return DiffusionForecaster(config.model.denoiser, config.model.conditioning)


def tensors_for(dataset: Dataset, records: Sequence[ProductRecord], config: RunConfig) -> ProductTensors:
    settings = config.dataset
    return build_tensors(dataset, list(records), settings.image_size, settings.year_min,
                         settings.year_span, skip_missing=True)


@torch.no_grad()
def encode_conditions(forecaster: DiffusionForecaster, tensors: ProductTensors,
                      batch_size: int = 256) -> torch.Tensor:
    forecaster.eval()
    dtype = next(forecaster.parameters()).dtype
    device = next(forecaster.parameters()).device
    chunks = []
    for start in range(0, len(tensors), batch_size):
        images = tensors.images[start:start + batch_size].to(device, dtype)
        dates = tensors.dates[start:start + batch_size].to(device, dtype)
        chunks.append(forecaster.condition(images, dates))
    if not chunks:
        return torch.zeros(0, forecaster.encoder.channels, dtype=dtype, device=device)
    return torch.cat(chunks)


def draw_sheets(forecaster: DiffusionForecaster, tensors: ProductTensors, schedule: NoiseSchedule,
                config: RunConfig, n_samples: Optional[int] = None) -> List[SampleSheet]:
    """N-draw sheets for every product in ``tensors``, ordered by rng substream index."""
    if len(tensors) == 0:
        return []
    n = n_samples or config.evaluation.n_samples
    guidance = GuidanceSpec(strength=config.schedule.guidance_strength)
    return sample_batch(
        forecaster.as_denoiser(),
        encode_conditions(forecaster, tensors),
        tensors.ids,
        n,
        schedule,
        guidance=guidance,
        seed=config.seed,
        parameterization=config.schedule.parameterization,
        max_rows=config.evaluation.max_rows,
    )


def prepare_run_dir(run_dir: str, resume: bool = False) -> Path:
    """Create the run directory; a non-empty one is only accepted when resuming."""
    root = Path(run_dir)
    if root.exists() and any(root.iterdir()) and not resume:
        raise ConfigError(f"run directory {root} is not empty; choose another --out or pass --resume")
    root.mkdir(parents=True, exist_ok=True)
    return root


def train_pipeline(config: RunConfig, run_dir: str, resume: bool = False) -> PipelineResult:
    """
    Run both stages into ``run_dir``.

    Stage-1 divergence raises before anything of stage 2 runs. The diffusion
    parameters are hashed before and after stage 2 and must not change.
    """
    root = prepare_run_dir(run_dir, resume)
    config.save_to_file(str(root / CONFIG_FILE))
    torch.use_deterministic_algorithms(config.train.deterministic, warn_only=True)

    dataset, data_hash = load_dataset(config)
    train_config = config.train
    if train_config.seed is None:
        train_config = replace(train_config, seed=config.seed)
    if train_config.validation_fraction > 0:
        fit_records, monitor_records = dataset.carve_validation(train_config.validation_fraction, config.seed)
        monitor_split = "validation"
    else:
        fit_records, monitor_records = dataset.split("train"), dataset.split("test")
        monitor_split = "test"
    fit = tensors_for(dataset, fit_records, config)
    monitor = tensors_for(dataset, monitor_records, config)
    logger.info("stage 1: %d training products, monitoring on %s (%d products)",
                len(fit), monitor_split, len(monitor))

    schedule = make_run_schedule(config)
    forecaster = build_forecaster(config)
    trainer = DiffusionTrainer(forecaster, schedule, train_config,
                               parameterization=config.schedule.parameterization, device=config.device)
    state_path = root / STATE_FILE
    if resume and state_path.is_file():
        trainer.restore(TrainState.load(str(state_path)))
    state = trainer.fit(fit, monitor, state_path=str(state_path))

    diffusion_path = root / DIFFUSION_FILE
    diffusion_hash = save_diffusion(forecaster, str(diffusion_path))
    for parameter in forecaster.parameters():
        parameter.requires_grad_(False)
    forecaster.eval()
    frozen_config = {"stage": "frozen"}
    before = module_hash(forecaster, frozen_config)

    logger.info("stage 2: drawing %d samples for %d training products", config.evaluation.n_samples, len(fit))
    sheets = draw_sheets(forecaster, fit, schedule, config)
    targets = fit.targets.double().numpy()
    pairs = list(zip(sheets, targets))
    refiner_hyper = config.refiner if config.refiner.seed is not None else replace(config.refiner, seed=config.seed)
    head, refiner_history = train_refiner(pairs, refiner_hyper)

    if module_hash(forecaster, frozen_config) != before:
        raise CheckpointError("diffusion parameters changed during refiner training")
    refiner_path = root / REFINER_FILE
    refiner_hash = save_refiner(head, str(refiner_path), diffusion_hash,
                                extra={"n_train_sheets": len(sheets), "seed": refiner_hyper.seed})

    history = list(state.history) + [
        {"stage": "refiner", "epoch": epoch, "train_loss": loss}
        for epoch, loss in enumerate(refiner_history, start=1)
    ]
    write_history(history, str(root / HISTORY_FILE))
    manifest = {
        "config": config.to_dict(),
        "ablation": config.ablation,
        "seed": config.seed,
        "dataset": {"source": dataset.source, "hash": data_hash, "n_train": len(fit),
                    "n_monitor": len(monitor), "monitor_split": monitor_split},
        "scaler": dataset.scaler.to_dict(),
        "naive_curve": naive_mean_curve(dataset).tolist(),
        "schedule_hash": schedule_hash(schedule),
        "diffusion": {"path": DIFFUSION_FILE, "hash": diffusion_hash, "epochs": state.epoch},
        "refiner": {"path": REFINER_FILE, "hash": refiner_hash, "diffusion_hash": diffusion_hash},
        "platform": {"python": platform.python_version(), "torch": torch.__version__},
    }
    manifest_path = root / MANIFEST_FILE
    with open(manifest_path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
    logger.info("run written to %s", root)
    return PipelineResult(root, diffusion_path, refiner_path, manifest_path,
                          diffusion_hash, refiner_hash, history)


def naive_mean_curve(dataset: Dataset) -> np.ndarray:
    """Per-week mean of the raw training curves."""
    return dataset.raw_targets(dataset.split("train")).mean(axis=0)


def read_manifest(run_dir: str) -> Dict:
    path = Path(run_dir) / MANIFEST_FILE
    if not path.is_file():
        raise CheckpointError(f"run manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)
