#!/usr/bin/env python3
"""
MDiFF command line
Two-stage new-product sales forecasting: conditioned diffusion draws, refined by an MLP head.
"""

import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import click
import colorama
import numpy as np
import pandas as pd
from colorama import Fore, Style

# Add project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from config.console import get_logger, setup_logging  # noqa: E402
from config.errors import CheckpointError, MDiFFError  # noqa: E402
from config.settings import ABLATIONS, RunConfig  # noqa: E402
from data.normalization import NormalizationState  # noqa: E402
from data.synthetic import generate_synthetic, save_synthetic  # noqa: E402
from diffusion.sampler import read_sheet  # noqa: E402
from evaluation.report import ForecastReport, evaluate_split, load_report, render_report  # noqa: E402
from models.refinement import refine_batch  # noqa: E402
from training.checkpoints import load_diffusion, load_refiner  # noqa: E402
from training.pipeline import (  # noqa: E402
    DIFFUSION_FILE,
    REFINER_FILE,
    draw_sheets,
    load_dataset,
    make_run_schedule,
    read_manifest,
    tensors_for,
    train_pipeline,
)

colorama.init(autoreset=True)
logger = get_logger("cli")


class MDiFF:
    """Wires configuration, data, both training stages and evaluation into runs."""

    def __init__(self, config: RunConfig):
        self.config = config

    @classmethod
    def from_options(cls, config_path: Optional[str], overrides: Sequence[str],
                     seed: Optional[int] = None, ablation: Optional[str] = None) -> "MDiFF":
        values = list(overrides)
        if seed is not None:
            values.append(f"seed={seed}")
        if ablation:
            values += [f"{key}={str(flag).lower()}" for key, flag in ABLATIONS[ablation].items()]
        return cls(RunConfig.load(config_path, values))

    @classmethod
    def from_run(cls, run_dir: str) -> "MDiFF":
        return cls(RunConfig.from_dict(read_manifest(run_dir)["config"]))

    def print_banner(self, title: str):
        click.echo(f"{Fore.CYAN}{Style.BRIGHT}MDiFF · {title}{Style.RESET_ALL}")
        click.echo(f"{Fore.YELLOW}seed={self.config.seed} ablation={self.config.ablation} "
                   f"device={self.config.device}{Style.RESET_ALL}")

    def default_dir(self, *parts: str) -> Path:
        return Path(self.config.output_root).joinpath(*parts)

    def generate_data(self, out: Optional[str]) -> Path:
        target = Path(out) if out else self.default_dir("data", f"synthetic-seed{self.config.seed}")
        catalog = generate_synthetic(self.config.dataset.synthetic, self.config.seed)
        return save_synthetic(catalog, str(target))

    def train(self, out: Optional[str], resume: bool = False):
        target = out or str(self.default_dir(f"run-{self.config.ablation}-seed{self.config.seed}"))
        return train_pipeline(self.config, target, resume=resume)

    def _bound_checkpoints(self, run_dir: str):
        manifest = read_manifest(run_dir)
        diffusion_hash = manifest["diffusion"]["hash"]
        if manifest["refiner"]["diffusion_hash"] != diffusion_hash:
            raise CheckpointError(f"{run_dir}: refiner is not bound to the run's diffusion checkpoint")
        return manifest, diffusion_hash

    def sample(self, run_dir: str, split: str, out: Optional[str], n_samples: Optional[int]) -> Path:
        _, diffusion_hash = self._bound_checkpoints(run_dir)
        forecaster, _ = load_diffusion(str(Path(run_dir) / DIFFUSION_FILE), diffusion_hash)
        dataset, _ = load_dataset(self.config)
        tensors = tensors_for(dataset, dataset.split(split), self.config)
        sheets = draw_sheets(forecaster, tensors, make_run_schedule(self.config), self.config, n_samples)
        target = Path(out) if out else Path(run_dir) / f"sheets-{split}"
        for sheet in sheets:
            sheet.to_csv(str(target / f"{sheet.product_id}.csv"))
        logger.info("wrote %d sheets to %s", len(sheets), target)
        return target

    def refine(self, run_dir: str, sheets_dir: str, out: Optional[str]) -> Path:
        manifest, diffusion_hash = self._bound_checkpoints(run_dir)
        head, _, _ = load_refiner(str(Path(run_dir) / REFINER_FILE), diffusion_hash)
        # only sheets carry a JSON sidecar; a previous forecasts.csv in the same directory does not
        paths = sorted(path for path in Path(sheets_dir).glob("*.csv") if path.with_suffix(".json").is_file())
        sheets = [read_sheet(str(path)) for path in paths]
        for sheet in sheets:
            if sheet.schedule_hash and sheet.schedule_hash != manifest["schedule_hash"]:
                logger.warning("sheet %s was drawn with schedule %s, run uses %s",
                               sheet.product_id, sheet.schedule_hash, manifest["schedule_hash"])
        scaler = NormalizationState.from_dict(manifest["scaler"])
        forecasts = scaler.inverse(refine_batch(sheets, head)) if sheets else np.zeros((0, head.horizon))
        table = pd.DataFrame(forecasts, columns=[f"week_{w + 1}" for w in range(head.horizon)])
        table.insert(0, "product_id", [sheet.product_id for sheet in sheets])
        target = Path(out) if out else Path(sheets_dir) / "forecasts.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(target, index=False, float_format="%.6f")
        return target

    def evaluate(self, run_dir: str, split: str, out: Optional[str], n_samples: Optional[int]) -> ForecastReport:
        manifest, diffusion_hash = self._bound_checkpoints(run_dir)
        dataset, data_hash = load_dataset(self.config)
        if data_hash != manifest["dataset"]["hash"]:
            logger.warning("dataset hash differs from the one the run was trained on")
        report = evaluate_split(
            dataset,
            str(Path(run_dir) / DIFFUSION_FILE),
            str(Path(run_dir) / REFINER_FILE),
            self.config,
            split=split,
            n_samples=n_samples,
            expected_diffusion_hash=diffusion_hash,
        )
        render_report(report, out or str(Path(run_dir) / f"report-{split}"))
        return report


def print_metrics(report: ForecastReport):
    """Baseline lines, then the machine-parseable final line."""
    key = "wape" if report.clamp_negative else "wape_raw"
    for name in ("naive", "mean", "median"):
        values = report.aggregate.get(name)
        if values and values[key] is not None:
            click.echo(f"{Fore.YELLOW}baseline {name}: WAPE={values[key]:.4f}{Style.RESET_ALL}")
    wape = float("nan") if report.wape is None else report.wape
    mae = float("nan") if report.mae is None else report.mae
    click.echo(f"WAPE={wape:.4f} MAE={mae:.4f}")


def run_guarded(action: Callable[[], None]):
    """Map pipeline errors onto the exit-code contract: 2 usage/validation, 3 runtime."""
    try:
        action()
    except MDiFFError as exc:
        click.echo(f"{Fore.RED}Error: {exc}{Style.RESET_ALL}", err=True)
        sys.exit(exc.exit_code)
    except Exception as exc:
        logger.exception("unexpected failure")
        click.echo(f"{Fore.RED}Fatal error: {exc}{Style.RESET_ALL}", err=True)
        sys.exit(3)


config_option = click.option("--config", "config_path", type=click.Path(), default=None,
                             help="YAML run configuration")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Override a config value, e.g. --set train.epochs=20")
seed_option = click.option("--seed", type=int, default=None, help="Run seed")
run_option = click.option("--run", "run_dir", type=click.Path(), required=True, help="Run directory")
split_option = click.option("--split", type=click.Choice(["train", "test"]), default="test")
samples_option = click.option("--n-samples", type=int, default=None, help="Draws per product (N)")


@click.group()
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
def main(log_level: Optional[str]):
    """MDiFF - multimodal diffusion forecasting of new-product sales."""
    setup_logging(log_level)


@main.command("generate-data")
@config_option
@set_option
@seed_option
@click.option("--out", type=click.Path(), default=None, help="Output directory")
def generate_data(config_path, overrides, seed, out):
    """Generate a synthetic catalog (manifest.json + images/)."""
    def action():
        app = MDiFF.from_options(config_path, overrides, seed)
        path = app.generate_data(out)
        click.echo(f"{Fore.GREEN}wrote {path}{Style.RESET_ALL}")
    run_guarded(action)


@main.command()
@config_option
@set_option
@seed_option
@click.option("--out", type=click.Path(), default=None, help="Run directory (must be empty)")
@click.option("--ablation", type=click.Choice(list(ABLATIONS)), default=None)
@click.option("--resume", is_flag=True, help="Continue stage 1 from train_state.pt")
def train(config_path, overrides, seed, out, ablation, resume):
    """Train both stages and write checkpoints plus the run manifest."""
    def action():
        app = MDiFF.from_options(config_path, overrides, seed, ablation)
        app.print_banner("train")
        result = app.train(out, resume)
        click.echo(f"{Fore.GREEN}run: {result.run_dir}{Style.RESET_ALL}")
        click.echo(f"diffusion={result.diffusion_hash[:16]} refiner={result.refiner_hash[:16]}")
    run_guarded(action)


@main.command()
@run_option
@split_option
@samples_option
@click.option("--out", type=click.Path(), default=None, help="Sheets directory")
def sample(run_dir, split, n_samples, out):
    """Draw N-sample sheets for every product of a split."""
    def action():
        path = MDiFF.from_run(run_dir).sample(run_dir, split, out, n_samples)
        click.echo(f"{Fore.GREEN}sheets: {path}{Style.RESET_ALL}")
    run_guarded(action)


@main.command()
@run_option
@click.option("--sheets", "sheets_dir", type=click.Path(), required=True, help="Directory of sheet CSVs")
@click.option("--out", type=click.Path(), default=None, help="Forecast CSV")
def refine(run_dir, sheets_dir, out):
    """Refine saved sheets into W-week forecasts (raw sales units)."""
    def action():
        path = MDiFF.from_run(run_dir).refine(run_dir, sheets_dir, out)
        click.echo(f"{Fore.GREEN}forecasts: {path}{Style.RESET_ALL}")
    run_guarded(action)


@main.command()
@run_option
@split_option
@samples_option
@click.option("--out", type=click.Path(), default=None, help="Report directory")
def evaluate(run_dir, split, n_samples, out):
    """Score a split; the last stdout line is WAPE=<x> MAE=<y>."""
    def action():
        report = MDiFF.from_run(run_dir).evaluate(run_dir, split, out, n_samples)
        print_metrics(report)
    run_guarded(action)


@main.command()
@click.option("--report", "report_path", type=click.Path(), required=True, help="report.json or its directory")
@click.option("--out", type=click.Path(), default=None, help="Directory to render into")
def report(report_path, out):
    """Re-render a saved report."""
    def action():
        loaded = load_report(report_path)
        source = Path(report_path)
        render_report(loaded, out or str(source if source.is_dir() else source.parent))
        print_metrics(loaded)
    run_guarded(action)


if __name__ == "__main__":
    main()
