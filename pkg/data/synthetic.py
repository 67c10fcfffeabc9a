"""
Synthetic product catalog with a known generative process.

Each product has two latent style factors rendered into its image (the colour
of a dominant patch and the number of dark dots on it) and a release date.
Sales follow a seasonal template chosen by release month, scaled by an
amplitude that depends on the image factors, plus bounded noise. Both
modalities therefore carry signal that the other cannot recover.
"""

import datetime as dt
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image, ImageDraw

from config.console import get_logger
from config.errors import DataError
from data.records import Dataset, ProductImage, ProductRecord, ReleaseDate, SalesCurve

logger = get_logger(__name__)

BASE_PALETTE = [
    (220, 40, 40), (40, 160, 60), (40, 80, 220), (230, 200, 40),
    (160, 60, 200), (40, 200, 200), (240, 130, 30), (120, 120, 120),
]
BACKGROUND = (235, 235, 235)
MANIFEST_NAME = "manifest.json"


@dataclass
class SyntheticConfig:
    """Sizes and noise of the synthetic catalog."""

    n_train: int = 256
    n_test: int = 64
    image_size: int = 64
    n_factors: int = 2
    n_colors: int = 4
    max_shapes: int = 4
    n_templates: int = 4
    noise_level: float = 0.05
    base_level: float = 40.0
    weeks: int = 12
    horizon: int = 6
    year_start: int = 2018
    n_years: int = 3

    def validate(self) -> None:
        sizes = {
            "n_train": self.n_train, "n_test": self.n_test, "image_size": self.image_size,
            "n_colors": self.n_colors, "max_shapes": self.max_shapes,
            "n_templates": self.n_templates, "weeks": self.weeks, "horizon": self.horizon,
            "n_years": self.n_years, "base_level": self.base_level,
        }
        for name, value in sizes.items():
            if value <= 0:
                raise DataError(f"synthetic {name} must be positive, got {value}")
        if self.noise_level < 0:
            raise DataError(f"synthetic noise_level must be >= 0, got {self.noise_level}")
        if self.n_factors not in (1, 2):
            raise DataError(f"synthetic n_factors must be 1 or 2, got {self.n_factors}")
        if self.horizon > self.weeks:
            raise DataError(f"horizon {self.horizon} exceeds generated weeks {self.weeks}")
        if self.image_size < 16:
            raise DataError(f"image_size {self.image_size} too small to render factors")


@dataclass
class SyntheticParams:
    """Ground-truth parameters of the generator."""

    palette: List[Tuple[int, int, int]]
    color_amplitude: List[float]
    shape_amplitude: List[float]
    templates: List[List[float]]
    month_template: List[int]

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "SyntheticParams":
        data = dict(data)
        data["palette"] = [tuple(c) for c in data["palette"]]
        return cls(**data)


@dataclass(frozen=True)
class Latents:
    color: int
    shapes: int


@dataclass
class SyntheticCatalog:
    """Generated dataset together with everything needed to query ground truth."""

    dataset: Dataset
    params: SyntheticParams
    latents: Dict[str, Latents]
    config: SyntheticConfig
    seed: int
    noise: Dict[str, List[float]] = field(default_factory=dict)

    def expected_curve(self, product_id: str) -> np.ndarray:
        """Noise-free sales curve of a product."""
        record = next(r for r in self.dataset.records if r.id == product_id)
        return noiseless_curve(self.params, self.latents[product_id], record.release.month)

    def manifest(self) -> Dict:
        records = []
        for record in self.dataset.records:
            records.append({
                "id": record.id,
                "split": record.split,
                "image": f"images/{record.id}.png",
                "release": record.release.to_dict(),
                "sales": list(record.sales.values),
                "latents": asdict(self.latents[record.id]),
            })
        return {
            "seed": self.seed,
            "config": asdict(self.config),
            "params": self.params.to_dict(),
            "records": records,
        }

    def dataset_hash(self) -> str:
        payload = json.dumps(self.manifest(), sort_keys=True).encode("utf-8")
        digest = hashlib.sha256(payload)
        for record in self.dataset.records:
            digest.update(_to_uint8(record.image.load()).tobytes())
        return digest.hexdigest()


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return (np.clip(pixels, 0.0, 1.0) * 255).round().astype(np.uint8)


def _make_params(config: SyntheticConfig, rng: np.random.Generator) -> SyntheticParams:
    palette = [BASE_PALETTE[i % len(BASE_PALETTE)] for i in range(config.n_colors)]
    if config.n_colors > len(BASE_PALETTE):
        for i in range(len(BASE_PALETTE), config.n_colors):
            palette[i] = tuple(int(v) for v in rng.integers(30, 226, size=3))
    color_amplitude = rng.permutation(np.linspace(0.4, 1.6, config.n_colors)).tolist()
    if config.n_factors == 2:
        shape_amplitude = np.linspace(0.6, 1.4, config.max_shapes).tolist()
    else:
        shape_amplitude = [1.0] * config.max_shapes

    weeks = np.arange(config.weeks, dtype=np.float64)
    templates = []
    for _ in range(config.n_templates):
        peak = rng.uniform(0.0, max(config.horizon - 1, 1))
        width = rng.uniform(1.0, 3.0)
        floor = rng.uniform(0.2, 0.6)
        decay = rng.uniform(0.05, 0.25)
        curve = floor * np.exp(-decay * weeks) + np.exp(-((weeks - peak) / width) ** 2)
        curve = curve / curve[: config.horizon].mean()
        templates.append(curve.round(6).tolist())
    # Consecutive months share a template, like a season.
    month_template = [(m * config.n_templates) // 12 for m in range(12)]
    return SyntheticParams(palette, color_amplitude, shape_amplitude, templates, month_template)


def noiseless_curve(params: SyntheticParams, latents: Latents, month: int) -> np.ndarray:
    template = np.asarray(params.templates[params.month_template[month - 1]])
    amplitude = params.color_amplitude[latents.color] * params.shape_amplitude[latents.shapes - 1]
    return amplitude * template


def render_image(params: SyntheticParams, latents: Latents, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw the colour patch and ``latents.shapes`` dots; returns H×W×3 floats in [0, 1]."""
    image = Image.new("RGB", (size, size), BACKGROUND)
    draw = ImageDraw.Draw(image)
    lo, hi = int(size * 0.15), int(size * 0.85)
    draw.rectangle([lo, lo, hi, hi], fill=tuple(params.palette[latents.color]))
    slots = len(params.shape_amplitude)
    step = (hi - lo) / (slots + 1)
    radius = max(1, int(step / 3))
    for k in range(latents.shapes):
        cx = lo + step * (k + 1) + rng.integers(-1, 2)
        cy = (lo + hi) / 2 + rng.integers(-2, 3)
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=(20, 20, 20))
    return np.asarray(image, dtype=np.float32) / 255.0


def _random_date(config: SyntheticConfig, rng: np.random.Generator) -> dt.date:
    start = dt.date(config.year_start, 1, 1)
    end = dt.date(config.year_start + config.n_years - 1, 12, 31)
    return start + dt.timedelta(days=int(rng.integers(0, (end - start).days + 1)))


def generate_synthetic(config: SyntheticConfig, seed: int) -> SyntheticCatalog:
    """
    Generate a catalog; a pure function of ``(config, seed)``.

    Args:
        config: catalog sizes, image size and noise level
        seed: master seed

    Returns:
        SyntheticCatalog with the Dataset, generator parameters and per-product latents
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = _make_params(config, rng)
    records: List[ProductRecord] = []
    latents: Dict[str, Latents] = {}
    noise: Dict[str, List[float]] = {}
    n_total = config.n_train + config.n_test
    for index in range(n_total):
        product_id = f"syn-{index:05d}"
        factor = Latents(
            color=int(rng.integers(0, config.n_colors)),
            shapes=int(rng.integers(1, config.max_shapes + 1)) if config.n_factors == 2 else 1,
        )
        release = ReleaseDate.from_date(_random_date(config, rng))
        pixels = _to_uint8(render_image(params, factor, config.image_size, rng)).astype(np.float32) / 255.0
        jitter = rng.uniform(-1.0, 1.0, size=config.weeks) * config.noise_level
        curve = config.base_level * (noiseless_curve(params, factor, release.month) + jitter)
        values = tuple(float(v) for v in np.clip(curve, 0.0, None).round(6))
        records.append(ProductRecord(
            id=product_id,
            image=ProductImage(pixels=pixels),
            release=release,
            sales=SalesCurve(values=values, horizon=config.horizon),
            split="train" if index < config.n_train else "test",
        ))
        latents[product_id] = factor
        noise[product_id] = jitter.tolist()

    logger.info("generated %d synthetic products (seed=%d)", n_total, seed)
    dataset = Dataset(records=tuple(records), source=f"synthetic:seed={seed}")
    return SyntheticCatalog(dataset, params, latents, config, seed, noise)


def save_synthetic(catalog: SyntheticCatalog, out_dir: str) -> Path:
    """Write ``manifest.json`` plus ``images/<id>.png``; creates ``out_dir`` when missing."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for record in catalog.dataset.records:
        Image.fromarray(_to_uint8(record.image.load())).save(root / "images" / f"{record.id}.png")
    manifest = catalog.manifest()
    manifest["dataset_hash"] = catalog.dataset_hash()
    path = root / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
    logger.info("wrote synthetic catalog to %s", root)
    return path


def load_synthetic(data_dir: str) -> SyntheticCatalog:
    root = Path(data_dir)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"synthetic manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    config = SyntheticConfig(**manifest["config"])
    records = []
    latents = {}
    for entry in manifest["records"]:
        image_path = root / entry["image"]
        if not image_path.is_file():
            raise DataError(f"synthetic image missing for {entry['id']}: {image_path}")
        records.append(ProductRecord(
            id=entry["id"],
            image=ProductImage(path=str(image_path)),
            release=ReleaseDate(**entry["release"]),
            sales=SalesCurve(values=tuple(entry["sales"]), horizon=config.horizon),
            split=entry["split"],
        ))
        latents[entry["id"]] = Latents(**entry["latents"])
    dataset = Dataset(records=tuple(records), source=f"synthetic:{root}")
    return SyntheticCatalog(dataset, SyntheticParams.from_dict(manifest["params"]), latents,
                            config, manifest["seed"])
