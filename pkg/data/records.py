"""
Product data model: release dates, images, sales curves and datasets.
"""

import calendar
import datetime as dt
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image

from config.errors import DataError, ShapeError

if TYPE_CHECKING:
    from data.normalization import NormalizationState

SPLITS = ("train", "test")

# Natural maxima used to scale date components into [0, 1].
DAY_MAX = 31
WEEK_MAX = 53
MONTH_MAX = 12


@dataclass(frozen=True)
class ReleaseDate:
    """Release date as the (day, week, month, year) quadruple."""

    day: int
    week: int
    month: int
    year: int

    def __post_init__(self):
        checks = (("day", self.day, 1, DAY_MAX), ("week", self.week, 1, WEEK_MAX),
                  ("month", self.month, 1, MONTH_MAX))
        for name, value, low, high in checks:
            if not low <= value <= high:
                raise DataError(f"release {name}={value} outside [{low}, {high}]")
        if self.year >= 1 and self.day > calendar.monthrange(self.year, self.month)[1]:
            raise DataError(f"release date {self.year}-{self.month:02d}-{self.day:02d} does not exist")

    @classmethod
    def from_date(cls, date: dt.date) -> "ReleaseDate":
        return cls(day=date.day, week=date.isocalendar()[1], month=date.month, year=date.year)

    def check_year(self, year_min: int, year_span: int) -> None:
        if not year_min <= self.year <= year_min + year_span:
            raise DataError(
                f"release year {self.year} outside configured span [{year_min}, {year_min + year_span}]"
            )

    def to_vector(self, year_min: int, year_span: int) -> np.ndarray:
        """Scale each component by its natural maximum; the year by the configured span."""
        self.check_year(year_min, year_span)
        return np.array(
            [self.day / DAY_MAX, self.week / WEEK_MAX, self.month / MONTH_MAX,
             (self.year - year_min) / year_span],
            dtype=np.float32,
        )

    def to_dict(self) -> Dict[str, int]:
        return {"day": self.day, "week": self.week, "month": self.month, "year": self.year}


@dataclass(frozen=True)
class ProductImage:
    """A square RGB product image, held in memory or referenced on disk."""

    path: Optional[str] = None
    pixels: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.path is None and self.pixels is None:
            raise DataError("ProductImage needs a path or pixels")
        if self.pixels is not None:
            _check_pixels(self.pixels)

    def exists(self) -> bool:
        return self.pixels is not None or Path(self.path).is_file()

    def load(self, size: Optional[int] = None) -> np.ndarray:
        """Return an H×W×3 float32 array in [0, 1], resized to ``size`` when given."""
        if self.pixels is not None and (size is None or self.pixels.shape[0] == size):
            return self.pixels.astype(np.float32, copy=False)
        if self.pixels is not None:
            image = Image.fromarray((np.clip(self.pixels, 0.0, 1.0) * 255).round().astype(np.uint8))
        else:
            image = Image.open(self.path).convert("RGB")
        if size is not None and image.size != (size, size):
            image = image.resize((size, size), Image.BILINEAR)
        pixels = np.asarray(image, dtype=np.float32) / 255.0
        _check_pixels(pixels)
        return pixels


def _check_pixels(pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"image must be H×W×3, got shape {pixels.shape}")
    if pixels.shape[0] != pixels.shape[1]:
        raise ShapeError(f"image must be square, got {pixels.shape[0]}×{pixels.shape[1]}")
    if not np.all(np.isfinite(pixels)):
        raise ShapeError("image contains non-finite values")


@dataclass(frozen=True)
class SalesCurve:
    """Raw weekly unit sales after release; only the first ``horizon`` weeks are forecast."""

    values: Tuple[float, ...]
    horizon: int = 6

    def __post_init__(self):
        if len(self.values) < self.horizon:
            raise DataError(f"sales curve has {len(self.values)} weeks, horizon needs {self.horizon}")
        if any(v < 0 or not np.isfinite(v) for v in self.values):
            raise DataError("sales values must be finite and non-negative")

    def window(self) -> np.ndarray:
        return np.asarray(self.values[: self.horizon], dtype=np.float64)


@dataclass(frozen=True)
class ProductRecord:
    id: str
    image: ProductImage
    release: ReleaseDate
    sales: SalesCurve
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"record {self.id}: unknown split '{self.split}'")


@dataclass(frozen=True)
class RejectedRecord:
    id: str
    reason: str


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable product collection with an optional fitted scaler."""

    records: Tuple[ProductRecord, ...]
    scaler: Optional["NormalizationState"] = None
    rejected: Tuple[RejectedRecord, ...] = ()
    source: str = "unknown"

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.id in seen:
                raise DataError(f"duplicate product id '{record.id}'")
            seen.add(record.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ProductRecord]:
        return iter(self.records)

    @property
    def horizon(self) -> int:
        return self.records[0].sales.horizon if self.records else 0

    def split(self, name: str) -> List[ProductRecord]:
        if name not in SPLITS:
            raise DataError(f"unknown split '{name}'")
        return [r for r in self.records if r.split == name]

    def ids(self, name: Optional[str] = None) -> List[str]:
        records = self.records if name is None else self.split(name)
        return [r.id for r in records]

    def raw_targets(self, records: List[ProductRecord]) -> np.ndarray:
        if not records:
            return np.zeros((0, self.horizon))
        return np.stack([r.sales.window() for r in records])

    def model_targets(self, records: List[ProductRecord]) -> np.ndarray:
        """First-horizon sales mapped into model space by the fitted scaler."""
        if self.scaler is None:
            raise DataError("dataset is not normalized; call normalize_sales first")
        return self.scaler.transform(self.raw_targets(records))

    def with_scaler(self, scaler: "NormalizationState") -> "Dataset":
        return replace(self, scaler=scaler)

    def carve_validation(self, fraction: float, seed: int) -> Tuple[List[ProductRecord], List[ProductRecord]]:
        """Split train records into (fit, validation) without touching the test split."""
        train = self.split("train")
        if not 0.0 < fraction < 1.0:
            raise DataError(f"validation fraction must be in (0, 1), got {fraction}")
        order = np.random.default_rng(seed).permutation(len(train))
        n_val = max(1, int(round(fraction * len(train))))
        val_idx = set(order[:n_val].tolist())
        fit = [r for i, r in enumerate(train) if i not in val_idx]
        val = [r for i, r in enumerate(train) if i in val_idx]
        return fit, val
