"""
Dataset records -> model-ready tensors.
"""

from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from config.console import get_logger
from config.errors import DataError
from data.records import Dataset, ProductRecord

logger = get_logger(__name__)


@dataclass
class ProductTensors:
    """Aligned per-product tensors: images B×3×H×W, dates B×4, targets B×W (model space)."""

    ids: List[str]
    images: torch.Tensor
    dates: torch.Tensor
    targets: torch.Tensor

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index: torch.Tensor) -> "ProductTensors":
        rows = index.tolist()
        return ProductTensors(
            ids=[self.ids[i] for i in rows],
            images=self.images[index],
            dates=self.dates[index],
            targets=self.targets[index],
        )


def build_tensors(
    dataset: Dataset,
    records: List[ProductRecord],
    image_size: int,
    year_min: int,
    year_span: int,
    skip_missing: bool = False,
) -> ProductTensors:
    """
    Stack images, scaled release dates and normalized targets of ``records``.

    Products whose image cannot be read or whose release year falls outside
    the configured span are skipped with a warning when ``skip_missing`` is
    set; otherwise the error propagates.
    """
    kept: List[ProductRecord] = []
    images, dates = [], []
    for record in records:
        if skip_missing and not record.image.exists():
            logger.warning("skipping product %s: image missing (%s)", record.id, record.image.path)
            continue
        try:
            date = record.release.to_vector(year_min, year_span)
        except DataError as exc:
            if not skip_missing:
                raise
            logger.warning("skipping product %s: %s", record.id, exc)
            continue
        pixels = record.image.load(image_size)
        images.append(np.transpose(pixels, (2, 0, 1)))
        dates.append(date)
        kept.append(record)
    horizon = dataset.horizon
    if not kept:
        return ProductTensors(
            ids=[],
            images=torch.zeros(0, 3, image_size, image_size),
            dates=torch.zeros(0, 4),
            targets=torch.zeros(0, horizon),
        )
    targets = dataset.model_targets(kept)
    return ProductTensors(
        ids=[r.id for r in kept],
        images=torch.from_numpy(np.stack(images)).float(),
        dates=torch.from_numpy(np.stack(dates)).float(),
        targets=torch.from_numpy(targets).float(),
    )
