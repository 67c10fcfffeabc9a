"""
Ancestral sampling of N candidate sales curves per product.

Every draw owns a torch.Generator seeded from (seed, product id, draw index),
so a sheet does not depend on how products and draws are batched together.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Protocol, Sequence

import numpy as np
import pandas as pd
import torch

from config.console import get_logger
from config.errors import DivergenceError, ShapeError
from diffusion.schedule import GuidanceSpec, NoiseSchedule, reverse_step, schedule_hash

logger = get_logger(__name__)


class DenoiserInterface(Protocol):
    """(x^t B×W, step indices B, conditioning B×C or None) -> predicted noise B×W."""

    horizon: int

    def __call__(self, xt: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor]) -> torch.Tensor:
        ...


@dataclass
class SampleSheet:
    """N draws × W weeks for one product, in normalized sales space."""

    product_id: str
    draws: np.ndarray
    seed: int = 0
    schedule_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=np.float64)
        if self.draws.ndim != 2 or self.draws.shape[0] < 1:
            raise ShapeError(f"sheet for {self.product_id} must be N×W with N >= 1, got {self.draws.shape}")
        if not np.all(np.isfinite(self.draws)):
            raise DivergenceError(f"sheet for {self.product_id} contains non-finite draws")

    @property
    def n_samples(self) -> int:
        return self.draws.shape[0]

    @property
    def horizon(self) -> int:
        return self.draws.shape[1]

    @property
    def weeks_by_draws(self) -> np.ndarray:
        """W×N view consumed by the refinement head."""
        return self.draws.T

    def sidecar(self) -> dict:
        return {"product_id": self.product_id, "seed": self.seed, "schedule_hash": self.schedule_hash,
                "n_samples": self.n_samples, "horizon": self.horizon, **self.metadata}

    def to_csv(self, path: str) -> Path:
        """Rows are draws, columns are weeks; a JSON sidecar sits next to the CSV."""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        columns = [f"week_{w + 1}" for w in range(self.horizon)]
        pd.DataFrame(self.draws, columns=columns).to_csv(target, index_label="draw", float_format="%.10g")
        with open(target.with_suffix(".json"), "w", encoding="utf-8") as handle:
            json.dump(self.sidecar(), handle, indent=2, sort_keys=True)
        return target


def read_sheet(path: str) -> SampleSheet:
    target = Path(path)
    table = pd.read_csv(target, index_col="draw")
    sidecar_path = target.with_suffix(".json")
    meta = {}
    if sidecar_path.is_file():
        with open(sidecar_path, "r", encoding="utf-8") as handle:
            meta = json.load(handle)
    product_id = meta.pop("product_id", target.stem)
    seed = meta.pop("seed", 0)
    digest = meta.pop("schedule_hash", "")
    meta.pop("n_samples", None)
    meta.pop("horizon", None)
    return SampleSheet(product_id, table.to_numpy(), seed=seed, schedule_hash=digest, metadata=meta)


def draw_seeds(seed: int, product_id: str, n_samples: int) -> List[int]:
    """Independent 63-bit seeds for each draw of one product."""
    key = int.from_bytes(hashlib.sha256(product_id.encode("utf-8")).digest()[:4], "little")
    children = np.random.SeedSequence([seed, key]).spawn(n_samples)
    return [int(child.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1)) for child in children]


def _generators(seed: int, product_ids: Sequence[str], n_samples: int, device) -> List[torch.Generator]:
    generators = []
    for product_id in product_ids:
        for draw_seed in draw_seeds(seed, product_id, n_samples):
            generator = torch.Generator(device=device)
            generator.manual_seed(draw_seed)
            generators.append(generator)
    return generators


def _row_noise(generators: List[torch.Generator], horizon: int, dtype, device) -> torch.Tensor:
    return torch.stack([
        torch.randn(horizon, generator=g, dtype=dtype, device=device) for g in generators
    ])


@torch.no_grad()
def sample_batch(
    denoiser: DenoiserInterface,
    conds: Optional[torch.Tensor],
    product_ids: Sequence[str],
    n_samples: int,
    schedule: NoiseSchedule,
    guidance: Optional[GuidanceSpec] = None,
    seed: int = 0,
    parameterization: str = "epsilon",
    max_rows: int = 4096,
) -> List[SampleSheet]:
    """
    Sample ``n_samples`` curves for each product.

    Args:
        denoiser: conditioned noise predictor
        conds: P×C conditioning embeddings, or None for an unconditional denoiser
        product_ids: P ids; they key the per-draw rng substreams
        n_samples: draws per product (N)
        schedule: noise schedule shared with training
        guidance: optional guidance; off by default
        seed: run seed
        max_rows: upper bound on draws pushed through the denoiser at once
    """
    if n_samples < 1:
        raise ShapeError(f"n_samples must be >= 1, got {n_samples}")
    if conds is not None and conds.shape[0] != len(product_ids):
        raise ShapeError(f"{conds.shape[0]} conditioning rows for {len(product_ids)} products")
    horizon = denoiser.horizon
    digest = schedule_hash(schedule)
    per_chunk = max(1, max_rows // n_samples)
    sheets: List[SampleSheet] = []
    for start in range(0, len(product_ids), per_chunk):
        ids = list(product_ids[start:start + per_chunk])
        chunk_cond = None
        if conds is not None:
            chunk_cond = conds[start:start + per_chunk].repeat_interleave(n_samples, dim=0)
        dtype = chunk_cond.dtype if chunk_cond is not None else torch.get_default_dtype()
        device = chunk_cond.device if chunk_cond is not None else torch.device("cpu")
        generators = _generators(seed, ids, n_samples, device)
        x = _row_noise(generators, horizon, dtype, device)
        for t in range(schedule.T, 0, -1):
            steps = torch.full((x.shape[0],), t, dtype=torch.long, device=device)
            predicted = denoiser(x, steps, chunk_cond)
            if not torch.all(torch.isfinite(predicted)):
                raise DivergenceError(f"denoiser produced non-finite output at step t={t}")
            noise = _row_noise(generators, horizon, dtype, device) if t > 1 else None
            x = reverse_step(x, t, predicted, schedule, guidance=guidance, noise=noise,
                             parameterization=parameterization)
        draws = x.reshape(len(ids), n_samples, horizon).cpu().double().numpy()
        for index, product_id in enumerate(ids):
            sheets.append(SampleSheet(product_id, draws[index], seed=seed, schedule_hash=digest))
    return sheets


def sample(
    denoiser: DenoiserInterface,
    cond: Optional[torch.Tensor],
    n_samples: int,
    schedule: NoiseSchedule,
    guidance: Optional[GuidanceSpec] = None,
    seed: int = 0,
    product_id: str = "product",
    parameterization: str = "epsilon",
) -> SampleSheet:
    """Draw one product's N×W sheet; ``cond`` is a length-C embedding or None."""
    conds = None if cond is None else cond.reshape(1, -1)
    return sample_batch(denoiser, conds, [product_id], n_samples, schedule, guidance, seed,
                        parameterization)[0]
