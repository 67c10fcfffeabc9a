"""
Checkpoint archives for the two stages.

Each archive holds the parameter tensors keyed by module path plus the JSON
config needed to rebuild the module. The content hash covers both, so two
checkpoints with equal parameters and config share a hash regardless of how
torch lays out the zip file.
"""

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Tuple

import torch
import torch.nn as nn

from config.console import get_logger
from config.errors import CheckpointError
from models.conditioning import ConditioningConfig
from models.denoiser import DenoiserConfig
from models.forecaster import DiffusionForecaster
from models.refinement import RefinementHead

logger = get_logger(__name__)

DIFFUSION_KIND = "mdiff-diffusion"
REFINER_KIND = "mdiff-refiner"


def content_hash(state_dict: dict, config: dict) -> str:
    """sha256 over the sorted parameter bytes and the canonical config JSON."""
    digest = hashlib.sha256()
    for key in sorted(state_dict):
        tensor = state_dict[key].detach().cpu().contiguous()
        digest.update(key.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.numpy().tobytes())
    digest.update(json.dumps(config, sort_keys=True).encode("utf-8"))
    return digest.hexdigest()


def module_hash(module: nn.Module, config: dict) -> str:
    return content_hash(module.state_dict(), config)


def _forecaster_config(forecaster: DiffusionForecaster) -> dict:
    return {"denoiser": asdict(forecaster.denoiser.config),
            "conditioning": asdict(forecaster.encoder.config)}


def _cpu_state(module: nn.Module) -> dict:
    return {key: value.detach().cpu().clone() for key, value in module.state_dict().items()}


def _read(path: str, kind: str) -> dict:
    target = Path(path)
    if not target.is_file():
        raise CheckpointError(f"checkpoint not found: {target}")
    try:
        archive = torch.load(target, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {target}: {exc}") from exc
    if not isinstance(archive, dict) or archive.get("kind") != kind:
        raise CheckpointError(f"{target} is not a {kind} checkpoint")
    return archive


def save_diffusion(forecaster: DiffusionForecaster, path: str) -> str:
    """Write the stage-1 archive and return its content hash."""
    config = _forecaster_config(forecaster)
    state = _cpu_state(forecaster)
    digest = content_hash(state, config)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": DIFFUSION_KIND, "config": config, "state_dict": state, "hash": digest}, target)
    logger.info("saved diffusion checkpoint %s (%s)", target, digest[:12])
    return digest


def load_diffusion(path: str, expected_hash: Optional[str] = None) -> Tuple[DiffusionForecaster, str]:
    archive = _read(path, DIFFUSION_KIND)
    config = archive["config"]
    forecaster = DiffusionForecaster(DenoiserConfig(**config["denoiser"]),
                                     ConditioningConfig(**config["conditioning"]))
    state = archive["state_dict"]
    dtype = next(iter(state.values())).dtype
    forecaster.to(dtype)
    forecaster.load_state_dict(state)
    digest = content_hash(state, config)
    if digest != archive.get("hash"):
        raise CheckpointError(f"{path}: stored hash does not match its contents")
    if expected_hash is not None and digest != expected_hash:
        raise CheckpointError(f"{path}: diffusion hash {digest[:12]} != expected {expected_hash[:12]}")
    forecaster.eval()
    return forecaster, digest


def _refiner_config(head: RefinementHead) -> dict:
    return {"n_samples": head.n_samples, "horizon": head.horizon, "widths": head.widths}


def save_refiner(head: RefinementHead, path: str, diffusion_hash: str, extra: Optional[dict] = None) -> str:
    """
    Write the stage-2 archive plus its JSON sidecar.

    The sidecar records N, W, the layer widths and the hash of the diffusion
    checkpoint whose draws the head was trained on.
    """
    config = _refiner_config(head)
    state = _cpu_state(head)
    digest = content_hash(state, config)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": REFINER_KIND, "config": config, "state_dict": state, "hash": digest,
                "diffusion_hash": diffusion_hash}, target)
    sidecar = {**config, "hash": digest, "diffusion_hash": diffusion_hash, **(extra or {})}
    with open(target.with_suffix(".json"), "w", encoding="utf-8") as handle:
        json.dump(sidecar, handle, indent=2, sort_keys=True)
    logger.info("saved refiner checkpoint %s (%s)", target, digest[:12])
    return digest


def load_refiner(path: str, diffusion_hash: Optional[str] = None) -> Tuple[RefinementHead, str, str]:
    """Returns (head, refiner hash, bound diffusion hash); a binding mismatch is fatal."""
    archive = _read(path, REFINER_KIND)
    config = archive["config"]
    head = RefinementHead(config["n_samples"], config["horizon"])
    state = archive["state_dict"]
    head.to(next(iter(state.values())).dtype)
    head.load_state_dict(state)
    digest = content_hash(state, config)
    if digest != archive.get("hash"):
        raise CheckpointError(f"{path}: stored hash does not match its contents")
    bound = archive.get("diffusion_hash", "")
    if diffusion_hash is not None and bound != diffusion_hash:
        raise CheckpointError(
            f"refiner {path} was trained against diffusion {bound[:12] or '<none>'}, "
            f"not {diffusion_hash[:12]}"
        )
    head.eval()
    return head, digest, bound
