"""Versioned self-describing checkpoint container."""

from __future__ import annotations

import hashlib
import json
import os

import torch

from .adaptation import DomainClassifier
from .config import ExperimentConfig, config_from_dict, config_to_dict
from .errors import CheckpointError
from .model import LandmarkDetector, build_model

MAGIC = "UDALM1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, model: LandmarkDetector, cfg: ExperimentConfig,
                    round_index: int, domain_head=None, optimizer=None):
    payload = {
        "magic": MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(cfg),
        "round": int(round_index),
        "model_state": model.state_dict(),
        "domain_head_state": domain_head.state_dict() if domain_head is not None else None,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "rng": {
            "base_seed": cfg.seed,
            "torch": torch.get_rng_state(),
        },
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str):
    """Returns (model, domain_head_or_None, cfg, round_index, payload)."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise CheckpointError(f"{path} is not a {MAGIC} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")

    cfg = config_from_dict(payload["config"])
    model = build_model(cfg.model)
    model.load_state_dict(payload["model_state"])
    domain_head = None
    if payload.get("domain_head_state") is not None:
        domain_head = DomainClassifier(cfg.model.embed_dim)
        domain_head.load_state_dict(payload["domain_head_state"])
    return model, domain_head, cfg, payload["round"], payload


def checkpoint_digest(path: str) -> str:
    """Content hash over config, round, and every parameter tensor.

    torch.save containers are not byte-stable across processes, so equality
    of runs is established over the canonical content instead.
    """
    _, _, cfg, round_index, payload = load_checkpoint(path)
    digest = hashlib.sha256()
    digest.update(json.dumps(config_to_dict(cfg), sort_keys=True).encode())
    digest.update(str(round_index).encode())
    for section in ("model_state", "domain_head_state"):
        state = payload.get(section)
        if state is None:
            continue
        for name in sorted(state):
            digest.update(name.encode())
            digest.update(state[name].numpy().tobytes())
    return digest.hexdigest()
