"""Landmark-level self-training and domain adversarial learning.

Self-training side: each round regenerates pseudo-labels for every target
image from the current model, then selects the reliable ones per landmark.
Selection is top-k by confidence with k = max(1, floor(r * M)) over the M
target images, where the ratio r = min(1, delta * t) grows with the round
index t. The per-landmark threshold tau_l is the k-th highest confidence;
using the same ratio for every landmark keeps the selected counts balanced
(a fixed global threshold, kept as an ablation mode, does not). Ties are
broken by image id so exactly k records are selected per landmark.

Adversarial side: a small classifier predicts the domain of each image from
the globally pooled feature map. A gradient reversal layer sits between the
feature extractor and the classifier, so minimizing the domain loss trains
the classifier while pushing the extractor toward domain-invariant features.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError
from .model import ModelOutput, decode_predictions
from .objectives import TargetBatch, loss_base

PSEUDO_FORMAT = "udalm-pseudo-labels"
PSEUDO_VERSION = 1

_EPS = 1e-7


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad.neg()


def grl(x: torch.Tensor) -> torch.Tensor:
    """Identity forward; backward multiplies the gradient by -1."""
    return _GradientReversal.apply(x)


class DomainClassifier(nn.Module):
    """GAP -> FC -> ReLU -> FC -> sigmoid over a feature map."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, 1)

    def forward(self, features: torch.Tensor, reverse: bool = True) -> torch.Tensor:
        """features: (B, C, H, W) -> probabilities (B,) in (0, 1).

        reverse=True inserts the gradient reversal between the feature
        extractor and this head (the training configuration); reverse=False
        trains the classifier alone.
        """
        if reverse:
            features = grl(features)
        pooled = features.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled)))).squeeze(-1)


def loss_domain(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy, batch mean; labels 0 = source, 1 = target."""
    p = probs.clamp(_EPS, 1.0 - _EPS)
    d = labels.to(p.dtype)
    return (-(d * torch.log(p) + (1.0 - d) * torch.log(1.0 - p))).mean()


def total_loss(output: ModelOutput, targets: TargetBatch, weights,
               domain_probs=None, domain_labels=None):
    """Masked base loss plus lambda_domain times the domain loss."""
    base, parts = loss_base(output, targets, weights)
    if domain_probs is None:
        return base, parts
    ld = loss_domain(domain_probs, domain_labels)
    parts["domain"] = ld.detach()
    return base + weights.lambda_domain * ld, parts


@dataclass
class PseudoLabelRecord:
    image_id: str
    coords: np.ndarray        # (L, 2) pixels at model input resolution
    confidences: np.ndarray   # (L,) in [0, 1]
    mask: np.ndarray | None   # (L,) int8; None until selection ran
    round: int


@dataclass
class CurriculumState:
    delta: float | None
    round: int
    ratio: float
    thresholds: np.ndarray  # (L,)


def curriculum_ratio(t: int, delta: float) -> float:
    """Selection ratio for self-training round t >= 1, capped at 1."""
    if t < 1:
        raise ConfigError(f"round index must be >= 1, got {t}")
    return min(1.0, delta * t)


def generate_pseudo_labels(model, samples, batch_size: int = 16,
                           round_index: int = 0) -> list[PseudoLabelRecord]:
    """Predict coordinates and confidences for every target sample.

    Samples must already be resized to the model input size. Records come
    back sorted by image id with masks unset; deterministic given the model
    and inputs.
    """
    cfg = model.config
    ordered = sorted(samples, key=lambda s: s.id)
    records = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(ordered), batch_size):
            chunk = ordered[start:start + batch_size]
            images = torch.from_numpy(
                np.stack([s.pixels for s in chunk])[:, None].astype(np.float32)
            )
            preds = decode_predictions(model(images), cfg.stride, cfg.input_size)
            for sample, pred in zip(chunk, preds):
                records.append(PseudoLabelRecord(
                    image_id=sample.id,
                    coords=pred.coords,
                    confidences=pred.confidences,
                    mask=None,
                    round=round_index,
                ))
    if was_training:
        model.train()
    return records


def _sorted_records(records):
    return sorted(records, key=lambda r: r.image_id)


def dynamic_thresholds(records, r: float, round_index: int = 0,
                       delta: float | None = None) -> CurriculumState:
    """Per-landmark percentile thresholds; sets record masks in place.

    For each landmark the M confidences are ranked descending and the top
    k = max(1, floor(r * M)) records are selected; tau_l is the k-th highest
    confidence, so every selected confidence >= tau_l and exactly k records
    are selected per landmark.
    """
    if r <= 0:
        raise ConfigError(f"selection ratio must be positive, got {r}")
    if not records:
        raise ConfigError("dynamic_thresholds needs at least one record")
    r = min(r, 1.0)
    recs = _sorted_records(records)
    M = len(recs)
    L = len(recs[0].confidences)
    k = max(1, int(math.floor(r * M + 1e-9)))

    confs = np.stack([rec.confidences for rec in recs])  # (M, L)
    masks = np.zeros((M, L), dtype=np.int8)
    thresholds = np.zeros(L, dtype=np.float64)
    tie_order = np.arange(M)
    for l in range(L):
        ranked = np.lexsort((tie_order, -confs[:, l]))  # conf desc, id asc
        top = ranked[:k]
        thresholds[l] = confs[ranked[k - 1], l]
        masks[top, l] = 1
    for i, rec in enumerate(recs):
        rec.mask = masks[i]
    return CurriculumState(delta=delta, round=round_index, ratio=r,
                           thresholds=thresholds)


def fixed_threshold_masks(records, tau: float, level: str = "landmark",
                          round_index: int = 0) -> CurriculumState:
    """Ablation selection with one global threshold.

    level="landmark": landmark l is kept iff its confidence > tau, which
    generally yields unbalanced per-landmark counts. level="image": the
    whole record is kept iff its mean confidence > tau.
    """
    if not records:
        raise ConfigError("fixed_threshold_masks needs at least one record")
    recs = _sorted_records(records)
    L = len(recs[0].confidences)
    for rec in recs:
        if level == "landmark":
            rec.mask = (rec.confidences > tau).astype(np.int8)
        elif level == "image":
            keep = rec.confidences.mean() > tau
            rec.mask = np.full(L, 1 if keep else 0, dtype=np.int8)
        else:
            raise ConfigError(f"unknown selection level '{level}'")
    return CurriculumState(delta=None, round=round_index, ratio=float("nan"),
                           thresholds=np.full(L, tau, dtype=np.float64))


def no_selection_masks(records, round_index: int = 0) -> CurriculumState:
    """Self-training disabled: every pseudo-label is masked out, so target
    samples feed only the domain loss (the DAL-only ablation)."""
    if not records:
        raise ConfigError("no_selection_masks needs at least one record")
    recs = _sorted_records(records)
    L = len(recs[0].confidences)
    for rec in recs:
        rec.mask = np.zeros(L, dtype=np.int8)
    return CurriculumState(delta=None, round=round_index, ratio=float("nan"),
                           thresholds=np.full(L, np.inf, dtype=np.float64))


def selected_counts(records) -> np.ndarray:
    """Per-landmark number of selected pseudo-labels."""
    return np.stack([rec.mask for rec in records]).sum(axis=0)


def write_pseudo_labels(path: str, records, state: CurriculumState):
    payload = {
        "format": PSEUDO_FORMAT,
        "version": PSEUDO_VERSION,
        "round": state.round,
        "ratio": None if math.isnan(state.ratio) else state.ratio,
        "delta": state.delta,
        "thresholds": [float(v) for v in state.thresholds],
        "records": [
            {
                "image_id": rec.image_id,
                "round": rec.round,
                "coords": [[float(x), float(y)] for x, y in rec.coords],
                "confidences": [float(c) for c in rec.confidences],
                "mask": [int(m) for m in rec.mask] if rec.mask is not None else None,
            }
            for rec in _sorted_records(records)
        ],
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def read_pseudo_labels(path: str):
    if not os.path.exists(path):
        raise DataError(f"pseudo-label file not found: {path}")
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != PSEUDO_FORMAT:
        raise DataError(f"{path} is not a {PSEUDO_FORMAT} file")
    if payload.get("version") != PSEUDO_VERSION:
        raise DataError(f"unsupported pseudo-label version in {path}")
    records = [
        PseudoLabelRecord(
            image_id=item["image_id"],
            coords=np.asarray(item["coords"], dtype=np.float64),
            confidences=np.asarray(item["confidences"], dtype=np.float64),
            mask=None if item["mask"] is None else np.asarray(item["mask"], dtype=np.int8),
            round=item["round"],
        )
        for item in payload["records"]
    ]
    ratio = payload["ratio"] if payload["ratio"] is not None else float("nan")
    state = CurriculumState(
        delta=payload.get("delta"),
        round=payload["round"],
        ratio=ratio,
        thresholds=np.asarray(payload["thresholds"], dtype=np.float64),
    )
    return records, state
