"""Ground-truth target encoding and the masked loss terms.

Targets live on the stride-s grid. For a landmark at pixel p the continuous
grid coordinate is c = p / stride; its peak cell is g* = floor(c). The score
target is a Gaussian of the cell-index distance to g*, so the peak value is
exactly 1 at g*, truncated to a window of radius floor(3*sigma) cells and to
the map. The offset target at every supported cell g stores c - (g + 0.5),
which makes the decode formula (g + offset + 0.5) * stride recover p exactly.

Loss masking: a binary per-landmark mask multiplies every loss term.
Masked means divide by the number of unmasked landmarks (not L), so the
gradient scale of selected landmarks does not shrink as the curriculum
admits more of them. Samples whose mask is all-zero contribute 0 and are
excluded from the batch denominator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import ModelOutput


@dataclass
class ScoreTarget:
    values: np.ndarray   # (L, H, W) float64 in [0, 1]
    support: np.ndarray  # (L, H, W) bool, True where values > 0


@dataclass
class OffsetTarget:
    values: np.ndarray   # (L, 2, H, W) float64, grid units; valid on support only


@dataclass
class TargetBatch:
    """Loss-ready tensors for one batch."""

    coord_norm: torch.Tensor  # (B, L, 2) in [0, 1]
    score: torch.Tensor       # (B, L, H, W)
    offset: torch.Tensor      # (B, L, 2, H, W)
    support: torch.Tensor     # (B, L, H, W) bool
    mask: torch.Tensor        # (B, L) float


def encode_targets(landmarks_px, H: int, W: int, stride: int, sigma: float,
                   valid=None):
    """Encode landmark pixel positions into score and offset targets.

    landmarks_px: (L, 2) array of (x, y) in input-resolution pixels.
    valid: optional (L,) boolean; invalid landmarks get empty channels.
    """
    landmarks_px = np.asarray(landmarks_px, dtype=np.float64)
    L = landmarks_px.shape[0]
    score = np.zeros((L, H, W), dtype=np.float64)
    offset = np.zeros((L, 2, H, W), dtype=np.float64)
    radius = int(math.floor(3.0 * sigma + 1e-9))

    for l in range(L):
        if valid is not None and not valid[l]:
            continue
        cx, cy = landmarks_px[l] / stride
        gx = int(min(max(math.floor(cx), 0), W - 1))
        gy = int(min(max(math.floor(cy), 0), H - 1))
        x0, x1 = max(0, gx - radius), min(W - 1, gx + radius)
        y0, y1 = max(0, gy - radius), min(H - 1, gy + radius)
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        dx2 = (xs - gx) ** 2
        dy2 = (ys - gy) ** 2
        score[l, y0:y1 + 1, x0:x1 + 1] = np.exp(
            -(dy2[:, None] + dx2[None, :]) / (2.0 * sigma * sigma)
        )
        offset[l, 0, y0:y1 + 1, x0:x1 + 1] = cx - (xs[None, :] + 0.5)
        offset[l, 1, y0:y1 + 1, x0:x1 + 1] = cy - (ys[:, None] + 0.5)

    support = score > 0
    offset[:, 0][~support] = 0.0
    offset[:, 1][~support] = 0.0
    return ScoreTarget(values=score, support=support), OffsetTarget(values=offset)


def _per_sample_mean(total, count):
    """total/count where count > 0, else 0; keeps autograd intact."""
    safe = torch.clamp(count, min=1.0)
    return torch.where(count > 0, total / safe, torch.zeros_like(total))


def _batch_mean(per_sample, sample_valid):
    n = sample_valid.sum()
    if n.item() == 0:
        return per_sample.sum() * 0.0
    return (per_sample * sample_valid).sum() / n


def loss_coord(pred, gt, mask):
    """Masked L1 on normalized coordinates. pred/gt: (B, L, 2), mask: (B, L)."""
    mask = mask.to(pred.dtype)
    diff = (pred - gt).abs() * mask.unsqueeze(-1)
    total = diff.sum(dim=(1, 2))
    count = mask.sum(dim=1) * 2
    per_sample = _per_sample_mean(total, count)
    return _batch_mean(per_sample, (mask.sum(dim=1) > 0).to(pred.dtype))


def loss_score(pred, target, mask):
    """Masked L2 over whole landmark channels. pred/target: (B, L, H, W)."""
    mask = mask.to(pred.dtype)
    sq = (pred - target) ** 2 * mask[:, :, None, None]
    total = sq.sum(dim=(1, 2, 3))
    hw = pred.shape[2] * pred.shape[3]
    count = mask.sum(dim=1) * hw
    per_sample = _per_sample_mean(total, count)
    return _batch_mean(per_sample, (mask.sum(dim=1) > 0).to(pred.dtype))


def loss_offset(pred, target, support, mask):
    """Masked L1 restricted to GT-score support.

    pred/target: (B, L, 2, H, W); support: (B, L, H, W) bool; mask: (B, L).
    Values outside the support never contribute.
    """
    mask = mask.to(pred.dtype)
    weight = support.to(pred.dtype) * mask[:, :, None, None]  # (B, L, H, W)
    diff = (pred - target).abs() * weight.unsqueeze(2)
    total = diff.sum(dim=(1, 2, 3, 4))
    count = weight.sum(dim=(1, 2, 3)) * 2
    per_sample = _per_sample_mean(total, count)
    return _batch_mean(per_sample, (count > 0).to(pred.dtype))


def loss_base(output: ModelOutput, targets: TargetBatch, weights):
    """Weighted sum lambda_s * score + lambda_o * offset + coord, per sample,
    averaged over samples with at least one unmasked landmark.

    With all-ones masks this is the plain supervised objective; per-landmark
    masks yield its landmark-selected variant.
    """
    mask = targets.mask.to(output.coarse_coords.dtype)
    hw = output.score_maps.shape[2] * output.score_maps.shape[3]

    cdiff = (output.coarse_coords - targets.coord_norm).abs() * mask.unsqueeze(-1)
    c_per = _per_sample_mean(cdiff.sum(dim=(1, 2)), mask.sum(dim=1) * 2)

    sq = (output.score_maps - targets.score) ** 2 * mask[:, :, None, None]
    s_per = _per_sample_mean(sq.sum(dim=(1, 2, 3)), mask.sum(dim=1) * hw)

    w = targets.support.to(mask.dtype) * mask[:, :, None, None]
    odiff = (output.offset_maps - targets.offset).abs() * w.unsqueeze(2)
    o_per = _per_sample_mean(odiff.sum(dim=(1, 2, 3, 4)), w.sum(dim=(1, 2, 3)) * 2)

    per_sample = (weights.lambda_score * s_per + weights.lambda_offset * o_per + c_per)
    valid = (mask.sum(dim=1) > 0).to(per_sample.dtype)
    total = _batch_mean(per_sample, valid)
    parts = {
        "coord": _batch_mean(c_per, valid).detach(),
        "score": _batch_mean(s_per, valid).detach(),
        "offset": _batch_mean(o_per, valid).detach(),
    }
    return total, parts
