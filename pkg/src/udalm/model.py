"""Landmark detector with confidence readout.

Two cooperating routes share one CNN feature map f (C x H x W):

* global localization: learned landmark queries attend over the flattened
  feature map through a stack of transformer decoder layers; an MLP maps
  each updated query to a coarse coordinate in [0, 1] per axis.
* local refinement: 1x1 conv heads on f produce a per-landmark score map
  (L x H x W) and offset map (L x 2 x H x W, grid units).

At inference the coarse coordinate is projected to its grid cell, the
offset stored there refines it to sub-pixel precision, and the score value
at the same cell (clamped to [0, 1]) is the landmark's confidence. The
cell is chosen by projection, not by the score-map argmax; `argmax_decode`
exists only as a diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import InputError


@dataclass
class ModelOutput:
    """Batched forward results; `features` feeds the domain classifier."""

    coarse_coords: torch.Tensor  # (B, L, 2) in [0, 1] per axis
    score_maps: torch.Tensor     # (B, L, H, W)
    offset_maps: torch.Tensor    # (B, L, 2, H, W) in grid units
    features: torch.Tensor      # (B, C, H, W)


@dataclass
class Prediction:
    coords: np.ndarray       # (L, 2) pixels at model input resolution
    confidences: np.ndarray  # (L,) in [0, 1]


def project_to_grid(coord_px, stride: int, H: int, W: int):
    """Map a pixel coordinate to the grid cell covering it.

    Cell g covers pixels [stride*g, stride*(g+1)); out-of-range inputs
    clamp to the border cells.
    """
    x, y = coord_px
    gx = int(min(max(math.floor(x / stride), 0), W - 1))
    gy = int(min(max(math.floor(y / stride), 0), H - 1))
    return gx, gy


class PositionEncoding2D(nn.Module):
    """Fixed sinusoidal 2D position encoding for the decoder memory."""

    def __init__(self, embed_dim: int, temperature: float = 10000.0):
        super().__init__()
        self.num_pos_feats = embed_dim // 2
        self.temperature = temperature

    def forward(self, H: int, W: int, device, dtype):
        ys = torch.arange(H, device=device, dtype=dtype).unsqueeze(1).expand(H, W)
        xs = torch.arange(W, device=device, dtype=dtype).unsqueeze(0).expand(H, W)
        dim_t = torch.arange(self.num_pos_feats, device=device, dtype=dtype)
        dim_t = self.temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor")
                                     / self.num_pos_feats)
        pos_x = xs[:, :, None] / dim_t
        pos_y = ys[:, :, None] / dim_t
        pos_x = torch.stack((pos_x[..., 0::2].sin(), pos_x[..., 1::2].cos()), dim=3).flatten(2)
        pos_y = torch.stack((pos_y[..., 0::2].sin(), pos_y[..., 1::2].cos()), dim=3).flatten(2)
        pos = torch.cat((pos_y, pos_x), dim=2)  # (H, W, C)
        return pos.flatten(0, 1)  # (H*W, C)


def _norm(channels):
    # GroupNorm: batch-composition independent, so mixed source/target
    # batches cannot leak statistics into each other's normalization.
    return nn.GroupNorm(min(8, channels), channels)


class TinyBackbone(nn.Module):
    """Small conv stack for CPU-scale runs; log2(stride) 2x downsamplings."""

    def __init__(self, out_channels: int, stride: int):
        super().__init__()
        n_down = int(round(math.log2(stride))) if stride > 1 else 0
        layers = [
            nn.Conv2d(1, 32, 3, padding=1),
            _norm(32),
            nn.ReLU(inplace=True),
        ]
        ch = 32
        for _ in range(n_down):
            nxt = min(ch * 2, 64)
            layers += [
                nn.Conv2d(ch, nxt, 3, stride=2, padding=1),
                _norm(nxt),
                nn.ReLU(inplace=True),
                nn.Conv2d(nxt, nxt, 3, padding=1),
                _norm(nxt),
                nn.ReLU(inplace=True),
            ]
            ch = nxt
        layers += [nn.Conv2d(ch, out_channels, 3, padding=1)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = _norm(out_ch)
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                _norm(out_ch),
            )

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class ResidualBackbone(nn.Module):
    """Deep residual encoder to stride 32 plus three 2x upsampling layers.

    Reaches stride 4. ImageNet-style pretrained weights can be loaded
    externally via `load_state_dict` on `.encoder` if available; training
    from scratch is the default here.
    """

    def __init__(self, out_channels: int):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(1, 64, 7, stride=2, padding=3, bias=False),
            _norm(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
            BasicBlock(64, 64), BasicBlock(64, 64),
            BasicBlock(64, 128, stride=2), BasicBlock(128, 128),
            BasicBlock(128, 256, stride=2), BasicBlock(256, 256),
            BasicBlock(256, 512, stride=2), BasicBlock(512, 512),
        )
        ups = []
        ch = 512
        for i in range(3):
            nxt = out_channels if i == 2 else 256
            ups += [
                nn.ConvTranspose2d(ch, nxt, 4, stride=2, padding=1, bias=False),
                _norm(nxt),
                nn.ReLU(inplace=True),
            ]
            ch = nxt
        self.upsample = nn.Sequential(*ups)

    def forward(self, x):
        return self.upsample(self.encoder(x))


class DecoderLayer(nn.Module):
    """Post-norm decoder layer; position terms enter Q/K only, not V."""

    def __init__(self, dim: int, nhead: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, nhead, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, nhead, batch_first=True)
        self.linear1 = nn.Linear(dim, dim * 4)
        self.linear2 = nn.Linear(dim * 4, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, tgt, memory, query_pos, mem_pos):
        q = k = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, k, tgt, need_weights=False)[0])
        attn = self.cross_attn(tgt + query_pos, memory + mem_pos, memory,
                               need_weights=False)[0]
        tgt = self.norm2(tgt + attn)
        tgt = self.norm3(tgt + self.linear2(F.relu(self.linear1(tgt))))
        return tgt


class CoordHead(nn.Module):
    """3-layer MLP from query embedding to a coordinate in [0, 1]^2."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, 2)

    def forward(self, x):
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return torch.sigmoid(self.fc3(x))


class LandmarkDetector(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        C = config.embed_dim
        if config.backbone == "tiny":
            self.backbone = TinyBackbone(C, config.stride)
        else:
            self.backbone = ResidualBackbone(C)
        nhead = 8 if C % 8 == 0 else 2
        self.layers = nn.ModuleList(
            DecoderLayer(C, nhead) for _ in range(config.num_decoder_layers)
        )
        self.queries = nn.Embedding(config.num_landmarks, C)
        self.pos_enc = PositionEncoding2D(C)
        self.coord_head = CoordHead(C)
        self.score_head = nn.Conv2d(C, config.num_landmarks, 1)
        self.offset_head = nn.Conv2d(C, 2 * config.num_landmarks, 1)

    def forward(self, images: torch.Tensor) -> ModelOutput:
        """images: (B, 1, H_in, W_in) in [0, 1], matching config.input_size."""
        if images.dim() != 4 or images.shape[1] != 1:
            raise InputError(f"expected (B, 1, H, W) input, got {tuple(images.shape)}")
        w, h = self.config.input_size
        if images.shape[2] != h or images.shape[3] != w:
            raise InputError(
                f"input size {images.shape[3]}x{images.shape[2]} does not match "
                f"configured {w}x{h}"
            )
        B = images.shape[0]
        L = self.config.num_landmarks

        f = self.backbone(images)  # (B, C, H, W)
        _, C, H, W = f.shape

        scores = self.score_head(f)                       # (B, L, H, W)
        offsets = self.offset_head(f).view(B, L, 2, H, W)  # (B, L, 2, H, W)

        memory = f.flatten(2).transpose(1, 2)  # (B, H*W, C)
        mem_pos = self.pos_enc(H, W, f.device, f.dtype).unsqueeze(0)
        query_pos = self.queries.weight.unsqueeze(0).expand(B, L, C)
        tgt = torch.zeros_like(query_pos)
        for layer in self.layers:
            tgt = layer(tgt, memory, query_pos, mem_pos)
        coarse = self.coord_head(tgt)  # (B, L, 2)

        return ModelOutput(coarse_coords=coarse, score_maps=scores,
                           offset_maps=offsets, features=f)


def build_model(config: ModelConfig) -> LandmarkDetector:
    return LandmarkDetector(config)


def decode_predictions(output: ModelOutput, stride: int, input_size) -> list[Prediction]:
    """Decode a batch of ModelOutput into per-image predictions.

    Refinement cell = projection of the coarse coordinate (not the score
    argmax). refined = (g + offset_at_g + 0.5) * stride, clamped to image
    bounds; confidence = score at g clamped to [0, 1].
    """
    w, h = input_size
    coarse = output.coarse_coords.detach().cpu().numpy().astype(np.float64)
    scores = output.score_maps.detach().cpu().numpy().astype(np.float64)
    offsets = output.offset_maps.detach().cpu().numpy().astype(np.float64)
    B, L, H, W = scores.shape

    coarse_px = coarse * np.array([w, h])
    gx = np.clip(np.floor(coarse_px[..., 0] / stride), 0, W - 1).astype(np.int64)
    gy = np.clip(np.floor(coarse_px[..., 1] / stride), 0, H - 1).astype(np.int64)

    bi = np.arange(B)[:, None]
    li = np.arange(L)[None, :]
    off_x = offsets[bi, li, 0, gy, gx]
    off_y = offsets[bi, li, 1, gy, gx]
    # image bounds are the half-open box [0, w) x [0, h)
    rx = np.clip((gx + off_x + 0.5) * stride, 0, w - 1e-6)
    ry = np.clip((gy + off_y + 0.5) * stride, 0, h - 1e-6)
    conf = np.clip(scores[bi, li, gy, gx], 0.0, 1.0)

    coords = np.stack([rx, ry], axis=-1)  # (B, L, 2)
    return [Prediction(coords=coords[b], confidences=conf[b]) for b in range(B)]


def decode_prediction(output: ModelOutput, stride: int, input_size) -> Prediction:
    """Single-image convenience wrapper (batch size must be 1)."""
    preds = decode_predictions(output, stride, input_size)
    if len(preds) != 1:
        raise InputError("decode_prediction expects batch size 1")
    return preds[0]


def argmax_decode(output: ModelOutput, stride: int, input_size) -> list[Prediction]:
    """Diagnostic decoding via the score-map argmax instead of projection."""
    scores = output.score_maps.detach().cpu().numpy().astype(np.float64)
    B, L, H, W = scores.shape
    flat = scores.reshape(B, L, -1)
    idx = flat.argmax(axis=-1)
    gy, gx = np.unravel_index(idx, (H, W))
    coarse = np.stack([(gx + 0.5) * stride / input_size[0],
                       (gy + 0.5) * stride / input_size[1]], axis=-1)
    fake = ModelOutput(
        coarse_coords=torch.from_numpy(coarse),
        score_maps=output.score_maps,
        offset_maps=output.offset_maps,
        features=output.features,
    )
    return decode_predictions(fake, stride, input_size)
