"""Synthetic domain-shifted landmark benchmark.

Each image contains one randomized smooth closed contour ("anatomy") on a
gradient background, with landmarks placed at fixed arc-length fractions of
the contour so the landmark semantics are consistent across images. The
target domain applies a photometric shift (contrast, gamma, brightness,
noise) plus a mild widening of the shape prior, mimicking a change of
imaging device. Ground truth is stored for both domains; the unlabeled
target-train manifest omits it, a separate *_labeled manifest keeps it for
upper-bound training and analysis only.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .data import write_manifest, save_image

SPACING_MM = 0.1  # mm per pixel, both axes

SUBDOMAINS = ("deviceA", "deviceB", "deviceC")
# Shift severity per simulated device. Heterogeneous difficulty is what
# makes confidence-ranked curricula meaningful: the mildly shifted images
# produce reliable pseudo-labels first.
_SUBDOMAIN_SEVERITY = {"deviceA": 0.45, "deviceB": 0.75, "deviceC": 1.0}


@dataclass
class ShiftParams:
    """Target-domain shift: photometric transfer plus a rendering-style
    change (the anatomy's fill fades toward the background while its
    boundary gains a highlighted rim, mimicking a different device's
    response), plus a mild widening of the shape prior."""

    contrast: float = 0.75
    gamma: float = 1.5
    brightness: float = 0.2
    noise: float = 0.035
    blur_sigma: float = 0.5       # different point-spread function
    clutter_lines: int = 2        # faint random streaks (structured distractors)
    fill_fade: float = 0.85      # 0 = source-like fill, 1 = fill vanishes
    edge_gain: float = 0.35      # boundary rim intensity bump
    shape_scale: float = 0.25     # widens the harmonic amplitude prior

    def is_zero(self):
        return (self.contrast == 1.0 and self.gamma == 1.0
                and self.brightness == 0.0 and self.noise == 0.0
                and self.blur_sigma == 0.0 and self.clutter_lines == 0
                and self.fill_fade == 0.0 and self.edge_gain == 0.0
                and self.shape_scale == 0.0)


@dataclass
class SynthSpec:
    seed: int = 0
    n_source: int = 40
    n_target: int = 120
    n_test: int = 60
    num_landmarks: int = 6
    size: int = 64
    shift: ShiftParams = field(default_factory=ShiftParams)


def _contour_points(rng, size, shape_scale):
    """Closed contour with randomized low-order radial harmonics."""
    margin = 0.04 * size
    for _ in range(50):
        center = size * (0.5 + rng.uniform(-0.05, 0.05, size=2))
        base_r = size * rng.uniform(0.20, 0.28) * (1.0 + 0.08 * shape_scale)
        amps = rng.normal(0.0, 0.05, size=4) * (1.0 + shape_scale)
        amps = np.clip(amps, -0.16, 0.16)
        phases = rng.uniform(0.0, 2.0 * math.pi, size=4)
        theta = np.linspace(0.0, 2.0 * math.pi, 720, endpoint=False)
        radius = base_r * (1.0 + sum(
            amps[k] * np.cos((k + 2) * theta + phases[k]) for k in range(4)
        ))
        pts = center + radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        if (pts.min() >= margin and pts.max() < size - margin
                and radius.min() > 0.08 * size):
            return pts
    raise RuntimeError("could not place a contour inside the image")


def _arc_length_landmarks(pts: np.ndarray, num: int) -> np.ndarray:
    """Points at arc-length fractions i/num along the closed contour."""
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    marks = np.empty((num, 2), dtype=np.float64)
    for i in range(num):
        s = total * i / num
        j = int(np.searchsorted(cum, s, side="right") - 1)
        j = min(j, len(seg) - 1)
        t = (s - cum[j]) / seg[j] if seg[j] > 0 else 0.0
        marks[i] = closed[j] * (1 - t) + closed[j + 1] * t
    return marks


def _render(rng, size, num_landmarks, shape_scale, fill_fade=0.0, edge_gain=0.0):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    base = rng.uniform(0.18, 0.30)
    gdir = rng.uniform(-1.0, 1.0, size=2) * 0.08
    img = (base + gdir[0] * xs + gdir[1] * ys).astype(np.float32)

    pts = _contour_points(rng, size, shape_scale)
    landmarks = _arc_length_landmarks(pts, num_landmarks)
    poly = [np.round(pts).astype(np.int32)]

    fg_full = base + rng.uniform(0.30, 0.45)
    fg = base + (fg_full - base) * (1.0 - fill_fade)
    cv2.fillPoly(img, poly, float(fg))

    # darker inner blob for texture; fades with the fill
    centroid = pts.mean(axis=0)
    axes = (max(2, int(0.30 * (pts[:, 0].max() - pts[:, 0].min()) / 2)),
            max(2, int(0.30 * (pts[:, 1].max() - pts[:, 1].min()) / 2)))
    cv2.ellipse(img, (int(centroid[0]), int(centroid[1])), axes,
                float(rng.uniform(0, 180)), 0, 360,
                float(fg - 0.18 * (1.0 - fill_fade)), -1)

    if edge_gain > 0:
        cv2.polylines(img, poly, True, float(min(1.0, fg_full + edge_gain)),
                      thickness=1)

    img = cv2.GaussianBlur(img, (0, 0), sigmaX=0.8)
    img += rng.normal(0.0, 0.01, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0), landmarks


def scale_shift(shift: ShiftParams, severity: float) -> ShiftParams:
    """Interpolate between no shift (severity 0) and the full shift."""
    return ShiftParams(
        contrast=1.0 + (shift.contrast - 1.0) * severity,
        gamma=1.0 + (shift.gamma - 1.0) * severity,
        brightness=shift.brightness * severity,
        noise=shift.noise * severity,
        blur_sigma=shift.blur_sigma * severity,
        clutter_lines=int(round(shift.clutter_lines * severity)),
        fill_fade=shift.fill_fade * severity,
        edge_gain=shift.edge_gain * severity,
        shape_scale=shift.shape_scale * severity,
    )


def apply_photometric_shift(pixels, shift: ShiftParams, rng):
    p = pixels.astype(np.float32)
    if shift.contrast != 1.0:
        p = (p - 0.5) * shift.contrast + 0.5
    if shift.gamma != 1.0:
        p = np.clip(p, 0.0, 1.0) ** shift.gamma
    p = p + shift.brightness
    if shift.blur_sigma > 0:
        p = cv2.GaussianBlur(p, (0, 0), sigmaX=shift.blur_sigma)
    if shift.clutter_lines > 0:
        h, w = p.shape
        n = int(rng.integers(1, shift.clutter_lines + 1))
        for _ in range(n):
            x0, y0, x1, y1 = rng.integers(0, w, 4)
            tone = float(np.clip(p.mean() + rng.uniform(-0.25, 0.25), 0.0, 1.0))
            cv2.line(p, (int(x0), int(y0)), (int(x1), int(y1)), tone,
                     thickness=int(rng.integers(1, 3)))
    if shift.noise > 0:
        p = p + rng.normal(0.0, shift.noise, p.shape).astype(np.float32)
    return np.clip(p, 0.0, 1.0)


def _make_split(spec, domain_code, count, folder, id_prefix, target_shift):
    """Render one split; returns manifest entries (with landmarks)."""
    entries = []
    for i in range(count):
        rng = np.random.default_rng([spec.seed, domain_code, i])
        subdomain = None
        if target_shift:
            subdomain = SUBDOMAINS[i % len(SUBDOMAINS)]
            shift = scale_shift(spec.shift, _SUBDOMAIN_SEVERITY[subdomain])
            pixels, landmarks = _render(rng, spec.size, spec.num_landmarks,
                                        shift.shape_scale,
                                        fill_fade=shift.fill_fade,
                                        edge_gain=shift.edge_gain)
            if not spec.shift.is_zero():
                pixels = apply_photometric_shift(pixels, shift, rng)
        else:
            pixels, landmarks = _render(rng, spec.size, spec.num_landmarks, 0.0)
        fname = f"img_{i:05d}.png"
        save_image(os.path.join(folder, fname), pixels)
        entry = {
            "id": f"{id_prefix}{i:05d}",
            "image_path": os.path.join(os.path.basename(folder), fname),
            "width": spec.size, "height": spec.size,
            "spacing_mm": [SPACING_MM, SPACING_MM],
            "domain": "target" if target_shift else "source",
            "landmarks": [[float(x), float(y)] for x, y in landmarks],
        }
        if subdomain:
            entry["subdomain"] = subdomain
        entries.append(entry)
    return entries


def _strip_landmarks(entries):
    out = []
    for e in entries:
        e = dict(e)
        e.pop("landmarks", None)
        out.append(e)
    return out


def synth_generate(out_dir: str, spec: SynthSpec) -> dict:
    """Write source/target image trees and manifests; returns manifest paths.

    target_train.json is the unlabeled split used for adaptation;
    target_train_labeled.json carries the same images with ground truth for
    the upper-bound model and diagnostics only.
    """
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("source", "target", "target_test", "manifests"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    src = _make_split(spec, 0, spec.n_source, os.path.join(out_dir, "source"),
                      "src_", target_shift=False)
    tgt = _make_split(spec, 1, spec.n_target, os.path.join(out_dir, "target"),
                      "tgt_", target_shift=True)
    tst = _make_split(spec, 2, spec.n_test, os.path.join(out_dir, "target_test"),
                      "tst_", target_shift=True)

    mdir = os.path.join(out_dir, "manifests")
    paths = {
        "source_train": os.path.join(mdir, "source_train.json"),
        "target_train": os.path.join(mdir, "target_train.json"),
        "target_train_labeled": os.path.join(mdir, "target_train_labeled.json"),
        "target_test": os.path.join(mdir, "target_test.json"),
    }

    def rel(entries):
        # image paths are stored relative to the manifest directory
        out = []
        for e in entries:
            e = dict(e)
            e["image_path"] = os.path.join("..", e["image_path"])
            out.append(e)
        return out

    write_manifest(paths["source_train"], rel(src))
    write_manifest(paths["target_train"], _strip_landmarks(rel(tgt)))
    write_manifest(paths["target_train_labeled"], rel(tgt))
    write_manifest(paths["target_test"], rel(tst))
    return paths
