"""Dataset loading, manifests, resizing, augmentation, oversampling.

A manifest is a JSON file listing samples for one split:

    {"format": "udalm-manifest", "version": 1,
     "samples": [{"id": ..., "image_path": ..., "width": ..., "height": ...,
                  "spacing_mm": [sx, sy], "domain": "source"|"target",
                  "subdomain": optional, "landmarks": optional [[x, y], ...]}]}

Image paths are relative to the manifest's directory. Images are 8- or
16-bit grayscale PNGs, normalized to [0, 1] on load. Landmarks are pixel
coordinates in the stored image's resolution.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import cv2
import numpy as np

from .config import AugmentConfig
from .errors import DataError

MANIFEST_FORMAT = "udalm-manifest"
MANIFEST_VERSION = 1


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray              # (H, W) float32 in [0, 1], current resolution
    original_size: tuple            # (w, h) of the stored image
    spacing_mm: tuple               # mm per original pixel, (sx, sy)
    landmarks: np.ndarray | None    # (L, 2) float64 in current-resolution pixels
    domain: str                     # "source" | "target"
    subdomain: str | None = None
    landmark_valid: np.ndarray | None = None  # (L,) bool, set by augment

    @property
    def size(self):
        """Current (w, h)."""
        return (self.pixels.shape[1], self.pixels.shape[0])


def write_manifest(path: str, entries: list[dict]):
    payload = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
               "samples": entries}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def read_manifest(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path} is not a {MANIFEST_FORMAT} file")
    if payload.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version in {path}")
    return payload["samples"]


def load_image(path: str) -> np.ndarray:
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"could not read image: {path}")
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2GRAY)
    if raw.dtype == np.uint8:
        return raw.astype(np.float32) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float32) / 65535.0
    return raw.astype(np.float32)


def save_image(path: str, pixels: np.ndarray):
    """Store a [0, 1] float image as 8-bit grayscale PNG."""
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(path, arr):
        raise DataError(f"could not write image: {path}")


def load_dataset(manifest_path: str, expected_landmarks: int | None = None):
    """Load and validate every sample in a manifest.

    Source-domain entries must carry landmarks; target entries may omit
    them. Landmark count and bounds are checked per record.
    """
    root = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    seen_counts = set()
    for entry in read_manifest(manifest_path):
        sid = entry.get("id", "<missing id>")
        for key in ("image_path", "width", "height", "spacing_mm", "domain"):
            if key not in entry:
                raise DataError(f"record '{sid}': missing field '{key}'")
        if entry["domain"] not in ("source", "target"):
            raise DataError(f"record '{sid}': bad domain '{entry['domain']}'")
        img_path = os.path.join(root, entry["image_path"])
        pixels = load_image(img_path)
        w, h = int(entry["width"]), int(entry["height"])
        if pixels.shape != (h, w):
            raise DataError(
                f"record '{sid}': image is {pixels.shape[1]}x{pixels.shape[0]}, "
                f"manifest says {w}x{h}"
            )
        sx, sy = entry["spacing_mm"]
        if sx <= 0 or sy <= 0:
            raise DataError(f"record '{sid}': spacing must be positive")

        landmarks = None
        if entry.get("landmarks") is not None:
            landmarks = np.asarray(entry["landmarks"], dtype=np.float64)
            if landmarks.ndim != 2 or landmarks.shape[1] != 2:
                raise DataError(f"record '{sid}': landmarks must be an Lx2 array")
            if expected_landmarks is not None and landmarks.shape[0] != expected_landmarks:
                raise DataError(
                    f"record '{sid}': landmark count mismatch "
                    f"({landmarks.shape[0]} != {expected_landmarks})"
                )
            seen_counts.add(landmarks.shape[0])
            if len(seen_counts) > 1:
                raise DataError(f"record '{sid}': landmark count mismatch within manifest")
            inside = ((landmarks[:, 0] >= 0) & (landmarks[:, 0] < w)
                      & (landmarks[:, 1] >= 0) & (landmarks[:, 1] < h))
            if not inside.all():
                bad = int(np.argmin(inside))
                raise DataError(
                    f"record '{sid}': landmark {bad} at "
                    f"({landmarks[bad, 0]:.1f}, {landmarks[bad, 1]:.1f}) is outside {w}x{h}"
                )
        elif entry["domain"] == "source":
            raise DataError(f"record '{sid}': source sample has no landmarks")

        samples.append(ImageSample(
            id=str(sid), pixels=pixels, original_size=(w, h),
            spacing_mm=(float(sx), float(sy)), landmarks=landmarks,
            domain=entry["domain"], subdomain=entry.get("subdomain"),
        ))
    return samples


def resize_with_labels(sample: ImageSample, target_size) -> ImageSample:
    """Bilinear resize; landmarks scale by the per-axis size ratio.

    `original_size` is preserved, so (original_size / size) is the inverse
    transform used to map predictions back for evaluation.
    """
    w0, h0 = sample.size
    w1, h1 = target_size
    if (w0, h0) == (w1, h1):
        return sample
    pixels = cv2.resize(sample.pixels, (w1, h1), interpolation=cv2.INTER_LINEAR)
    landmarks = None
    if sample.landmarks is not None:
        landmarks = sample.landmarks * np.array([w1 / w0, h1 / h0], dtype=np.float64)
    return replace(sample, pixels=pixels, landmarks=landmarks)


def to_original_coords(coords_px: np.ndarray, sample: ImageSample) -> np.ndarray:
    """Map current-resolution coordinates back to the original image."""
    w, h = sample.size
    w0, h0 = sample.original_size
    return np.asarray(coords_px, dtype=np.float64) * np.array([w0 / w, h0 / h])


def _affine_matrix(scale, angle_deg, translate, size):
    """Scale+rotation about the image center, then translation. 2x3 matrix."""
    w, h = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(angle_deg)
    a = scale * math.cos(theta)
    b = scale * math.sin(theta)
    rot = np.array([[a, -b], [b, a]], dtype=np.float64)
    center = np.array([cx, cy])
    shift = center - rot @ center + np.asarray(translate, dtype=np.float64)
    return np.concatenate([rot, shift[:, None]], axis=1)


def apply_affine_to_points(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ matrix[:, :2].T + matrix[:, 2]


def augment(sample: ImageSample, config: AugmentConfig, rng: np.random.Generator) -> ImageSample:
    """Randomized affine + occlusion + blur, label-consistent.

    One affine map moves pixels and landmarks identically; occlusion and
    blur touch pixels only. Landmarks pushed outside the image get
    landmark_valid = False instead of being clamped.
    """
    w, h = sample.size
    pixels = sample.pixels
    landmarks = sample.landmarks
    valid = (sample.landmark_valid.copy() if sample.landmark_valid is not None
             else (np.ones(len(landmarks), dtype=bool) if landmarks is not None else None))

    scale = 1.0 + rng.uniform(-config.scale, config.scale) if config.scale > 0 else 1.0
    angle = rng.uniform(-config.rotate, config.rotate) if config.rotate > 0 else 0.0
    if config.translate > 0:
        translate = rng.uniform(-config.translate, config.translate, size=2) * np.array([w, h])
    else:
        translate = np.zeros(2)

    if scale != 1.0 or angle != 0.0 or translate.any():
        matrix = _affine_matrix(scale, angle, translate, (w, h))
        pixels = cv2.warpAffine(pixels, matrix, (w, h), flags=cv2.INTER_LINEAR,
                                borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
        if landmarks is not None:
            landmarks = apply_affine_to_points(matrix, landmarks)
            inside = ((landmarks[:, 0] >= 0) & (landmarks[:, 0] < w)
                      & (landmarks[:, 1] >= 0) & (landmarks[:, 1] < h))
            valid = valid & inside
    else:
        pixels = pixels.copy()
        if landmarks is not None:
            landmarks = landmarks.copy()

    if config.occlusion_count > 0 and config.occlusion_size > 0:
        n_rects = int(rng.integers(0, config.occlusion_count + 1))
        for _ in range(n_rects):
            rw = int(rng.uniform(0.02, config.occlusion_size) * w)
            rh = int(rng.uniform(0.02, config.occlusion_size) * h)
            if rw < 1 or rh < 1:
                continue
            x0 = int(rng.integers(0, max(1, w - rw)))
            y0 = int(rng.integers(0, max(1, h - rh)))
            pixels[y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.0, 1.0)

    if config.blur_prob > 0 and rng.uniform() < config.blur_prob:
        k = int(rng.choice(np.asarray(config.blur_kernels)))
        pixels = cv2.GaussianBlur(pixels, (k, k), 0)

    return replace(sample, pixels=pixels, landmarks=landmarks, landmark_valid=valid)


def _balance(ids: list, count: int, rng: np.random.Generator) -> list:
    """Repeat ids to the requested length: whole repeats plus a random
    no-replacement remainder, then shuffle. Per-id counts differ by <= 1."""
    n = len(ids)
    reps, rem = divmod(count, n)
    seq = list(ids) * reps
    if rem:
        seq += [ids[i] for i in rng.choice(n, size=rem, replace=False)]
    order = rng.permutation(len(seq))
    return [seq[i] for i in order]


def oversample_source(source_ids: list, target_count: int,
                      rng: np.random.Generator) -> list:
    """One epoch's source index sequence, stretched to the target count so
    both domains feed the domain classifier equally often."""
    if not source_ids:
        raise DataError("cannot oversample an empty source set")
    if target_count < len(source_ids):
        raise DataError(
            f"target_count {target_count} is smaller than the source set "
            f"({len(source_ids)})"
        )
    return _balance(source_ids, target_count, rng)
