"""MRE/SDR metrics in millimeters, subdomain breakdown, report artifacts.

Radial errors are computed in original-resolution pixel space (where the
physical spacing is defined), after predictions have been mapped back from
the model input resolution. The SDR boundary is inclusive: error <= radius
counts as a success.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

DEFAULT_RADII = (2.0, 2.5, 3.0, 4.0)


@dataclass
class EvalReport:
    mre_mm: float
    sdr: dict            # radius_mm -> percentage in [0, 100]
    per_landmark_mre: np.ndarray
    n_images: int
    per_subdomain: dict | None = None  # tag -> EvalReport

    def to_dict(self):
        out = {
            "mre_mm": float(self.mre_mm),
            "sdr": {str(r): float(v) for r, v in self.sdr.items()},
            "per_landmark_mre": [float(v) for v in self.per_landmark_mre],
            "n_images": int(self.n_images),
        }
        if self.per_subdomain:
            out["per_subdomain"] = {k: v.to_dict() for k, v in self.per_subdomain.items()}
        return out

    @staticmethod
    def from_dict(data):
        sub = None
        if data.get("per_subdomain"):
            sub = {k: EvalReport.from_dict(v) for k, v in data["per_subdomain"].items()}
        return EvalReport(
            mre_mm=data["mre_mm"],
            sdr={float(r): v for r, v in data["sdr"].items()},
            per_landmark_mre=np.asarray(data["per_landmark_mre"], dtype=np.float64),
            n_images=data["n_images"],
            per_subdomain=sub,
        )


def radial_errors(preds: np.ndarray, gts: np.ndarray, spacing_mm) -> np.ndarray:
    """Per-landmark Euclidean error in mm; inputs in original-resolution px."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape:
        raise InputError(f"shape mismatch {preds.shape} vs {gts.shape}")
    sx, sy = spacing_mm
    dx = (preds[:, 0] - gts[:, 0]) * sx
    dy = (preds[:, 1] - gts[:, 1]) * sy
    return np.sqrt(dx * dx + dy * dy)


def aggregate(errors_mm, radii=DEFAULT_RADII, mre_average="pooled") -> EvalReport:
    """Combine per-image error vectors into MRE and SDR-at-radius.

    errors_mm: sequence of (L,) arrays, one per image.
    mre_average: "pooled" averages all landmark errors in one pool;
    "per-image" averages per-image means.
    """
    errors = np.asarray(list(errors_mm), dtype=np.float64)
    if errors.size == 0:
        raise InputError("aggregate requires at least one image")
    if errors.ndim == 1:
        errors = errors[None, :]
    if mre_average == "per-image":
        mre = float(errors.mean(axis=1).mean())
    else:
        mre = float(errors.mean())
    flat = errors.reshape(-1)
    sdr = {float(r): float(100.0 * np.count_nonzero(flat <= r) / flat.size)
           for r in radii}
    return EvalReport(
        mre_mm=mre,
        sdr=sdr,
        per_landmark_mre=errors.mean(axis=0),
        n_images=errors.shape[0],
    )


def subdomain_report(samples, preds_orig, radii=DEFAULT_RADII,
                     mre_average="pooled") -> EvalReport:
    """Metrics overall and grouped by each sample's subdomain tag.

    samples: ImageSamples carrying landmarks (original resolution);
    preds_orig: aligned list of (L, 2) predictions in original pixels.
    Samples without a tag fall into group "all".
    """
    if len(samples) != len(preds_orig):
        raise InputError("samples and predictions are not aligned")
    all_errors = []
    groups: dict = {}
    for sample, pred in zip(samples, preds_orig):
        err = radial_errors(pred, sample.landmarks, sample.spacing_mm)
        all_errors.append(err)
        groups.setdefault(sample.subdomain or "all", []).append(err)
    report = aggregate(all_errors, radii, mre_average)
    if set(groups) != {"all"}:
        report.per_subdomain = {
            tag: aggregate(errs, radii, mre_average)
            for tag, errs in sorted(groups.items())
        }
    return report


@dataclass
class HistogramReport:
    bin_edges: np.ndarray
    hist_a: np.ndarray  # normalized to sum 1
    hist_b: np.ndarray
    mean_a: float
    mean_b: float
    labels: tuple = ("a", "b")


def histogram_report(samples_a, samples_b, bins: int = 256,
                     labels=("source", "target")) -> HistogramReport:
    """Normalized intensity histograms of two datasets over [0, 1]."""
    if not samples_a or not samples_b:
        raise InputError("histogram_report requires nonempty datasets")
    va = np.concatenate([s.pixels.reshape(-1) for s in samples_a])
    vb = np.concatenate([s.pixels.reshape(-1) for s in samples_b])
    edges = np.linspace(0.0, 1.0, bins + 1)
    ha, _ = np.histogram(va, bins=edges)
    hb, _ = np.histogram(vb, bins=edges)
    return HistogramReport(
        bin_edges=edges,
        hist_a=ha / max(ha.sum(), 1),
        hist_b=hb / max(hb.sum(), 1),
        mean_a=float(va.mean()),
        mean_b=float(vb.mean()),
        labels=tuple(labels),
    )


def save_histogram_artifacts(report: HistogramReport, out_prefix: str):
    """Write <prefix>.png plot and <prefix>.csv table."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    centers = (report.bin_edges[:-1] + report.bin_edges[1:]) / 2
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(centers, report.hist_a, label=report.labels[0])
    ax.plot(centers, report.hist_b, label=report.labels[1])
    ax.set_xlabel("intensity")
    ax.set_ylabel("fraction of pixels")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_prefix + ".png", dpi=120)
    plt.close(fig)

    with open(out_prefix + ".csv", "w") as fh:
        fh.write(f"bin_center,{report.labels[0]},{report.labels[1]}\n")
        for c, a, b in zip(centers, report.hist_a, report.hist_b):
            fh.write(f"{c:.6f},{a:.8f},{b:.8f}\n")


def save_subdomain_plot(report: EvalReport, out_path: str, title="MRE by subdomain"):
    """Bar chart of per-subdomain MRE against the overall mean."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not report.per_subdomain:
        return
    tags = list(report.per_subdomain)
    values = [report.per_subdomain[t].mre_mm for t in tags]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(tags, values)
    ax.axhline(report.mre_mm, color="k", linestyle="--", label="overall")
    ax.set_ylabel("MRE (mm)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def format_table(reports: dict, radii=DEFAULT_RADII) -> str:
    """Fixed-width results table, one row per named report."""
    header = ["Method", "MRE"] + [f"{r:g}mm" for r in radii]
    rows = [header]
    for name, rep in reports.items():
        row = [name, f"{rep.mre_mm:.2f}"]
        for r in radii:
            row.append(f"{rep.sdr.get(float(r), float('nan')):.2f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
        if i == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines)


def save_report(report: EvalReport, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)


def load_report(path: str) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_dict(json.load(fh))
