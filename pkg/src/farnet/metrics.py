"""Evaluation metrics: radial errors, MRE, SDR, and the spine coordinate metrics.

Conventions, fixed here for reproducibility:
  - SDR counts errors with err <= radius as successful (boundary inclusive).
  - MRE's spread is the population standard deviation (ddof=0).
  - The image-fraction MSE normalizes x by image width and y by image height,
    then averages squared differences over every coordinate of every landmark
    of every image; a uniform 10 px per-axis error on a 100x100 image yields
    exactly 0.010.
  - The correlation coefficient is computed over the flattened normalized
    coordinate vectors (all images, landmarks, and axes in one vector).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ComparisonError, ParameterError
from .heatmaps import LandmarkSet

__all__ = [
    "SpacingMode",
    "PixelSpacing",
    "EvalReport",
    "radial_errors",
    "mre",
    "sdr",
    "spine_metrics",
    "pearson",
]


class SpacingMode(str, Enum):
    FIXED_MM_PER_PX = "fixed_mm_per_px"
    WRIST_WIDTH_NORMALIZED = "wrist_width_normalized"
    FRACTION_OF_IMAGE = "fraction_of_image"


@dataclass(frozen=True)
class PixelSpacing:
    """How pixel distances convert to millimeters for one image.

    For wrist-width normalization the per-image mm_per_px is computed at load
    time (nominal wrist mm / measured wrist px) and stored here; `reference`
    keeps the measured wrist width in px for inspection. In fraction-of-image
    mode distances stay in pixels (the spine metrics normalize separately).
    """

    mode: SpacingMode
    mm_per_px: float | None = None
    reference: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SpacingMode(self.mode))
        if self.mode in (SpacingMode.FIXED_MM_PER_PX, SpacingMode.WRIST_WIDTH_NORMALIZED):
            if self.mm_per_px is None or self.mm_per_px <= 0:
                raise ParameterError(f"{self.mode.value} requires a positive mm_per_px")

    @property
    def factor(self) -> float:
        """Multiplier taking a pixel distance to the reported unit."""
        if self.mode == SpacingMode.FRACTION_OF_IMAGE:
            return 1.0
        return float(self.mm_per_px)


def radial_errors(pred: LandmarkSet, gt: LandmarkSet, spacing: PixelSpacing) -> np.ndarray:
    """Per-landmark Euclidean distance, converted via the spacing mode."""
    if pred.k != gt.k:
        raise ComparisonError(f"landmark counts differ: {pred.k} vs {gt.k}")
    if pred.frame != gt.frame:
        raise ComparisonError(f"frames differ: {pred.frame.value} vs {gt.frame.value}")
    dists = np.linalg.norm(pred.points - gt.points, axis=1)
    return dists * spacing.factor


def mre(errors: Sequence[float]) -> tuple[float, float]:
    """Mean radial error and its population standard deviation."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ParameterError("cannot compute MRE of an empty error list")
    return float(errors.mean()), float(errors.std(ddof=0))


def sdr(errors: Sequence[float], radii: Sequence[float]) -> dict[float, float]:
    """Percent of errors within each radius (err <= radius counts as a hit)."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ParameterError("cannot compute SDR of an empty error list")
    radii = list(radii)
    if not radii or any(r <= 0 for r in radii) or sorted(radii) != radii:
        raise ParameterError(f"radii must be positive and sorted, got {radii}")
    return {float(r): float(100.0 * np.mean(errors <= r)) for r in radii}


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two flat vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ComparisonError(f"vector lengths differ: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ParameterError("correlation needs at least two points")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        raise ParameterError("correlation undefined for a constant vector")
    return float((da * db).sum() / denom)


def spine_metrics(
    pred_sets: Sequence[LandmarkSet],
    gt_sets: Sequence[LandmarkSet],
    image_sizes: Sequence[tuple[int, int]],
) -> tuple[float, float]:
    """Image-fraction MSE and Pearson correlation over normalized coordinates.

    Coordinates of each image are normalized per axis by its (width, height),
    then all images' landmark coordinates are flattened together.
    """
    if not (len(pred_sets) == len(gt_sets) == len(image_sizes)):
        raise ComparisonError(
            f"set counts differ: {len(pred_sets)} pred, {len(gt_sets)} gt, {len(image_sizes)} sizes"
        )
    if not pred_sets:
        raise ParameterError("no prediction sets given")
    pred_norm, gt_norm = [], []
    for pred, gt, (w, h) in zip(pred_sets, gt_sets, image_sizes):
        if pred.k != gt.k:
            raise ComparisonError(f"landmark counts differ: {pred.k} vs {gt.k}")
        scale = np.array([w, h], dtype=np.float64)
        pred_norm.append(pred.points / scale)
        gt_norm.append(gt.points / scale)
    p = np.concatenate(pred_norm).ravel()
    g = np.concatenate(gt_norm).ravel()
    mse_fraction = float(np.mean((p - g) ** 2))
    rho = 1.0 if np.array_equal(p, g) else pearson(p, g)
    return mse_fraction, rho


@dataclass
class EvalReport:
    """Aggregated evaluation results for one dataset split."""

    mre_mm: float
    std_mm: float
    sdr: dict[float, float]
    per_landmark: list[float] = field(default_factory=list)
    mse_fraction: float | None = None
    pearson_rho: float | None = None
    n_images: int = 0
    unit: str = "mm"

    def to_text(self) -> str:
        lines = [
            f"images evaluated : {self.n_images}",
            f"MRE ({self.unit})         : {self.mre_mm:.4f} +/- {self.std_mm:.4f}",
        ]
        for radius, pct in sorted(self.sdr.items()):
            lines.append(f"SDR @ {radius:g} {self.unit}     : {pct:.2f}%")
        if self.mse_fraction is not None:
            lines.append(f"MSE (image frac) : {self.mse_fraction:.6f}")
        if self.pearson_rho is not None:
            lines.append(f"Pearson rho      : {self.pearson_rho:.4f}")
        if self.per_landmark:
            lines.append("per-landmark mean error:")
            for idx, err in enumerate(self.per_landmark):
                lines.append(f"  landmark {idx:3d}  : {err:.4f}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        """Machine-readable key=value lines."""
        pairs: list[tuple[str, object]] = [
            ("n_images", self.n_images),
            ("unit", self.unit),
            ("mre", f"{self.mre_mm:.10g}"),
            ("std", f"{self.std_mm:.10g}"),
        ]
        for radius, pct in sorted(self.sdr.items()):
            pairs.append((f"sdr_{radius:g}", f"{pct:.10g}"))
        if self.mse_fraction is not None:
            pairs.append(("mse_fraction", f"{self.mse_fraction:.10g}"))
        if self.pearson_rho is not None:
            pairs.append(("pearson_rho", f"{self.pearson_rho:.10g}"))
        for idx, err in enumerate(self.per_landmark):
            pairs.append((f"landmark_{idx}_mean", f"{err:.10g}"))
        return "\n".join(f"{k}={v}" for k, v in pairs)

    def save(self, directory: str | Path, stem: str = "report") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.txt").write_text(self.to_text() + "\n", encoding="utf-8")
        (directory / f"{stem}.kv").write_text(self.to_kv() + "\n", encoding="utf-8")
