"""Seeded synthetic landmark images for self-contained training and tests.

Each image carries k small analytic patterns (gaussian blob, ring, cross,
diamond, cycling by landmark index so every landmark looks different) at
random sub-pixel centers. The centers are the ground-truth landmarks, so a
detector trained on these images has an exact, known target.
"""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import GenerationError, ParameterError
from .heatmaps import Frame, LandmarkSet
from .metrics import PixelSpacing, SpacingMode

__all__ = ["generate_synthetic", "render_pattern", "PATTERN_NAMES"]

PATTERN_NAMES = ("blob", "ring", "cross", "diamond")

_MARGIN = 12.0          # keeps whole patterns inside the frame
_MIN_SEPARATION = 14.0  # centers at least this far apart
_MAX_TRIES = 200


def render_pattern(kind: str, size: tuple[int, int], center: tuple[float, float]) -> np.ndarray:
    """Evaluate one pattern on an (H, W) grid, peak amplitude about 1."""
    w, h = size
    cx, cy = center
    xs = np.arange(w, dtype=np.float64)[None, :] - cx
    ys = np.arange(h, dtype=np.float64)[:, None] - cy
    r2 = xs**2 + ys**2
    if kind == "blob":
        return np.exp(-r2 / (2 * 2.5**2))
    if kind == "ring":
        r = np.sqrt(r2)
        return np.exp(-((r - 4.5) ** 2) / (2 * 1.2**2))
    if kind == "cross":
        arm = np.minimum(np.abs(xs), np.abs(ys))
        return np.exp(-(arm**2) / (2 * 1.1**2)) * np.exp(-r2 / (2 * 5.0**2))
    if kind == "diamond":
        l1 = np.abs(xs) + np.abs(ys)
        return np.exp(-((l1 - 5.0) ** 2) / (2 * 1.1**2))
    raise ParameterError(f"unknown pattern {kind!r}")


def _place_centers(
    rng: np.random.Generator, k: int, size: tuple[int, int]
) -> np.ndarray:
    w, h = size
    lo = _MARGIN
    hi_x, hi_y = w - 1 - _MARGIN, h - 1 - _MARGIN
    if hi_x <= lo or hi_y <= lo:
        raise GenerationError(f"image {w}x{h} too small for margin {_MARGIN}")
    centers: list[tuple[float, float]] = []
    for _ in range(k):
        for _ in range(_MAX_TRIES):
            cand = (rng.uniform(lo, hi_x), rng.uniform(lo, hi_y))
            if all(np.hypot(cand[0] - cx, cand[1] - cy) >= _MIN_SEPARATION for cx, cy in centers):
                centers.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place {k} patterns at least {_MIN_SEPARATION} px apart on {w}x{h}"
            )
    return np.array(centers, dtype=np.float64)


def generate_synthetic(seed: int, n_images: int, k: int, image_size: tuple[int, int]):
    """Render `n_images` samples of k patterns each; deterministic under seed.

    Spacing is fixed at 1 mm/px so reported millimeter errors read as pixels.
    Returns a list of data samples (import cycle keeps the type out of the
    signature; see `datasets.Sample`).
    """
    from .datasets import Sample

    w, h = image_size
    if w % 32 or h % 32:
        raise ParameterError(f"image size must be divisible by 32, got {w}x{h}")
    if n_images < 1 or k < 1:
        raise ParameterError("need at least one image and one landmark")
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(n_images):
        centers = _place_centers(rng, k, image_size)
        canvas = np.zeros((h, w), dtype=np.float64)
        for j, (cx, cy) in enumerate(centers):
            pattern = PATTERN_NAMES[j % len(PATTERN_NAMES)]
            canvas += render_pattern(pattern, image_size, (cx, cy))
        canvas *= rng.uniform(0.8, 1.0)          # per-image brightness
        canvas += rng.uniform(0.0, 0.05)         # per-image background level
        canvas = np.clip(canvas, 0.0, 1.0).astype(np.float32)
        image = torch.from_numpy(np.repeat(canvas[None], 3, axis=0))
        samples.append(
            Sample(
                image=image,
                landmarks_original=LandmarkSet(centers, Frame.ORIGINAL),
                original_size=(w, h),
                spacing=PixelSpacing(SpacingMode.FIXED_MM_PER_PX, mm_per_px=1.0),
                id=f"syn{idx:03d}",
            )
        )
    return samples
