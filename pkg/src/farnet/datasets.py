"""Dataset ingestion for the cephalometric, hand, and spine corpora.

Expected layouts under each dataset root (documented in the README):

  cephalometric/
    images/<id>.(bmp|png|jpg)
    annotations/annotator1/<id>.txt    19 lines of "x,y"
    annotations/annotator2/<id>.txt    ground truth = per-landmark average
  hand/
    images/<id>.(png|jpg)
    annotations/<id>.txt               37 lines of "x,y"
  spine/
    images/<id>.(png|jpg)
    annotations/<id>.txt               68 lines of "x,y" (17 vertebrae x 4 corners)

Splits: the cephalometric corpus follows the 150 train / 150 test1 / 100
test2 protocol over lexicographically sorted ids (scaled proportionally for
corpora of other sizes). Hand uses round-robin three-fold assignment
(sorted index modulo 3). Spine draws a seeded random permutation and holds
out 50 test images (scaled for other corpus sizes).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigError, DataError, ParameterError
from .heatmaps import Frame, LandmarkSet
from .metrics import PixelSpacing, SpacingMode
from .synthetic import generate_synthetic

__all__ = [
    "DatasetKind",
    "AugmentConfig",
    "DatasetSpec",
    "Sample",
    "load_dataset",
    "load_cephalometric",
    "load_hand",
    "load_spine",
    "flag_out_of_bounds",
    "K_BY_KIND",
    "DEFAULT_SDR_RADII",
]

log = logging.getLogger(__name__)


class DatasetKind(str, Enum):
    CEPHALOMETRIC = "cephalometric"
    HAND = "hand"
    SPINE = "spine"
    SYNTHETIC = "synthetic"


K_BY_KIND = {
    DatasetKind.CEPHALOMETRIC: 19,
    DatasetKind.HAND: 37,
    DatasetKind.SPINE: 68,
}

# radii (mm) at which detection rates are reported; spine reports
# fraction-of-image metrics instead
DEFAULT_SDR_RADII = {
    DatasetKind.CEPHALOMETRIC: (2.0, 2.5, 3.0, 4.0),
    DatasetKind.HAND: (2.0, 4.0, 10.0),
    DatasetKind.SPINE: (),
    DatasetKind.SYNTHETIC: (1.0, 2.0, 4.0),
}

CEPH_MM_PER_PX = 0.1
NOMINAL_WRIST_MM = 50.0


@dataclass(frozen=True)
class AugmentConfig:
    """Random affine + intensity jitter bounds; all draws seed-deterministic."""

    enabled: bool = False
    max_translate_frac: float = 0.03
    max_rotate_deg: float = 15.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    intensity_jitter: float = 0.10
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= 1 <= hi):
            raise ParameterError(f"scale_range must satisfy 0 < lo <= 1 <= hi, got {self.scale_range}")
        if self.max_translate_frac < 0 or self.max_rotate_deg < 0 or self.intensity_jitter < 0:
            raise ParameterError("augmentation bounds must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (
            self.max_translate_frac == 0
            and self.max_rotate_deg == 0
            and self.scale_range == (1.0, 1.0)
            and self.intensity_jitter == 0
        )


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset lives and how to slice and feed it."""

    kind: DatasetKind = DatasetKind.SYNTHETIC
    root_path: str = ""
    split: str = "train"
    input_size: tuple[int, int] = (128, 128)   # (W, H)
    k_landmarks: int = 4
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    fold: int = 0                               # hand three-fold index
    seed: int = 0                               # spine split / synthetic generation
    n_synthetic: int = 4
    wrist_indices: tuple[int, int] = (0, 4)
    nominal_wrist_mm: float = NOMINAL_WRIST_MM

    def __post_init__(self):
        object.__setattr__(self, "kind", DatasetKind(self.kind))
        w, h = self.input_size
        if w % 32 or h % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {w}x{h}")
        expected = K_BY_KIND.get(self.kind)
        if expected is not None and self.k_landmarks != expected:
            raise ConfigError(
                f"{self.kind.value} has {expected} landmarks, spec says {self.k_landmarks}"
            )
        if self.k_landmarks < 1:
            raise ConfigError(f"k_landmarks must be >= 1, got {self.k_landmarks}")
        if self.kind == DatasetKind.HAND and not 0 <= self.fold <= 2:
            raise ConfigError(f"hand fold must be 0..2, got {self.fold}")

    def with_(self, **kwargs) -> "DatasetSpec":
        return replace(self, **kwargs)


@dataclass
class Sample:
    """One image with its ground truth in the original pixel frame.

    `image` is a 3xHxW float32 tensor in [0, 1] (grayscale replicated).
    """

    image: torch.Tensor
    landmarks_original: LandmarkSet
    original_size: tuple[int, int]   # (W, H)
    spacing: PixelSpacing
    id: str


def flag_out_of_bounds(landmarks: LandmarkSet, size: tuple[int, int]) -> LandmarkSet:
    """Mark landmarks outside [0, W-1] x [0, H-1] as not visible."""
    w, h = size
    pts = landmarks.points
    inside = (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)
    vis = inside if landmarks.visibility is None else landmarks.visibility & inside
    return LandmarkSet(pts, landmarks.frame, landmarks.confidences, vis)


def _load_image(path: Path) -> torch.Tensor:
    """Read a radiograph as a 3xHxW [0,1] tensor (grayscale replicated)."""
    from PIL import Image

    try:
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(np.repeat(gray[None], 3, axis=0))


def _read_annotation(path: Path, k: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing annotation file {path}")
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                break  # trailing non-coordinate metadata
            try:
                points.append((float(parts[0]), float(parts[1])))
            except ValueError:
                break
    if len(points) > k:
        log.warning("%s: %d coordinate lines, using the first %d", path, len(points), k)
        points = points[:k]
    if len(points) != k:
        raise DataError(f"{path}: expected {k} landmarks, found {len(points)}")
    return np.array(points, dtype=np.float64)


def _image_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"missing image directory {directory}")
    files = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in (".bmp", ".png", ".jpg", ".jpeg")
    )
    if not files:
        raise DataError(f"no images found under {directory}")
    return files


def _protocol_slices(n: int, proto: tuple[int, ...]) -> list[range]:
    """Split n ids into consecutive chunks proportional to the protocol counts."""
    total = sum(proto)
    if n == total:
        bounds = np.cumsum((0,) + proto)
    else:
        bounds = np.rint(np.cumsum((0,) + proto) * n / total).astype(int)
    return [range(int(bounds[i]), int(bounds[i + 1])) for i in range(len(proto))]


def load_cephalometric(spec: DatasetSpec) -> list[Sample]:
    """Lateral skull radiographs, two annotators averaged, 0.1 mm/px."""
    root = Path(spec.root_path)
    files = _image_files(root / "images")
    tr, t1, t2 = _protocol_slices(len(files), (150, 150, 100))
    chosen = {"train": tr, "test1": t1, "val": t1, "test2": t2, "test": t2}.get(spec.split)
    if chosen is None:
        raise ConfigError(f"cephalometric split must be train/test1/test2, got {spec.split!r}")
    samples = []
    for idx in chosen:
        path = files[idx]
        a = _read_annotation(root / "annotations" / "annotator1" / f"{path.stem}.txt", 19)
        b = _read_annotation(root / "annotations" / "annotator2" / f"{path.stem}.txt", 19)
        image = _load_image(path)
        h, w = image.shape[-2:]
        landmarks = flag_out_of_bounds(
            LandmarkSet((a + b) / 2.0, Frame.ORIGINAL), (w, h)
        )
        samples.append(
            Sample(
                image=image,
                landmarks_original=landmarks,
                original_size=(w, h),
                spacing=PixelSpacing(SpacingMode.FIXED_MM_PER_PX, mm_per_px=CEPH_MM_PER_PX),
                id=path.stem,
            )
        )
    return samples


def load_hand(spec: DatasetSpec) -> list[Sample]:
    """Hand radiographs with wrist-width-derived per-image mm/px.

    Fold assignment: sorted file index modulo 3 equals `spec.fold` -> test,
    everything else -> train (roughly 600/300 for a 900-image corpus).
    """
    root = Path(spec.root_path)
    files = _image_files(root / "images")
    if spec.split == "train":
        chosen = [i for i in range(len(files)) if i % 3 != spec.fold]
    elif spec.split in ("test", "val"):
        chosen = [i for i in range(len(files)) if i % 3 == spec.fold]
    else:
        raise ConfigError(f"hand split must be train/test, got {spec.split!r}")
    wi, wj = spec.wrist_indices
    if not (0 <= wi < 37 and 0 <= wj < 37) or wi == wj:
        raise DataError(f"wrist landmark indices {spec.wrist_indices} invalid for 37 landmarks")
    samples = []
    for idx in chosen:
        path = files[idx]
        pts = _read_annotation(root / "annotations" / f"{path.stem}.txt", 37)
        wrist_px = float(np.linalg.norm(pts[wi] - pts[wj]))
        if wrist_px <= 0:
            raise DataError(f"{path.stem}: wrist landmarks coincide, cannot derive scale")
        image = _load_image(path)
        h, w = image.shape[-2:]
        samples.append(
            Sample(
                image=image,
                landmarks_original=flag_out_of_bounds(LandmarkSet(pts, Frame.ORIGINAL), (w, h)),
                original_size=(w, h),
                spacing=PixelSpacing(
                    SpacingMode.WRIST_WIDTH_NORMALIZED,
                    mm_per_px=spec.nominal_wrist_mm / wrist_px,
                    reference=wrist_px,
                ),
                id=path.stem,
            )
        )
    return samples


def load_spine(spec: DatasetSpec) -> list[Sample]:
    """Spinal radiographs, 68 vertebra corners, seeded random train/test split."""
    root = Path(spec.root_path)
    files = _image_files(root / "images")
    n = len(files)
    n_test = 50 if n == 481 else max(1, round(n * 50 / 481))
    order = np.random.default_rng(spec.seed).permutation(n)
    if spec.split == "train":
        chosen = sorted(order[: n - n_test])
    elif spec.split in ("test", "val"):
        chosen = sorted(order[n - n_test :])
    else:
        raise ConfigError(f"spine split must be train/test, got {spec.split!r}")
    samples = []
    for idx in chosen:
        path = files[idx]
        pts = _read_annotation(root / "annotations" / f"{path.stem}.txt", 68)
        image = _load_image(path)
        h, w = image.shape[-2:]
        samples.append(
            Sample(
                image=image,
                landmarks_original=flag_out_of_bounds(LandmarkSet(pts, Frame.ORIGINAL), (w, h)),
                original_size=(w, h),
                spacing=PixelSpacing(SpacingMode.FRACTION_OF_IMAGE),
                id=path.stem,
            )
        )
    return samples


def load_dataset(spec: DatasetSpec) -> list[Sample]:
    """Dispatch to the loader for spec.kind (synthetic data is generated)."""
    if spec.kind == DatasetKind.CEPHALOMETRIC:
        return load_cephalometric(spec)
    if spec.kind == DatasetKind.HAND:
        return load_hand(spec)
    if spec.kind == DatasetKind.SPINE:
        return load_spine(spec)
    # synthetic: same seeded pool for every split; train/test share images by
    # design (the desk-scale suite measures overfitting capacity)
    return generate_synthetic(spec.seed, spec.n_synthetic, spec.k_landmarks, spec.input_size)
