"""Input preparation (resize + coordinate mapping) and joint augmentation.

Augmentation applies one random affine (translate, rotate about the image
center, isotropic scale) to the image and its landmarks together, plus a
multiplicative intensity jitter to the image alone. All randomness comes
from a per-sample generator seeded by (config seed, crc32 of the sample id,
stream), so repeated runs are identical and samples are independent.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .datasets import AugmentConfig, DatasetSpec, Sample, flag_out_of_bounds
from .heatmaps import Frame, FrameTransform, LandmarkSet, map_coordinates

__all__ = ["PreparedSample", "prepare_input", "augment", "IMAGENET_MEAN", "IMAGENET_STD"]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class PreparedSample:
    """Network-ready image plus the transform back to the original frame."""

    image: torch.Tensor              # 3 x h x w, float32
    landmarks: LandmarkSet           # NET_INPUT frame
    transform: FrameTransform        # ORIGINAL -> NET_INPUT
    sample: Sample

    @property
    def net_size(self) -> tuple[int, int]:
        h, w = self.image.shape[-2:]
        return (w, h)


def prepare_input(sample: Sample, spec: DatasetSpec, normalize: str = "unit") -> PreparedSample:
    """Resize to spec.input_size and map landmarks without quantization.

    normalize: "unit" keeps the [0,1] image as-is (random-init backbones);
    "imagenet" standardizes per channel with the usual pretrained statistics.
    """
    w, h = spec.input_size
    transform = FrameTransform(
        sample.original_size, (w, h), Frame.ORIGINAL, Frame.NET_INPUT
    )
    image = sample.image
    if tuple(image.shape[-2:]) != (h, w):
        image = F.interpolate(
            image[None].float(), size=(h, w), mode="bilinear", align_corners=False
        )[0]
    else:
        image = image.float()
    if normalize == "imagenet":
        mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
        image = (image - mean) / std
    elif normalize != "unit":
        raise ValueError(f"normalize must be 'unit' or 'imagenet', got {normalize!r}")
    landmarks = map_coordinates(sample.landmarks_original, transform)
    return PreparedSample(image=image, landmarks=landmarks, transform=transform, sample=sample)


def _affine_params(config: AugmentConfig, rng: np.random.Generator, size: tuple[int, int]):
    w, h = size
    tx = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * w
    ty = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * h
    theta = np.deg2rad(rng.uniform(-config.max_rotate_deg, config.max_rotate_deg))
    scale = rng.uniform(*config.scale_range)
    return tx, ty, theta, scale


def _forward_matrix(theta: float, scale: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return scale * np.array([[c, -s], [s, c]])  # acts on (x, y)


def augment(sample: Sample, config: AugmentConfig, stream: int = 0) -> Sample:
    """Jointly transform image and landmarks; identity bounds return `sample`.

    The affine maps p -> A (p - center) + center + t with A = scale * rotation
    and center the pixel-center image midpoint. Landmarks pushed outside the
    frame are flagged not-visible, never dropped. `stream` decorrelates
    repeated draws for the same sample (the trainer passes the epoch).
    """
    if not config.enabled or config.is_identity:
        return sample
    rng = np.random.default_rng((config.seed, zlib.crc32(sample.id.encode()), stream))
    w, h = sample.original_size
    tx, ty, theta, scale = _affine_params(config, rng, (w, h))
    jitter = rng.uniform(-config.intensity_jitter, config.intensity_jitter)

    fwd = _forward_matrix(theta, scale)
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    shift = np.array([tx, ty])

    pts = sample.landmarks_original.points
    new_pts = (fwd @ (pts - center).T).T + center + shift

    # scipy samples output[o] = input[M @ o + off] in (y, x) order, so feed
    # it the inverse map: p = A^-1 (p' - center - t) + center
    inv = np.linalg.inv(fwd)
    inv_yx = inv[::-1, ::-1]
    off_xy = center - inv @ (center + shift)
    image = sample.image.numpy()
    out = np.stack(
        [
            ndimage.affine_transform(
                ch, inv_yx, offset=off_xy[::-1], order=1, mode="constant", cval=0.0
            )
            for ch in image
        ]
    )
    out = np.clip(out * (1.0 + jitter), 0.0, 1.0).astype(np.float32)

    landmarks = flag_out_of_bounds(
        LandmarkSet(new_pts, Frame.ORIGINAL, sample.landmarks_original.confidences,
                    sample.landmarks_original.visibility),
        (w, h),
    )
    return Sample(
        image=torch.from_numpy(out),
        landmarks_original=landmarks,
        original_size=sample.original_size,
        spacing=sample.spacing,
        id=sample.id,
    )
