"""Gaussian heatmap encoding/decoding and coordinate-frame bookkeeping.

Coordinates are sub-pixel (x, y) pairs, x along width, y along height.
A heatmap pixel (ix, iy) holds exp(-((ix-x)^2 + (iy-y)^2) / (2 sigma^2)),
so the ground-truth stack peaks at 1.0 on the landmark and decays radially.
No quantization is applied anywhere: coordinates are scaled between frames
as real numbers and only rounded implicitly by the argmax at decode time,
which sub-pixel refinement then undoes.

All functions here are pure and operate on numpy arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import FrameError, ParameterError, ShapeError

__all__ = [
    "Frame",
    "LandmarkSet",
    "HeatmapGrid",
    "HeatmapStack",
    "FrameTransform",
    "encode_heatmap_stack",
    "map_coordinates",
    "decode_landmarks",
    "subpixel_refine",
    "top_peaks",
    "write_heatmap_stack",
    "read_heatmap_stack",
    "write_landmark_file",
    "read_landmark_file",
]

HEATMAP_MAGIC = b"HMS1"


class Frame(str, Enum):
    """Coordinate frames a landmark set can live in."""

    ORIGINAL = "original"        # original image pixels
    NET_INPUT = "net_input"      # resized network-input pixels
    HEATMAP_L1 = "heatmap_L1"    # stride-2 heatmap grid
    HEATMAP_L0 = "heatmap_L0"    # stride-1 heatmap grid (same size as net input)


# net_input and heatmap_L0 share the same geometry (stride 1 w.r.t. the input),
# so stride-1 grids accept either tag.
_STRIDE1_FRAMES = {Frame.NET_INPUT, Frame.HEATMAP_L0}


@dataclass(frozen=True)
class LandmarkSet:
    """K ordered sub-pixel landmarks with a frame tag.

    points: (K, 2) float array of (x, y); confidences: optional (K,) in [0, 1];
    visibility: optional (K,) bool, False marks out-of-frame or low-confidence
    landmarks.
    """

    points: np.ndarray
    frame: Frame
    confidences: np.ndarray | None = None
    visibility: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeError(f"points must be (K, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ParameterError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "frame", Frame(self.frame))
        if self.confidences is not None:
            conf = np.asarray(self.confidences, dtype=np.float64)
            if conf.shape != (len(pts),):
                raise ShapeError("confidences must have one entry per landmark")
            object.__setattr__(self, "confidences", conf)
        if self.visibility is not None:
            vis = np.asarray(self.visibility, dtype=bool)
            if vis.shape != (len(pts),):
                raise ShapeError("visibility must have one entry per landmark")
            object.__setattr__(self, "visibility", vis)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def k(self) -> int:
        return len(self.points)

    def with_frame(self, frame: Frame) -> "LandmarkSet":
        """Retag without changing coordinates (frames of identical geometry)."""
        return replace(self, frame=Frame(frame))


@dataclass(frozen=True)
class HeatmapGrid:
    """Pixel grid a heatmap stack lives on, with its stride w.r.t. the net input."""

    width: int
    height: int
    stride_wrt_input: int = 1

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if self.stride_wrt_input not in (1, 2):
            raise ParameterError(f"grid stride must be 1 or 2, got {self.stride_wrt_input}")

    @property
    def frame(self) -> Frame:
        return Frame.HEATMAP_L0 if self.stride_wrt_input == 1 else Frame.HEATMAP_L1

    def accepts_frame(self, frame: Frame) -> bool:
        if self.stride_wrt_input == 1:
            return frame in _STRIDE1_FRAMES
        return frame == Frame.HEATMAP_L1

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.width - 1 and 0.0 <= y <= self.height - 1


@dataclass
class HeatmapStack:
    """K x H x W heatmap tensor plus the grid it lives on."""

    data: np.ndarray
    grid: HeatmapGrid

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"heatmap stack must be (K, H, W), got {self.data.shape}")
        k, h, w = self.data.shape
        if (h, w) != (self.grid.height, self.grid.width):
            raise ShapeError(
                f"stack {h}x{w} does not match grid {self.grid.height}x{self.grid.width}"
            )

    @property
    def k(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class FrameTransform:
    """Pure per-axis scaling between two frames (no rotation, no offset).

    Maps (x, y) -> (x * dst_w / src_w, y * dst_h / src_h) without rounding.
    """

    src_size: tuple[float, float]   # (W, H)
    dst_size: tuple[float, float]
    src_frame: Frame
    dst_frame: Frame

    def __post_init__(self):
        if min(self.src_size) <= 0 or min(self.dst_size) <= 0:
            raise ParameterError(
                f"frame sizes must be positive, got src={self.src_size} dst={self.dst_size}"
            )
        object.__setattr__(self, "src_frame", Frame(self.src_frame))
        object.__setattr__(self, "dst_frame", Frame(self.dst_frame))

    @property
    def scale(self) -> tuple[float, float]:
        return (self.dst_size[0] / self.src_size[0], self.dst_size[1] / self.src_size[1])

    def inverse(self) -> "FrameTransform":
        return FrameTransform(self.dst_size, self.src_size, self.dst_frame, self.src_frame)

    def apply(self, points: np.ndarray) -> np.ndarray:
        sx, sy = self.scale
        return np.asarray(points, dtype=np.float64) * np.array([sx, sy])


def encode_heatmap_stack(landmarks: LandmarkSet, grid: HeatmapGrid, sigma: float) -> HeatmapStack:
    """Render one Gaussian per landmark onto the grid.

    The Gaussian is unnormalized (value 1 at the landmark) and written to
    every pixel with no truncation radius, so out-of-grid landmarks still
    leave their tail. Coordinates are used as-is, sub-pixel included.
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if not grid.accepts_frame(landmarks.frame):
        raise FrameError(
            f"landmarks in frame {landmarks.frame.value!r} cannot be encoded on a "
            f"stride-{grid.stride_wrt_input} grid (expected {grid.frame.value!r})"
        )
    xs = np.arange(grid.width, dtype=np.float64)
    ys = np.arange(grid.height, dtype=np.float64)
    data = np.empty((landmarks.k, grid.height, grid.width), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    for idx, (x, y) in enumerate(landmarks.points):
        dx2 = (xs - x) ** 2
        dy2 = (ys - y) ** 2
        data[idx] = np.exp(-(dy2[:, None] + dx2[None, :]) * inv)
    return HeatmapStack(data, grid)


def map_coordinates(landmarks: LandmarkSet, transform: FrameTransform) -> LandmarkSet:
    """Scale landmarks into another frame without any rounding."""
    if landmarks.frame != transform.src_frame:
        raise FrameError(
            f"landmarks are in frame {landmarks.frame.value!r}, "
            f"transform expects {transform.src_frame.value!r}"
        )
    return LandmarkSet(
        points=transform.apply(landmarks.points),
        frame=transform.dst_frame,
        confidences=landmarks.confidences,
        visibility=landmarks.visibility,
    )


def subpixel_refine(channel: np.ndarray, peak: tuple[int, int]) -> tuple[float, float]:
    """Refine an argmax pixel to sub-pixel via a 3x3 second-order fit.

    `peak` is the (x, y) argmax pixel. Fits a 2-D quadratic to the 3x3
    neighborhood and returns peak + offset. Falls back to the integer peak
    when the local curvature is not negative definite (flat neighborhoods,
    border pixels). A concave fit whose vertex leaves the half-pixel box
    around the argmax contradicts the argmax itself, so each offset
    component is clamped strictly inside (-0.5, 0.5); rejecting instead
    would snap landmarks with near-half fractional parts a full half
    pixel away.
    """
    channel = np.asarray(channel, dtype=np.float64)
    x, y = int(peak[0]), int(peak[1])
    h, w = channel.shape
    if x < 1 or y < 1 or x > w - 2 or y > h - 2:
        return float(x), float(y)
    win = channel[y - 1 : y + 2, x - 1 : x + 2]
    gx = 0.5 * (win[1, 2] - win[1, 0])
    gy = 0.5 * (win[2, 1] - win[0, 1])
    dxx = win[1, 2] - 2.0 * win[1, 1] + win[1, 0]
    dyy = win[2, 1] - 2.0 * win[1, 1] + win[0, 1]
    dxy = 0.25 * (win[2, 2] - win[2, 0] - win[0, 2] + win[0, 0])
    det = dxx * dyy - dxy * dxy
    if dxx >= 0 or dyy >= 0 or det <= 0:
        return float(x), float(y)
    bound = np.nextafter(0.5, 0.0)  # largest double strictly below 0.5
    off_x = float(np.clip(-(dyy * gx - dxy * gy) / det, -bound, bound))
    off_y = float(np.clip(-(dxx * gy - dxy * gx) / det, -bound, bound))
    return x + off_x, y + off_y


def decode_landmarks(stack: HeatmapStack, refine: bool = True, min_peak: float = 1e-6) -> LandmarkSet:
    """Recover one landmark per channel from its global maximum.

    Each channel encodes exactly one landmark, so decoding reduces to the
    per-channel argmax, optionally refined to sub-pixel. The peak value
    becomes the landmark confidence. Channels whose maximum falls below
    `min_peak` are returned at their argmax with confidence 0 and
    visibility False instead of raising.
    """
    if stack.k < 1:
        raise ParameterError("heatmap stack has no channels")
    points = np.empty((stack.k, 2), dtype=np.float64)
    confidences = np.empty(stack.k, dtype=np.float64)
    visibility = np.ones(stack.k, dtype=bool)
    h, w = stack.grid.height, stack.grid.width
    for idx in range(stack.k):
        channel = stack.data[idx]
        flat = int(np.argmax(channel))
        py, px = divmod(flat, w)
        value = float(channel[py, px])
        if value < min_peak:
            points[idx] = (px, py)
            confidences[idx] = 0.0
            visibility[idx] = False
            continue
        if refine:
            points[idx] = subpixel_refine(channel, (px, py))
        else:
            points[idx] = (float(px), float(py))
        confidences[idx] = value
    return LandmarkSet(points, stack.grid.frame, confidences=confidences, visibility=visibility)


def top_peaks(channel: np.ndarray, n: int, min_value: float = 0.0) -> list[tuple[int, int, float]]:
    """Diagnostic top-N local maxima of one channel as (x, y, value), best first.

    Decoding proper uses the per-channel global maximum; this exists to inspect
    multi-modal predictions.
    """
    channel = np.asarray(channel, dtype=np.float64)
    local_max = ndimage.maximum_filter(channel, size=3, mode="nearest") == channel
    ys, xs = np.nonzero(local_max & (channel > min_value))
    order = np.argsort(channel[ys, xs])[::-1][:n]
    return [(int(xs[i]), int(ys[i]), float(channel[ys[i], xs[i]])) for i in order]


def write_heatmap_stack(stack: HeatmapStack, path: str | Path) -> None:
    """Dump a stack as little-endian float32: 16-byte header (magic, K, H, W), then data."""
    k, h, w = stack.data.shape
    with open(path, "wb") as fh:
        fh.write(HEATMAP_MAGIC)
        fh.write(struct.pack("<III", k, h, w))
        fh.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())


def read_heatmap_stack(path: str | Path, stride_wrt_input: int = 1) -> HeatmapStack:
    """Read a stack written by `write_heatmap_stack`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != HEATMAP_MAGIC:
            raise ParameterError(f"not a heatmap stack file (magic {magic!r})")
        k, h, w = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(k * h * w * 4), dtype="<f4").reshape(k, h, w)
    return HeatmapStack(data.astype(np.float32), HeatmapGrid(w, h, stride_wrt_input))


def write_landmark_file(landmarks: LandmarkSet, path: str | Path) -> None:
    """Write one 'x,y' decimal line per landmark, in landmark order."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in landmarks.points:
            fh.write(f"{x:.6f},{y:.6f}\n")


def read_landmark_file(path: str | Path, frame: Frame = Frame.ORIGINAL) -> LandmarkSet:
    """Read a landmark file written as one 'x,y' pair per line."""
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            x, y = line.split(",")[:2]
            points.append((float(x), float(y)))
    return LandmarkSet(np.array(points, dtype=np.float64), frame)
