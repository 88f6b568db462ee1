"""Hand-crafted HOG+LUV channels.

The recipe, pinned so tests can reproduce it exactly:

* gradients by centred differences with replicated borders; for colour input
  the channel with the largest magnitude wins per pixel;
* unsigned orientation in [0, pi), magnitude split linearly between the two
  nearest of ``n_bins`` bins (bin ``k`` is centred on ``k*pi/n_bins``);
* pixels past the last whole ``shrink`` block on the right/bottom are
  dropped, then each ``shrink x shrink`` block is averaged;
* the aggregated maps are smoothed with the separable [1 2 1]/4 filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import ImagePlane, rgb_to_luv

__all__ = [
    "ChannelStack",
    "VALID_SHRINKS",
    "gradient_magnitude",
    "gradient_hist",
    "aggregate",
    "conv_tri",
    "compute_hogluv",
    "concat",
    "HogLuvBackend",
    "ConcatBackend",
]

VALID_SHRINKS = (1, 2, 4, 8, 16)
BACKEND_TAGS = ("hogluv", "conv", "concat", "planted")


@dataclass
class ChannelStack:
    """Same-resolution feature planes, shape ``(n_maps, height, width)``."""

    planes: np.ndarray
    shrink: int = 1
    backend_tag: str = "hogluv"

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float32)
        if planes.ndim == 2:
            planes = planes[None]
        if planes.ndim != 3 or planes.shape[0] < 1:
            raise ValueError(f"planes must be (n_maps, H, W), got {planes.shape}")
        if self.shrink not in VALID_SHRINKS:
            raise ValueError(f"shrink {self.shrink} not in {VALID_SHRINKS}")
        if self.backend_tag not in BACKEND_TAGS:
            raise ValueError(f"unknown backend tag {self.backend_tag!r}")
        if not np.all(np.isfinite(planes)):
            raise ValueError("channel planes contain non-finite values")
        self.planes = np.ascontiguousarray(planes)

    @property
    def n_maps(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def crop(self, y, x, h, w) -> "ChannelStack":
        return ChannelStack(self.planes[:, y : y + h, x : x + w], self.shrink, self.backend_tag)


def _replicate_diff(a, axis):
    # centred difference / 2 with replicated border samples
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    hi = np.take(p, np.arange(2, n + 2), axis=axis)
    lo = np.take(p, np.arange(0, n), axis=axis)
    return (hi - lo) * 0.5


def _gradients(img: ImagePlane):
    data = img.data.astype(np.float64)
    gx = _replicate_diff(data, 2)
    gy = _replicate_diff(data, 1)
    mag = np.sqrt(gx * gx + gy * gy)
    if data.shape[0] > 1:
        best = np.argmax(mag, axis=0)[None]
        mag = np.take_along_axis(mag, best, 0)
        gx = np.take_along_axis(gx, best, 0)
        gy = np.take_along_axis(gy, best, 0)
    ori = np.arctan2(gy[0], gx[0])
    ori = np.where(ori < 0, ori + np.pi, ori)
    ori = np.where(ori >= np.pi, ori - np.pi, ori)
    return mag[0], ori


def gradient_magnitude(img: ImagePlane) -> ImagePlane:
    """Per-pixel gradient magnitude (max over colour channels)."""
    mag, _ = _gradients(img)
    return ImagePlane(mag.astype(np.float32))


def gradient_hist(img: ImagePlane, n_bins: int = 6) -> ChannelStack:
    """Magnitude soft-binned by unsigned orientation into ``n_bins`` planes."""
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    mag, ori = _gradients(img)
    pos = ori * (n_bins / np.pi)
    b0 = np.floor(pos).astype(np.intp)
    frac = pos - b0
    b0 %= n_bins
    b1 = (b0 + 1) % n_bins
    hist = np.zeros((n_bins,) + mag.shape, dtype=np.float64)
    rows, cols = np.indices(mag.shape)
    np.add.at(hist, (b0, rows, cols), mag * (1.0 - frac))
    np.add.at(hist, (b1, rows, cols), mag * frac)
    return ChannelStack(hist.astype(np.float32), 1, "hogluv")


def _block_mean(planes: np.ndarray, shrink: int) -> np.ndarray:
    n, h, w = planes.shape
    hh, ww = (h // shrink) * shrink, (w // shrink) * shrink
    if hh == 0 or ww == 0:
        raise ValueError(f"planes {h}x{w} smaller than one {shrink}x{shrink} block")
    src = planes[:, :hh, :ww].astype(np.float64)
    acc = np.zeros((n, hh // shrink, ww // shrink), dtype=np.float64)
    # fixed summation order, independent of where the block sits
    for dy in range(shrink):
        for dx in range(shrink):
            acc += src[:, dy::shrink, dx::shrink]
    return acc / (shrink * shrink)


def aggregate(stack: ChannelStack, shrink: int) -> ChannelStack:
    """Non-overlapping ``shrink x shrink`` block mean of every plane."""
    if shrink <= 0:
        raise ValueError("shrink must be positive")
    if shrink == 1:
        return ChannelStack(stack.planes.copy(), stack.shrink, stack.backend_tag)
    out = _block_mean(stack.planes, shrink)
    return ChannelStack(out.astype(np.float32), stack.shrink * shrink, stack.backend_tag)


def conv_tri(planes: np.ndarray, radius: int) -> np.ndarray:
    """Separable triangle filter of the given integer radius, replicated
    borders. Radius 1 is the binomial [1 2 1]/4; radius 0 is the identity."""
    planes = np.asarray(planes, dtype=np.float32)
    if radius <= 0:
        return planes.copy()
    taps = np.concatenate([np.arange(1, radius + 2), np.arange(radius, 0, -1)]).astype(np.float64)
    taps /= taps.sum()
    squeeze = planes.ndim == 2
    a = planes[None] if squeeze else planes
    a = a.astype(np.float64)
    _, h, w = a.shape
    r = radius
    p = np.pad(a, ((0, 0), (0, 0), (r, r)), mode="edge")
    acc = np.zeros_like(a)
    for k, t in enumerate(taps):
        acc += t * p[:, :, k : k + w]
    p = np.pad(acc, ((0, 0), (r, r), (0, 0)), mode="edge")
    out = np.zeros_like(a)
    for k, t in enumerate(taps):
        out += t * p[:, k : k + h, :]
    out = out.astype(np.float32)
    return out[0] if squeeze else out


def _as_rgb(img: ImagePlane) -> ImagePlane:
    if img.channels == 3:
        return img
    if img.channels == 1:
        return ImagePlane(np.repeat(img.data, 3, axis=0))
    raise ValueError(f"expected a 1- or 3-channel image, got {img.channels}")


def hogluv_full(img: ImagePlane, n_bins: int = 6) -> np.ndarray:
    """Full-resolution [LUV, magnitude, histogram] planes."""
    img = _as_rgb(img)
    luv = rgb_to_luv(img).data
    mag = gradient_magnitude(img).data
    hist = gradient_hist(img, n_bins).planes
    return np.concatenate([luv, mag, hist], axis=0)


def compute_hogluv(img: ImagePlane, shrink: int = 4, n_bins: int = 6, smooth: int = 1) -> ChannelStack:
    """The 10-map HOG+LUV stack at down-sampling ``shrink``.

    Grey input is replicated to three channels first.
    """
    full = ChannelStack(hogluv_full(img, n_bins), 1, "hogluv")
    agg = aggregate(full, shrink)
    return ChannelStack(conv_tri(agg.planes, smooth), agg.shrink, "hogluv")


def concat(*stacks: ChannelStack) -> ChannelStack:
    """Stack planes of same-geometry inputs in argument order."""
    if not stacks:
        raise ValueError("concat needs at least one stack")
    if len(stacks) == 1:
        return stacks[0]
    ref = stacks[0]
    for s in stacks[1:]:
        if (s.height, s.width, s.shrink) != (ref.height, ref.width, ref.shrink):
            raise ValueError(
                f"geometry mismatch: {s.height}x{s.width}/{s.shrink} vs "
                f"{ref.height}x{ref.width}/{ref.shrink}"
            )
    return ChannelStack(np.concatenate([s.planes for s in stacks], axis=0), ref.shrink, "concat")


class HogLuvBackend:
    """Channel backend computing the HOG+LUV stack.

    ``prepare`` maps an image into canvas space (RGB, background 0);
    ``compute_canvas`` runs on a packed canvas of prepared images.
    """

    tag = "hogluv"

    def __init__(self, shrink: int = 4, n_bins: int = 6, smooth: int = 1):
        self.shrink = shrink
        self.n_bins = n_bins
        self.smooth = smooth
        self.n_maps = 3 + 1 + n_bins

    @property
    def border_cells(self) -> int:
        # cells whose value depends on pixels outside their own content
        return self.smooth + 1

    def describe(self) -> dict:
        return {"backend": "hogluv", "shrink": self.shrink, "n_bins": self.n_bins, "smooth": self.smooth}

    def compute(self, img: ImagePlane) -> ChannelStack:
        return compute_hogluv(img, self.shrink, self.n_bins, self.smooth)

    def prepare(self, img: ImagePlane) -> np.ndarray:
        return _as_rgb(img).data

    def compute_canvas(self, canvas: np.ndarray) -> ChannelStack:
        return compute_hogluv(ImagePlane(canvas), self.shrink, self.n_bins, self.smooth)


class ConcatBackend:
    """Concatenation of several backends sharing one shrink (e.g. conv + HOG+LUV)."""

    tag = "concat"

    def __init__(self, *backends):
        if not backends:
            raise ValueError("ConcatBackend needs at least one child")
        shrinks = {b.shrink for b in backends}
        if len(shrinks) != 1:
            raise ValueError(f"children disagree on shrink: {sorted(shrinks)}")
        self.children = list(backends)
        self.shrink = shrinks.pop()
        self.n_maps = sum(b.n_maps for b in backends)

    @property
    def border_cells(self) -> int:
        return max(b.border_cells for b in self.children)

    def describe(self) -> dict:
        return {"backend": "concat", "children": [b.describe() for b in self.children]}

    def compute(self, img: ImagePlane) -> ChannelStack:
        return concat(*(b.compute(img) for b in self.children))
