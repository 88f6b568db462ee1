"""Image planes, raster I/O, colour conversion and training-window sampling.

Images are stored planar: ``data`` has shape ``(channels, height, width)``,
dtype float32, values in [0, 1].
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ImagePlane",
    "LabeledBox",
    "ImageError",
    "ImageReadError",
    "UnsupportedBitDepthError",
    "AnnotationError",
    "load_image",
    "save_image",
    "read_pnm",
    "write_pnm",
    "rgb_to_luv",
    "resample_rect",
    "resize",
    "iou",
    "read_annotations",
    "write_annotations",
    "sample_windows",
    "crop_replicate",
    "WindowSamples",
    "LUV_L_SCALE",
    "LUV_U_OFFSET",
    "LUV_U_SCALE",
    "LUV_V_OFFSET",
    "LUV_V_SCALE",
]


class ImageError(Exception):
    """Base class for image-level failures."""


class ImageReadError(ImageError):
    """File missing, truncated or not a supported raster."""


class UnsupportedBitDepthError(ImageError):
    """Raster decodes but is not 8 bits per sample."""


class AnnotationError(ValueError):
    pass


@dataclass
class ImagePlane:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"image data must be (C, H, W), got shape {data.shape}")
        c, h, w = data.shape
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"degenerate image shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        self.data = np.ascontiguousarray(data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabeledBox:
    x: float
    y: float
    w: float
    h: float
    label: str = "object"
    ignore: bool = False

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise AnnotationError(f"box must have positive size, got w={self.w} h={self.h}")

    @property
    def rect(self):
        return (self.x, self.y, self.w, self.h)

    def intersects(self, width, height) -> bool:
        return self.x < width and self.y < height and self.x + self.w > 0 and self.y + self.h > 0


# ---------------------------------------------------------------------------
# raster I/O

_PNM_MAGIC = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}


def read_pnm(path):
    """Read a PGM/PPM file (binary or ASCII).

    Returns ``(array, maxval)`` where array is ``(H, W)`` for grey maps and
    ``(H, W, 3)`` for colour, dtype uint16 if ``maxval > 255`` else uint8.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ImageReadError(f"cannot read {path}: {exc}") from exc
    magic = raw[:2]
    if magic not in _PNM_MAGIC:
        raise ImageReadError(f"{path}: not a PGM/PPM file")
    n_chan, binary = _PNM_MAGIC[magic]
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    pos = 2
    tokens = []
    token_re = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")
    while len(tokens) < 3:
        m = token_re.match(raw, pos)
        if m is None:
            raise ImageReadError(f"{path}: truncated PNM header")
        tokens.append(m.group(2))
        pos = m.end()
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageReadError(f"{path}: malformed PNM header") from exc
    if width < 1 or height < 1 or not (0 < maxval < 65536):
        raise ImageReadError(f"{path}: invalid PNM dimensions or maxval")
    count = width * height * n_chan
    if binary:
        pos += 1  # single whitespace byte after maxval
        if maxval < 256:
            arr = np.frombuffer(raw, dtype=np.uint8, count=-1, offset=pos)
        else:
            arr = np.frombuffer(raw, dtype=">u2", count=-1, offset=pos)
        if arr.size < count:
            raise ImageReadError(f"{path}: truncated PNM data")
        arr = arr[:count]
    else:
        try:
            arr = np.array(raw[pos:].split()[:count], dtype=np.int64)
        except ValueError as exc:
            raise ImageReadError(f"{path}: malformed ASCII PNM data") from exc
        if arr.size < count:
            raise ImageReadError(f"{path}: truncated PNM data")
    dtype = np.uint8 if maxval < 256 else np.uint16
    arr = arr.astype(dtype)
    shape = (height, width) if n_chan == 1 else (height, width, 3)
    return arr.reshape(shape), maxval


def write_pnm(path, array, maxval=None):
    """Write a binary PGM (2-D array) or PPM ((H, W, 3) array)."""
    array = np.asarray(array)
    if maxval is None:
        maxval = 65535 if array.dtype == np.uint16 else 255
    if array.ndim == 2:
        magic = b"P5"
    elif array.ndim == 3 and array.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {array.shape} as PNM")
    h, w = array.shape[:2]
    if maxval > 255:
        body = array.astype(">u2").tobytes()
    else:
        body = array.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(body)


def load_image(path) -> ImagePlane:
    """Load an 8-bit grey or RGB raster (PNG, PGM, PPM) as values in [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageReadError(f"no such file: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        arr, maxval = read_pnm(path)
        if maxval != 255:
            raise UnsupportedBitDepthError(f"{path}: maxval {maxval}, expected 255")
    else:
        from PIL import Image

        try:
            with Image.open(path) as im:
                im.load()
                mode = im.mode
                if mode in ("I;16", "I;16B", "I;16L", "I", "F", "RGBA;16", "RGB;16"):
                    raise UnsupportedBitDepthError(f"{path}: mode {mode} is not 8-bit")
                if mode == "LA":
                    im = im.convert("L")
                elif mode not in ("L", "RGB"):
                    if mode == "1":
                        im = im.convert("L")
                    else:
                        im = im.convert("RGB")
                arr = np.asarray(im)
        except UnsupportedBitDepthError:
            raise
        except Exception as exc:  # PIL raises a zoo of types for bad files
            raise ImageReadError(f"cannot decode {path}: {exc}") from exc
        if arr.dtype != np.uint8:
            raise UnsupportedBitDepthError(f"{path}: dtype {arr.dtype} is not 8-bit")
    data = arr.astype(np.float32) / np.float32(255.0)
    if data.ndim == 2:
        data = data[None]
    else:
        data = np.transpose(data, (2, 0, 1))
    return ImagePlane(data)


def save_image(img: ImagePlane, path):
    """Quantise to 8 bits and write as PNG (default) or PGM/PPM by extension."""
    path = os.fspath(path)
    q = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    if img.channels == 1:
        hw = q[0]
    elif img.channels == 3:
        hw = np.transpose(q, (1, 2, 0))
    else:
        raise ValueError("only 1- or 3-channel images can be saved")
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        if img.channels == 3 and ext == ".pgm":
            raise ValueError("PGM holds a single channel")
        write_pnm(path, hw, 255)
    else:
        from PIL import Image

        Image.fromarray(hw).save(path)


# ---------------------------------------------------------------------------
# colour

# linear RGB -> XYZ, D65 white
_RGB2XYZ = np.array(
    [
        [0.430574, 0.341550, 0.178325],
        [0.222015, 0.706655, 0.071330],
        [0.020183, 0.129553, 0.939180],
    ],
    dtype=np.float64,
)
_WHITE = _RGB2XYZ.sum(axis=1)
_UN = 4.0 * _WHITE[0] / (_WHITE[0] + 15.0 * _WHITE[1] + 3.0 * _WHITE[2])
_VN = 9.0 * _WHITE[1] / (_WHITE[0] + 15.0 * _WHITE[1] + 3.0 * _WHITE[2])

LUV_L_SCALE = 100.0
LUV_U_OFFSET, LUV_U_SCALE = 134.0, 354.0
LUV_V_OFFSET, LUV_V_SCALE = 140.0, 262.0


def rgb_to_luv(img: ImagePlane) -> ImagePlane:
    """CIE L*u*v* of a linear-RGB image, each plane mapped affinely to [0, 1].

    Rescaling: ``L/100``, ``(u + 134)/354``, ``(v + 140)/262``.
    """
    if img.channels != 3:
        raise ValueError(f"rgb_to_luv needs 3 channels, got {img.channels}")
    rgb = img.data.astype(np.float64)
    x = _RGB2XYZ[0, 0] * rgb[0] + _RGB2XYZ[0, 1] * rgb[1] + _RGB2XYZ[0, 2] * rgb[2]
    y = _RGB2XYZ[1, 0] * rgb[0] + _RGB2XYZ[1, 1] * rgb[1] + _RGB2XYZ[1, 2] * rgb[2]
    z = _RGB2XYZ[2, 0] * rgb[0] + _RGB2XYZ[2, 1] * rgb[1] + _RGB2XYZ[2, 2] * rgb[2]
    eps = (6.0 / 29.0) ** 3
    lum = np.where(y > eps, 116.0 * np.cbrt(y) - 16.0, (29.0 / 3.0) ** 3 * y)
    denom = x + 15.0 * y + 3.0 * z
    safe = np.where(denom > 1e-12, denom, 1.0)
    up = np.where(denom > 1e-12, 4.0 * x / safe, _UN)
    vp = np.where(denom > 1e-12, 9.0 * y / safe, _VN)
    u = 13.0 * lum * (up - _UN)
    v = 13.0 * lum * (vp - _VN)
    out = np.stack(
        [
            lum / LUV_L_SCALE,
            (u + LUV_U_OFFSET) / LUV_U_SCALE,
            (v + LUV_V_OFFSET) / LUV_V_SCALE,
        ]
    )
    return ImagePlane(out.astype(np.float32))


# ---------------------------------------------------------------------------
# resampling


def _bilinear_weights(start, extent, n_out, n_in):
    # pixel-centre convention, replicate outside the source
    pos = start + (np.arange(n_out, dtype=np.float64) + 0.5) * (extent / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (pos - i0).astype(np.float32)
    return i0, i1, frac


def resample_rect(data: np.ndarray, rect, out_hw) -> np.ndarray:
    """Bilinearly resample the sub-rectangle ``rect = (x, y, w, h)`` of a
    ``(C, H, W)`` array to ``out_hw``. The rectangle may extend past the
    array; outside samples replicate the border."""
    x, y, w, h = rect
    oh, ow = int(out_hw[0]), int(out_hw[1])
    _, H, W = data.shape
    y0, y1, fy = _bilinear_weights(y, h, oh, H)
    x0, x1, fx = _bilinear_weights(x, w, ow, W)
    data = data.astype(np.float32, copy=False)
    rows = data[:, y0, :] * (1 - fy)[None, :, None] + data[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]


def resize(data: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear resize of a ``(C, H, W)`` array."""
    _, H, W = data.shape
    if (H, W) == tuple(out_hw):
        return np.array(data, dtype=np.float32)
    return resample_rect(data, (0.0, 0.0, float(W), float(H)), out_hw)


# ---------------------------------------------------------------------------
# boxes and annotations


def iou(a, b) -> float:
    """Intersection over union of two ``(x, y, w, h)`` rectangles."""
    ix = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    iy = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def read_annotations(path):
    """Parse ``path x y w h label ignore_flag`` records, one box per line.

    Relative image paths are resolved against the annotation file's
    directory. A line holding only a path declares an image with no boxes.
    Returns an ordered dict ``{image_path: [LabeledBox, ...]}``.
    """
    base = os.path.dirname(os.path.abspath(path))
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.rsplit(None, 6)
            if len(parts) == 7:
                img_path, xs, ys, ws, hs, label, flag = parts
                try:
                    box = LabeledBox(float(xs), float(ys), float(ws), float(hs), label, bool(int(flag)))
                except (ValueError, AnnotationError) as exc:
                    raise AnnotationError(f"{path}:{lineno}: {exc}") from exc
            elif len(parts) == 1 or not _looks_numeric(parts[1:]):
                img_path, box = line, None
            else:
                raise AnnotationError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            if not os.path.isabs(img_path):
                img_path = os.path.join(base, img_path)
            boxes = out.setdefault(img_path, [])
            if box is not None:
                boxes.append(box)
    return out


def _looks_numeric(fields):
    try:
        [float(f) for f in fields[:4]]
    except ValueError:
        return False
    return True


def write_annotations(path, records):
    """Inverse of :func:`read_annotations` for ``{path: [boxes]}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for img_path, boxes in records.items():
            if not boxes:
                fh.write(f"{img_path}\n")
            for b in boxes:
                fh.write(f"{img_path} {b.x:g} {b.y:g} {b.w:g} {b.h:g} {b.label} {int(b.ignore)}\n")


@dataclass
class WindowSamples:
    """Result of :func:`sample_windows`: parallel lists plus the number of
    requested negatives that could not be drawn."""

    windows: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    shortfall: int = 0

    def __iter__(self):
        return iter(zip(self.windows, self.labels))

    def __len__(self):
        return len(self.windows)


def sample_windows(
    img: ImagePlane,
    boxes,
    window,
    n_neg: int,
    iou_max: float = 0.1,
    rng_seed: int = 0,
    context: int = 0,
    max_tries: int | None = None,
) -> WindowSamples:
    """Cut positive and random negative training windows from one image.

    Parameters
    ----------
    window : (h, w)
        Window size in pixels.
    context : int
        Extra pixels kept around every window on all sides (output crops are
        ``(h + 2*context, w + 2*context)``), so channels can be computed
        without border artefacts and then trimmed.

    Positives: every non-ignore box resized bilinearly to the window.
    Negatives: uniform window-sized crops whose IoU with every box is at
    most ``iou_max``.
    """
    wh, ww = int(window[0]), int(window[1])
    if not (0.0 <= iou_max < 1.0):
        raise ValueError("iou_max must lie in [0, 1)")
    if img.height + 2 * context < wh or img.width + 2 * context < ww:
        raise ValueError(f"image {img.height}x{img.width} smaller than window {wh}x{ww}")
    out_hw = (wh + 2 * context, ww + 2 * context)
    result = WindowSamples()
    boxes = list(boxes)
    for b in boxes:
        if b.ignore or not b.intersects(img.width, img.height):
            continue
        sx, sy = b.w / ww, b.h / wh
        rect = (b.x - context * sx, b.y - context * sy, b.w + 2 * context * sx, b.h + 2 * context * sy)
        result.windows.append(ImagePlane(resample_rect(img.data, rect, out_hw)))
        result.labels.append(1)

    rng = np.random.default_rng(rng_seed)
    tries = max_tries if max_tries is not None else 50 * n_neg + 100
    got = 0
    max_x, max_y = img.width - ww, img.height - wh
    while got < n_neg and tries > 0:
        tries -= 1
        x = int(rng.integers(min(0, max_x), max(0, max_x) + 1))
        y = int(rng.integers(min(0, max_y), max(0, max_y) + 1))
        cand = (x, y, ww, wh)
        if any(iou(cand, b.rect) > iou_max for b in boxes):
            continue
        crop = _crop_replicate(img.data, x - context, y - context, out_hw)
        result.windows.append(ImagePlane(crop))
        result.labels.append(0)
        got += 1
    result.shortfall = n_neg - got
    return result


def _crop_replicate(data, x, y, out_hw):
    _, H, W = data.shape
    ys = np.clip(np.arange(y, y + out_hw[0]), 0, H - 1)
    xs = np.clip(np.arange(x, x + out_hw[1]), 0, W - 1)
    return data[:, ys][:, :, xs]


def crop_replicate(img: ImagePlane, x: int, y: int, out_hw) -> ImagePlane:
    """Integer crop with replicated borders."""
    return ImagePlane(_crop_replicate(img.data, int(x), int(y), out_hw))

