"""Multi-scale channel pyramids.

Three construction modes share one geometry:

``exact``
    resample the image to every scale and run the backend on it;
``approximated``
    compute one exact level per octave and derive the levels in between by
    resampling the nearest octave level and rescaling each channel by the
    power law ``(s / s_anchor) ** -lambda``;
``patchwork``
    pack all scaled images (padded by ``pad`` pixels of background) onto a
    few fixed-size canvases with Bottom-Left Fill, run the backend once per
    canvas and cut the levels back out.

Scaled image sizes are rounded to multiples of the backend shrink so that
canvas offsets are whole feature cells.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .channels import ChannelStack, ConcatBackend, concat
from .image import ImagePlane, resize

__all__ = [
    "ScaleGrid",
    "PowerLawModel",
    "Placement",
    "FeaturePyramid",
    "PackingError",
    "scaled_dims",
    "make_scale_grid",
    "level_energy",
    "estimate_lambda",
    "build_pyramid_exact",
    "build_pyramid_approx",
    "build_pyramid_patchwork",
    "build_pyramid",
    "patchwork_pack",
    "patchwork_unpack",
    "pack_utilization",
    "DEFAULT_CANVAS",
    "DEFAULT_PAD",
]

DEFAULT_CANVAS = (932, 932)
DEFAULT_PAD = 16


class PackingError(ValueError):
    pass


def scaled_dims(dims, scale: float, shrink: int):
    """Image ``(h, w)`` at ``scale``, each side rounded to a multiple of ``shrink``."""
    h, w = dims
    return (
        shrink * max(1, int(round(scale * h / shrink))),
        shrink * max(1, int(round(scale * w / shrink))),
    )


@dataclass
class ScaleGrid:
    scales: tuple
    per_octave: int
    min_image_side: int
    image_dims: tuple = (0, 0)
    shrink: int = 4

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales:
            raise ValueError("empty scale grid")
        ratio = 2.0 ** (-1.0 / self.per_octave)
        for a, b in zip(self.scales, self.scales[1:]):
            if abs(b / a - ratio) > 1e-9:
                raise ValueError("scales must form a geometric progression of ratio 2^(-1/per_octave)")

    def __len__(self):
        return len(self.scales)

    def dims(self, i):
        return scaled_dims(self.image_dims, self.scales[i], self.shrink)


def make_scale_grid(img_dims, per_octave: int = 6, window=(128, 64), upsample: int = 1, shrink: int = 4) -> ScaleGrid:
    """Scales from ``upsample`` down to the smallest one at which the
    (shrink-rounded) scaled image still holds the window."""
    if per_octave < 1:
        raise ValueError("per_octave must be >= 1")
    if upsample not in (1, 2):
        raise ValueError("upsample must be 1 or 2")
    wh, ww = window

    def fits(s):
        h, w = scaled_dims(img_dims, s, shrink)
        return h >= wh and w >= ww

    if not fits(float(upsample)):
        raise ValueError(f"window {wh}x{ww} larger than the upsampled {img_dims} image")
    scales = []
    i = 0
    while True:
        s = upsample * 2.0 ** (-i / per_octave)
        if not fits(s):
            break
        scales.append(s)
        i += 1
    return ScaleGrid(tuple(scales), per_octave, min(wh, ww), tuple(img_dims), shrink)


# ---------------------------------------------------------------------------
# pyramid container


@dataclass
class FeaturePyramid:
    grid: ScaleGrid
    levels: list
    provenance: list
    dims: list = field(default_factory=list)  # scaled image (h, w) per level

    def __post_init__(self):
        if len(self.levels) != len(self.grid.scales) or len(self.provenance) != len(self.levels):
            raise ValueError("one level and one provenance entry per scale required")
        if not self.dims:
            self.dims = [self.grid.dims(i) for i in range(len(self.levels))]

    def __len__(self):
        return len(self.levels)

    def level_scale(self, i):
        """Actual ``(scale_y, scale_x)`` of level ``i`` after rounding."""
        h, w = self.dims[i]
        H, W = self.grid.image_dims
        return h / H, w / W


def _scaled_image(img: ImagePlane, dims) -> ImagePlane:
    return ImagePlane(resize(img.data, dims))


def _compute_level(img_scaled: ImagePlane, backend) -> ChannelStack:
    if isinstance(backend, ConcatBackend):
        return concat(*(_compute_level(img_scaled, b) for b in backend.children))
    if getattr(backend, "input_size", None) is not None:
        dims = (img_scaled.height, img_scaled.width)
        placements = patchwork_pack([dims], backend.input_size, backend.pad, backend.shrink)
        canvases = _run_canvases(backend, [img_scaled], placements, backend.input_size)
        return patchwork_unpack(canvases, placements, backend.shrink, [dims])[0]
    return backend.compute(img_scaled)


def build_pyramid_exact(img: ImagePlane, backend, grid: ScaleGrid) -> FeaturePyramid:
    """Compute every level from the resampled image."""
    levels = []
    for i in range(len(grid)):
        levels.append(_compute_level(_scaled_image(img, grid.dims(i)), backend))
    return FeaturePyramid(grid, levels, ["exact"] * len(levels))


# ---------------------------------------------------------------------------
# power law


@dataclass(frozen=True)
class PowerLawModel:
    """Per-channel exponents: ``E(s1)/E(s2) = (s1/s2) ** -lambda``.

    ``samples`` keeps the raw fitting data as ``(log scale ratios (n,),
    log energy ratios (n, n_maps))`` so other estimators can be tried.
    """

    lambdas: np.ndarray
    sigmas: np.ndarray
    fit_range: tuple = (-1.0, 0.0)
    samples: tuple = (None, None)

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        sig = np.asarray(self.sigmas, dtype=np.float64)
        if lam.shape != sig.shape:
            raise ValueError("lambdas and sigmas must align")
        if not np.all(np.isfinite(lam)):
            raise ValueError("lambda must be finite")
        if np.any(sig < 0):
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "sigmas", sig)

    @property
    def degenerate(self) -> np.ndarray:
        return np.isinf(self.sigmas)


def level_energy(stack: ChannelStack) -> np.ndarray:
    """Mean absolute value of each plane."""
    return np.abs(stack.planes.astype(np.float64)).mean(axis=(1, 2))


def estimate_lambda(images, backend, grid: ScaleGrid, fit_range=(-1.0, 0.0)) -> PowerLawModel:
    """Fit one power-law exponent per channel.

    Every image is computed at the top grid scale and at each grid scale
    whose log2 ratio to the top lies inside ``fit_range``. Lambda is the
    least-squares slope (through the origin) of the log of the mean energy
    ratio against the log scale ratio; sigma is the RMS deviation of the
    per-image log ratios from that line. Channels with zero energy get
    ``lambda = 0`` and ``sigma = inf``.
    """
    images = list(images)
    if not images:
        raise ValueError("need at least one image")
    top = grid.scales[0]
    picks = [
        i for i, s in enumerate(grid.scales) if i > 0 and fit_range[0] <= math.log2(s / top) <= fit_range[1]
    ]
    if not picks:
        raise ValueError("fit range holds no scale besides the reference")
    xs, ys = [], []
    per_scale = {i: [] for i in picks}
    for img in images:
        g = ScaleGrid(grid.scales, grid.per_octave, grid.min_image_side, (img.height, img.width), grid.shrink)
        ref = level_energy(_compute_level(_scaled_image(img, g.dims(0)), backend))
        for i in picks:
            e = level_energy(_compute_level(_scaled_image(img, g.dims(i)), backend))
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where((ref > 0) & (e > 0), e / ref, np.nan)
            per_scale[i].append(ratio)
            xs.append(math.log(grid.scales[i] / top))
            ys.append(np.log(ratio))
    x_mean = np.array([math.log(grid.scales[i] / top) for i in picks])
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-nan columns: zero-energy maps
        y_mean = np.log(np.array([np.nanmean(np.array(per_scale[i]), axis=0) for i in picks]))
    n_maps = y_mean.shape[1]
    lambdas = np.zeros(n_maps)
    sigmas = np.full(n_maps, np.inf)
    xs_arr, ys_arr = np.array(xs), np.array(ys)
    for k in range(n_maps):
        ok = np.isfinite(y_mean[:, k])
        if ok.sum() < 1:
            continue
        xk, yk = x_mean[ok], y_mean[ok, k]
        lambdas[k] = -float(np.dot(xk, yk) / np.dot(xk, xk))
        ok_all = np.isfinite(ys_arr[:, k])
        resid = ys_arr[ok_all, k] + lambdas[k] * xs_arr[ok_all]
        sigmas[k] = float(np.sqrt(np.mean(resid**2)))
    return PowerLawModel(lambdas, sigmas, tuple(fit_range), (xs_arr, ys_arr))


def _anchor_index(i, per_octave):
    # nearest octave level; exact half-octave ties go to the larger scale
    return per_octave * math.ceil(i / per_octave - 0.5)


def build_pyramid_approx(
    img: ImagePlane,
    backend,
    grid: ScaleGrid,
    plm: PowerLawModel,
    patchwork: bool = False,
    canvas=DEFAULT_CANVAS,
    pad: int = DEFAULT_PAD,
) -> FeaturePyramid:
    """Exact levels once per octave, power-law approximations in between."""
    lambdas = np.asarray(plm.lambdas)
    if lambdas.size != backend.n_maps:
        raise ValueError(f"power-law model has {lambdas.size} exponents, backend has {backend.n_maps} maps")
    top = grid.scales[0]
    n = len(grid)
    anchors = sorted({_anchor_index(i, grid.per_octave) for i in range(n)})
    anchor_scales = [top * 2.0 ** (-a / grid.per_octave) for a in anchors]
    anchor_dims = [scaled_dims(grid.image_dims, s, grid.shrink) for s in anchor_scales]
    if patchwork:
        stacks = _patchwork_levels(img, backend, anchor_dims, canvas, pad)
    else:
        stacks = [_compute_level(_scaled_image(img, d), backend) for d in anchor_dims]
    by_anchor = dict(zip(anchors, stacks))
    levels, prov = [], []
    for i in range(n):
        a = _anchor_index(i, grid.per_octave)
        src = by_anchor[a]
        if a == i:
            levels.append(src)
            prov.append("patchwork" if patchwork else "exact")
            continue
        h, w = grid.dims(i)
        cells = (h // grid.shrink, w // grid.shrink)
        planes = resize(src.planes, cells)
        ratio = grid.scales[i] / (top * 2.0 ** (-a / grid.per_octave))
        factor = (ratio ** (-lambdas)).astype(np.float32)
        levels.append(ChannelStack(planes * factor[:, None, None], src.shrink, src.backend_tag))
        prov.append("approximated")
    return FeaturePyramid(grid, levels, prov)


# ---------------------------------------------------------------------------
# patchwork


@dataclass(frozen=True)
class Placement:
    """One padded image (or image tile) on a canvas.

    ``rect`` and ``content`` are ``(x, y, w, h)`` canvas pixels; ``source``
    is the ``(x, y)`` of the content's top-left corner in the scaled image;
    ``owned`` is the ``(x0, y0, x1, y1)`` part of the scaled image this
    placement is responsible for when split tiles are stitched back.
    """

    scale_index: int
    canvas: int
    rect: tuple
    content: tuple
    source: tuple = (0, 0)
    owned: tuple = (0, 0, 0, 0)


def _floor_to(v, m):
    return (v // m) * m


def _split_axis(length, tile, overlap, shrink):
    """Tile starts/ends covering ``[0, length)``, consecutive tiles sharing
    at least ``overlap``, plus the owned interval of each tile."""
    if length <= tile:
        return [(0, length, 0, length)]
    step = tile - overlap
    starts = list(range(0, length - tile, step)) + [length - tile]
    spans = [(s, s + tile) for s in starts]
    out = []
    for k, (s, e) in enumerate(spans):
        lo = 0 if k == 0 else _floor_to((s + spans[k - 1][1]) // 2, shrink)
        hi = length if k == len(spans) - 1 else _floor_to((spans[k + 1][0] + e) // 2, shrink)
        out.append((s, e, lo, hi))
    return out


def patchwork_pack(dims_list, canvas=DEFAULT_CANVAS, pad: int = DEFAULT_PAD, shrink: int = 4):
    """Bottom-Left Fill packing of padded images onto ``(W, H)`` canvases.

    Images are handled in order of decreasing height (ties by index); each is
    put at the lowest, then leftmost, free position of the first canvas that
    holds it, opening a new canvas when none does. An image whose padded size
    exceeds the canvas is cut into tiles overlapping by at least ``2*pad``.
    Positions use top-left canvas coordinates, "lowest" meaning smallest y.
    """
    W, H = canvas
    if pad < 0 or pad % shrink or W % shrink or H % shrink:
        raise PackingError("pad and canvas sides must be non-negative multiples of shrink")
    max_w = _floor_to(W - 2 * pad, shrink)
    max_h = _floor_to(H - 2 * pad, shrink)
    overlap = 2 * pad
    if max_w <= overlap or max_h <= overlap:
        raise PackingError(f"pad {pad} too large for a {W}x{H} canvas")
    items = []  # (scale_index, source x, y, w, h, owned)
    for idx, (h, w) in enumerate(dims_list):
        if h % shrink or w % shrink:
            raise PackingError(f"image {idx} dims {h}x{w} not multiples of shrink {shrink}")
        if h < 1 or w < 1:
            raise PackingError(f"image {idx} is empty")
        for ys, ye, ylo, yhi in _split_axis(h, max_h, overlap, shrink):
            for xs, xe, xlo, xhi in _split_axis(w, max_w, overlap, shrink):
                items.append((idx, xs, ys, xe - xs, ye - ys, (xlo, ylo, xhi, yhi)))
    order = sorted(range(len(items)), key=lambda k: (-(items[k][4] + 2 * pad), k))
    canvases = []  # list of lists of rects
    placed = [None] * len(items)
    for k in order:
        idx, sx, sy, cw, ch, owned = items[k]
        rw, rh = cw + 2 * pad, ch + 2 * pad
        spot = None
        for ci, rects in enumerate(canvases):
            pos = _bottom_left(rects, rw, rh, W, H)
            if pos is not None:
                spot = (ci, pos)
                break
        if spot is None:
            canvases.append([])
            spot = (len(canvases) - 1, (0, 0))
        ci, (x, y) = spot
        canvases[ci].append((x, y, rw, rh))
        placed[k] = Placement(idx, ci, (x, y, rw, rh), (x + pad, y + pad, cw, ch), (sx, sy), owned)
    return [placed[k] for k in order]


def _overlaps(a, b):
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


def _bottom_left(rects, w, h, W, H):
    xs = sorted({0} | {r[0] + r[2] for r in rects})
    ys = sorted({0} | {r[1] + r[3] for r in rects})
    for y in ys:
        if y + h > H:
            break
        for x in xs:
            if x + w > W:
                break
            cand = (x, y, w, h)
            if not any(_overlaps(cand, r) for r in rects):
                return (x, y)
    return None


def pack_utilization(placements, canvas=DEFAULT_CANVAS) -> float:
    """Padded-rectangle area over total canvas area."""
    if not placements:
        return 0.0
    n_canvas = 1 + max(p.canvas for p in placements)
    used = sum(p.rect[2] * p.rect[3] for p in placements)
    return used / (n_canvas * canvas[0] * canvas[1])


def patchwork_unpack(canvas_stacks, placements, shrink: int, dims_list):
    """Cut per-scale stacks out of canvas feature stacks.

    Split tiles are stitched along their ``owned`` boundaries, which sit at
    the middle of each overlap.
    """
    if not canvas_stacks:
        raise ValueError("no canvas stacks")
    ref = canvas_stacks[0]
    out = [np.zeros((ref.n_maps, h // shrink, w // shrink), dtype=np.float32) for h, w in dims_list]
    for p in placements:
        cx, cy = p.content[0], p.content[1]
        sx, sy = p.source
        ox0, oy0, ox1, oy1 = p.owned
        if any(v % shrink for v in (cx, cy, sx, sy, ox0, oy0, ox1, oy1)):
            raise PackingError(f"placement {p} not aligned to shrink {shrink}")
        planes = canvas_stacks[p.canvas].planes
        y0 = (cy + oy0 - sy) // shrink
        x0 = (cx + ox0 - sx) // shrink
        hh, ww = (oy1 - oy0) // shrink, (ox1 - ox0) // shrink
        out[p.scale_index][:, oy0 // shrink : oy0 // shrink + hh, ox0 // shrink : ox0 // shrink + ww] = planes[
            :, y0 : y0 + hh, x0 : x0 + ww
        ]
    return [ChannelStack(o, ref.shrink, ref.backend_tag) for o in out]


def _run_canvases(backend, scaled_images, placements, canvas):
    W, H = canvas
    prepared = [backend.prepare(im) for im in scaled_images]
    n_canvas = 1 + max(p.canvas for p in placements)
    c = prepared[0].shape[0]
    boards = [np.zeros((c, H, W), dtype=np.float32) for _ in range(n_canvas)]
    for p in placements:
        x, y, w, h = p.content
        sx, sy = p.source
        boards[p.canvas][:, y : y + h, x : x + w] = prepared[p.scale_index][:, sy : sy + h, sx : sx + w]
    return [backend.compute_canvas(b) for b in boards]


def _patchwork_levels(img, backend, dims_list, canvas, pad):
    if isinstance(backend, ConcatBackend):
        parts = [_patchwork_levels(img, b, dims_list, canvas, pad) for b in backend.children]
        return [concat(*tup) for tup in zip(*parts)]
    scaled = [_scaled_image(img, d) for d in dims_list]
    placements = patchwork_pack(dims_list, canvas, pad, backend.shrink)
    stacks = _run_canvases(backend, scaled, placements, canvas)
    return patchwork_unpack(stacks, placements, backend.shrink, dims_list)


def build_pyramid_patchwork(img: ImagePlane, backend, grid: ScaleGrid, canvas=DEFAULT_CANVAS, pad: int = DEFAULT_PAD):
    """All levels from shared canvases."""
    dims = [grid.dims(i) for i in range(len(grid))]
    levels = _patchwork_levels(img, backend, dims, canvas, pad)
    return FeaturePyramid(grid, levels, ["patchwork"] * len(levels), dims)


def build_pyramid(img, backend, grid, mode="exact", plm=None, canvas=DEFAULT_CANVAS, pad=DEFAULT_PAD):
    """Dispatch on ``mode`` in {"exact", "patchwork", "approx", "approx+patchwork"}."""
    if mode == "exact":
        return build_pyramid_exact(img, backend, grid)
    if mode == "patchwork":
        return build_pyramid_patchwork(img, backend, grid, canvas, pad)
    if mode in ("approx", "approx+patchwork"):
        if plm is None:
            raise ValueError("approximate pyramids need a power-law model")
        return build_pyramid_approx(img, backend, grid, plm, mode == "approx+patchwork", canvas, pad)
    raise ValueError(f"unknown pyramid mode {mode!r}")
