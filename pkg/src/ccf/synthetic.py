"""Seeded synthetic data: smooth images, planted power-law channels,
planted-template detection scenes and polygon segmentations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channels import ChannelStack, aggregate, conv_tri
from .image import ImagePlane, LabeledBox, resize

__all__ = [
    "smooth_image",
    "PlantedPowerLawBackend",
    "make_template",
    "DetectionScene",
    "make_detection_scene",
    "make_detection_dataset",
    "make_negative_images",
    "make_background",
    "make_polygon_segmentation",
    "make_segmentation_dataset",
    "step_edge_image",
]


def smooth_image(h, w, seed=0, channels=3, cell=16, lo=0.2, hi=0.8) -> ImagePlane:
    """Low-frequency random image: bilinear upsampling of a coarse uniform grid."""
    rng = np.random.default_rng(seed)
    gh, gw = max(2, h // cell + 2), max(2, w // cell + 2)
    coarse = rng.uniform(lo, hi, (channels, gh, gw)).astype(np.float32)
    return ImagePlane(resize(coarse, (h, w)))


class PlantedPowerLawBackend:
    """Channels whose energy follows a known power law in scale.

    Channel ``k`` is the block mean of the grey image multiplied by
    ``(width / ref_width) ** -lambdas[k]``, so for smooth images the energy
    ratio between two scales is ``(s1/s2) ** -lambda_k`` up to resampling
    error.
    """

    tag = "planted"
    border_cells = 1

    def __init__(self, lambdas, ref_width, shrink=4):
        self.lambdas = np.asarray(lambdas, dtype=np.float64)
        self.ref_width = float(ref_width)
        self.shrink = shrink
        self.n_maps = self.lambdas.size

    def describe(self):
        return {"backend": "planted", "lambdas": self.lambdas.tolist(), "ref_width": self.ref_width}

    def compute(self, img: ImagePlane) -> ChannelStack:
        grey = img.data.mean(axis=0, keepdims=True)
        base = aggregate(ChannelStack(grey, 1, "planted"), self.shrink).planes[0]
        factor = (img.width / self.ref_width) ** (-self.lambdas)
        return ChannelStack(base[None] * factor[:, None, None].astype(np.float32), self.shrink, "planted")


# ---------------------------------------------------------------------------
# detection scenes


def _template_parts(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    y, x = yy / h, xx / w
    head = ((x - 0.5) / 0.17) ** 2 + ((y - 0.14) / 0.085) ** 2 <= 1
    torso = (np.abs(x - 0.5) <= 0.3) & (y >= 0.25) & (y <= 0.6)
    legs = (y > 0.6) & (y <= 0.95) & ((np.abs(x - 0.34) <= 0.1) | (np.abs(x - 0.66) <= 0.1))
    stripe = torso & (np.abs(y - 0.42) <= 0.04)
    return {"head": head, "torso": torso, "stripe": stripe, "legs": legs}


TEMPLATE_COLOURS = {
    "head": (0.95, 0.8, 0.65),
    "torso": (0.85, 0.1, 0.1),
    "stripe": (0.95, 0.95, 0.2),
    "legs": (0.05, 0.05, 0.3),
}


def make_template(h=128, w=64, parts=("head", "torso", "stripe", "legs"), colours=None) -> np.ndarray:
    """A fixed upright figure (RGB, values in [0, 1]) on a neutral 0.5 field.

    ``parts`` and ``colours`` allow partial or recoloured variants, used as
    distractors.
    """
    masks = _template_parts(h, w)
    colours = dict(TEMPLATE_COLOURS, **(colours or {}))
    img = np.full((3, h, w), 0.5)
    for name in ("head", "torso", "stripe", "legs"):
        if name in parts:
            img[:, masks[name]] = np.array(colours[name])[:, None]
    return img.astype(np.float32)


def _distractor(rng):
    kind = int(rng.integers(4))
    if kind == 0:
        return make_template(parts=("torso", "stripe"))
    if kind == 1:
        return make_template(parts=("head", "legs"))
    if kind == 2:
        perm = np.arange(4)
        while np.array_equal(perm, np.arange(4)):  # the identity would be an unlabelled instance
            perm = rng.permutation(4)
        cols = list(TEMPLATE_COLOURS.values())
        return make_template(colours={k: cols[perm[i]] for i, k in enumerate(TEMPLATE_COLOURS)})
    return make_template(parts=("head", "torso", "stripe"))


def make_background(h, w, rng) -> np.ndarray:
    """Textured noise: smooth colour field, fine noise and random clutter blocks."""
    coarse = rng.uniform(0.15, 0.85, (3, h // 24 + 2, w // 24 + 2)).astype(np.float32)
    bg = resize(coarse, (h, w))
    fine = rng.normal(0, 0.06, (3, h, w)).astype(np.float32)
    bg += conv_tri(fine, 1)
    for _ in range(int(rng.integers(3, 8))):
        bh, bw = int(rng.integers(8, max(9, h // 3))), int(rng.integers(8, max(9, w // 3)))
        y0, x0 = int(rng.integers(0, h - bh)), int(rng.integers(0, w - bw))
        bg[:, y0 : y0 + bh, x0 : x0 + bw] = rng.uniform(0.0, 1.0, 3).astype(np.float32)[:, None, None]
    return np.clip(bg, 0, 1)


@dataclass
class DetectionScene:
    image: ImagePlane
    boxes: list


def _paste(bg, patch, x, y, rng):
    ph, pw = patch.shape[1:]
    gain = np.float32(rng.uniform(0.85, 1.15))
    field = np.all(np.abs(patch - 0.5) < 1e-6, axis=0)  # neutral template field stays transparent
    region = bg[:, y : y + ph, x : x + pw]
    region[:, ~field] = np.clip(patch[:, ~field] * gain, 0, 1)


def make_detection_scene(
    seed, size=(272, 208), scales=(0.5, 1.0, 2.0), n_objects=None, template=None, n_distractors=3
) -> DetectionScene:
    """One scene with planted template instances at the given scales.

    Instances never overlap each other; ground-truth boxes are the pasted
    template extents. Up to ``n_distractors`` partial or recoloured figures
    are pasted first (instances may cover them).
    """
    rng = np.random.default_rng(seed)
    h, w = size
    tpl = make_template() if template is None else template
    bg = make_background(h, w, rng)
    boxes = []
    for _ in range(int(rng.integers(1, n_distractors + 1)) if n_distractors else 0):
        d = _distractor(rng)
        ds = scales[int(rng.integers(len(scales)))]
        dh, dw = int(round(d.shape[1] * ds)), int(round(d.shape[2] * ds))
        if dh <= h and dw <= w:
            _paste(bg, resize(d, (dh, dw)), int(rng.integers(0, w - dw + 1)), int(rng.integers(0, h - dh + 1)), rng)
    if n_objects is None:
        wanted = [scales[seed % len(scales)]]
        if rng.random() < 0.5:
            wanted.append(float(min(scales)))
    else:
        wanted = [scales[int(rng.integers(len(scales)))] for _ in range(n_objects)]
    for s in wanted:
        th, tw = int(round(tpl.shape[1] * s)), int(round(tpl.shape[2] * s))
        if th > h or tw > w:
            continue
        for _ in range(50):
            x, y = int(rng.integers(0, w - tw + 1)), int(rng.integers(0, h - th + 1))
            cand = (x, y, tw, th)
            if all(not _rect_overlap(cand, b.rect, margin=4) for b in boxes):
                _paste(bg, resize(tpl, (th, tw)), x, y, rng)
                boxes.append(LabeledBox(x, y, tw, th, "object"))
                break
    noise = rng.normal(0, 0.02, bg.shape).astype(np.float32)
    return DetectionScene(ImagePlane(np.clip(bg + noise, 0, 1)), boxes)


def _rect_overlap(a, b, margin=0):
    return (
        a[0] < b[0] + b[2] + margin
        and b[0] < a[0] + a[2] + margin
        and a[1] < b[1] + b[3] + margin
        and b[1] < a[1] + a[3] + margin
    )


def make_detection_dataset(n_train=200, n_test=50, seed=0, size=(272, 208)):
    """``(train_scenes, test_scenes)`` with disjoint seeds."""
    base = int(seed) * 100003
    train = [make_detection_scene(base + i, size) for i in range(n_train)]
    test = [make_detection_scene(base + 50000 + i, size) for i in range(n_test)]
    return train, test


def make_negative_images(n=100, seed=0, size=(272, 208), n_distractors=6):
    """Target-free scenes crowded with distractors, for hard negative mining."""
    base = int(seed) * 100003 + 80000
    return [make_detection_scene(base + i, size, n_objects=0, n_distractors=n_distractors).image for i in range(n)]


# ---------------------------------------------------------------------------
# segmentations


def make_polygon_segmentation(seed, size=(96, 96), n_regions=(4, 8), noise=0.02):
    """Voronoi partition into convex polygons, one flat random colour each.

    Returns ``(image, labels)`` where ``labels`` is an ``(h, w)`` int map.
    Neighbouring regions differ in colour by at least 0.25 (L1 over RGB).
    """
    rng = np.random.default_rng(seed)
    h, w = size
    k = int(rng.integers(n_regions[0], n_regions[1] + 1))
    seeds = rng.uniform(0, 1, (k, 2)) * np.array([h, w])
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    labels = np.argmin(d, axis=0).astype(np.int32)
    colours = []
    for _ in range(k):
        for _ in range(100):
            c = rng.uniform(0.05, 0.95, 3)
            if all(np.abs(c - o).sum() >= 0.25 for o in colours):
                break
        colours.append(c)
    img = np.asarray(colours, dtype=np.float32)[labels].transpose(2, 0, 1)
    img = img + rng.normal(0, noise, img.shape).astype(np.float32)
    return ImagePlane(np.clip(img, 0, 1).astype(np.float32)), labels


def make_segmentation_dataset(n=100, seed=0, size=(96, 96)):
    base = int(seed) * 100003 + 7
    return [make_polygon_segmentation(base + i, size) for i in range(n)]


def step_edge_image(h=64, w=64, column=32, lo=0.2, hi=0.8) -> ImagePlane:
    """Vertical step: columns ``< column`` at ``lo``, the rest at ``hi``."""
    data = np.full((3, h, w), lo, dtype=np.float32)
    data[:, :, column:] = hi
    return ImagePlane(data)
