"""Sliding-window detection over channel pyramids.

Every level is scanned at a stride of one cell; windows surviving the soft
cascade and scoring above the model threshold become boxes in image
coordinates, which are then merged by greedy non-maximum suppression.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .channels import ConcatBackend, HogLuvBackend
from .convnet import ConvBackend, load_weights
from .forest import BoostedForest, CandidateFeatureSpace, calibrate_cascade, dump_forest, parse_forest, train_realboost
from .image import ImagePlane, LabeledBox, iou, sample_windows
from .pyramid import PowerLawModel, build_pyramid, make_scale_grid

__all__ = [
    "Detection",
    "DetectorModel",
    "EvalResult",
    "ModelFormatError",
    "detect",
    "scan",
    "nms",
    "nms_indices",
    "evaluate",
    "lamr_reference_points",
    "window_features",
    "positive_features",
    "mine_hard_negatives",
    "random_negative_features",
    "jitter_boxes",
    "train_detector",
    "backend_from_description",
    "save_model",
    "load_model",
    "dump_model",
    "parse_model",
]


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    w: float
    h: float
    score: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"detection needs positive size, got {self.w}x{self.h}")
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")

    @property
    def rect(self):
        return (self.x, self.y, self.w, self.h)


def backend_from_description(desc: dict):
    kind = desc["backend"]
    if kind == "hogluv":
        return HogLuvBackend(desc.get("shrink", 4), desc.get("n_bins", 6), desc.get("smooth", 1))
    if kind == "conv":
        if not desc.get("weights"):
            raise ValueError("conv backend description lacks a weight path")
        return ConvBackend(load_weights(desc["weights"]), desc.get("pad", 16))
    if kind == "concat":
        return ConcatBackend(*(backend_from_description(d) for d in desc["children"]))
    raise ValueError(f"unknown backend {kind!r}")


@dataclass
class DetectorModel:
    """A trained detector and the options it scans with.

    ``box_ratio`` shrinks the scanned window (about its centre) to the
    annotated object extent; ``(1, 1)`` means objects fill the window.
    """

    backend: object
    window: tuple  # (h, w) pixels
    forest: BoostedForest
    threshold: float = 0.0
    box_ratio: tuple = (1.0, 1.0)
    per_octave: int = 6
    upsample: int = 1
    mode: str = "exact"
    canvas: tuple = (932, 932)
    pad: int = 16
    nms_overlap: float = 0.65
    plm: PowerLawModel | None = None

    def __post_init__(self):
        self.window = (int(self.window[0]), int(self.window[1]))
        s = self.shrink
        if self.window[0] % s or self.window[1] % s:
            raise ValueError(f"window {self.window} not divisible by shrink {s}")
        space = self.forest.feature_space
        if tuple(space.window) != self.window_cells or space.n_maps != self.backend.n_maps:
            raise ValueError(
                f"forest expects {space.n_maps}x{space.window}, model provides "
                f"{self.backend.n_maps}x{self.window_cells}"
            )

    @property
    def shrink(self):
        return self.backend.shrink

    @property
    def window_cells(self):
        return (self.window[0] // self.shrink, self.window[1] // self.shrink)

    def grid_for(self, dims):
        return make_scale_grid(dims, self.per_octave, self.window, self.upsample, self.shrink)

    def pyramid(self, img: ImagePlane, mode=None):
        grid = self.grid_for((img.height, img.width))
        return build_pyramid(img, self.backend, grid, mode or self.mode, self.plm, self.canvas, self.pad)


@dataclass
class Candidates:
    """Scanned windows above threshold, before suppression."""

    level: np.ndarray
    cy: np.ndarray
    cx: np.ndarray
    score: np.ndarray
    boxes: np.ndarray  # (n, 4) x, y, w, h


def _level_box(model, pyr, level, cy, cx):
    h_l, w_l = pyr.dims[level]
    H, W = pyr.grid.image_dims
    sy, sx = h_l / H, w_l / W
    s = model.shrink
    wh, ww = model.window
    rh, rw = model.box_ratio
    x = cx * s / sx
    y = cy * s / sy
    w = np.full(x.shape, ww / sx)
    h = np.full(y.shape, wh / sy)
    return np.stack([x + w * (1 - rw) / 2, y + h * (1 - rh) / 2, w * rw, h * rh], axis=-1)


def scan(model: DetectorModel, pyr, reject_early=True, threshold=None) -> Candidates:
    """Score every window of every level; keep full-length scores above threshold."""
    thr = model.threshold if threshold is None else threshold
    n_trees = len(model.forest)
    out = {k: [] for k in ("level", "cy", "cx", "score", "boxes")}
    for li, stack in enumerate(pyr.levels):
        if stack.height < model.window_cells[0] or stack.width < model.window_cells[1]:
            continue
        scores, n_eval = model.forest.score_map(stack.planes, reject_early)
        keep = (n_eval == n_trees) & (scores > thr)
        cy, cx = np.nonzero(keep)
        out["level"].append(np.full(cy.size, li))
        out["cy"].append(cy)
        out["cx"].append(cx)
        out["score"].append(scores[cy, cx])
        out["boxes"].append(_level_box(model, pyr, li, cy, cx).reshape(-1, 4))
    if not out["level"]:
        return Candidates(*(np.zeros(0, dtype=int) for _ in range(3)), np.zeros(0), np.zeros((0, 4)))
    return Candidates(*(np.concatenate(out[k]) for k in ("level", "cy", "cx", "score", "boxes")))


def nms_indices(boxes, scores, overlap=0.65):
    """Greedy suppression by intersection over the smaller area.

    Boxes are visited by decreasing score (stable for ties); a box is
    dropped when it overlaps an already kept box by more than ``overlap``.
    """
    if not 0 < overlap < 1:
        raise ValueError("overlap must lie in (0, 1)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    x0, y0 = boxes[:, 0], boxes[:, 1]
    x1, y1 = x0 + boxes[:, 2], y0 + boxes[:, 3]
    area = boxes[:, 2] * boxes[:, 3]
    kept = []
    alive = np.ones(len(boxes), dtype=bool)
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        kept.append(i)
        rest = order[pos + 1 :]
        rest = rest[alive[rest]]
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        alive[rest[inter / np.minimum(area[i], area[rest]) > overlap]] = False
    return np.asarray(kept, dtype=np.int64)


def nms(dets, overlap=0.65):
    dets = list(dets)
    if not dets:
        return []
    keep = nms_indices([d.rect for d in dets], [d.score for d in dets], overlap)
    return [dets[i] for i in keep]


def detect(img: ImagePlane, model: DetectorModel, mode=None, reject_early=True, pyramid=None, threshold=None):
    """Detections in image coordinates, after NMS, by decreasing score."""
    pyr = pyramid if pyramid is not None else model.pyramid(img, mode)
    c = scan(model, pyr, reject_early, threshold)
    keep = nms_indices(c.boxes, c.score, model.nms_overlap)
    return [Detection(*map(float, c.boxes[i]), float(c.score[i])) for i in keep]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    lamr: float
    fppi: np.ndarray
    miss_rate: np.ndarray
    miss_at_ref: np.ndarray
    n_gt: int = 0
    n_images: int = 0


def lamr_reference_points():
    """Nine log-spaced false-positives-per-image points from 1e-2 to 1."""
    return 10.0 ** np.linspace(-2, 0, 9)


def _match_image(dets, gts, iou_thr, min_height):
    """Per detection (in decreasing score order): 1 true positive, 0 false
    positive, -1 ignored. Also returns the number of counted ground truths."""
    dets = sorted(dets, key=lambda d: -d.score)
    care = [g for g in gts if not g.ignore and g.h >= min_height]
    ignore = [g for g in gts if g.ignore or g.h < min_height]
    used = [False] * len(care)
    flags = []
    for d in dets:
        best, best_iou = -1, iou_thr
        for j, g in enumerate(care):
            if used[j]:
                continue
            o = iou(d.rect, g.rect)
            if o >= best_iou:
                best, best_iou = j, o
        if best >= 0:
            used[best] = True
            flags.append(1)
            continue
        area = d.w * d.h
        hit_ignore = False
        for g in ignore:
            iw = min(d.x + d.w, g.x + g.w) - max(d.x, g.x)
            ih = min(d.y + d.h, g.y + g.h) - max(d.y, g.y)
            if iw > 0 and ih > 0 and iw * ih / area >= iou_thr:
                hit_ignore = True
                break
        flags.append(-1 if hit_ignore else 0)
    return [(d.score, f) for d, f in zip(dets, flags)], len(care)


def evaluate(dets_per_image, gt_per_image, iou_thr=0.5, min_height=0.0) -> EvalResult:
    """Miss rate against false positives per image, and its log average.

    Ground-truth boxes flagged ``ignore`` or shorter than ``min_height``
    (50 px in the usual "reasonable" setting) are ignore regions: a
    detection covered by one (intersection over detection area >= 0.5) is
    neither a hit nor a false positive. Matching is greedy by decreasing
    score, each detection taking the unmatched box of highest IoU >= 0.5.
    The log-average miss rate is the geometric mean of the miss rates at the
    nine reference points, each read at the last curve point whose FPPI does
    not exceed it (miss rate 1 before the first detection), floored at 1e-10.
    """
    if len(dets_per_image) != len(gt_per_image):
        raise ValueError("need detections and ground truth for the same images")
    n_img = len(gt_per_image)
    scored, n_gt = [], 0
    for dets, gts in zip(dets_per_image, gt_per_image):
        s, n = _match_image(list(dets), list(gts), iou_thr, min_height)
        scored.extend(s)
        n_gt += n
    scored = [x for x in scored if x[1] >= 0]
    scored.sort(key=lambda x: -x[0])
    tp = np.cumsum([f == 1 for _, f in scored], dtype=np.float64)
    fp = np.cumsum([f == 0 for _, f in scored], dtype=np.float64)
    fppi = np.concatenate([[0.0], fp / max(n_img, 1)])
    recall = np.concatenate([[0.0], tp / n_gt]) if n_gt else np.zeros(len(scored) + 1)
    miss = 1.0 - recall
    ref = lamr_reference_points()
    at_ref = np.ones(len(ref))
    for i, r in enumerate(ref):
        j = np.flatnonzero(fppi <= r)
        if j.size:
            at_ref[i] = miss[j[-1]]
    lamr = float(np.exp(np.mean(np.log(np.maximum(1e-10, at_ref)))))
    return EvalResult(lamr, fppi, miss, at_ref, n_gt, n_img)


# ---------------------------------------------------------------------------
# training


def window_features(model_or_space, pyr, level, cy, cx):
    """Feature rows of scanned windows, read from a pyramid."""
    space = model_or_space.forest.feature_space if isinstance(model_or_space, DetectorModel) else model_or_space
    out = []
    level, cy, cx = np.asarray(level), np.asarray(cy), np.asarray(cx)
    for li in np.unique(level):
        sel = level == li
        look, pair = space.smooth(pyr.levels[li].planes)
        out.append((np.flatnonzero(sel), space.features_at(look, pair, np.stack([cy[sel], cx[sel]], 1))))
    rows = np.empty((level.size, space.n_features), dtype=np.float32)
    for idx, feats in out:
        rows[idx] = feats
    return rows


def positive_features(backend, space, windows):
    """Features of window crops carrying ``context`` pixels of margin.

    Channels are computed on the whole crop and the margin cells dropped,
    so window features see the same surroundings as in a full-image scan.
    """
    rows = []
    wh, ww = space.window
    for win in windows:
        st = backend.compute(win)
        my = (st.height - wh) // 2
        mx = (st.width - ww) // 2
        crop = st.crop(my, mx, wh, ww)
        look, pair = space.smooth(crop.planes)
        rows.append(space.features_at(look, pair, [(0, 0)])[0])
    return np.asarray(rows, dtype=np.float32).reshape(-1, space.n_features)


def mine_hard_negatives(
    model, images, n, boxes=None, iou_max=0.1, pyramids=None, per_image=None, reject_early=True, threshold=None
):
    """Highest-scoring false positives of ``model`` on ``images``.

    A false positive is a post-NMS detection whose IoU with every box of
    its image is at most ``iou_max``; ``threshold`` defaults to the
    model's. Returns ``(features, scores)`` of at
    most ``n`` windows by decreasing score (at most ``per_image`` from any
    one image); empty arrays if the model fires on nothing.
    """
    feats, scores = [], []
    for k, img in enumerate(images):
        pyr = pyramids[k] if pyramids is not None else model.pyramid(img)
        c = scan(model, pyr, reject_early, threshold)
        if not c.score.size:
            continue
        keep = nms_indices(c.boxes, c.score, model.nms_overlap)
        gts = boxes[k] if boxes is not None else []
        fp = [i for i in keep if all(iou(tuple(c.boxes[i]), g.rect) <= iou_max for g in gts)]
        if per_image is not None:
            fp = fp[:per_image]
        if not fp:
            continue
        fp = np.asarray(fp)
        feats.append(window_features(model, pyr, c.level[fp], c.cy[fp], c.cx[fp]))
        scores.append(c.score[fp])
    n_feat = model.forest.feature_space.n_features
    if not feats:
        return np.zeros((0, n_feat), dtype=np.float32), np.zeros(0)
    F, S = np.concatenate(feats), np.concatenate(scores)
    order = np.argsort(-S, kind="stable")[:n]
    return F[order], S[order]


def jitter_boxes(boxes, window, n, shift=4.0, log2_scale=1.0 / 12, rng_seed=0):
    """Each non-ignore box followed by ``n`` perturbed copies.

    Shifts are uniform in ``[-shift, shift]`` window pixels, scale changes
    uniform in ``[-log2_scale, log2_scale]`` octaves about the box centre.
    """
    rng = np.random.default_rng(rng_seed)
    wh, ww = window
    out = []
    for b in boxes:
        if b.ignore:
            continue
        out.append(b)
        for _ in range(n):
            dx, dy = rng.uniform(-shift, shift, 2)
            f = 2.0 ** rng.uniform(-log2_scale, log2_scale)
            w, h = b.w * f, b.h * f
            cx = b.x + b.w / 2 + dx * b.w / ww
            cy = b.y + b.h / 2 + dy * b.h / wh
            out.append(LabeledBox(cx - w / 2, cy - h / 2, w, h, b.label))
    return out


def random_negative_features(backend, space, img, boxes, n, iou_max=0.1, rng_seed=0, max_tries=None):
    """``n`` random window features from the native-scale channels of
    ``img``, each window having IoU at most ``iou_max`` with every box."""
    st = backend.compute(img)
    s = backend.shrink
    wh, ww = space.window
    n_y, n_x = st.height - wh + 1, st.width - ww + 1
    if n_y < 1 or n_x < 1 or n <= 0:
        return np.zeros((0, space.n_features), dtype=np.float32)
    rng = np.random.default_rng(rng_seed)
    tries = max_tries if max_tries is not None else 50 * n + 100
    picks = []
    while len(picks) < n and tries > 0:
        tries -= 1
        cy, cx = int(rng.integers(n_y)), int(rng.integers(n_x))
        rect = (cx * s, cy * s, ww * s, wh * s)
        if all(iou(rect, b.rect) <= iou_max for b in boxes):
            picks.append((cy, cx))
    if not picks:
        return np.zeros((0, space.n_features), dtype=np.float32)
    look, pair = space.smooth(st.planes)
    return space.features_at(look, pair, picks)


@dataclass
class TrainingRound:
    round: int
    model: DetectorModel
    n_negatives: int
    n_mined: int


def train_detector(
    scenes,
    backend,
    window=(128, 64),
    n_trees=2048,
    depth=3,
    frac_features=1.0 / 16,
    seed=0,
    n_neg_per_image=25,
    rounds=3,
    n_mine=5000,
    mine_per_image=25,
    context=16,
    iou_max=0.1,
    threshold=None,
    model_opts=None,
    mining_pyramids=None,
    log=None,
    lookup_radius=0,
    cache_pyramids=True,
    jitter=4,
    jitter_shift=4.0,
    jitter_scale=1.0 / 12,
    mine_threshold=None,
    mining_images=None,
    calibration_jitter=2,
    cascade_every=32,
    cascade_margin=0.5,
):
    """Train on annotated scenes with ``rounds`` rounds of hard negative mining.

    ``scenes`` are objects with ``image`` and ``boxes``. Round 0 uses random
    negatives; every later round adds the current model's false positives on
    the same scenes to the stored negatives and retrains from scratch.
    Returns the list of :class:`TrainingRound`, the last holding the final
    model. Positives are box crops resized to the window (with ``context``
    margin), each box joined by ``jitter`` randomly shifted (up to
    ``jitter_shift`` window pixels) and rescaled (up to ``jitter_scale``
    octaves) copies; random negatives are window-aligned cuts of each scene's
    native-scale channels. Scene pyramids are built once and reused by every
    mining round unless ``cache_pyramids`` is false.
    """
    scenes = list(scenes)
    s = backend.shrink
    cells = (window[0] // s, window[1] // s)
    space = CandidateFeatureSpace("pixel_lookup", cells, backend.n_maps, lookup_radius=lookup_radius)
    pos, held, neg = [], [], []
    for k, sc in enumerate(scenes):
        boxes = jitter_boxes(sc.boxes, window, jitter, jitter_shift, jitter_scale, seed * 7919 + k)
        wins = sample_windows(sc.image, boxes, window, 0, iou_max, context=context).windows
        if wins:
            pos.append(positive_features(backend, space, wins))
        if calibration_jitter:
            extra = jitter_boxes(sc.boxes, window, calibration_jitter, jitter_shift, jitter_scale, ~(seed * 7919 + k) & 0xFFFFFFFF)
            extra = [b for i, b in enumerate(extra) if i % (calibration_jitter + 1)]
            wins = sample_windows(sc.image, extra, window, 0, iou_max, context=context).windows
            if wins:
                held.append(positive_features(backend, space, wins))
        neg.append(random_negative_features(backend, space, sc.image, sc.boxes, n_neg_per_image, iou_max, seed * 7919 + k))
    P = np.concatenate(pos)
    N = np.concatenate(neg)
    opts = dict(model_opts or {})
    history = []
    n_mined = 0
    pyrs = mining_pyramids
    for r in range(rounds + 1):
        if r > 0:
            model = history[-1].model
            if mining_images is None:
                m_imgs, m_boxes = [sc.image for sc in scenes], [sc.boxes for sc in scenes]
            else:
                m_imgs, m_boxes = list(mining_images), None
            if pyrs is None and cache_pyramids:
                pyrs = [model.pyramid(im) for im in m_imgs]
            mined, _ = mine_hard_negatives(
                model, m_imgs, n_mine, m_boxes, iou_max, pyrs, mine_per_image, threshold=mine_threshold
            )
            n_mined = len(mined)
            N = np.concatenate([N, mined])
        X = np.concatenate([P, N])
        y = np.concatenate([np.ones(len(P)), -np.ones(len(N))])
        if log:
            log(f"round {r}: {len(P)} positives, {len(N)} negatives")
        forest = train_realboost(X, y, space, n_trees, depth, frac_features, seed, cascade_every, cascade_margin)
        if held:
            calibrate_cascade(forest, np.concatenate([P] + held), cascade_every, cascade_margin)
        thr = threshold
        if thr is None:
            last = forest.cascade_thresholds[-1]
            thr = float(last) if np.isfinite(last) else 0.0
        model = DetectorModel(backend, window, forest, thr, **opts)
        history.append(TrainingRound(r, model, len(N), n_mined))
    return history


# ---------------------------------------------------------------------------
# model files: b"CFD1", uint32 header length, JSON header, forest bytes

MODEL_MAGIC = b"CFD1"


class ModelFormatError(ValueError):
    pass


def _header(model: DetectorModel) -> dict:
    h = {
        "backend": model.backend.describe(),
        "window": list(model.window),
        "shrink": model.shrink,
        "threshold": model.threshold,
        "box_ratio": list(model.box_ratio),
        "per_octave": model.per_octave,
        "upsample": model.upsample,
        "mode": model.mode,
        "canvas": list(model.canvas),
        "pad": model.pad,
        "nms_overlap": model.nms_overlap,
    }
    if model.plm is not None:
        h["lambdas"] = model.plm.lambdas.tolist()
        h["sigmas"] = [float(x) if math.isfinite(x) else None for x in model.plm.sigmas]
    return h


def dump_model(model: DetectorModel) -> bytes:
    head = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    return MODEL_MAGIC + struct.pack("<I", len(head)) + head + dump_forest(model.forest)


def save_model(model: DetectorModel, path):
    with open(path, "wb") as fh:
        fh.write(dump_model(model))


def parse_model(buf: bytes, backend=None) -> DetectorModel:
    if buf[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {buf[:4]!r}")
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        head = json.loads(buf[8 : 8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"malformed model header: {exc}") from exc
    forest = parse_forest(buf[8 + n :])
    backend = backend if backend is not None else backend_from_description(head["backend"])
    plm = None
    if "lambdas" in head:
        sig = [math.inf if v is None else v for v in head["sigmas"]]
        plm = PowerLawModel(np.array(head["lambdas"]), np.array(sig))
    return DetectorModel(
        backend,
        tuple(head["window"]),
        forest,
        head["threshold"],
        tuple(head["box_ratio"]),
        head["per_octave"],
        head["upsample"],
        head["mode"],
        tuple(head["canvas"]),
        head["pad"],
        head["nms_overlap"],
        plm,
    )


def load_model(path, backend=None) -> DetectorModel:
    with open(path, "rb") as fh:
        return parse_model(fh.read(), backend)
