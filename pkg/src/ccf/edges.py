"""Structured-forest edge detection over channel maps.

Geometry: the image is reflect-padded by ``EDGE_PAD`` pixels, upsampled by 2
and turned into shrink-4 channels, so one cell covers 2 original pixels. A
32x32-pixel patch is a 16x16-cell window; its tree leaves predict the
central 16x16-pixel edge mask. Windows are scanned every ``stride`` pixels
(``stride / 2`` cells) and masks are averaged per pixel.

Ground truth is a per-pixel integer region-label map; edges are the pixels
whose label differs from the right or lower neighbour, thinned to one pixel.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from skimage.morphology import thin

from . import kernels
from .channels import ChannelStack, HogLuvBackend, conv_tri
from .forest import LEAF, CandidateFeatureSpace, Quantizer, extract_features, gini_split
from .image import ImagePlane, read_pnm, resize, write_pnm

__all__ = [
    "EDGE_PATCH",
    "EDGE_OUT",
    "EDGE_PAD",
    "EdgeSamples",
    "EdgeTree",
    "EdgeForest",
    "EdgeModelError",
    "boundaries",
    "edge_channels",
    "edge_feature_space",
    "make_edge_features",
    "structured_split_label",
    "gather_edge_samples",
    "train_edge_forest",
    "detect_edges",
    "edge_nms",
    "match_edges",
    "evaluate_edges",
    "read_label_pgm",
    "write_label_pgm",
    "dump_edge_model",
    "parse_edge_model",
    "save_edge_model",
    "load_edge_model",
]

EDGE_PATCH = 32  # input window, original pixels
EDGE_OUT = 16  # predicted mask side, original pixels
EDGE_PAD = 16
CELL_PX = 2  # original pixels per cell after the x2 upsampling and shrink 4
WIN_CELLS = EDGE_PATCH // CELL_PX
OUT_OFF = (EDGE_PATCH - EDGE_OUT) // 2


def boundaries(labels: np.ndarray) -> np.ndarray:
    """Thin boolean edge mask of a region-label map."""
    labels = np.asarray(labels)
    e = np.zeros(labels.shape, dtype=bool)
    e[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    e[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return thin(e)


def edge_channels(img: ImagePlane, backend=None) -> ChannelStack:
    """Channels of the padded, x2-upsampled image (one cell = 2 pixels)."""
    backend = backend or HogLuvBackend()
    if backend.shrink != 2 * CELL_PX:
        raise ValueError(f"edge channels need a shrink-{2 * CELL_PX} backend")
    p = EDGE_PAD
    data = np.pad(img.data, ((0, 0), (p, p), (p, p)), mode="reflect")
    _, h, w = data.shape
    return backend.compute(ImagePlane(resize(data, (2 * h, 2 * w))))


def edge_feature_space(n_maps, lookup_radius=1, pair_radius=4, n_pairs=None, pair_seed=0):
    """Lookups on lightly smoothed cells plus pairwise differences on
    heavily smoothed cells, over a 16x16-cell window. Radii are in cells
    (2 pixels each)."""
    return CandidateFeatureSpace(
        "lookup+pairwise", (WIN_CELLS, WIN_CELLS), n_maps, lookup_radius, pair_radius, n_pairs, pair_seed
    )


def make_edge_features(patch: ChannelStack, space: CandidateFeatureSpace) -> np.ndarray:
    """Feature vector of one 32x32-pixel (16x16-cell) patch, smoothing
    inside the patch."""
    if (patch.height, patch.width) != (WIN_CELLS, WIN_CELLS):
        raise ValueError(f"edge patches are {WIN_CELLS}x{WIN_CELLS} cells, got {patch.height}x{patch.width}")
    return extract_features(patch, space)


def structured_split_label(targets, m=256, rng_seed=0):
    """Binary labels that split structured targets into two groups.

    ``targets`` are ``(n, 16, 16)`` region-label patches. ``m`` random pixel
    pairs give equality indicators per patch; these are centred and
    projected on their top principal direction, and patches above the
    median projection get ``True``. Returns ``None`` when the indicators do
    not vary (nothing to split).
    """
    t = np.asarray(targets).reshape(len(targets), -1)
    n, d = t.shape
    if n < 2:
        return None
    rng = np.random.default_rng(rng_seed)
    a = rng.integers(0, d, m)
    b = (a + rng.integers(1, d, m)) % d
    z = (t[:, a] == t[:, b]).astype(np.float64)
    z -= z.mean(axis=0)
    z = z[:, np.any(z != 0, axis=0)]
    if z.shape[1] == 0:
        return None
    _, vecs = np.linalg.eigh(z.T @ z)
    v = vecs[:, -1]
    v = v if v[np.argmax(np.abs(v))] > 0 else -v
    proj = z @ v
    med = np.median(proj)
    lab = proj > med
    if lab.all() or not lab.any():
        lab = proj >= med
    if lab.all() or not lab.any():
        return None
    return lab


@dataclass
class EdgeSamples:
    features: np.ndarray  # (n, F) float32
    segments: np.ndarray  # (n, 16, 16) region labels
    edges: np.ndarray  # (n, 16, 16) float32 edge masks
    image_ids: np.ndarray  # (n,)


@dataclass
class EdgeTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    masks: np.ndarray  # (n_nodes, 16, 16), meaningful at leaves
    counts: np.ndarray  # samples per node

    @property
    def n_nodes(self):
        return self.feature.size

    @property
    def depth(self):
        def d(i):
            return 0 if self.feature[i] < 0 else 1 + max(d(self.left[i]), d(self.right[i]))

        return d(0)

    def leaf_index(self, X):
        X = np.asarray(X, dtype=np.float32)
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            v = X[active, self.feature[nd]]
            node[active] = np.where(v <= self.threshold[nd], self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node


@dataclass
class EdgeForest:
    trees: list
    feature_space: CandidateFeatureSpace
    backend: object

    def compile(self, plane_h, plane_w):
        fk, fa, fb = self.feature_space.offsets(plane_h, plane_w)
        parts = {k: [] for k in ("kind", "off_a", "off_b", "thr", "left", "right", "masks")}
        roots, base = [], 0
        for t in self.trees:
            roots.append(base)
            feat = t.feature.astype(np.int64)
            leaf = feat < 0
            safe = np.where(leaf, 0, feat)
            parts["kind"].append(np.where(leaf, LEAF, fk[safe]).astype(np.int8))
            parts["off_a"].append(np.where(leaf, 0, fa[safe]))
            parts["off_b"].append(np.where(leaf, 0, fb[safe]))
            parts["thr"].append(t.threshold)
            parts["left"].append(np.where(leaf, 0, t.left + base))
            parts["right"].append(np.where(leaf, 0, t.right + base))
            parts["masks"].append(t.masks)
            base += t.n_nodes
        dt = {"kind": np.int8, "off_a": np.int64, "off_b": np.int64, "thr": np.float32,
              "left": np.int32, "right": np.int32, "masks": np.float32}
        out = {k: np.ascontiguousarray(np.concatenate(v), dtype=dt[k]) for k, v in parts.items()}
        out["roots"] = np.asarray(roots, dtype=np.int32)
        return out


def gather_edge_samples(images, label_maps, space, backend=None, per_image=200, edge_fraction=0.5, seed=0):
    """Training patches from images with region-label ground truth.

    About ``edge_fraction`` of the patches of each image are centred on a
    ground-truth edge pixel, the rest anywhere. Features come from the
    full-image smoothed maps, as at detection time.
    """
    rng = np.random.default_rng(seed)
    feats, segs, edges, ids = [], [], [], []
    p = EDGE_PAD
    for k, (img, lab) in enumerate(zip(images, label_maps)):
        st = edge_channels(img, backend)
        look, pair = space.smooth(st.planes)
        lab_p = np.pad(lab, p, mode="reflect")
        edge_p = boundaries(lab_p).astype(np.float32)
        n_y, n_x = st.height - WIN_CELLS + 1, st.width - WIN_CELLS + 1
        # a window at cell (cy, cx) predicts padded pixels [2cy + 8, 2cy + 24)
        n_edge = int(round(per_image * edge_fraction))
        ey, ex = np.nonzero(edge_p[OUT_OFF : OUT_OFF + CELL_PX * n_y, OUT_OFF : OUT_OFF + CELL_PX * n_x])
        cy = list(rng.integers(0, n_y, per_image - n_edge))
        cx = list(rng.integers(0, n_x, per_image - n_edge))
        if ey.size:
            pick = rng.integers(0, ey.size, n_edge)
            cy += list(np.clip((ey[pick] - EDGE_OUT // 2) // CELL_PX, 0, n_y - 1))
            cx += list(np.clip((ex[pick] - EDGE_OUT // 2) // CELL_PX, 0, n_x - 1))
        pos = np.stack([np.asarray(cy), np.asarray(cx)], 1).astype(np.int64)
        feats.append(space.features_at(look, pair, pos))
        for y, x in pos:
            y0, x0 = CELL_PX * y + OUT_OFF, CELL_PX * x + OUT_OFF
            segs.append(lab_p[y0 : y0 + EDGE_OUT, x0 : x0 + EDGE_OUT])
            edges.append(edge_p[y0 : y0 + EDGE_OUT, x0 : x0 + EDGE_OUT])
        ids.append(np.full(len(pos), k))
    return EdgeSamples(
        np.concatenate(feats), np.asarray(segs), np.asarray(edges, dtype=np.float32), np.concatenate(ids)
    )


def _train_edge_tree(X, Q, segs, edges, idx, depth, min_samples, frac, m, rng):
    F = X.shape[1]
    k = max(1, int(round(frac * F)))
    y = np.zeros(len(X), dtype=np.int64)
    w = np.ones(len(X), dtype=np.float64)
    feature, threshold, left, right, masks, counts = [], [], [], [], [], []

    def new_node(members):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        masks.append(edges[members].mean(axis=0))
        counts.append(len(members))
        return len(feature) - 1

    def grow(node, members, level):
        if level >= depth or len(members) < 2 * min_samples:
            return
        lab = structured_split_label(segs[members], m, int(rng.integers(2**31)))
        if lab is None:
            return
        y[members] = np.where(lab, 1, -1)
        feats = np.sort(rng.choice(F, size=k, replace=False)) if k < F else np.arange(F)
        split = gini_split(Q, X, y, w, members, feats)
        if split is None:
            return
        _, f, thr = split
        go_left = X[members, f] <= thr
        if go_left.sum() < min_samples or (~go_left).sum() < min_samples:
            return
        feature[node], threshold[node] = f, thr
        li = new_node(members[go_left])
        ri = new_node(members[~go_left])
        left[node], right[node] = li, ri
        grow(li, members[go_left], level + 1)
        grow(ri, members[~go_left], level + 1)

    grow(new_node(idx), idx, 0)
    return EdgeTree(
        np.asarray(feature, dtype=np.int32),
        np.asarray(threshold, dtype=np.float32),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(masks, dtype=np.float32),
        np.asarray(counts, dtype=np.int32),
    )


def train_edge_forest(
    samples: EdgeSamples, space, n_trees=4, depth=16, seed=0, frac_features=0.25, m=256, min_samples=8, backend=None
) -> EdgeForest:
    """Structured trees on disjoint seeded subsets of the samples.

    Every node derives binary labels from its members' region patches
    (:func:`structured_split_label`) and takes the best Gini split on them;
    each node keeps the mean edge mask of its members.
    """
    if len(np.unique(samples.image_ids)) < 2:
        raise ValueError("edge training needs samples from at least two images")
    n = len(samples.features)
    rng = np.random.default_rng(seed)
    chunks = np.array_split(rng.permutation(n), n_trees)
    if min(len(c) for c in chunks) < 2 * min_samples:
        raise ValueError(f"too few samples ({n}) for {n_trees} trees")
    X = np.ascontiguousarray(samples.features, dtype=np.float32)
    Q = Quantizer.fit(X).transform(X)
    trees = []
    for c in chunks:
        trees.append(
            _train_edge_tree(X, Q, samples.segments, samples.edges, np.sort(c), depth, min_samples, frac_features, m, rng)
        )
    return EdgeForest(trees, space, backend or HogLuvBackend())


def detect_edges(img: ImagePlane, forest: EdgeForest, stride=2, multiscale=False, return_votes=False):
    """Per-pixel edge probability in [0, 1], image resolution.

    With ``multiscale`` the maps at scales 0.5, 1 and 2 are resized back and
    averaged (averaging happens before any thresholding).
    """
    if multiscale:
        maps = []
        for s in (0.5, 1.0, 2.0):
            dims = (max(EDGE_PATCH, int(round(img.height * s))), max(EDGE_PATCH, int(round(img.width * s))))
            e = detect_edges(ImagePlane(resize(img.data, dims)), forest, stride)
            maps.append(resize(e[None], (img.height, img.width))[0])
        return np.clip(np.mean(maps, axis=0), 0, 1).astype(np.float32)
    if img.height < EDGE_PATCH or img.width < EDGE_PATCH:
        raise ValueError(f"image smaller than the {EDGE_PATCH}x{EDGE_PATCH} patch")
    if stride % CELL_PX:
        raise ValueError(f"stride must be a multiple of {CELL_PX} pixels")
    step = stride // CELL_PX
    st = edge_channels(img, forest.backend)
    look, pair = forest.feature_space.smooth(st.planes)
    H, W = st.height, st.width
    n_y, n_x = (H - WIN_CELLS) // step + 1, (W - WIN_CELLS) // step + 1
    c = forest.compile(H, W)
    leaves = kernels.leaf_windows(
        np.ascontiguousarray(look).ravel(), np.ascontiguousarray(pair).ravel(), W, n_y, n_x, step,
        c["kind"], c["off_a"], c["off_b"], c["thr"], c["left"], c["right"], c["roots"],
    )
    M = c["masks"][leaves[0]].astype(np.float64)
    for t in range(1, len(forest.trees)):
        M += c["masks"][leaves[t]]
    ph, pw = img.height + 2 * EDGE_PAD, img.width + 2 * EDGE_PAD
    acc = np.zeros((ph, pw))
    votes = np.zeros((ph, pw))
    sp = stride
    for dy in range(EDGE_OUT):
        for dx in range(EDGE_OUT):
            ys = slice(OUT_OFF + dy, OUT_OFF + dy + sp * n_y, sp)
            xs = slice(OUT_OFF + dx, OUT_OFF + dx + sp * n_x, sp)
            acc[ys, xs] += M[:, :, dy, dx]
            votes[ys, xs] += len(forest.trees)
    p = EDGE_PAD
    acc, votes = acc[p : p + img.height, p : p + img.width], votes[p : p + img.height, p : p + img.width]
    E = np.where(votes > 0, acc / np.maximum(votes, 1), 0.0).astype(np.float32)
    E = np.clip(E, 0, 1)
    return (E, votes) if return_votes else E


def _bilinear(E, x, y):
    h, w = E.shape
    x = np.clip(x, 0, w - 1.001)
    y = np.clip(y, 0, h - 1.001)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    return (
        E[y0, x0] * (1 - fx) * (1 - fy) + E[y0, x0 + 1] * fx * (1 - fy)
        + E[y0 + 1, x0] * (1 - fx) * fy + E[y0 + 1, x0 + 1] * fx * fy
    )


def edge_nms(E, r=1, s=5, m=1.01):
    """Thin an edge map: zero every pixel that is weaker (after multiplying
    by ``m``) than the map ``d`` pixels along its normal, ``0 < |d| <= r``;
    orientation from second derivatives of the smoothed map. Values within
    ``s`` pixels of the border are faded linearly."""
    E = np.asarray(E, dtype=np.float64)
    gy, gx = np.gradient(conv_tri(E.astype(np.float32), 4).astype(np.float64))
    _, gxx = np.gradient(gx)
    gyy, gxy = np.gradient(gy)
    ori = np.mod(np.arctan2(gyy * np.sign(-gxy) + 1e-5, gxx), np.pi)
    co, si = np.cos(ori), np.sin(ori)
    h, w = E.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = E.copy()
    for d in range(-r, r + 1):
        if d == 0:
            continue
        nb = _bilinear(E, xx + d * co, yy + d * si)
        out[E * m < nb] = 0
    s = int(min(s, w // 2, h // 2))
    if s > 0:
        ramp = np.arange(s) / s
        out[:, :s] *= ramp[None, :]
        out[:, w - s :] *= ramp[None, ::-1]
        out[:s, :] *= ramp[:, None]
        out[h - s :, :] *= ramp[::-1, None]
    return out.astype(np.float32)


def _offsets(tol):
    r = int(np.floor(tol))
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= tol * tol]
    return sorted(offs, key=lambda o: (o[0] ** 2 + o[1] ** 2, o))


def match_edges(pred, truth, tol=1.0):
    """Greedy one-to-one matching of predicted and true edge pixels within
    Euclidean distance ``tol``, nearest offsets first. Returns boolean maps
    ``(matched_pred, matched_truth)``."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth differ in shape")
    h, w = pred.shape
    mp = np.zeros_like(pred)
    mt = np.zeros_like(truth)
    py, px = np.nonzero(pred)
    for dy, dx in _offsets(tol):
        ty, tx = py + dy, px + dx
        ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        sel = np.flatnonzero(ok)
        sel = sel[~mp[py[sel], px[sel]]]
        sel = sel[truth[ty[sel], tx[sel]] & ~mt[ty[sel], tx[sel]]]
        mp[py[sel], px[sel]] = True
        mt[ty[sel], tx[sel]] = True
    return mp, mt


@dataclass
class EdgeScores:
    precision: float
    recall: float
    f: float
    threshold: float
    curve: np.ndarray  # rows: threshold, precision, recall, F


def evaluate_edges(preds, truths, tol=1.0, n_thresholds=20, thin_pred=True):
    """Precision/recall of thresholded edge maps against truth masks.

    ``preds`` and ``truths`` are single maps or equal-length lists
    (counts are pooled over images). Thresholds are ``k / (n + 1)``,
    ``k = 1..n``; each binarized map is thinned to one-pixel width before
    matching unless ``thin_pred`` is false. The best-F point is reported.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, truths = [preds], [truths]
    thresholds = np.arange(1, n_thresholds + 1) / (n_thresholds + 1)
    rows = []
    for t in thresholds:
        n_pred = n_truth = hit_p = hit_t = 0
        for p, g in zip(preds, truths):
            b = np.asarray(p) > t
            if thin_pred:
                b = thin(b)
            g = np.asarray(g, dtype=bool)
            mp, mt = match_edges(b, g, tol)
            n_pred += b.sum()
            n_truth += g.sum()
            hit_p += mp.sum()
            hit_t += mt.sum()
        prec = hit_p / n_pred if n_pred else 0.0
        rec = hit_t / n_truth if n_truth else 0.0
        f = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        rows.append((t, prec, rec, f))
    curve = np.asarray(rows)
    best = int(np.argmax(curve[:, 3]))
    return EdgeScores(float(curve[best, 1]), float(curve[best, 2]), float(curve[best, 3]), float(curve[best, 0]), curve)


# ---------------------------------------------------------------------------
# files


def read_label_pgm(path) -> np.ndarray:
    """Region labels from a 16-bit (or 8-bit) PGM."""
    arr, _ = read_pnm(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: label maps must be single-channel")
    return arr.astype(np.int32)


def write_label_pgm(path, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 65535:
        raise ValueError("labels must fit in 16 bits")
    write_pnm(path, labels.astype(np.uint16), maxval=65535)


EDGE_MAGIC = b"CFE1"


class EdgeModelError(ValueError):
    pass


def dump_edge_model(forest: EdgeForest) -> bytes:
    """``CFE1``: magic, JSON header, little-endian node arrays, CRC32 trailer."""
    sp = forest.feature_space
    head = json.dumps(
        {"space": sp.describe(), "backend": forest.backend.describe(), "out": EDGE_OUT}, sort_keys=True
    ).encode()
    parts = [EDGE_MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(sp.pairs)),
             sp.pairs.astype("<i4").tobytes(), struct.pack("<I", len(forest.trees))]
    for t in forest.trees:
        parts.append(struct.pack("<I", t.n_nodes))
        for arr, dt in ((t.feature, "<i4"), (t.threshold, "<f4"), (t.left, "<i4"), (t.right, "<i4"),
                        (t.counts, "<i4"), (t.masks, "<f4")):
            parts.append(np.asarray(arr).astype(dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def parse_edge_model(buf: bytes) -> EdgeForest:
    from .detector import backend_from_description

    if buf[:4] != EDGE_MAGIC:
        raise EdgeModelError(f"bad magic {buf[:4]!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise EdgeModelError("checksum mismatch (truncated or corrupted file)")
    (n,) = struct.unpack_from("<I", body, 4)
    head = json.loads(body[8 : 8 + n])
    pos = 8 + n
    (n_pairs,) = struct.unpack_from("<I", body, pos)
    pos += 4
    pairs = np.frombuffer(body, "<i4", 3 * n_pairs, pos).reshape(-1, 3)
    pos += 12 * n_pairs
    d = head["space"]
    space = CandidateFeatureSpace(
        d["kind"], d["window"], d["n_maps"], d["lookup_radius"], d["pair_radius"], pair_seed=d["pair_seed"], pairs=pairs
    )
    (n_trees,) = struct.unpack_from("<I", body, pos)
    pos += 4
    trees = []
    for _ in range(n_trees):
        (nn,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrs = []
        for dt, count in (("<i4", nn), ("<f4", nn), ("<i4", nn), ("<i4", nn), ("<i4", nn), ("<f4", nn * EDGE_OUT**2)):
            arrs.append(np.frombuffer(body, dt, count, pos).copy())
            pos += 4 * count
        f, thr, lft, rgt, cnt, masks = arrs
        trees.append(EdgeTree(f, thr, lft, rgt, masks.reshape(nn, EDGE_OUT, EDGE_OUT), cnt))
    if pos != len(body):
        raise EdgeModelError("unexpected trailing bytes")
    return EdgeForest(trees, space, backend_from_description(head["backend"]))


def save_edge_model(forest: EdgeForest, path):
    with open(path, "wb") as fh:
        fh.write(dump_edge_model(forest))


def load_edge_model(path) -> EdgeForest:
    with open(path, "rb") as fh:
        return parse_edge_model(fh.read())
