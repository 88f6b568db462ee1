"""Boosted depth-limited decision trees over channel-feature lookups.

Feature indexing (stable, also used by the file format):

* pixel lookups come first; lookup ``k`` is ``(map, cy, cx)`` with
  ``k = (map * win_h + cy) * win_w + cx``, i.e. a C-order flatten of the
  ``(n_maps, win_h, win_w)`` window;
* pairwise differences follow; pair ``j`` is ``pairs[j] = (map, a, b)``
  with ``a < b`` flat cell indices inside one map, value
  ``S[map, a] - S[map, b]`` on the pair-smoothed maps.

Trees route a sample left when ``value <= threshold``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .channels import ChannelStack, conv_tri

__all__ = [
    "CandidateFeatureSpace",
    "DecisionTree",
    "BoostedForest",
    "WindowScore",
    "Quantizer",
    "ForestFormatError",
    "ForestVersionError",
    "ForestCorruptError",
    "extract_features",
    "train_tree",
    "train_realboost",
    "calibrate_cascade",
    "forest_score",
    "feature_occurrence",
    "save_forest",
    "load_forest",
    "dump_forest",
    "parse_forest",
    "N_BINS",
]

N_BINS = 256
KINDS = ("pixel_lookup", "pairwise_difference", "lookup+pairwise")
LEAF, LOOKUP, PAIR = -1, 0, 1


class CandidateFeatureSpace:
    """Candidate features over a ``(n_maps, win_h, win_w)`` window of cells.

    Parameters
    ----------
    kind : {"pixel_lookup", "pairwise_difference", "lookup+pairwise"}
    lookup_radius, pair_radius : int
        Triangle-filter radii applied to the maps before lookups and before
        pairwise differences.
    n_pairs : int, optional
        Size of the seeded uniform pair subsample; defaults to twice the
        number of pixel lookups, capped by the number of same-map pairs.
    """

    def __init__(self, kind, window, n_maps, lookup_radius=0, pair_radius=0, n_pairs=None, pair_seed=0, pairs=None):
        if kind not in KINDS:
            raise ValueError(f"unknown feature kind {kind!r}")
        self.kind = kind
        self.window = (int(window[0]), int(window[1]))
        self.n_maps = int(n_maps)
        self.lookup_radius = int(lookup_radius)
        self.pair_radius = int(pair_radius)
        self.pair_seed = int(pair_seed)
        cells = self.window[0] * self.window[1]
        self.n_lookup = self.n_maps * cells if kind != "pairwise_difference" else 0
        if kind == "pixel_lookup":
            self.pairs = np.zeros((0, 3), dtype=np.int32)
        elif pairs is not None:
            self.pairs = np.asarray(pairs, dtype=np.int32).reshape(-1, 3)
        else:
            self.pairs = self._sample_pairs(n_pairs)
        self.n_features = self.n_lookup + len(self.pairs)

    def _sample_pairs(self, n_pairs):
        cells = self.window[0] * self.window[1]
        per_map = cells * (cells - 1) // 2
        total = per_map * self.n_maps
        cap = 2 * self.n_maps * cells
        n = cap if n_pairs is None else min(int(n_pairs), cap)
        n = min(n, total)
        rng = np.random.default_rng(self.pair_seed)
        picks = np.sort(rng.choice(total, size=n, replace=False))
        ia, ib = np.triu_indices(cells, 1)
        m, r = np.divmod(picks, per_map)
        return np.stack([m, ia[r], ib[r]], axis=1).astype(np.int32)

    def __eq__(self, other):
        return (
            isinstance(other, CandidateFeatureSpace)
            and self.describe() == other.describe()
            and np.array_equal(self.pairs, other.pairs)
        )

    def describe(self):
        return {
            "kind": self.kind,
            "window": list(self.window),
            "n_maps": self.n_maps,
            "lookup_radius": self.lookup_radius,
            "pair_radius": self.pair_radius,
            "n_pairs": int(len(self.pairs)),
            "pair_seed": self.pair_seed,
        }

    def decode(self, k):
        """Feature index -> ``("lookup", map, cy, cx)`` or
        ``("pair", map, (ya, xa), (yb, xb))``."""
        wh, ww = self.window
        if not 0 <= k < self.n_features:
            raise IndexError(k)
        if k < self.n_lookup:
            m, rest = divmod(k, wh * ww)
            return ("lookup", m, *divmod(rest, ww))
        m, a, b = (int(v) for v in self.pairs[k - self.n_lookup])
        return ("pair", m, divmod(a, ww), divmod(b, ww))

    def encode_lookup(self, m, cy, cx):
        wh, ww = self.window
        return (m * wh + cy) * ww + cx

    def feature_map(self) -> np.ndarray:
        """Channel map used by each feature."""
        wh, ww = self.window
        lookup_maps = np.repeat(np.arange(self.n_maps), wh * ww)[: self.n_lookup]
        return np.concatenate([lookup_maps, self.pairs[:, 0]]).astype(np.int64)

    def smooth(self, planes):
        """``(lookup_source, pair_source)`` maps for this space."""
        planes = np.asarray(planes, dtype=np.float32)
        look = conv_tri(planes, self.lookup_radius) if self.lookup_radius else planes
        if self.pair_radius == self.lookup_radius:
            pair = look
        else:
            pair = conv_tri(planes, self.pair_radius) if self.pair_radius else planes
        return look, pair

    def offsets(self, plane_h, plane_w):
        """Per-feature ``(kind, off_a, off_b)`` into C-order flattened source
        maps of shape ``(n_maps, plane_h, plane_w)``, relative to the
        window's top-left cell."""
        wh, ww = self.window
        kind = np.full(self.n_features, LOOKUP, dtype=np.int8)
        off_a = np.zeros(self.n_features, dtype=np.int64)
        off_b = np.full(self.n_features, -1, dtype=np.int64)
        if self.n_lookup:
            m, cy, cx = np.unravel_index(np.arange(self.n_lookup), (self.n_maps, wh, ww))
            off_a[: self.n_lookup] = (m * plane_h + cy) * plane_w + cx
        if len(self.pairs):
            m, a, b = self.pairs[:, 0].astype(np.int64), self.pairs[:, 1], self.pairs[:, 2]
            ya, xa = np.divmod(a, ww)
            yb, xb = np.divmod(b, ww)
            sl = slice(self.n_lookup, None)
            kind[sl] = PAIR
            off_a[sl] = (m * plane_h + ya) * plane_w + xa
            off_b[sl] = (m * plane_h + yb) * plane_w + xb
        return kind, off_a, off_b

    def features_at(self, look, pair, positions):
        """Feature rows for windows whose top-left cells are ``positions``
        (``(n, 2)`` of ``(cy, cx)``) on already smoothed maps."""
        look = np.ascontiguousarray(look, dtype=np.float32)
        pair = np.ascontiguousarray(pair, dtype=np.float32)
        _, H, W = look.shape
        kind, off_a, off_b = self.offsets(H, W)
        pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
        base = pos[:, 0] * W + pos[:, 1]
        fa, fb = look.ravel(), pair.ravel()
        out = np.empty((len(base), self.n_features), dtype=np.float32)
        nl = self.n_lookup
        if nl:
            out[:, :nl] = fa[base[:, None] + off_a[None, :nl]]
        if self.n_features > nl:
            out[:, nl:] = fb[base[:, None] + off_a[None, nl:]] - fb[base[:, None] + off_b[None, nl:]]
        return out


def extract_features(window: ChannelStack, space: CandidateFeatureSpace) -> np.ndarray:
    """Feature vector of one window (smoothing applied within the window)."""
    if (window.n_maps, window.height, window.width) != (space.n_maps, *space.window):
        raise ValueError(
            f"window {window.n_maps}x{window.height}x{window.width} does not match "
            f"feature space {space.n_maps}x{space.window[0]}x{space.window[1]}"
        )
    look, pair = space.smooth(window.planes)
    return space.features_at(look, pair, [(0, 0)])[0]


# ---------------------------------------------------------------------------
# trees


@dataclass
class DecisionTree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.int32)
        self.threshold = np.asarray(self.threshold, dtype=np.float32)
        self.left = np.asarray(self.left, dtype=np.int32)
        self.right = np.asarray(self.right, dtype=np.int32)
        self.value = np.asarray(self.value, dtype=np.float32)
        n = self.feature.size
        if not all(a.size == n for a in (self.threshold, self.left, self.right, self.value)):
            raise ValueError("tree arrays differ in length")
        if n == 0:
            raise ValueError("tree has no nodes")
        if not np.all(np.isfinite(self.value)):
            raise ValueError("leaf values must be finite")

    @property
    def n_nodes(self):
        return self.feature.size

    @property
    def internal(self):
        return self.feature >= 0

    @property
    def depth(self):
        def d(i):
            return 0 if self.feature[i] < 0 else 1 + max(d(self.left[i]), d(self.right[i]))

        return d(0)

    def path(self, x):
        """Feature indices looked up while routing ``x``."""
        i, out = 0, []
        while self.feature[i] >= 0:
            f = int(self.feature[i])
            out.append(f)
            i = self.left[i] if x[f] <= self.threshold[i] else self.right[i]
        return out

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

    def predict(self, X):
        return self.value[self.leaf_index(X)]


class Quantizer:
    """Per-feature linear quantisation to ``N_BINS`` bins over the training range."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        span = np.asarray(hi, dtype=np.float64) - self.lo
        self.scale = np.where(span > 0, N_BINS / np.where(span > 0, span, 1.0), 0.0)

    @classmethod
    def fit(cls, X):
        X = np.asarray(X)
        return cls(X.min(axis=0), X.max(axis=0))

    def transform(self, X, chunk=4096):
        X = np.asarray(X)
        out = np.empty(X.shape, dtype=np.uint8)
        for s in range(0, len(X), chunk):
            q = np.floor((X[s : s + chunk] - self.lo) * self.scale)
            out[s : s + chunk] = np.clip(q, 0, N_BINS - 1)
        return out


def gini_split(Q, X, y, w, idx, feats):
    """Best ``(impurity, feature, threshold)`` over ``feats`` for node
    samples ``idx``, or ``None`` if no feature separates them.

    Impurity is the weighted Gini ``W+L W-L / WL + W+R W-R / WR``; ties go to
    the lowest feature index, then the lowest bin.
    """
    k = len(feats)
    q = Q[np.ix_(idx, feats)].astype(np.int64) + (np.arange(k, dtype=np.int64) * N_BINS)[None, :]
    pos = y[idx] > 0
    wi = w[idx]
    size = k * N_BINS
    hp = np.bincount(q[pos].ravel(), np.repeat(wi[pos], k), minlength=size).reshape(k, N_BINS)
    hn = np.bincount(q[~pos].ravel(), np.repeat(wi[~pos], k), minlength=size).reshape(k, N_BINS)
    lp, ln = np.cumsum(hp, 1), np.cumsum(hn, 1)
    tp, tn = lp[:, -1:], ln[:, -1:]
    rp, rn = tp - lp, tn - ln
    with np.errstate(divide="ignore", invalid="ignore"):
        imp_l = np.where(lp + ln > 0, lp * ln / (lp + ln), 0.0)
        imp_r = np.where(rp + rn > 0, rp * rn / (rp + rn), 0.0)
    imp = imp_l + imp_r
    # weights are positive, so a side is non-empty iff it holds weight
    valid = (lp + ln > 0) & (rp + rn > 0)
    if not valid.any():
        return None
    imp = np.where(valid, imp, np.inf)
    best = int(np.argmin(imp))
    fi, b = divmod(best, N_BINS)
    f = int(feats[fi])
    col_q = Q[idx, f]
    col_x = X[idx, f]
    left_max = col_x[col_q <= b].max()
    right_min = col_x[col_q > b].min()
    thr = np.float32((np.float64(left_max) + np.float64(right_min)) / 2)
    if not (left_max <= thr < right_min):
        thr = np.float32(left_max)
    return float(imp[fi, b]), f, thr


def _leaf_value(wp, wn, eps):
    return 0.5 * (math.log(wp + eps) - math.log(wn + eps))


def train_tree(X, y, weights, depth=3, frac_features=1.0 / 16, rng_seed=0, Q=None, eps=None, features=None):
    """Greedy Gini tree with RealBoost leaf confidences.

    Parameters
    ----------
    X : (n, F) float32
        Raw features; thresholds are chosen in this space.
    y : (n,) array of +1/-1
    weights : (n,) positive, normalised
    frac_features : float
        Share of features drawn (seeded) as candidates at each node.
    Q : (n, F) uint8, optional
        Quantised ``X``; computed from ``X``'s range when omitted.
    """
    X = np.asarray(X, dtype=np.float32)
    y = np.where(np.asarray(y) > 0, 1, -1)
    w = np.asarray(weights, dtype=np.float64)
    if not (0 < frac_features <= 1):
        raise ValueError("frac_features must lie in (0, 1]")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    if Q is None:
        Q = Quantizer.fit(X).transform(X)
    n, F = X.shape
    eps = 1.0 / (2 * n) if eps is None else eps
    pool = np.arange(F) if features is None else np.asarray(features)
    k = max(1, int(round(frac_features * len(pool))))
    rng = np.random.default_rng(rng_seed)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr in (feature, left, right):
            arr.append(-1)
        threshold.append(0.0)
        value.append(0.0)
        return len(feature) - 1

    def grow(node, idx, level):
        wp = float(w[idx][y[idx] > 0].sum())
        wn = float(w[idx][y[idx] < 0].sum())
        value[node] = _leaf_value(wp, wn, eps)
        if level >= depth or wp == 0 or wn == 0:
            return
        feats = np.sort(rng.choice(pool, size=k, replace=False)) if k < len(pool) else pool
        split = gini_split(Q, X, y, w, idx, feats)
        if split is None:
            return
        _, f, thr = split
        go_left = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        li, ri = new_node(), new_node()
        left[node], right[node] = li, ri
        grow(li, idx[go_left], level + 1)
        grow(ri, idx[~go_left], level + 1)

    grow(new_node(), np.arange(n), 0)
    return DecisionTree(feature, threshold, left, right, value)


# ---------------------------------------------------------------------------
# forests


@dataclass
class BoostedForest:
    trees: list
    cascade_thresholds: np.ndarray
    feature_space: CandidateFeatureSpace
    history: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.cascade_thresholds = np.asarray(self.cascade_thresholds, dtype=np.float64)
        if self.cascade_thresholds.size != len(self.trees):
            raise ValueError("need one cascade threshold per tree")
        self._compiled = {}

    def __len__(self):
        return len(self.trees)

    @property
    def n_internal(self):
        return int(sum(t.internal.sum() for t in self.trees))

    def decision_function(self, X):
        X = np.asarray(X, dtype=np.float32)
        s = np.zeros(len(X), dtype=np.float64)
        for t in self.trees:
            s = s + t.predict(X).astype(np.float64)
        return s

    def prefix_scores(self, X):
        X = np.asarray(X, dtype=np.float32)
        out = np.empty((len(X), len(self.trees)), dtype=np.float64)
        s = np.zeros(len(X), dtype=np.float64)
        for j, t in enumerate(self.trees):
            s = s + t.predict(X).astype(np.float64)
            out[:, j] = s
        return out

    def compile(self, plane_h, plane_w):
        """Flat node arrays for the window-scanning kernels."""
        key = (plane_h, plane_w)
        if key in self._compiled:
            return self._compiled[key]
        fk, fa, fb = self.feature_space.offsets(plane_h, plane_w)
        kinds, off_a, off_b, thr, left, right, value, roots = [], [], [], [], [], [], [], []
        base = 0
        for t in self.trees:
            roots.append(base)
            feat = t.feature.astype(np.int64)
            is_leaf = feat < 0
            safe = np.where(is_leaf, 0, feat)
            kinds.append(np.where(is_leaf, LEAF, fk[safe]).astype(np.int8))
            off_a.append(np.where(is_leaf, 0, fa[safe]))
            off_b.append(np.where(is_leaf, 0, fb[safe]))
            thr.append(t.threshold)
            left.append(np.where(is_leaf, 0, t.left + base))
            right.append(np.where(is_leaf, 0, t.right + base))
            value.append(t.value)
            base += t.n_nodes
        c = {
            "kind": np.ascontiguousarray(np.concatenate(kinds), dtype=np.int8),
            "off_a": np.ascontiguousarray(np.concatenate(off_a), dtype=np.int64),
            "off_b": np.ascontiguousarray(np.concatenate(off_b), dtype=np.int64),
            "thr": np.ascontiguousarray(np.concatenate(thr), dtype=np.float32),
            "left": np.ascontiguousarray(np.concatenate(left), dtype=np.int32),
            "right": np.ascontiguousarray(np.concatenate(right), dtype=np.int32),
            "value": np.ascontiguousarray(np.concatenate(value), dtype=np.float32),
            "roots": np.asarray(roots, dtype=np.int32),
            "cascade": np.ascontiguousarray(self.cascade_thresholds, dtype=np.float64),
        }
        self._compiled[key] = c
        return c

    def score_map(self, planes, reject_early=True, step=1, smoothed=None):
        """Score every window position (stride ``step`` cells) of a channel
        map ``(n_maps, H, W)``. Returns ``(scores, n_trees_evaluated)``."""
        space = self.feature_space
        planes = np.asarray(planes, dtype=np.float32)
        if planes.shape[0] != space.n_maps:
            raise ValueError(f"map count {planes.shape[0]} != feature space {space.n_maps}")
        look, pair = smoothed if smoothed is not None else space.smooth(planes)
        _, H, W = planes.shape
        wh, ww = space.window
        n_y, n_x = (H - wh) // step + 1, (W - ww) // step + 1
        if n_y < 1 or n_x < 1:
            return np.zeros((0, 0)), np.zeros((0, 0), dtype=np.int32)
        c = self.compile(H, W)
        return kernels.score_windows(
            np.ascontiguousarray(look).ravel(), np.ascontiguousarray(pair).ravel(), W, n_y, n_x, step,
            c["kind"], c["off_a"], c["off_b"], c["thr"], c["left"], c["right"], c["value"],
            c["roots"], c["cascade"], bool(reject_early),
        )


class WindowScore(NamedTuple):
    score: float
    rejected_at: int | None  # number of trees evaluated before rejection

    @property
    def rejected(self):
        return self.rejected_at is not None


def forest_score(forest: BoostedForest, window: ChannelStack, reject_early: bool = False) -> WindowScore:
    """Sum of leaf values for one window, optionally stopping as soon as a
    prefix score drops below its cascade threshold."""
    x = extract_features(window, forest.feature_space)
    s = 0.0
    for j, t in enumerate(forest.trees):
        i = 0
        while t.feature[i] >= 0:
            i = t.left[i] if x[t.feature[i]] <= t.threshold[i] else t.right[i]
        s = s + float(t.value[i])
        if reject_early and s < forest.cascade_thresholds[j]:
            return WindowScore(s, j + 1)
    return WindowScore(s, None)


def _calibrate_cascade(prefix_pos, every, margin):
    n_trees = prefix_pos.shape[1]
    thr = np.full(n_trees, -np.inf)
    if every and len(prefix_pos):
        for j in range(every - 1, n_trees, every):
            # float32-representable (rounded down) so saved forests reject identically
            target = prefix_pos[:, j].min() - margin
            t32 = np.float32(target)
            if t32 > target:
                t32 = np.nextafter(t32, np.float32(-np.inf))
            thr[j] = float(t32)
    return thr


def calibrate_cascade(forest: BoostedForest, X_pos, every=32, margin=0.5) -> BoostedForest:
    """Set rejection thresholds every ``every`` trees to the minimum prefix
    score of the positives ``X_pos`` minus ``margin`` (others ``-inf``)."""
    X_pos = np.asarray(X_pos, dtype=np.float32)
    forest.cascade_thresholds = _calibrate_cascade(forest.prefix_scores(X_pos), every, margin)
    forest._compiled = {}
    return forest


def train_realboost(
    X,
    labels,
    space: CandidateFeatureSpace,
    n_trees: int = 2048,
    depth: int = 3,
    frac_features: float = 1.0 / 16,
    seed: int = 0,
    cascade_every: int = 32,
    cascade_margin: float = 0.5,
    log=None,
) -> BoostedForest:
    """Confidence-rated boosting of depth-limited trees.

    Sample weights start uniform within each class (each class holding half
    the mass), are multiplied by ``exp(-y h_t(x))`` after every tree and
    renormalised. ``forest.history`` records, per round, the exponential
    loss ``sum(w0 * exp(-y F))`` and the initial-weighted training error.
    """
    X = np.ascontiguousarray(X, dtype=np.float32)
    y = np.where(np.asarray(labels) > 0, 1, -1)
    if X.shape[1] != space.n_features:
        raise ValueError(f"{X.shape[1]} features given, space defines {space.n_features}")
    n_pos, n_neg = int((y > 0).sum()), int((y < 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("training needs both positive and negative samples")
    w0 = np.where(y > 0, 0.5 / n_pos, 0.5 / n_neg)
    w = w0.copy()
    Q = Quantizer.fit(X).transform(X)
    seeds = np.random.SeedSequence(seed).generate_state(n_trees)
    F = np.zeros(len(X), dtype=np.float64)
    trees, losses, errors = [], [], []
    for t in range(n_trees):
        tree = train_tree(X, y, w, depth, frac_features, int(seeds[t]), Q=Q)
        h = tree.predict(X).astype(np.float64)
        F = F + h
        w = w * np.exp(-y * h)
        w /= w.sum()
        trees.append(tree)
        losses.append(float(np.sum(w0 * np.exp(-y * F))))
        errors.append(float(np.sum(w0 * (y * F <= 0))))
        if log is not None and (t % 64 == 0 or t == n_trees - 1):
            log(f"tree {t + 1}/{n_trees}: loss {losses[-1]:.5f} error {errors[-1]:.5f}")
    pos_prefix = np.cumsum(np.stack([t.predict(X[y > 0]).astype(np.float64) for t in trees], 1), 1)
    cascade = _calibrate_cascade(pos_prefix, cascade_every, cascade_margin)
    forest = BoostedForest(trees, cascade, space)
    forest.history = {"loss": losses, "error": errors}
    return forest


def feature_occurrence(forest: BoostedForest, top=(10, 20, 50)):
    """How often each channel map is used by internal nodes.

    Returns ``(counts, occupancy)``: ``counts[m]`` is the number of internal
    nodes reading map ``m``; ``occupancy[N]`` is the share of all counts held
    by the ``ceil(N% * n_maps)`` most used maps.
    """
    fmap = forest.feature_space.feature_map()
    counts = np.zeros(forest.feature_space.n_maps, dtype=np.int64)
    for t in forest.trees:
        f = t.feature[t.feature >= 0]
        np.add.at(counts, fmap[f], 1)
    total = counts.sum()
    ranked = np.sort(counts)[::-1]
    occupancy = {}
    for n in top:
        k = max(1, math.ceil(n / 100 * len(counts)))
        occupancy[n] = float(ranked[:k].sum() / total) if total else 0.0
    return counts, occupancy


# ---------------------------------------------------------------------------
# serialisation

MAGIC = b"CFF1"
VERSION = 1


class ForestFormatError(ValueError):
    pass


class ForestVersionError(ForestFormatError):
    pass


class ForestCorruptError(ForestFormatError):
    pass


def dump_forest(forest: BoostedForest) -> bytes:
    if not forest.trees:
        raise ValueError("refusing to save an empty forest")
    sp = forest.feature_space
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack(
            "<B6i", KINDS.index(sp.kind), sp.window[0], sp.window[1], sp.n_maps,
            sp.lookup_radius, sp.pair_radius, sp.pair_seed,
        ),
        struct.pack("<I", len(sp.pairs)),
        sp.pairs.astype("<i4").tobytes(),
        struct.pack("<I", len(forest.trees)),
        np.array([t.n_nodes for t in forest.trees], dtype="<u4").tobytes(),
    ]
    for name, dt in (("feature", "<i4"), ("threshold", "<f4"), ("left", "<i4"), ("right", "<i4"), ("value", "<f4")):
        parts.append(np.concatenate([getattr(t, name) for t in forest.trees]).astype(dt).tobytes())
    parts.append(forest.cascade_thresholds.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_forest(forest: BoostedForest, path):
    data = dump_forest(forest)
    with open(path, "wb") as fh:
        fh.write(data)


def parse_forest(buf: bytes) -> BoostedForest:
    if buf[:4] != MAGIC:
        raise ForestFormatError(f"bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise ForestCorruptError("file truncated")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ForestVersionError(f"forest format version {version}, expected {VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ForestCorruptError("checksum mismatch (truncated or corrupted file)")
    try:
        pos = 8
        kind, wh, ww, n_maps, lr, pr, pseed = struct.unpack_from("<B6i", body, pos)
        pos += struct.calcsize("<B6i")
        (n_pairs,) = struct.unpack_from("<I", body, pos)
        pos += 4
        pairs = np.frombuffer(body, "<i4", 3 * n_pairs, pos).reshape(-1, 3)
        pos += 12 * n_pairs
        (n_trees,) = struct.unpack_from("<I", body, pos)
        pos += 4
        sizes = np.frombuffer(body, "<u4", n_trees, pos).astype(np.int64)
        pos += 4 * n_trees
        total = int(sizes.sum())
        arrays = {}
        for name, dt in (("feature", "<i4"), ("threshold", "<f4"), ("left", "<i4"), ("right", "<i4"), ("value", "<f4")):
            arrays[name] = np.frombuffer(body, dt, total, pos)
            pos += 4 * total
        cascade = np.frombuffer(body, "<f4", n_trees, pos).astype(np.float64)
        pos += 4 * n_trees
    except (struct.error, ValueError) as exc:
        raise ForestCorruptError(f"malformed forest file: {exc}") from exc
    if pos != len(body):
        raise ForestCorruptError("unexpected trailing bytes")
    space = CandidateFeatureSpace(KINDS[kind], (wh, ww), n_maps, lr, pr, pair_seed=pseed, pairs=pairs)
    trees, start = [], 0
    for size in sizes:
        sl = slice(start, start + int(size))
        trees.append(DecisionTree(*(arrays[n][sl] for n in ("feature", "threshold", "left", "right", "value"))))
        start += int(size)
    return BoostedForest(trees, cascade, space)


def load_forest(path) -> BoostedForest:
    with open(path, "rb") as fh:
        return parse_forest(fh.read())
