import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccf.channels import ChannelStack, conv_tri
from ccf.forest import (
    BoostedForest,
    CandidateFeatureSpace,
    DecisionTree,
    ForestCorruptError,
    ForestFormatError,
    ForestVersionError,
    Quantizer,
    calibrate_cascade,
    dump_forest,
    extract_features,
    feature_occurrence,
    forest_score,
    gini_split,
    load_forest,
    parse_forest,
    save_forest,
    train_realboost,
    train_tree,
)


def _toy(n=400, F=12, seed=0, margin=0.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, F)).astype(np.float32)
    y = np.where(X[:, 3] - 0.5 * X[:, 7] + margin * np.sign(X[:, 3]) > 0, 1, -1)
    if margin:
        X[:, 3] += margin * np.sign(X[:, 3])
    return X, y


def brute_gini(X, y, w, f):
    """All thresholds between sorted distinct values of feature ``f``."""
    vals = np.unique(X[:, f])
    best = np.inf
    for a, b in zip(vals, vals[1:]):
        t = (a + b) / 2
        left = X[:, f] <= t
        imp = 0.0
        for side in (left, ~left):
            p, n = w[side & (y > 0)].sum(), w[side & (y < 0)].sum()
            imp += p * n / (p + n)
        best = min(best, imp)
    return best


def test_gini_split_matches_brute_force_on_clusters():
    # two overlapping clusters per class along feature 0, noise on feature 1
    rng = np.random.default_rng(1)
    x0 = np.concatenate([rng.uniform(0, 1, 30), rng.uniform(1, 2, 10), rng.uniform(2, 3, 10), rng.uniform(3, 4, 30)])
    y = np.concatenate([np.ones(40), -np.ones(40)]).astype(int)
    X = np.stack([x0, rng.uniform(0, 4, 80)], 1).astype(np.float32)
    w = np.full(80, 1 / 80)
    Q = Quantizer.fit(X).transform(X)
    imp, f, thr = gini_split(Q, X, y, w, np.arange(80), np.array([0, 1]))
    assert f == 0
    assert imp == pytest.approx(min(brute_gini(X, y, w, 0), brute_gini(X, y, w, 1)), rel=1e-9)
    assert X[:, 0][X[:, 0] <= thr].max() < 2 <= X[:, 0][X[:, 0] > thr].min()


def test_gini_split_none_for_constant_features():
    X = np.ones((10, 3), dtype=np.float32)
    y = np.array([1, -1] * 5)
    Q = Quantizer.fit(X).transform(X)
    assert gini_split(Q, X, y, np.full(10, 0.1), np.arange(10), np.arange(3)) is None


def test_quantizer_range():
    X = np.array([[0.0, 5.0], [1.0, 5.0], [0.5, 5.0]], dtype=np.float32)
    Q = Quantizer.fit(X).transform(X)
    assert Q[:, 0].tolist() == [0, 255, 128] and (Q[:, 1] == 0).all()


def test_pure_node_is_leaf_and_depth_bound():
    X, y = _toy()
    w = np.full(len(y), 1 / len(y))
    t = train_tree(X, y, w, depth=3, frac_features=1.0)
    assert t.depth <= 3 and t.n_nodes <= 15
    pure = train_tree(X, np.ones(len(y)), w, depth=3, frac_features=1.0)
    assert pure.n_nodes == 1 and pure.value[0] > 0
    with pytest.raises(ValueError):
        train_tree(X, y, -w)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_exponential_loss_never_increases(seed, depth):
    X, y = _toy(300, 8, seed)
    space = CandidateFeatureSpace("pixel_lookup", (2, 4), 1)
    f = train_realboost(X, y, space, n_trees=20, depth=depth, frac_features=0.5, seed=seed)
    loss = np.array(f.history["loss"])
    assert np.all(np.diff(loss) <= 1e-12 * loss[:-1])


def test_separable_reaches_zero_error():
    X, y = _toy(300, 8, 3, margin=0.5)
    f = train_realboost(X, y, CandidateFeatureSpace("pixel_lookup", (2, 4), 1), n_trees=64, depth=2, frac_features=1.0)
    assert f.history["error"][-1] == 0.0
    assert np.all(np.sign(f.decision_function(X)) == y)


def test_training_deterministic():
    X, y = _toy(200, 8)
    sp = CandidateFeatureSpace("pixel_lookup", (2, 4), 1)
    a = dump_forest(train_realboost(X, y, sp, 16, 2, 0.5, seed=4))
    b = dump_forest(train_realboost(X, y, sp, 16, 2, 0.5, seed=4))
    assert a == b


def test_feature_space_indexing():
    sp = CandidateFeatureSpace("lookup+pairwise", (4, 3), 2, n_pairs=10, pair_seed=1)
    assert sp.n_lookup == 24 and sp.n_features == 34
    assert sp.decode(sp.encode_lookup(1, 2, 0)) == ("lookup", 1, 2, 0)
    kind, m, a, b = sp.decode(30)
    assert kind == "pair" and a < b
    assert sp == CandidateFeatureSpace("lookup+pairwise", (4, 3), 2, n_pairs=10, pair_seed=1)
    assert sp != CandidateFeatureSpace("lookup+pairwise", (4, 3), 2, n_pairs=10, pair_seed=2)
    with pytest.raises(IndexError):
        sp.decode(34)
    assert CandidateFeatureSpace("pairwise_difference", (4, 3), 2).n_features == 2 * 24


def test_features_equal_smooth_then_index_oracle():
    rng = np.random.default_rng(0)
    planes = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    sp = CandidateFeatureSpace("lookup+pairwise", (8, 8), 3, lookup_radius=1, pair_radius=2, n_pairs=50)
    x = extract_features(ChannelStack(planes), sp)
    look, pair = conv_tri(planes, 1), conv_tri(planes, 2)
    for k in range(sp.n_features):
        d = sp.decode(k)
        if d[0] == "lookup":
            assert x[k] == look[d[1], d[2], d[3]]
        else:
            (ya, xa), (yb, xb) = d[2], d[3]
            assert x[k] == pytest.approx(pair[d[1], ya, xa] - pair[d[1], yb, xb], abs=1e-7)
    const = extract_features(ChannelStack(np.full((3, 8, 8), 0.4)), sp)
    assert np.all(const[sp.n_lookup :] == 0)
    with pytest.raises(ValueError):
        extract_features(ChannelStack(planes[:, :7]), sp)


def _random_forest(n_trees, space, depth=3, seed=0):
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        n_int = 2**depth - 1
        feature = np.concatenate([rng.integers(0, space.n_features, n_int), -np.ones(n_int + 1, int)])
        left = np.concatenate([2 * np.arange(n_int) + 1, -np.ones(n_int + 1, int)])
        right = np.concatenate([2 * np.arange(n_int) + 2, -np.ones(n_int + 1, int)])
        thr = np.concatenate([rng.uniform(-0.3, 0.6, n_int), np.zeros(n_int + 1)])
        value = np.concatenate([np.zeros(n_int), rng.uniform(-1, 1, n_int + 1)])
        trees.append(DecisionTree(feature, thr, left, right, value))
    return BoostedForest(trees, np.full(n_trees, -np.inf), space)


@pytest.mark.parametrize("kind", ["pixel_lookup", "lookup+pairwise"])
def test_score_map_equals_per_window_scores(kernel_impl, kind):
    space = CandidateFeatureSpace(kind, (6, 4), 3, lookup_radius=1 if kind != "pixel_lookup" else 0, pair_radius=2)
    f = _random_forest(40, space)
    planes = np.random.default_rng(3).uniform(size=(3, 20, 17)).astype(np.float32)
    scores, n_eval = f.score_map(planes, reject_early=False)
    look, pair = space.smooth(planes)
    pos = np.stack(np.nonzero(np.ones(scores.shape)), 1)
    X = space.features_at(look, pair, pos)
    np.testing.assert_array_equal(scores.ravel(), f.decision_function(X))
    assert (n_eval == 40).all()
    if kind == "pixel_lookup":  # window-local smoothing is the identity here
        w = ChannelStack(planes[:, 5:11, 2:6])
        assert forest_score(f, w).score == scores[5, 2]


def test_kernels_agree_with_cascade():
    from ccf import kernels

    if "cython" not in kernels.IMPLEMENTATIONS:
        pytest.skip("extension not built")
    space = CandidateFeatureSpace("lookup+pairwise", (6, 4), 3, 1, 2)
    f = _random_forest(64, space, seed=2)
    planes = np.random.default_rng(4).uniform(size=(3, 24, 20)).astype(np.float32)
    f.cascade_thresholds = np.where(np.arange(64) % 8 == 7, -0.5, -np.inf)
    f._compiled = {}
    out = {}
    for name in ("python", "cython"):
        kernels.use(name)
        out[name] = f.score_map(planes, reject_early=True)
    kernels.use("cython")
    np.testing.assert_array_equal(out["python"][0], out["cython"][0])
    np.testing.assert_array_equal(out["python"][1], out["cython"][1])
    assert (out["python"][1] < 64).any()


def test_early_rejection_only_drops_rejected_windows():
    X, y = _toy(300, 8)
    space = CandidateFeatureSpace("pixel_lookup", (2, 4), 1)
    f = train_realboost(X, y, space, n_trees=64, depth=2, frac_features=0.5, cascade_every=8, cascade_margin=0.0)
    thr = f.cascade_thresholds
    assert np.all(np.isinf(thr[np.arange(64) % 8 != 7]))
    assert np.all(thr[7::8] == thr[7::8].astype(np.float32))
    for x in X[:50]:
        win = ChannelStack(x.reshape(1, 2, 4))
        full, early = forest_score(f, win), forest_score(f, win, reject_early=True)
        if not early.rejected:
            assert early.score == full.score
    # every training positive survives its own calibration
    pos = [forest_score(f, ChannelStack(x.reshape(1, 2, 4)), True) for x in X[y > 0]]
    assert not any(p.rejected for p in pos)
    calibrate_cascade(f, X[:0])
    assert np.all(np.isinf(f.cascade_thresholds))


def test_serialization_roundtrip(tmp_path):
    X, y = _toy(200, 16)
    sp = CandidateFeatureSpace("lookup+pairwise", (3, 2), 2, 0, 1, n_pairs=4)
    f = train_realboost(X, y, sp, 10, 3, 0.5)
    p = tmp_path / "f.cff"
    save_forest(f, p)
    g = load_forest(p)
    assert g.feature_space == sp
    np.testing.assert_array_equal(g.decision_function(X), f.decision_function(X))
    np.testing.assert_array_equal(g.cascade_thresholds, f.cascade_thresholds.astype(np.float32))
    assert dump_forest(g) == dump_forest(f)


def test_serialization_errors():
    X, y = _toy(100, 8)
    buf = dump_forest(train_realboost(X, y, CandidateFeatureSpace("pixel_lookup", (2, 4), 1), 4, 2, 0.5))
    with pytest.raises(ForestFormatError, match="magic"):
        parse_forest(b"ABCD" + buf[4:])
    with pytest.raises(ForestVersionError):
        parse_forest(buf[:4] + (7).to_bytes(4, "little") + buf[8:])
    with pytest.raises(ForestCorruptError):
        parse_forest(buf[:-9] + buf[-4:])
    flipped = bytearray(buf)
    flipped[40] ^= 1
    with pytest.raises(ForestCorruptError):
        parse_forest(bytes(flipped))
    with pytest.raises(ValueError):
        dump_forest(BoostedForest([], [], CandidateFeatureSpace("pixel_lookup", (2, 4), 1)))


def test_full_size_forest_under_one_megabyte():
    sp = CandidateFeatureSpace("pixel_lookup", (32, 16), 10)
    size = len(dump_forest(_random_forest(2048, sp)))
    assert size < 1_000_000


def test_feature_occurrence_counts():
    sp = CandidateFeatureSpace("pixel_lookup", (4, 4), 10)
    f = _random_forest(30, sp, depth=2)
    counts, occ = feature_occurrence(f)
    assert counts.sum() == f.n_internal == 30 * 3
    ranked = np.sort(counts)[::-1]
    assert occ[10] == pytest.approx(ranked[0] / counts.sum())
    assert occ[50] == pytest.approx(ranked[:5].sum() / counts.sum())
    assert occ[10] <= occ[20] <= occ[50] <= 1
