"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats N]

Prints one row per kernel with both timings and the ratio. The inputs mirror
what the pyramid and detector feed the kernels on a 640x480 image.
"""

import argparse

import numpy as np

from ccf import kernels
from ccf.bench import time_call
from ccf.channels import HogLuvBackend
from ccf.edges import edge_channels, edge_feature_space, gather_edge_samples, train_edge_forest
from ccf.forest import CandidateFeatureSpace, DecisionTree, BoostedForest
from ccf.synthetic import make_segmentation_dataset, smooth_image


def random_forest(n_trees, space, depth=3, seed=0):
    rng = np.random.default_rng(seed)
    n_int = 2**depth - 1
    trees = []
    for _ in range(n_trees):
        feature = np.concatenate([rng.integers(0, space.n_features, n_int), -np.ones(n_int + 1, int)])
        left = np.concatenate([2 * np.arange(n_int) + 1, -np.ones(n_int + 1, int)])
        right = np.concatenate([2 * np.arange(n_int) + 2, -np.ones(n_int + 1, int)])
        thr = np.concatenate([rng.uniform(0, 0.3, n_int), np.zeros(n_int + 1)])
        value = np.concatenate([np.zeros(n_int), rng.uniform(-1, 1, n_int + 1)])
        trees.append(DecisionTree(feature, thr, left, right, value))
    return BoostedForest(trees, np.full(n_trees, -np.inf), space)


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 120, 160)).astype(np.float32)
    w = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
    b = np.zeros(32, np.float32)
    yield "conv2d 16->32 3x3 120x160", lambda: kernels.conv2d(x, w, b, 1, 1)

    st = HogLuvBackend(4).compute(smooth_image(480, 640))
    space = CandidateFeatureSpace("pixel_lookup", (32, 16), st.n_maps)
    forest = random_forest(256, space)
    smoothed = space.smooth(st.planes)
    forest.score_map(st.planes, reject_early=False, smoothed=smoothed)  # compile once outside the timing
    yield "score_windows 256 trees 120x160", lambda: forest.score_map(st.planes, False, smoothed=smoothed)

    data = make_segmentation_dataset(8, seed=0)
    esp = edge_feature_space(10, n_pairs=512)
    s = gather_edge_samples([d[0] for d in data], [d[1] for d in data], esp, per_image=60)
    ef = train_edge_forest(s, esp, n_trees=4, depth=10)
    est = edge_channels(smooth_image(192, 256), ef.backend)
    look, pair = (np.ascontiguousarray(a).ravel() for a in esp.smooth(est.planes))
    H, W = est.height, est.width
    c = ef.compile(H, W)
    args = (look, pair, W, H - 15, W - 15, 1, c["kind"], c["off_a"], c["off_b"], c["thr"], c["left"], c["right"],
            c["roots"])
    yield f"leaf_windows 4 trees {H}x{W} cells", lambda: kernels.leaf_windows(*args)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args(argv)
    if "cython" not in kernels.IMPLEMENTATIONS:
        raise SystemExit("compiled extension not built; nothing to compare")
    print(f"{'kernel':36s} {'cython s':>10s} {'python s':>10s} {'ratio':>7s}")
    for name, fn in cases():
        t = {}
        for impl in ("cython", "python"):
            kernels.use(impl)
            t[impl], _ = time_call(fn, args.repeats)
        print(f"{name:36s} {t['cython']:10.4f} {t['python']:10.4f} {t['python'] / t['cython']:7.1f}")
    kernels.use("cython")


if __name__ == "__main__":
    main()
