import os
import subprocess
import sys

import numpy as np
import pytest

from ccf import kernels
from ccf.edges import detect_edges, edge_feature_space, gather_edge_samples, train_edge_forest
from ccf.synthetic import make_segmentation_dataset

needs_ext = pytest.mark.skipif("cython" not in kernels.IMPLEMENTATIONS, reason="extension not built")


def _both(fn):
    prev = kernels.BACKEND
    try:
        out = {}
        for name in ("python", "cython"):
            kernels.use(name)
            out[name] = fn()
        return out
    finally:
        kernels.use(prev)


@needs_ext
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 2), (2, 1), (2, 3)])
def test_conv_implementations_agree(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((5, 13, 11)).astype(np.float32)
    w = rng.standard_normal((7, 5, 3, 3)).astype(np.float32)
    b = rng.standard_normal(7).astype(np.float32)
    out = _both(lambda: kernels.conv2d(x, w, b, stride, pad))
    np.testing.assert_allclose(out["python"], out["cython"], rtol=1e-5, atol=1e-5)


@needs_ext
@pytest.mark.parametrize("stride", [2, 4])
def test_leaf_windows_agree(stride):
    data = make_segmentation_dataset(6, seed=11)
    sp = edge_feature_space(10, n_pairs=256)
    s = gather_edge_samples([d[0] for d in data], [d[1] for d in data], sp, per_image=60)
    forest = train_edge_forest(s, sp, n_trees=2, depth=8)
    img = data[0][0]
    out = _both(lambda: detect_edges(img, forest, stride=stride))
    np.testing.assert_array_equal(out["python"], out["cython"])


def test_unknown_implementation_rejected():
    with pytest.raises(ValueError, match="unavailable"):
        kernels.use("fortran")


def test_pure_python_env_selects_fallback():
    env = dict(os.environ, CCF_PURE_PYTHON="1")
    r = subprocess.run([sys.executable, "-c", "from ccf import kernels; print(kernels.BACKEND)"],
                       env=env, capture_output=True, text=True, check=True)
    assert r.stdout.strip() == "python"
