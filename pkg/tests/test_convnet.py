import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccf import kernels
from ccf.channels import ChannelStack
from ccf.convnet import (
    BadMagicError,
    ConvBackend,
    ConvNetSpec,
    LayerSpec,
    ShapeMismatchError,
    TruncatedWeightsError,
    WeightFormatError,
    conv2d,
    dump_weights,
    forward,
    load_weights,
    parse_weights,
    pool2d,
    receptive_field,
    save_weights,
    synthetic_convnet,
)
from ccf.image import ImagePlane


def naive_conv(x, w, b, stride, pad):
    c_in, H, W = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, H + 2 * pad, W + 2 * pad))
    xp[:, pad : pad + H, pad : pad + W] = x
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, Ho, Wo))
    for o in range(c_out):
        for i in range(Ho):
            for j in range(Wo):
                out[o, i, j] = b[o] + np.sum(w[o] * xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw])
    return out


@pytest.mark.parametrize("k", range(6))
def test_conv_matches_frozen_oracle(kernel_impl, oracles, k):
    stride, pad = (int(v) for v in oracles[f"conv{k}_meta"])
    got = kernels.conv2d(oracles[f"conv{k}_x"], oracles[f"conv{k}_w"], oracles[f"conv{k}_b"], stride, pad)
    np.testing.assert_allclose(got, oracles[f"conv{k}_out"], rtol=1e-5, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 2), st.integers(0, 2),
    st.integers(5, 12), st.integers(5, 12), st.integers(0, 2**16),
)
def test_conv_kernels_bit_identical(c_in, c_out, k, stride, pad, h, w, seed):
    if "cython" not in kernels.IMPLEMENTATIONS:
        pytest.skip("extension not built")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c_in, h, w)).astype(np.float32)
    wt = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
    b = rng.standard_normal(c_out).astype(np.float32)
    a = kernels.IMPLEMENTATIONS["python"].conv2d(x, wt, b, stride, pad)
    c = kernels.IMPLEMENTATIONS["cython"].conv2d(x, wt, b, stride, pad)
    np.testing.assert_array_equal(a, c)
    np.testing.assert_allclose(a, naive_conv(x, wt, b, stride, pad), rtol=1e-4, atol=1e-4)


def test_one_by_one_identity_kernel(kernel_impl):
    x = np.random.default_rng(0).standard_normal((3, 6, 7)).astype(np.float32)
    w = np.eye(3, dtype=np.float32)[:, :, None, None]
    np.testing.assert_array_equal(kernels.conv2d(x, w, np.zeros(3, np.float32), 1, 0), x)


def test_conv_layer_shape_errors():
    layer = LayerSpec("conv", (3, 3, 2, 4), 1, 1, True, 0, np.zeros((4, 2, 3, 3)), np.zeros(4))
    with pytest.raises(ShapeMismatchError):
        conv2d(ChannelStack(np.zeros((3, 5, 5))), layer)
    with pytest.raises(ShapeMismatchError):
        LayerSpec("conv", (3, 3, 2, 4), weight=np.zeros((4, 2, 3, 2)))
    with pytest.raises(ValueError):
        LayerSpec("dropout")


def test_pooling():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    np.testing.assert_array_equal(pool2d(x, "maxpool", 2, 2)[0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(pool2d(x, "avgpool", 2, 2)[0], [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError):
        pool2d(x, "maxpool", 5, 1)


def test_weights_roundtrip(tmp_path):
    spec = synthetic_convnet(seed=3)
    p = tmp_path / "w.cfw"
    save_weights(spec, p)
    back = load_weights(p)
    assert back.source == str(p)
    assert dump_weights(back) == dump_weights(spec)
    img = ImagePlane(np.random.default_rng(0).uniform(size=(3, 40, 36)))
    np.testing.assert_array_equal(forward(back, img).planes, forward(spec, img).planes)


def test_weight_file_errors():
    buf = dump_weights(synthetic_convnet())
    with pytest.raises(BadMagicError):
        parse_weights(b"XXXX" + buf[4:])
    with pytest.raises(TruncatedWeightsError):
        parse_weights(buf[:-7])
    with pytest.raises(WeightFormatError, match="trailing"):
        parse_weights(buf + b"\0")


def test_spec_validation():
    conv = LayerSpec("conv", (3, 3, 3, 4), 1, 1, True, 0, np.zeros((4, 3, 3, 3)), np.zeros(4))
    with pytest.raises(ShapeMismatchError):
        ConvNetSpec([conv], np.zeros(2))
    with pytest.raises(ShapeMismatchError, match="no conv"):
        ConvNetSpec([LayerSpec("relu")], np.zeros(3))


def test_forward_geometry_and_receptive_field():
    spec = synthetic_convnet()
    assert spec.output_shrink == 4 and spec.out_channels == 16
    assert receptive_field(spec) == (18, -7)
    out = forward(spec, ImagePlane(np.zeros((3, 64, 48))))
    assert out.planes.shape == (16, 16, 12) and out.shrink == 4
    # a single-pool net is topped up with average pooling to shrink 4
    shallow = synthetic_convnet(channels=(3, 4), pools=(True,))
    assert forward(shallow, ImagePlane(np.zeros((3, 32, 32)))).planes.shape == (4, 8, 8)


def test_receptive_field_is_exact():
    # perturbing a pixel outside the receptive field leaves the cell unchanged
    spec = synthetic_convnet()
    size, off = receptive_field(spec)
    rng = np.random.default_rng(0)
    base = rng.uniform(size=(3, 64, 64)).astype(np.float32)
    ref = forward(spec, ImagePlane(base)).planes
    j = 6
    lo, hi = j * 4 + off, j * 4 + off + size
    for px, inside in ((lo - 1, False), (lo, True), (hi - 1, True), (hi, False)):
        img = base.copy()
        img[:, 30, px] += 1.0
        changed = not np.array_equal(forward(spec, ImagePlane(img)).planes[:, :, j], ref[:, :, j])
        assert changed == inside


def test_backend_border_cells():
    spec = synthetic_convnet()
    assert ConvBackend(spec, pad=16).border_cells == 0
    assert ConvBackend(spec, pad=4).border_cells == 1  # reach 7 px, pad 4: one cell
    with pytest.raises(ValueError):
        ConvBackend(spec, pad=6)
