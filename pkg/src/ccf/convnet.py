"""Forward-only convolutional feature extraction.

Layers form a straight chain of ``conv``, ``relu``, ``maxpool`` and
``avgpool``. Convolution is cross-correlation (no kernel flip), zero padded.

Weight file layout (``CFW1``, little-endian)::

    b"CFW1"  uint32 n_layers
    per layer: uint8 kind  (0 conv, 1 relu, 2 maxpool, 3 avgpool)
        conv:  int32 kh, kw, c_in, c_out, stride, pad, has_bias
               float32[c_out, c_in, kh, kw] weights
               float32[c_out] bias            (only if has_bias)
        pool:  int32 window, stride
        relu:  nothing
    uint32 n_mean   float32[n_mean] per-channel input mean
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .channels import ChannelStack, VALID_SHRINKS
from .image import ImagePlane

__all__ = [
    "LayerSpec",
    "ConvNetSpec",
    "WeightFormatError",
    "BadMagicError",
    "TruncatedWeightsError",
    "ShapeMismatchError",
    "load_weights",
    "save_weights",
    "dump_weights",
    "parse_weights",
    "conv2d",
    "relu",
    "pool2d",
    "forward",
    "receptive_field",
    "synthetic_convnet",
    "ConvBackend",
    "MIN_SHRINK",
]

MAGIC = b"CFW1"
KINDS = ("conv", "relu", "maxpool", "avgpool")
MIN_SHRINK = 4


class WeightFormatError(ValueError):
    """Malformed weight file."""


class BadMagicError(WeightFormatError):
    pass


class TruncatedWeightsError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


@dataclass
class LayerSpec:
    kind: str
    kernel: tuple = ()  # conv: (kh, kw, c_in, c_out)
    stride: int = 1
    padding: int = 0
    bias: bool = True
    window: int = 0  # pools
    weight: np.ndarray | None = field(default=None, repr=False)  # (c_out, c_in, kh, kw)
    bias_values: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.kind == "conv":
            if len(self.kernel) != 4 or min(self.kernel) < 1:
                raise ValueError(f"conv kernel dims must be 4 positive ints, got {self.kernel}")
            if self.padding < 0:
                raise ValueError("padding must be >= 0")
            kh, kw, c_in, c_out = self.kernel
            if self.weight is not None:
                self.weight = np.ascontiguousarray(self.weight, dtype=np.float32)
                if self.weight.shape != (c_out, c_in, kh, kw):
                    raise ShapeMismatchError(
                        f"conv weight shape {self.weight.shape} != {(c_out, c_in, kh, kw)}"
                    )
            if self.bias_values is not None:
                self.bias_values = np.ascontiguousarray(self.bias_values, dtype=np.float32)
                if self.bias_values.shape != (c_out,):
                    raise ShapeMismatchError(f"bias shape {self.bias_values.shape} != {(c_out,)}")
        elif self.kind in ("maxpool", "avgpool") and self.window < 1:
            raise ValueError("pool window must be >= 1")

    @property
    def reduction(self) -> int:
        return self.stride if self.kind != "relu" else 1

    def bias_or_zeros(self):
        if self.bias and self.bias_values is not None:
            return self.bias_values
        return np.zeros(self.kernel[3], dtype=np.float32)


@dataclass
class ConvNetSpec:
    layers: list
    mean: np.ndarray
    source: str | None = None

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float32).ravel()
        self.validate()

    def validate(self):
        channels = self.mean.size
        if channels < 1:
            raise ShapeMismatchError("mean vector is empty")
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                kh, kw, c_in, c_out = layer.kernel
                if c_in != channels:
                    raise ShapeMismatchError(f"layer {i}: c_in {c_in} but {channels} channels arrive")
                if layer.weight is None:
                    raise ShapeMismatchError(f"layer {i}: conv layer has no weights")
                channels = c_out
        if not any(l.kind == "conv" for l in self.layers):
            raise ShapeMismatchError("network has no conv layer")
        if self.total_shrink not in VALID_SHRINKS:
            raise ShapeMismatchError(f"total down-sampling {self.total_shrink} not in {VALID_SHRINKS}")
        self._out_channels = channels

    @property
    def weights(self):
        return [(l.weight, l.bias_or_zeros()) for l in self.layers if l.kind == "conv"]

    @property
    def in_channels(self) -> int:
        return self.mean.size

    @property
    def out_channels(self) -> int:
        return self._out_channels

    @property
    def total_shrink(self) -> int:
        return math.prod(l.reduction for l in self.layers)

    @property
    def output_shrink(self) -> int:
        return max(self.total_shrink, MIN_SHRINK)


# ---------------------------------------------------------------------------
# serialisation


def dump_weights(spec: ConvNetSpec) -> bytes:
    out = [MAGIC, struct.pack("<I", len(spec.layers))]
    for layer in spec.layers:
        out.append(struct.pack("<B", KINDS.index(layer.kind)))
        if layer.kind == "conv":
            kh, kw, c_in, c_out = layer.kernel
            has_bias = int(layer.bias and layer.bias_values is not None)
            out.append(struct.pack("<7i", kh, kw, c_in, c_out, layer.stride, layer.padding, has_bias))
            out.append(layer.weight.astype("<f4").tobytes())
            if has_bias:
                out.append(layer.bias_values.astype("<f4").tobytes())
        elif layer.kind in ("maxpool", "avgpool"):
            out.append(struct.pack("<2i", layer.window, layer.stride))
    out.append(struct.pack("<I", spec.mean.size))
    out.append(spec.mean.astype("<f4").tobytes())
    return b"".join(out)


def save_weights(spec: ConvNetSpec, path):
    with open(path, "wb") as fh:
        fh.write(dump_weights(spec))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedWeightsError(f"file ends inside {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count, what):
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)


def parse_weights(buf: bytes, source=None) -> ConvNetSpec:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    (n_layers,) = r.unpack("<I", "header")
    layers = []
    for i in range(n_layers):
        (code,) = r.unpack("<B", f"layer {i} kind")
        if code >= len(KINDS):
            raise WeightFormatError(f"layer {i}: unknown kind code {code}")
        kind = KINDS[code]
        if kind == "conv":
            kh, kw, c_in, c_out, stride, pad, has_bias = r.unpack("<7i", f"layer {i} dims")
            if min(kh, kw, c_in, c_out, stride) < 1 or pad < 0:
                raise ShapeMismatchError(f"layer {i}: invalid conv dims {(kh, kw, c_in, c_out, stride, pad)}")
            w = r.floats(c_out * c_in * kh * kw, f"layer {i} weights").reshape(c_out, c_in, kh, kw)
            b = r.floats(c_out, f"layer {i} bias") if has_bias else None
            layers.append(LayerSpec("conv", (kh, kw, c_in, c_out), stride, pad, bool(has_bias), 0, w, b))
        elif kind == "relu":
            layers.append(LayerSpec("relu"))
        else:
            window, stride = r.unpack("<2i", f"layer {i} dims")
            if window < 1 or stride < 1:
                raise ShapeMismatchError(f"layer {i}: invalid pool dims {(window, stride)}")
            layers.append(LayerSpec(kind, stride=stride, window=window))
    (n_mean,) = r.unpack("<I", "mean length")
    mean = r.floats(n_mean, "mean vector")
    if r.pos != len(buf):
        raise WeightFormatError(f"{len(buf) - r.pos} trailing bytes after mean vector")
    return ConvNetSpec(layers, mean, source)


def load_weights(path) -> ConvNetSpec:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_weights(buf, source=str(path))


# ---------------------------------------------------------------------------
# layers


def conv2d(stack: ChannelStack, layer: LayerSpec) -> ChannelStack:
    """Zero-padded cross-correlation; output ``floor((n + 2p - k)/s) + 1``."""
    if layer.kind != "conv":
        raise ValueError("conv2d needs a conv layer")
    if stack.n_maps != layer.kernel[2]:
        raise ShapeMismatchError(f"input has {stack.n_maps} maps, layer expects {layer.kernel[2]}")
    out = kernels.conv2d(stack.planes, layer.weight, layer.bias_or_zeros(), layer.stride, layer.padding)
    return ChannelStack(out, _next_shrink(stack.shrink, layer.stride), "conv")


def _next_shrink(shrink, factor):
    s = shrink * factor
    return s if s in VALID_SHRINKS else shrink


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.float32(0))


def pool2d(x: np.ndarray, kind: str, window: int, stride: int) -> np.ndarray:
    """Unpadded max/average pooling, output ``floor((n - k)/s) + 1``."""
    c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"pool window {window} larger than input {h}x{w}")
    ys, xs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    acc = None
    for dy in range(window):
        for dx in range(window):
            v = x[:, dy : dy + ys : stride, dx : dx + xs : stride]
            if acc is None:
                acc = v.copy()
            elif kind == "maxpool":
                np.maximum(acc, v, out=acc)
            else:
                acc += v
    if kind == "avgpool":
        acc *= np.float32(1.0 / (window * window))
    return acc


def _run_layers(x: np.ndarray, layers) -> np.ndarray:
    for layer in layers:
        if layer.kind == "conv":
            x = kernels.conv2d(x, layer.weight, layer.bias_or_zeros(), layer.stride, layer.padding)
        elif layer.kind == "relu":
            x = relu(x)
        else:
            x = pool2d(x, layer.kind, layer.window, layer.stride)
    return x


def _layers_with_min_shrink(spec: ConvNetSpec):
    layers = list(spec.layers)
    if spec.total_shrink < MIN_SHRINK:
        f = MIN_SHRINK // spec.total_shrink
        layers.append(LayerSpec("avgpool", stride=f, window=f))
    return layers


def forward_prepared(spec: ConvNetSpec, x: np.ndarray) -> ChannelStack:
    """Run the chain on already mean-subtracted input."""
    out = _run_layers(np.ascontiguousarray(x, dtype=np.float32), _layers_with_min_shrink(spec))
    return ChannelStack(out, spec.output_shrink, "conv")


def prepare_input(spec: ConvNetSpec, img: ImagePlane) -> np.ndarray:
    data = img.data
    if data.shape[0] == 1 and spec.in_channels == 3:
        data = np.repeat(data, 3, axis=0)
    if data.shape[0] != spec.in_channels:
        raise ShapeMismatchError(f"image has {data.shape[0]} channels, network expects {spec.in_channels}")
    return (data - spec.mean[:, None, None]).astype(np.float32)


def forward(spec: ConvNetSpec, img: ImagePlane) -> ChannelStack:
    """Mean-subtract ``img`` and push it through every layer.

    When the chain reduces resolution by less than 4, average pooling is
    appended so the output shrink is at least 4.
    """
    return forward_prepared(spec, prepare_input(spec, img))


def receptive_field(spec: ConvNetSpec):
    """``(size, offset)``: output cell ``j`` depends on input pixels
    ``[j*shrink + offset, j*shrink + offset + size)`` along each axis."""
    size, jump, start = 1, 1, 0
    for layer in _layers_with_min_shrink(spec):
        if layer.kind == "relu":
            continue
        k = layer.kernel[0] if layer.kind == "conv" else layer.window
        p = layer.padding if layer.kind == "conv" else 0
        start -= p * jump
        size += (k - 1) * jump
        jump *= layer.stride
    return size, start


def synthetic_convnet(
    channels=(3, 8, 16, 16),
    kernel: int = 3,
    pools=(True, True, False),
    seed: int = 0,
    mean=0.5,
) -> ConvNetSpec:
    """A random-weight conv/relu/(maxpool) chain, for benchmarks and tests."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
        w = rng.standard_normal((c_out, c_in, kernel, kernel)) / math.sqrt(c_in * kernel * kernel)
        b = 0.1 * rng.standard_normal(c_out)
        layers.append(LayerSpec("conv", (kernel, kernel, c_in, c_out), 1, kernel // 2, True, 0, w, b))
        layers.append(LayerSpec("relu"))
        if i < len(pools) and pools[i]:
            layers.append(LayerSpec("maxpool", stride=2, window=2))
    return ConvNetSpec(layers, np.full(channels[0], mean, dtype=np.float32))


class ConvBackend:
    """Channel backend backed by a :class:`ConvNetSpec`.

    Parameters
    ----------
    pad : int
        Zero margin (in pixels, after mean subtraction) placed around an
        image before the forward pass. A per-scale computation therefore sees
        the same surroundings as a patchwork tile padded by ``pad``.
    input_size : (width, height) or None
        Fixed network input size. When set, per-scale pyramid construction
        runs every scale on its own full canvas of this size, as a CNN with a
        fixed input would.
    """

    tag = "conv"

    def __init__(self, spec: ConvNetSpec, pad: int = 16, input_size=None):
        self.spec = spec
        self.shrink = spec.output_shrink
        if pad % self.shrink:
            raise ValueError(f"pad {pad} must be a multiple of shrink {self.shrink}")
        self.pad = pad
        self.input_size = tuple(input_size) if input_size is not None else None
        self.n_maps = spec.out_channels

    @property
    def receptive_field(self):
        return receptive_field(self.spec)

    @property
    def border_cells(self) -> int:
        size, start = self.receptive_field
        reach = max(-start, size + start - self.shrink, 0)
        return max(0, math.ceil((reach - self.pad) / self.shrink))

    def describe(self) -> dict:
        return {"backend": "conv", "weights": self.spec.source, "pad": self.pad}

    def prepare(self, img: ImagePlane) -> np.ndarray:
        return prepare_input(self.spec, img)

    def compute_canvas(self, canvas: np.ndarray) -> ChannelStack:
        return forward_prepared(self.spec, canvas)

    def compute(self, img: ImagePlane) -> ChannelStack:
        x = self.prepare(img)
        c, h, w = x.shape
        p = self.pad
        canvas = np.zeros((c, h + 2 * p, w + 2 * p), dtype=np.float32)
        canvas[:, p : p + h, p : p + w] = x
        out = self.compute_canvas(canvas)
        s = self.shrink
        return out.crop(p // s, p // s, h // s, w // s)
