"""FCN-8 network: construction, forward/backward, checkpoint serialization.

The topology is fixed: a VGG-16-style feature stack entered through a
pad-100 convolution, two 7x7 wide convolutions, a 21-channel score head,
and two additive fusion edges that mix upsampled deep scores with 1x1
score maps taken from the two deepest pooling outputs, finishing with a
crop back to the input extent and a 2-class score convolution.

Crop offsets are not configured anywhere; they fall out of receptive-field
arithmetic (see _Coord) so the output extent equals the input extent for
every admissible input size.
"""

import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from . import ops
from .errors import (BadWidthScale, ConfigError, CorruptCheckpoint,
                     DimsMismatch, InputTooSmall, NoForwardState,
                     ShapeMismatch)
from .ops import ConvParams, Tensor

SCORE_CHANNELS = 21  # classification-head width inherited by the score maps

# feature stages: (name, ksize, padding, filters, repeats); a 2x2/2 max
# pool follows each of the five conv stages, none after the wide pair
_STAGES = (
    ("conv1", 3, 100, 64, 2),
    ("conv2", 3, 1, 128, 2),
    ("conv3", 3, 1, 256, 3),
    ("conv4", 3, 1, 512, 3),
    ("conv5", 3, 1, 512, 3),
)
_WIDE = ("fc", 7, 0, 4096, 2)

CHECKPOINT_MAGIC = b"FCN8CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    """One architecture-table row."""

    block: int
    kind: str  # conv | pool | deconv | crop | fuse | dice | softmax_loss
    filter_size: Optional[int] = None
    stride: Optional[int] = None
    filters: Optional[int] = None
    padding: Optional[int] = None
    repeats: int = 1
    fusion: Optional[str] = None


@dataclass(frozen=True)
class FusionEdge:
    """Additive skip edge feeding a 1x1 score map into the upsampling path."""

    name: str
    source: str  # pooling output the score map is computed from
    score_layer: str


class _Coord:
    """Tracks pixel-center coordinates of a feature map in input units.

    Pixel i of a map with (step, offset) sits at input coordinate
    offset + i * step. Crop offsets between equal-step maps are then
    (target.offset - source.offset) / step.
    """

    __slots__ = ("step", "offset")

    def __init__(self, step=1.0, offset=0.0):
        self.step = step
        self.offset = offset

    def conv(self, k, stride, padding):
        nxt = _Coord(self.step * stride,
                     self.offset + ((k - 1) / 2.0 - padding) * self.step)
        return nxt

    def pool2(self):
        return self.conv(2, 2, 0)

    def deconv(self, k, stride):
        step = self.step / stride
        return _Coord(step, self.offset - (k - 1) / 2.0 * step)

    def crop_offset_to(self, target):
        if abs(self.step - target.step) > 1e-9:
            raise ShapeMismatch(
                f"crop between maps of different strides: {self.step} vs "
                f"{target.step}")
        raw = (target.offset - self.offset) / self.step
        o = int(round(raw))
        if abs(raw - o) > 1e-6 or o < 0:
            raise ShapeMismatch(f"derived crop offset {raw} is not a "
                                f"non-negative integer")
        return o


class NetworkGraph:
    """Parameter store plus cached activations for one forward/backward pair.

    A graph instance is single-threaded while a pass is in flight;
    independent instances are safe to run concurrently.
    """

    def __init__(self, width_scale, num_classes, dtype, blocks, fusion_edges,
                 params):
        self.width_scale = width_scale
        self.num_classes = num_classes
        self.dtype = dtype
        self.blocks = blocks
        self.fusion_edges = fusion_edges
        self.params = params  # name -> Tensor (insertion order = wire order)
        self._cache = None

    def widths(self):
        """Scaled filter count per feature stage, plus the wide width."""
        return {name: int(f * self.width_scale)
                for name, _, _, f, _ in _STAGES} | {
                    _WIDE[0]: int(_WIDE[3] * self.width_scale)}

    def conv_params(self, name, stride=1, padding=0):
        return ConvParams(self.params[f"{name}.weight"],
                          self.params[f"{name}.bias"].data.reshape(-1),
                          stride=stride, padding=padding)

    def param_inventory(self):
        return {name: t.dims for name, t in self.params.items()}

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()


def _scaled(width, ws):
    v = width * ws
    if v.denominator != 1 or v.numerator < 1:
        raise BadWidthScale(
            f"width {width} * scale {ws} = {v} is not a positive integer")
    return int(v)


def _table_blocks(ws, num_classes):
    ws = Fraction(ws)
    rows = []
    block = 1
    for _, k, pad, filt, rep in _STAGES:
        rows.append(BlockSpec(block, "conv", k, 1, _scaled(filt, ws), pad,
                              repeats=rep))
        block += 1
        rows.append(BlockSpec(block, "pool", 2, 2, None, 0))
        block += 1
    rows.append(BlockSpec(11, "conv", _WIDE[1], 1, _scaled(_WIDE[3], ws),
                          _WIDE[2], repeats=2))
    rows.append(BlockSpec(12, "conv", 1, 1, SCORE_CHANNELS, 0))
    rows.append(BlockSpec(13, "deconv", 4, 2, SCORE_CHANNELS))
    rows.extend([
        BlockSpec(14, "conv", 1, 1, SCORE_CHANNELS, 0, fusion="x2"),
        BlockSpec(14, "crop", fusion="x2"),
        BlockSpec(14, "fuse", fusion="x2"),
        BlockSpec(14, "deconv", 4, 2, SCORE_CHANNELS, fusion="x2"),
        BlockSpec(15, "conv", 1, 1, SCORE_CHANNELS, 0, fusion="x4"),
        BlockSpec(15, "crop", fusion="x4"),
        BlockSpec(15, "fuse", fusion="x4"),
        BlockSpec(15, "deconv", 16, 8, SCORE_CHANNELS, fusion="x4"),
    ])
    rows.append(BlockSpec(16, "crop"))
    rows.append(BlockSpec(17, "conv", 1, 1, num_classes, 0))
    rows.append(BlockSpec(17, "dice"))
    rows.append(BlockSpec(19, "softmax_loss"))
    return rows


def expected_param_shapes(width_scale, num_classes=2):
    """Parameter inventory (name -> dims) without allocating anything."""
    ws = Fraction(width_scale)
    shapes = {}
    in_ch = 3
    for sname, k, _pad, filt, rep in _STAGES:
        oc = _scaled(filt, ws)
        for i in range(1, rep + 1):
            shapes[f"{sname}_{i}.weight"] = (oc, in_ch, k, k)
            shapes[f"{sname}_{i}.bias"] = (oc,)
            in_ch = oc
    wide = _scaled(_WIDE[3], ws)
    k = _WIDE[1]
    shapes["fc6.weight"] = (wide, in_ch, k, k)
    shapes["fc6.bias"] = (wide,)
    shapes["fc7.weight"] = (wide, wide, k, k)
    shapes["fc7.bias"] = (wide,)
    sc = SCORE_CHANNELS
    shapes["score_fr.weight"] = (sc, wide, 1, 1)
    shapes["score_fr.bias"] = (sc,)
    shapes["upscore2.weight"] = (sc, sc, 4, 4)
    shapes["upscore2.bias"] = (sc,)
    shapes["score_pool4.weight"] = (sc, _scaled(512, ws), 1, 1)
    shapes["score_pool4.bias"] = (sc,)
    shapes["upscore_pool4.weight"] = (sc, sc, 4, 4)
    shapes["upscore_pool4.bias"] = (sc,)
    shapes["score_pool3.weight"] = (sc, _scaled(256, ws), 1, 1)
    shapes["score_pool3.bias"] = (sc,)
    shapes["upscore8.weight"] = (sc, sc, 16, 16)
    shapes["upscore8.bias"] = (sc,)
    shapes["score_final.weight"] = (num_classes, sc, 1, 1)
    shapes["score_final.bias"] = (num_classes,)
    return shapes


def build_fcn8(width_scale, num_classes=2, seed=0, dtype=np.float32):
    """Construct the network with seeded He-normal convolution weights,
    zero biases, and bilinear-initialized (still learnable) deconvolutions.
    """
    ws = Fraction(width_scale)
    if ws <= 0:
        raise BadWidthScale(f"width_scale must be positive, got {width_scale}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    params = {}

    def he_conv(name, oc, ic, k):
        std = np.sqrt(2.0 / (ic * k * k))
        if dtype == np.float32:
            w = rng.standard_normal((oc, ic, k, k), dtype=np.float32) * \
                np.float32(std)
        else:
            w = (rng.standard_normal((oc, ic, k, k)) * std).astype(dtype)
        params[f"{name}.weight"] = Tensor(w)
        params[f"{name}.bias"] = Tensor(np.zeros(oc, dtype=dtype))

    def bilinear_deconv(name, channels, k, stride):
        w = ops.bilinear_init(k, stride, channels).data.astype(dtype)
        params[f"{name}.weight"] = Tensor(w)
        params[f"{name}.bias"] = Tensor(np.zeros(channels, dtype=dtype))

    in_ch = 3
    for sname, k, _pad, filt, rep in _STAGES:
        oc = _scaled(filt, ws)
        for i in range(1, rep + 1):
            he_conv(f"{sname}_{i}", oc, in_ch, k)
            in_ch = oc
    wide = _scaled(_WIDE[3], ws)
    he_conv("fc6", wide, in_ch, _WIDE[1])
    he_conv("fc7", wide, wide, _WIDE[1])
    he_conv("score_fr", SCORE_CHANNELS, wide, 1)
    bilinear_deconv("upscore2", SCORE_CHANNELS, 4, 2)
    he_conv("score_pool4", SCORE_CHANNELS, _scaled(512, ws), 1)
    bilinear_deconv("upscore_pool4", SCORE_CHANNELS, 4, 2)
    he_conv("score_pool3", SCORE_CHANNELS, _scaled(256, ws), 1)
    bilinear_deconv("upscore8", SCORE_CHANNELS, 16, 8)
    he_conv("score_final", num_classes, SCORE_CHANNELS, 1)

    fusion_edges = (
        FusionEdge("x2", source="pool4", score_layer="score_pool4"),
        FusionEdge("x4", source="pool3", score_layer="score_pool3"),
    )
    return NetworkGraph(ws, num_classes, dtype, _table_blocks(ws, num_classes),
                        fusion_edges, params)


def _deconv_kernel_axes(name):
    # deconv weights are stored (CIN, COUT, KH, KW)
    return name.startswith("upscore")


def forward(net: NetworkGraph, image: Tensor, train: bool = False):
    """Run the network; returns (scores, heatmap), both (1, K, H, W).

    With train=True every activation needed by backward() is cached on
    the graph.
    """
    if len(image.dims) != 4 or image.dims[0] != 1:
        raise ShapeMismatch(f"expected image dims (1, 3, H, W), got "
                            f"{image.dims}")
    if image.dims[1] != 3:
        raise ShapeMismatch(f"expected 3 input channels, got {image.dims[1]}")
    h, w = image.dims[2], image.dims[3]
    if h < 32 or w < 32:
        raise InputTooSmall(f"input {h}x{w} below the 32-pixel minimum")

    cache = {"image_dims": image.dims} if train else None
    coords = {}

    def conv(name, x, stride, padding, coord):
        p = net.conv_params(name, stride=stride, padding=padding)
        out = ops.conv2d_forward(x, p)
        if train:
            cache[f"{name}.in"] = x
        return out, coord.conv(p.kernel.dims[2], stride, padding)

    def relu_layer(name, x):
        out = ops.relu(x)
        if train:
            cache[f"{name}.pre"] = x
        return out

    x = image
    coord = _Coord()
    pool_feats = {}
    for sname, k, pad, _filt, rep in _STAGES:
        for i in range(1, rep + 1):
            lname = f"{sname}_{i}"
            x, coord = conv(lname, x, 1, pad, coord)
            x = relu_layer(lname, x)
        pool_name = f"pool{sname[-1]}"
        if train:
            cache[f"{pool_name}.in_dims"] = x.dims
        x, arg = ops.maxpool2d(x)
        if train:
            cache[f"{pool_name}.arg"] = arg
        coord = coord.pool2()
        if pool_name in ("pool3", "pool4"):
            pool_feats[pool_name] = x
            coords[pool_name] = coord

    for lname in ("fc6", "fc7"):
        x, coord = conv(lname, x, 1, 0, coord)
        x = relu_layer(lname, x)

    score_fr, coord = conv("score_fr", x, 1, 0, coord)
    p_up2 = net.conv_params("upscore2", stride=2)
    if train:
        cache["upscore2.in"] = score_fr
    upscore2 = ops.transposed_conv2d(score_fr, p_up2)
    coord = coord.deconv(4, 2)

    score_pool4, c_sp4 = conv("score_pool4", pool_feats["pool4"], 1, 0,
                              coords["pool4"])
    o4 = c_sp4.crop_offset_to(coord)
    if train:
        cache["crop4"] = (score_pool4.dims, o4)
    crop4 = ops.crop_center(score_pool4, upscore2.dims[2], upscore2.dims[3],
                            o4, o4)
    fuse4 = ops.elementwise_add(upscore2, crop4)

    p_up4 = net.conv_params("upscore_pool4", stride=2)
    if train:
        cache["upscore_pool4.in"] = fuse4
    upscore_pool4 = ops.transposed_conv2d(fuse4, p_up4)
    coord = coord.deconv(4, 2)

    score_pool3, c_sp3 = conv("score_pool3", pool_feats["pool3"], 1, 0,
                              coords["pool3"])
    o3 = c_sp3.crop_offset_to(coord)
    if train:
        cache["crop3"] = (score_pool3.dims, o3)
    crop3 = ops.crop_center(score_pool3, upscore_pool4.dims[2],
                            upscore_pool4.dims[3], o3, o3)
    fuse3 = ops.elementwise_add(upscore_pool4, crop3)

    p_up8 = net.conv_params("upscore8", stride=8)
    if train:
        cache["upscore8.in"] = fuse3
    upscore8 = ops.transposed_conv2d(fuse3, p_up8)
    coord = coord.deconv(16, 8)

    of = coord.crop_offset_to(_Coord())
    if train:
        cache["crop_final"] = (upscore8.dims, of)
    cropped = ops.crop_center(upscore8, h, w, of, of)
    if train:
        cache["score_final.in"] = cropped
    scores = ops.conv2d_forward(cropped, net.conv_params("score_final"))
    if scores.dims != (1, net.num_classes, h, w):
        raise ShapeMismatch(
            f"score dims {scores.dims} != (1, {net.num_classes}, {h}, {w})")
    heatmap = ops.softmax_channels(scores)
    net._cache = cache
    return scores, heatmap


def backward(net: NetworkGraph, loss_grad: Tensor):
    """Backpropagate d(loss)/d(scores) through the cached forward pass.

    Fills every parameter's grad buffer and returns {name: grad array}.
    """
    cache = net._cache
    if cache is None:
        raise NoForwardState("backward() requires a prior forward(train=True)")

    grads = {}

    def set_grad(name, gk, gb):
        grads[f"{name}.weight"] = gk.data
        grads[f"{name}.bias"] = gb

    def conv_back(name, g, stride=1, padding=0):
        x = cache[f"{name}.in"]
        p = net.conv_params(name, stride=stride, padding=padding)
        gx, gk, gb = ops.conv2d_backward(x, p, g)
        set_grad(name, gk, gb)
        return gx

    def relu_back(name, g):
        return ops.relu_backward(cache[f"{name}.pre"], g)

    def deconv_back(name, g, stride):
        x = cache[f"{name}.in"]
        p = net.conv_params(name, stride=stride)
        gx, gk, gb = ops.transposed_conv2d_backward(x, p, g)
        set_grad(name, gk, gb)
        return gx

    g = conv_back("score_final", loss_grad)
    up8_dims, of = cache["crop_final"]
    g = ops.crop_center_backward(g, up8_dims, of, of)
    g = deconv_back("upscore8", g, 8)

    # fuse3 duplicates the gradient to the deep path and the pool3 edge
    sp3_dims, o3 = cache["crop3"]
    g_sp3 = ops.crop_center_backward(g, sp3_dims, o3, o3)
    g_pool3_edge = conv_back("score_pool3", g_sp3)

    g = deconv_back("upscore_pool4", g, 2)
    sp4_dims, o4 = cache["crop4"]
    g_sp4 = ops.crop_center_backward(g, sp4_dims, o4, o4)
    g_pool4_edge = conv_back("score_pool4", g_sp4)

    g = deconv_back("upscore2", g, 2)
    g = conv_back("score_fr", g)

    for lname in ("fc7", "fc6"):
        g = relu_back(lname, g)
        g = conv_back(lname, g)

    pool_edge_grads = {"pool4": g_pool4_edge, "pool3": g_pool3_edge}
    for sname, k, pad, _filt, rep in reversed(_STAGES):
        pool_name = f"pool{sname[-1]}"
        in_dims = cache[f"{pool_name}.in_dims"]
        g = ops.maxpool2d_backward(cache[f"{pool_name}.arg"], in_dims, g)
        for i in range(rep, 0, -1):
            lname = f"{sname}_{i}"
            g = relu_back(lname, g)
            g = conv_back(lname, g, 1, pad)
        edge = pool_edge_grads.get(f"pool{int(sname[-1]) - 1}")
        if edge is not None:
            g = ops.elementwise_add(g, edge)

    for name, t in net.params.items():
        t.grad = grads[name]
    return grads


# ------------------------------------------------------------- checkpoints

def save_checkpoint(net: NetworkGraph, path, extras=None):
    """Write all parameters as little-endian float32.

    extras (e.g. {"epoch": 7, "lr": 1e-5}) are stored as reserved
    rank-1 entries named __<key>__ within the same wire format.
    """
    entries = [(name, t.data) for name, t in net.params.items()]
    for key, val in (extras or {}).items():
        entries.append((f"__{key}__", np.array([val], dtype=np.float32)))
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names in checkpoint")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path):
    """Parse a checkpoint into ({name: array}, extras) without a graph."""
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptCheckpoint(f"truncated checkpoint: needed {n} bytes "
                                    f"at offset {pos}, have {len(raw) - pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        if name in tensors:
            raise CorruptCheckpoint(f"duplicate tensor name {name!r}")
        tensors[name] = data.copy()
    if pos != len(raw):
        raise CorruptCheckpoint(f"{len(raw) - pos} trailing bytes")
    extras = {k[2:-2]: float(v[0]) for k, v in tensors.items()
              if k.startswith("__") and k.endswith("__")}
    params = {k: v for k, v in tensors.items()
              if not (k.startswith("__") and k.endswith("__"))}
    return params, extras


def load_checkpoint(path, net: NetworkGraph):
    """Load a checkpoint into net, verifying the parameter inventory.

    Returns (net, extras).
    """
    params, extras = read_checkpoint(path)
    want = net.param_inventory()
    missing = sorted(set(want) - set(params))
    surplus = sorted(set(params) - set(want))
    if missing or surplus:
        raise DimsMismatch(f"inventory mismatch: missing {missing}, "
                           f"unexpected {surplus}")
    for name, arr in params.items():
        if arr.shape != want[name]:
            raise DimsMismatch(f"{name}: checkpoint dims {arr.shape} != "
                               f"graph dims {want[name]}")
    for name, arr in params.items():
        net.params[name] = Tensor(arr.astype(net.dtype))
    return net, extras
