"""G/D network builders, a sequential container, and checkpoint persistence."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import (BatchNorm2d, Conv2d, ConvComparison, Layer, LayerSpec,
                     LeakyReLU, Linear, ReLU, Sigmoid)
from .tensor import Prng, ShapeError

G_WIDTHS = (16, 32, 64, 96, 96, 64, 32, 16)
D_WIDTHS = (16, 16, 32, 32, 32, 64, 64, 64, 96, 96, 96, 128, 128, 128, 128)
D_STRIDE2 = (3, 6, 9, 12)
D_COMPARISON = (5, 10, 14)


class Network:
    """Ordered layers run front to back; backward runs them in reverse."""

    def __init__(self, specs: list[LayerSpec], layers: list[Layer], name: str = ""):
        self.specs = list(specs)
        self.layers = list(layers)
        self.name = name
        self.mode = "train"

    def __len__(self):
        return len(self.layers)

    def set_mode(self, mode: str):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
        self.mode = mode
        for layer in self.layers:
            layer.training = mode == "train"
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            need = need_input_grad or i > 0
            grad = self.layers[i].backward(grad, need)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params.values()]

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            for k, p in layer.params.items():
                out.append(layer.grads.get(k, np.zeros_like(p)))
        return out

    def state_tensors(self) -> list[list[np.ndarray]]:
        return [list(layer.state().values()) for layer in self.layers]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def comparison_layers(self) -> list[ConvComparison]:
        return [l for l in self.layers if isinstance(l, ConvComparison)]

    def clear_references(self):
        for layer in self.comparison_layers():
            layer.clear()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(T.DEFAULT_DTYPE)


def _make_layer(spec: LayerSpec, prng: Prng, dtype, alpha: float) -> Layer:
    k = spec.kind
    if k in ("conv", "conv_stride2"):
        return Conv2d(spec.channels_in, spec.channels_out, spec.kernel, spec.stride, prng, dtype)
    if k == "conv_comparison":
        return ConvComparison(spec.channels_in, spec.channels_out, spec.kernel, 1, prng,
                              dtype, alpha=alpha)
    if k == "batchnorm":
        return BatchNorm2d(spec.channels_out, dtype=dtype)
    if k == "relu":
        return ReLU()
    if k == "leaky_relu":
        return LeakyReLU(spec.slope)
    if k == "sigmoid":
        return Sigmoid()
    if k == "fully_connected":
        return Linear(spec.channels_in, spec.channels_out, prng, dtype)
    raise ValueError(k)


def build_from_specs(specs, prng: Prng, dtype=T.DEFAULT_DTYPE, alpha: float = 0.8,
                     name: str = "") -> Network:
    return Network(specs, [_make_layer(s, prng, dtype, alpha) for s in specs], name)


def g_network_specs(input_channels=3, map_dims=9, widths=G_WIDTHS) -> list[LayerSpec]:
    if map_dims < 1:
        raise ValueError("map_dims must be at least 1")
    specs, c = [], input_channels
    for w in widths:
        specs += [LayerSpec("conv", c, w), LayerSpec("batchnorm", w, w), LayerSpec("relu", w, w)]
        c = w
    specs += [LayerSpec("conv", c, map_dims), LayerSpec("sigmoid", map_dims, map_dims)]
    return specs


def build_g_network(input_channels: int = 3, map_dims: int = 9, prng: Prng | None = None,
                    widths=G_WIDTHS, dtype=T.DEFAULT_DTYPE) -> Network:
    """Fully convolutional, same-size generator ending in a sigmoid."""
    prng = prng if prng is not None else Prng(0)
    return build_from_specs(g_network_specs(input_channels, map_dims, widths), prng, dtype,
                            name="G")


def d_network_specs(input_channels=9, num_classes=21, input_size=64, widths=D_WIDTHS,
                    stride2=D_STRIDE2, comparison=D_COMPARISON, slope=0.2) -> list[LayerSpec]:
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    factor = 2 ** len(stride2)
    if input_size % factor:
        raise ShapeError(f"input size {input_size} is not divisible by {factor}")
    specs, c = [], input_channels
    for depth, w in enumerate(widths, start=1):
        if depth in stride2:
            specs.append(LayerSpec("conv_stride2", c, w))
        else:
            kind = "conv_comparison" if depth in comparison else "conv"
            specs += [LayerSpec(kind, c, w), LayerSpec("batchnorm", w, w),
                      LayerSpec("leaky_relu", w, w, slope=slope)]
        c = w
    side = input_size // factor
    specs.append(LayerSpec("fully_connected", c * side * side, num_classes))
    return specs


def build_d_network(input_channels: int = 9, num_classes: int = 21, prng: Prng | None = None,
                    input_size: int = 64, comparison=D_COMPARISON, alpha: float = 0.8,
                    widths=D_WIDTHS, stride2=D_STRIDE2, slope: float = 0.2,
                    dtype=T.DEFAULT_DTYPE) -> Network:
    """Strided-conv discriminator emitting ``num_classes`` logits.

    Pass ``comparison=()`` for a discriminator without comparison layers.
    """
    prng = prng if prng is not None else Prng(0)
    specs = d_network_specs(input_channels, num_classes, input_size, widths, stride2,
                            comparison, slope)
    return build_from_specs(specs, prng, dtype, alpha, name="D")


# -- checkpoints --------------------------------------------------------------

MAGIC = b"SANCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(net: Network) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(net.layers))]
    for tensors in net.state_tensors():
        parts.append(struct.pack("<I", len(tensors)))
        for t in tensors:
            parts.append(struct.pack("<I", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path, prototype: Network) -> Network:
    """Fill ``prototype`` in place with the tensors stored at ``path``."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if body[:8] != MAGIC:
        raise CheckpointError("bad magic bytes")
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch (corrupt or truncated checkpoint)")
    version, nlayers = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if nlayers != len(prototype.layers):
        raise CheckpointError(f"file has {nlayers} layers, prototype has {len(prototype.layers)}")
    off = 16
    loaded = []
    for layer in prototype.layers:
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        state = layer.state()
        if count != len(state):
            raise CheckpointError("tensor count mismatch")
        values = {}
        for key, ref in state.items():
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            if tuple(shape) != ref.shape:
                raise CheckpointError(f"shape mismatch for {key}: {shape} vs {ref.shape}")
            size = int(np.prod(shape)) * 4
            values[key] = np.frombuffer(body, "<f4", int(np.prod(shape)), off).reshape(shape)
            off += size
        loaded.append(values)
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    for layer, values in zip(prototype.layers, loaded):
        for key, v in values.items():
            if key in layer.params:
                layer.params[key] = v.astype(layer.params[key].dtype)
            else:
                setattr(layer, key, v.astype(getattr(layer, key).dtype))
    return prototype


def checkpoint_shapes(path) -> list[list[tuple[int, ...]]]:
    """Per-layer tensor shapes stored in a checkpoint, after integrity checks."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch (corrupt or truncated checkpoint)")
    version, nlayers = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off, layers = 16, []
    for _ in range(nlayers):
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        shapes = []
        for _ in range(count):
            (rank,) = struct.unpack_from("<I", body, off)
            shape = struct.unpack_from(f"<{rank}I", body, off + 4)
            off += 4 + 4 * rank + 4 * int(np.prod(shape))
            shapes.append(tuple(shape))
        layers.append(shapes)
    return layers


def load_g_checkpoint(path) -> Network:
    """Rebuild a generator of whatever widths the checkpoint holds and load it."""
    shapes = checkpoint_shapes(path)
    convs = [s[0] for s in shapes if len(s) == 2 and len(s[0]) == 4]
    if len(convs) < 2 or len(shapes) != 3 * (len(convs) - 1) + 2:
        raise CheckpointError("checkpoint does not hold a generator")
    G = build_g_network(convs[0][1], convs[-1][0], Prng(0), widths=tuple(c[0] for c in convs[:-1]))
    return load_checkpoint(path, G)
