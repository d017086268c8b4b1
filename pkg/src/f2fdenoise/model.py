"""DnCNN-style residual denoiser for grayscale frames.

The network maps a noisy frame to an estimate of its noise; the denoised
frame is the input minus that estimate. Layer layout for ``depth`` L:

    conv(1 -> width) + ReLU
    (L - 2) x [conv(width -> width) + batch norm (optional) + ReLU]
    conv(width -> 1)

Weights file layout (little-endian)::

    b"F2FW"  version:u32  depth:u32  width:u32  kernel:u32  use_norm:u8  residual:u8
    for each layer, in order:
        weight, bias[, gamma, beta, running_mean, running_var]
    each array is written as  ndim:u32  dims:u32 * ndim  data:float32 (C order)
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Parameter, RunningStats, Tape, batch_norm, conv2d, relu
from .errors import DataError

MAGIC = b"F2FW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIBB")


class WeightsError(DataError):
    """Base class for weights file problems."""

    code = "weights"


class WeightsFormatError(WeightsError):
    code = "bad-magic-or-version"


class WeightsTruncatedError(WeightsError):
    code = "truncated"


class WeightsShapeError(WeightsError):
    code = "shape-inconsistent"


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 7
    width: int = 32
    kernel: int = 3
    use_norm: bool = True
    residual: bool = True

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError(f"depth must be >= 3, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd integer, got {self.kernel}")


FULL_CONFIG = ModelConfig(depth=17, width=64)  # full-size network; the default is the desk size


@dataclass(eq=False)
class Layer:
    weight: Parameter
    bias: Parameter
    gamma: Optional[Parameter] = None
    beta: Optional[Parameter] = None
    running: Optional[RunningStats] = None

    @property
    def has_norm(self) -> bool:
        return self.gamma is not None

    def parameters(self) -> list[Parameter]:
        ps = [self.weight, self.bias]
        if self.has_norm:
            ps += [self.gamma, self.beta]
        return ps


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    layers: list[Layer] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def arrays(self) -> list[np.ndarray]:
        """All stored arrays in file order, running statistics included."""
        out = []
        for layer in self.layers:
            out += [layer.weight.value, layer.bias.value]
            if layer.has_norm:
                out += [layer.gamma.value, layer.beta.value, layer.running.mean, layer.running.var]
        return out

    def copy(self) -> "ModelParams":
        layers = []
        for layer in self.layers:
            new = Layer(Parameter(layer.weight.value.copy(), trainable=layer.weight.trainable),
                        Parameter(layer.bias.value.copy(), trainable=layer.bias.trainable))
            if layer.has_norm:
                new.gamma = Parameter(layer.gamma.value.copy(), trainable=layer.gamma.trainable)
                new.beta = Parameter(layer.beta.value.copy(), trainable=layer.beta.trainable)
                new.running = RunningStats(layer.running.mean.copy(), layer.running.var.copy(),
                                           layer.running.momentum)
            layers.append(new)
        return ModelParams(self.config, layers)

    def checksum(self) -> int:
        """CRC32 over every stored array; cheap identity check for logs."""
        crc = 0
        for a in self.arrays():
            crc = zlib.crc32(np.ascontiguousarray(a, dtype="<f4").tobytes(), crc)
        return crc

    def equals(self, other: "ModelParams") -> bool:
        if self.config != other.config:
            return False
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _layer_shapes(config: ModelConfig) -> list[tuple[int, int, bool]]:
    """(in_channels, out_channels, has_norm) per layer."""
    L, w = config.depth, config.width
    shapes = [(1, w, False)]
    shapes += [(w, w, config.use_norm)] * (L - 2)
    shapes.append((w, 1, False))
    return shapes


def init_params(config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelParams:
    """He-initialized weights, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    k = config.kernel
    layers = []
    for cin, cout, has_norm in _layer_shapes(config):
        fan_in = cin * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)).astype(np.float32)
        layer = Layer(Parameter(w), Parameter(np.zeros(cout, np.float32)))
        if has_norm:
            layer.gamma = Parameter(np.ones(cout, np.float32))
            layer.beta = Parameter(np.zeros(cout, np.float32))
            layer.running = RunningStats.create(cout)
        layers.append(layer)
    return ModelParams(config, layers)


def _as_batch(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        return frame[None, None]
    if frame.ndim == 3:
        return frame[:, None]
    if frame.ndim == 4:
        return frame
    raise ValueError(f"expected a 2-D frame or a batch, got shape {frame.shape}")


def forward_residual(params: ModelParams, frame: np.ndarray, mode: str = "eval",
                     update_running: bool = True, tape: Optional[Tape] = None) -> np.ndarray:
    """Noise estimate for ``frame`` (2-D, (B,H,W) or (B,1,H,W)); output has the input's shape."""
    frame = np.asarray(frame)
    if not np.all(np.isfinite(frame)):
        raise DataError("input frame contains non-finite values")
    dtype = params.layers[0].weight.value.dtype
    x = _as_batch(frame).astype(dtype, copy=False)
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        x = conv2d(x, layer.weight, layer.bias, tape=tape)
        if i == last:
            break
        if layer.has_norm:
            x = batch_norm(x, layer.gamma, layer.beta, layer.running, mode=mode,
                           update_running=update_running, tape=tape)
        x = relu(x, tape=tape)
    if tape is not None:
        batch_shape = x.shape
        tape.record(lambda g: np.reshape(g, batch_shape).astype(dtype, copy=False))
    return x.reshape(frame.shape)


def predict(params: ModelParams, frame: np.ndarray, mode: str = "eval",
            update_running: bool = True, tape: Optional[Tape] = None) -> np.ndarray:
    """Network output as an image estimate: ``frame - residual`` or the raw output."""
    r = forward_residual(params, frame, mode=mode, update_running=update_running, tape=tape)
    if not params.config.residual:
        return r
    if tape is not None:
        # frames are constants; only the path through the network is recorded
        tape.record(lambda g: -g)
    return frame - r


def denoise(params: ModelParams, frame: np.ndarray) -> np.ndarray:
    return predict(params, frame, mode="eval")


def save_weights(params: ModelParams, path) -> None:
    c = params.config
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, c.depth, c.width, c.kernel,
                           int(c.use_norm), int(c.residual))]
    for a in params.arrays():
        chunks.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: not a weights file (bad magic)")
    if len(data) < _HEADER.size:
        raise WeightsTruncatedError(f"{path}: header truncated")
    _, version, depth, width, kernel, use_norm, residual = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"{path}: unsupported format version {version}")
    try:
        config = ModelConfig(depth, width, kernel, bool(use_norm), bool(residual))
    except ValueError as exc:
        raise WeightsShapeError(f"{path}: invalid header: {exc}") from None

    pos = _HEADER.size

    def read_array(expected):
        nonlocal pos
        if pos + 4 > len(data):
            raise WeightsTruncatedError(f"{path}: truncated at byte {pos}")
        (ndim,) = struct.unpack_from("<I", data, pos)
        if ndim > 8:
            raise WeightsShapeError(f"{path}: implausible array rank {ndim} at byte {pos}")
        if pos + 4 + 4 * ndim > len(data):
            raise WeightsTruncatedError(f"{path}: truncated at byte {pos}")
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
        if tuple(shape) != tuple(expected):
            raise WeightsShapeError(
                f"{path}: array at byte {pos} has shape {shape}, header implies {expected}")
        pos += 4 + 4 * ndim
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise WeightsTruncatedError(f"{path}: truncated inside array at byte {pos}")
        a = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        pos += nbytes
        return a.astype(np.float32)

    k = config.kernel
    layers = []
    for cin, cout, has_norm in _layer_shapes(config):
        layer = Layer(Parameter(read_array((cout, cin, k, k))), Parameter(read_array((cout,))))
        if has_norm:
            layer.gamma = Parameter(read_array((cout,)))
            layer.beta = Parameter(read_array((cout,)))
            layer.running = RunningStats(read_array((cout,)), read_array((cout,)))
        layers.append(layer)
    if pos != len(data):
        raise WeightsShapeError(f"{path}: {len(data) - pos} trailing bytes; declared depth does not match")
    return ModelParams(config, layers)
