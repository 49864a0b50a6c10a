"""
U-Net encoder-decoder with skip connections, built on tensor_ops
"""
import logging
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.models import UNetConfig
from src.tensor_ops import (
    Parameter,
    concat_channels,
    conv2d,
    conv2d_backward,
    conv_transpose2d,
    conv_transpose2d_backward,
    default_dtype,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    split_channels,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UNETCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint"""


class UNet:
    """U-Net model: named parameters plus forward / backward over them"""

    def __init__(self, config: UNetConfig, parameters: "OrderedDict[str, Parameter]"):
        self.config = config
        self.params = parameters

    # -- construction -------------------------------------------------------

    @staticmethod
    def parameter_shapes(cfg: UNetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
        """Stable parameter names and shapes, in checkpoint order"""
        shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        prev = cfg.in_channels
        for i in range(cfg.levels):
            ch = cfg.channels(i)
            shapes[f"enc{i}.conv1.weight"] = (ch, prev, 3, 3)
            shapes[f"enc{i}.conv1.bias"] = (ch,)
            shapes[f"enc{i}.conv2.weight"] = (ch, ch, 3, 3)
            shapes[f"enc{i}.conv2.bias"] = (ch,)
            prev = ch
        for i in reversed(range(cfg.levels - 1)):
            ch = cfg.channels(i)
            shapes[f"up{i}.weight"] = (cfg.channels(i + 1), ch, 2, 2)
            shapes[f"up{i}.bias"] = (ch,)
            shapes[f"dec{i}.conv1.weight"] = (ch, 2 * ch, 3, 3)
            shapes[f"dec{i}.conv1.bias"] = (ch,)
            shapes[f"dec{i}.conv2.weight"] = (ch, ch, 3, 3)
            shapes[f"dec{i}.conv2.bias"] = (ch,)
        shapes["head.weight"] = (cfg.out_channels, cfg.base_channels, 1, 1)
        shapes["head.bias"] = (cfg.out_channels,)
        return shapes

    @classmethod
    def build(cls, cfg: UNetConfig, seed: int = 0, dtype: Optional[Union[str, np.dtype]] = None) -> "UNet":
        """Fresh model with He-style fan-in scaled uniform weights and zero biases"""
        dtype = np.dtype(dtype) if dtype is not None else default_dtype()
        rng = np.random.default_rng(seed)
        params: "OrderedDict[str, Parameter]" = OrderedDict()
        for name, shape in cls.parameter_shapes(cfg).items():
            if name.endswith(".bias"):
                value = np.zeros(shape, dtype=dtype)
            else:
                if name.startswith("up"):
                    fan_in = shape[0]
                else:
                    fan_in = shape[1] * shape[2] * shape[3]
                bound = np.sqrt(6.0 / fan_in)
                value = rng.uniform(-bound, bound, size=shape).astype(dtype)
            params[name] = Parameter(name=name, value=value)
        logger.info("Built U-Net levels=%d base=%d (%d parameters)",
                    cfg.levels, cfg.base_channels, sum(p.value.size for p in params.values()))
        return cls(cfg, params)

    @property
    def dtype(self) -> np.dtype:
        return self.params["head.weight"].value.dtype

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _p(self, name: str) -> np.ndarray:
        return self.params[name].value

    # -- forward / backward -------------------------------------------------

    def check_input(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected input (N, {self.config.in_channels}, H, W), got {x.shape}")
        d = self.config.divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise ValueError(
                f"spatial dims {x.shape[2]}x{x.shape[3]} must be divisible by {d} for {self.config.levels} levels"
            )

    def _block(self, x: np.ndarray, prefix: str, cache: Optional[Dict]) -> np.ndarray:
        z1 = conv2d(x, self._p(f"{prefix}.conv1.weight"), self._p(f"{prefix}.conv1.bias"))
        a1 = relu(z1)
        z2 = conv2d(a1, self._p(f"{prefix}.conv2.weight"), self._p(f"{prefix}.conv2.bias"))
        if cache is not None:
            cache[prefix] = (x, z1, a1, z2)
        return relu(z2)

    def _block_backward(self, da: np.ndarray, prefix: str, cache: Dict) -> np.ndarray:
        x, z1, a1, z2 = cache[prefix]
        dz2 = relu_backward(da, z2)
        da1, dw2, db2 = conv2d_backward(dz2, a1, self._p(f"{prefix}.conv2.weight"))
        self.params[f"{prefix}.conv2.weight"].grad += dw2
        self.params[f"{prefix}.conv2.bias"].grad += db2
        dz1 = relu_backward(da1, z1)
        dx, dw1, db1 = conv2d_backward(dz1, x, self._p(f"{prefix}.conv1.weight"))
        self.params[f"{prefix}.conv1.weight"].grad += dw1
        self.params[f"{prefix}.conv1.bias"].grad += db1
        return dx

    def _run(self, x: np.ndarray, cache: Optional[Dict]) -> np.ndarray:
        self.check_input(x)
        x = np.asarray(x, dtype=self.dtype)
        levels = self.config.levels
        skips = []
        h = x
        for i in range(levels):
            if i > 0:
                h, argmax = maxpool2x2(h)
                if cache is not None:
                    cache[f"pool{i}"] = argmax
            h = self._block(h, f"enc{i}", cache)
            if i < levels - 1:
                skips.append(h)
        for i in reversed(range(levels - 1)):
            up_in = h
            up = conv_transpose2d(h, self._p(f"up{i}.weight"), self._p(f"up{i}.bias"))
            skip = skips[i]
            assert skip.shape[2:] == up.shape[2:], f"skip {skip.shape} does not match decoder {up.shape}"
            if cache is not None:
                cache[f"up{i}"] = up_in
            h = self._block(concat_channels(skip, up), f"dec{i}", cache)
        if cache is not None:
            cache["head"] = h
        logits = conv2d(h, self._p("head.weight"), self._p("head.bias"))
        probs = sigmoid(logits)
        if cache is not None:
            cache["probs"] = probs
        return probs

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Probabilities (N, out_channels, H, W); touches no model state"""
        return self._run(batch, None)

    def forward_with_cache(self, batch: np.ndarray) -> Tuple[np.ndarray, Dict]:
        cache: Dict = {}
        probs = self._run(batch, cache)
        return probs, cache

    def backward(self, cache: Dict, dprobs: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients from dL/dprobs; returns dL/dinput"""
        levels = self.config.levels
        dlogits = sigmoid_backward(dprobs, cache["probs"])
        dh, dw, db = conv2d_backward(dlogits, cache["head"], self._p("head.weight"))
        self.params["head.weight"].grad += dw
        self.params["head.bias"].grad += db
        dskips: Dict[int, np.ndarray] = {}
        for i in range(levels - 1):
            dcat = self._block_backward(dh, f"dec{i}", cache)
            dskip, dup = split_channels(dcat, self.config.channels(i))
            dskips[i] = dskip
            dh, dw, db = conv_transpose2d_backward(dup, cache[f"up{i}"], self._p(f"up{i}.weight"))
            self.params[f"up{i}.weight"].grad += dw
            self.params[f"up{i}.bias"].grad += db
        for i in reversed(range(levels)):
            if i < levels - 1:
                dh = dh + dskips[i]
            dh = self._block_backward(dh, f"enc{i}", cache)
            if i > 0:
                dh = maxpool2x2_backward(dh, cache[f"pool{i}"])
        return dh

    # -- persistence ----------------------------------------------------------

    def save(self, path: Union[str, Path]):
        save_checkpoint(self, path)


# Checkpoint layout (all little endian):
#   magic "UNETCKPT" | version u16
#   levels u16 | base_channels u32 | in_channels u16 | out_channels u16
#   count u32, then per parameter:
#     name_len u16 | name utf-8 | ndim u8 | dims u32 * ndim | float32 payload
#   crc32 u32 of every preceding byte

def save_checkpoint(model: UNet, path: Union[str, Path]):
    cfg = model.config
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", CHECKPOINT_VERSION),
        struct.pack("<HIHH", cfg.levels, cfg.base_channels, cfg.in_channels, cfg.out_channels),
        struct.pack("<I", len(model.params)),
    ]
    for name, p in model.params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    body = b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    logger.info("Saved checkpoint %s (%d bytes)", path, len(body) + 4)


def load_checkpoint(path: Union[str, Path], expected: Optional[UNetConfig] = None,
                    dtype: Optional[Union[str, np.dtype]] = None) -> UNet:
    """Read a checkpoint, verifying magic, version, CRC and parameter shapes"""
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 2 + 10 + 4 + 4 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a U-Net checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<H", body, pos)
    pos += 2
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    levels, base, cin, cout = struct.unpack_from("<HIHH", body, pos)
    pos += 10
    cfg = UNetConfig(levels=levels, base_channels=base, in_channels=cin, out_channels=cout)
    if expected is not None and expected != cfg:
        raise CheckpointError(f"{path}: config mismatch, file has {cfg.model_dump()}, expected {expected.model_dump()}")

    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    shapes = UNet.parameter_shapes(cfg)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if count != len(shapes):
        raise CheckpointError(f"{path}: holds {count} parameters, config implies {len(shapes)}")
    params: "OrderedDict[str, Parameter]" = OrderedDict()
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            if shapes.get(name) != tuple(shape):
                raise CheckpointError(f"{path}: parameter {name} has shape {shape}, config implies {shapes.get(name)}")
            size = int(np.prod(shape)) * 4
            if pos + size > len(body):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            value = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(dtype)
            pos += size
            params[name] = Parameter(name=name, value=value)
    except struct.error as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e
    return UNet(cfg, params)
