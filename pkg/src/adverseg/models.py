"""Toy segmentator and encoder-decoder discriminator plus the checkpoint format.

Checkpoint layout (all integers little-endian u32)::

    b"ASEG" | version | count | count * record
    record = name_len | utf-8 name | rank | dims[rank] | f32 payload (LE)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autograd as ag
from .autograd import GeometryError, ShapeError, Tensor

MAGIC = b"ASEG"
FORMAT_VERSION = 1

ROLES = ("generator", "discriminator")
HEADS = ("pixelwise", "standard")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    num_classes: int = 4
    base_width: int = 8
    depth: int = 2
    leaky_slope: float = 0.2

    def validate(self) -> "NetConfig":
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        return self

    def check_geometry(self, h: int, w: int) -> None:
        f = 2 ** self.depth
        if h % f or w % f:
            raise GeometryError(f"input {h}x{w} not divisible by 2**depth = {f}")


@dataclass(frozen=True)
class Layer:
    name: str
    cin: int
    cout: int
    k: int
    stride: int = 1
    pad: int = 0
    dilation: int = 1
    upsample: bool = False


def generator_layers(cfg: NetConfig) -> list[Layer]:
    w, d = cfg.base_width, cfg.depth
    layers = [Layer("enc0", cfg.in_channels, w, 3, pad=1)]
    for s in range(1, d + 1):
        layers.append(Layer(f"down{s}", w * 2 ** (s - 1), w * 2 ** s, 3, stride=2, pad=1))
    layers.append(Layer("ctx", w * 2 ** d, w * 2 ** d, 3, pad=2, dilation=2))
    for s in range(d, 0, -1):
        layers.append(Layer(f"up{s}", w * 2 ** s, w * 2 ** (s - 1), 3, pad=1, upsample=True))
    layers.append(Layer("head", w, cfg.num_classes, 1))
    return layers


def discriminator_layers(cfg: NetConfig) -> list[Layer]:
    # encoder-decoder with no latent layer between the two halves
    w, d = cfg.base_width, cfg.depth
    enc = [cfg.num_classes] + [w * 2 ** (s - 1) for s in range(1, d + 1)]
    layers = [Layer(f"down{s}", enc[s - 1], enc[s], 3, stride=2, pad=1) for s in range(1, d + 1)]
    dec_out = [w] + enc[1:]
    for s in range(d, 0, -1):
        layers.append(Layer(f"up{s}", enc[s], dec_out[s - 1], 3, pad=1, upsample=True))
    layers.append(Layer("head", w, 1, 1))
    return layers


def count_parameters(layers: list[Layer]) -> int:
    return int(sum(l.cout * l.cin * l.k * l.k + l.cout for l in layers))


class Network:
    """Named parameter tensors plus the layer stack they belong to."""

    def __init__(self, cfg: NetConfig, role: str, head: str = "pixelwise",
                 params: dict[str, Tensor] | None = None):
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}")
        if head not in HEADS:
            raise ConfigError(f"unknown head {head!r}")
        self.cfg = cfg
        self.role = role
        self.head = head
        self.layers = generator_layers(cfg) if role == "generator" else discriminator_layers(cfg)
        self.params: dict[str, Tensor] = params if params is not None else {}

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def __call__(self, x):
        if self.role == "generator":
            return forward_generator(self, x)
        return forward_discriminator(self, x)

    def named_parameters(self):
        return self.params.items()

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise CheckpointError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def copy(self) -> "Network":
        params = {k: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=k) for k, p in self.params.items()}
        return Network(self.cfg, self.role, self.head, params)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        for p in net.params.values():
            p.data = p.data.astype(dtype)
        return net

    def meta(self) -> np.ndarray:
        c = self.cfg
        return np.array([c.in_channels, c.num_classes, c.base_width, c.depth, c.leaky_slope,
                         ROLES.index(self.role), HEADS.index(self.head)], dtype=np.float32)

    def save(self, path, extra: Mapping[str, np.ndarray] | None = None) -> None:
        tensors = {"meta.net": self.meta(), **self.state_dict()}
        if extra:
            tensors.update(extra)
        save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path) -> "Network":
        tensors = load_checkpoint(path)
        net = network_from_tensors(tensors)
        return net


def network_from_tensors(tensors: Mapping[str, np.ndarray]) -> Network:
    if "meta.net" not in tensors:
        raise CheckpointError("checkpoint has no meta.net record")
    m = tensors["meta.net"]
    cfg = NetConfig(int(m[0]), int(m[1]), int(m[2]), int(m[3]), round(float(m[4]), 6)).validate()
    net = _init_network(cfg, ROLES[int(m[5])], HEADS[int(m[6])], seed=0)
    net.load_state_dict(tensors)
    return net


def _init_network(cfg: NetConfig, role: str, head: str, seed: int, zero_head: bool = False) -> Network:
    cfg.validate()
    net = Network(cfg, role, head)
    rng = np.random.default_rng(seed)
    gain = 2.0 if role == "generator" else 2.0 / (1.0 + cfg.leaky_slope ** 2)
    for layer in net.layers:
        fan_in = layer.cin * layer.k * layer.k
        shape = (layer.cout, layer.cin, layer.k, layer.k)
        w = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
        if layer.name == "head":
            w = np.zeros(shape) if zero_head else rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)
        net.params[f"{layer.name}.weight"] = Tensor(w.astype(np.float32), requires_grad=True, name=f"{layer.name}.weight")
        net.params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.cout, np.float32), requires_grad=True, name=f"{layer.name}.bias")
    return net


def build_generator(cfg: NetConfig, seed: int, zero_head: bool = False) -> Network:
    """Segmentator: [in_channels, H, W] image -> [C, H, W] class probabilities."""
    return _init_network(cfg, "generator", "pixelwise", seed, zero_head)


def build_discriminator(cfg: NetConfig, seed: int, head: str = "pixelwise", zero_head: bool = False) -> Network:
    """[C, H, W] probability map -> [1, H, W] confidences, or [1, 1, 1] with the standard head."""
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}")
    return _init_network(cfg, "discriminator", head, seed, zero_head)


def _conv(net: Network, layer: Layer, x: Tensor) -> Tensor:
    if layer.upsample:
        x = ag.upsample_nearest2x(x)
    return ag.conv2d(x, net.params[f"{layer.name}.weight"], net.params[f"{layer.name}.bias"],
                     stride=layer.stride, pad=layer.pad, dilation=layer.dilation)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def generator_logits(net: Network, image) -> Tensor:
    if net.role != "generator":
        raise ConfigError(f"expected a generator, got {net.role}")
    x = _as_input(image, net.params["head.weight"].dtype)
    if x.shape[-3] != net.cfg.in_channels:
        raise ShapeError(f"image has {x.shape[-3]} channels, net expects {net.cfg.in_channels}")
    net.cfg.check_geometry(x.shape[-2], x.shape[-1])
    for layer in net.layers:
        x = _conv(net, layer, x)
        if layer.name != "head":
            x = ag.relu(x)
    return x


def forward_generator(net: Network, image) -> Tensor:
    return ag.softmax_channels(generator_logits(net, image))


def forward_discriminator(net: Network, probmap) -> Tensor:
    if net.role != "discriminator":
        raise ConfigError(f"expected a discriminator, got {net.role}")
    x = _as_input(probmap, net.params["head.weight"].dtype)
    if x.data.ndim not in (3, 4) or x.shape[-3] != net.cfg.num_classes:
        raise ShapeError(f"probability map shape {x.shape} does not match C={net.cfg.num_classes}")
    net.cfg.check_geometry(x.shape[-2], x.shape[-1])
    for layer in net.layers:
        x = _conv(net, layer, x)
        if layer.name != "head":
            x = ag.leaky_relu(x, net.cfg.leaky_slope)
    if net.head == "standard":
        x = ag.global_avg_pool(x)
    return ag.sigmoid(x)


# ---------------------------------------------------------------------------
# binary checkpoint format


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(dims)
            off += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out
