"""Relation-augmented fully convolutional segmentation network.

A small three-stage backbone stands in for VGG-16 conv3/conv4/conv5. Each
stage output goes through the configured relation integration, a 1x1
classifier squashes it to ``K`` class maps, and the nearest-upsampled maps of
all three stages are summed into the final logits.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .relation import (
    ChannelRelationParams, IntegrationMode, SpatialRelationParams, apply_integration, glorot_uniform,
)
from .tensor import Tensor, conv1x1, conv3x3, relu, softmax_cross_entropy, upsample_nearest

IGNORE_LABEL = 255
MAGIC = b"RAFCN1"


@dataclass
class NetworkConfig:
    in_channels: int = 3
    num_classes: int = 6
    tile: tuple[int, int] = (32, 32)
    stage_channels: tuple[int, int, int] = (8, 16, 16)
    stage_strides: tuple[int, int, int] = (4, 8, 16)
    mode: IntegrationMode = IntegrationMode.SERIAL
    c_e: int | None = None  # None: embedding width equals the stage width
    relation_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        self.tile = tuple(int(v) for v in self.tile)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        self.stage_strides = tuple(int(v) for v in self.stage_strides)
        self.mode = IntegrationMode(self.mode)
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.stage_channels) != 3 or min(self.stage_channels) < 1:
            raise ConfigError(f"stage_channels must be three positive ints, got {self.stage_channels}")
        s = self.stage_strides
        if len(s) != 3 or s[0] < 2 or s[0] & (s[0] - 1) or s[1] != 2 * s[0] or s[2] != 2 * s[1]:
            raise ConfigError(f"stage_strides must be (s, 2s, 4s) with s a power of two >= 2, got {s}")
        if len(self.tile) != 2 or any(t < 1 or t % s[2] for t in self.tile):
            raise ConfigError(f"tile {self.tile} must be divisible by the largest stride {s[2]}")
        if self.c_e is not None and self.c_e < 1:
            raise ConfigError(f"c_e must be >= 1, got {self.c_e}")

    @property
    def stem_layers(self) -> int:
        return int(math.log2(self.stage_strides[0])) - 1

    def stage_resolution(self, stage: int) -> tuple[int, int]:
        s = self.stage_strides[stage]
        return self.tile[0] // s, self.tile[1] // s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["tile"] = list(self.tile)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_strides"] = list(self.stage_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Stage:
    convs: list[tuple[Tensor, Tensor]]
    spatial: SpatialRelationParams | None
    channel: ChannelRelationParams | None
    cls_w: Tensor
    cls_b: Tensor


@dataclass
class Network:
    config: NetworkConfig
    stem: list[tuple[Tensor, Tensor]]
    stages: list[Stage] = field(default_factory=list)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for i, (w, b) in enumerate(self.stem):
            out[f"stem{i}.w"], out[f"stem{i}.b"] = w, b
        for s, st in enumerate(self.stages):
            for j, (w, b) in enumerate(st.convs):
                out[f"stage{s}.conv{j}.w"], out[f"stage{s}.conv{j}.b"] = w, b
            if st.channel is not None:
                for k, t in st.channel.tensors().items():
                    out[f"stage{s}.crm.{k}"] = t
            if st.spatial is not None:
                for k, t in st.spatial.tensors().items():
                    out[f"stage{s}.srm.{k}"] = t
            out[f"stage{s}.cls.w"], out[f"stage{s}.cls.b"] = st.cls_w, st.cls_b
        return out

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None


def _conv3x3_params(rng, c_out, c_in):
    w = glorot_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True)


def init(config: NetworkConfig) -> Network:
    """Glorot-uniform weights and zero biases, deterministic in ``config.seed``.

    Backbone, relation heads and classifiers draw from separate streams, so
    every integration mode starts from the same backbone weights.
    """
    rng = np.random.default_rng([config.seed, 0])
    rel_rng = np.random.default_rng([config.seed, 1])
    cls_rng = np.random.default_rng([config.seed, 2])
    c_prev = config.in_channels
    stem = []
    for _ in range(config.stem_layers):
        stem.append(_conv3x3_params(rng, config.stage_channels[0], c_prev))
        c_prev = config.stage_channels[0]
    net = Network(config, stem)
    mode = config.mode
    for s, c in enumerate(config.stage_channels):
        convs = [_conv3x3_params(rng, c, c_prev), _conv3x3_params(rng, c, c)]
        c_prev = c
        h, w = config.stage_resolution(s)
        c_e = config.c_e or c
        cp = ChannelRelationParams.init(c, c_e, rel_rng, config.relation_bias) if mode.uses_channel else None
        sp = (SpatialRelationParams.init(c, c_e, rel_rng, config.relation_bias, resolution=(h, w))
              if mode.uses_spatial else None)
        width = mode.out_channels(c, h * w)
        k = config.num_classes
        cls_w = Tensor(glorot_uniform(cls_rng, (k, width), width, k), requires_grad=True)
        net.stages.append(Stage(convs, sp, cp, cls_w, Tensor(np.zeros(k), requires_grad=True)))
    return net


def forward(net: Network, image: Tensor) -> Tensor:
    """``K x H0 x W0`` logits for one ``C_in x H0 x W0`` tile, or ``N x K x H0 x W0`` for a stack."""
    cfg = net.config
    expect = (cfg.in_channels, *cfg.tile)
    if image.ndim not in (3, 4) or image.shape[-3:] != expect:
        raise DimensionError(f"network expects input [N x] {expect}, got {image.shape}")
    x = image
    for w, b in net.stem:
        x = relu(conv3x3(x, w, b, stride=2))
    logits = None
    for s, st in enumerate(net.stages):
        (w0, b0), (w1, b1) = st.convs
        x = relu(conv3x3(x, w0, b0, stride=2))
        x = relu(conv3x3(x, w1, b1, stride=1))
        feat = apply_integration(x, cfg.mode, st.spatial, st.channel)
        scores = upsample_nearest(conv1x1(feat, st.cls_w, st.cls_b), cfg.stage_strides[s])
        logits = scores if logits is None else logits + scores
    return logits


def loss(logits: Tensor, labels: np.ndarray, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean cross-entropy over pixels whose label is not ``ignore_label``."""
    return softmax_cross_entropy(logits, labels, ignore_label)


def predict(net: Network, image: Tensor) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest class index."""
    return decode(forward(net, image).data)


def decode(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=-3).astype(np.int64)


# ---------------------------------------------------------------------------
# checkpoint container


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path, config: dict, tensors: "OrderedDict[str, np.ndarray]") -> None:
    """Write ``RAFCN1`` + length-prefixed JSON + named float64 tensors."""
    buf = bytearray(MAGIC)
    blob = canonical_json(config).encode("utf-8")
    buf += struct.pack("<I", len(blob)) + blob
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() below emits C order; keeps 0-d rank
        key = name.encode("utf-8")
        buf += struct.pack("<I", len(key)) + key
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_container(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)", offset=0)
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise DataError(f"{path}: truncated, wanted {n} bytes, {len(raw) - pos} left", offset=pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (n,) = struct.unpack("<I", take(4))
    config = json.loads(take(n).decode("utf-8"))
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    while pos < len(raw):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return config, tensors


def save_checkpoint(path, net: Network, extra: "OrderedDict[str, np.ndarray] | None" = None,
                    meta: dict | None = None) -> None:
    """Parameters, then any ``extra`` arrays (optimizer state and the like)."""
    tensors: OrderedDict[str, np.ndarray] = OrderedDict(
        (name, t.data) for name, t in net.parameters().items())
    for name, arr in (extra or {}).items():
        if name in tensors:
            raise ValueError(f"extra tensor '{name}' collides with a parameter")
        tensors[name] = np.asarray(arr, dtype=np.float64)
    header = {"network": net.config.to_dict()}
    if meta:
        header.update(meta)
    write_container(path, header, tensors)


def load_checkpoint(path) -> tuple[Network, dict, "OrderedDict[str, np.ndarray]"]:
    """Returns the network, the JSON header and the non-parameter tensors."""
    header, tensors = read_container(path)
    if "network" not in header:
        raise DataError(f"{path}: header has no network config")
    net = init(NetworkConfig.from_dict(header["network"]))
    for name, t in net.parameters().items():
        if name not in tensors:
            raise DataError(f"{path}: missing parameter '{name}'")
        arr = tensors.pop(name)
        if arr.shape != t.shape:
            raise DataError(f"{path}: parameter '{name}' has shape {arr.shape}, expected {t.shape}")
        t.data = arr
    return net, header, tensors
