"""Spatial and channel relation modules and the ways of combining them.

The spatial module scores every pair of positions with an embedded dot
product, keeps the positive part, and appends the resulting ``HW`` relation
maps to the input channels. The channel module scores every pair of channels
from their pooled descriptors, softmax-normalises each row and uses the
result to remix the channels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor, add, concat_channels, conv1x1, global_avg_pool, matmul, mul, relu,
    reshape, softmax_rows, transpose2d,
)


class IntegrationMode(str, enum.Enum):
    NONE = "none"
    SRM_ONLY = "srm_only"
    CRM_ONLY = "crm_only"
    SERIAL = "serial"
    PARALLEL = "parallel"

    @property
    def uses_spatial(self) -> bool:
        return self in (IntegrationMode.SRM_ONLY, IntegrationMode.SERIAL, IntegrationMode.PARALLEL)

    @property
    def uses_channel(self) -> bool:
        return self in (IntegrationMode.CRM_ONLY, IntegrationMode.SERIAL, IntegrationMode.PARALLEL)

    def out_channels(self, c: int, hw: int) -> int:
        """Channel count after integration for a ``c``-channel, ``hw``-position input."""
        return {
            IntegrationMode.NONE: c,
            IntegrationMode.SRM_ONLY: c + hw,
            IntegrationMode.CRM_ONLY: c,
            IntegrationMode.SERIAL: c + hw,
            IntegrationMode.PARALLEL: 2 * c + hw,
        }[self]


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _zeros(n: int, use_bias: bool) -> Tensor | None:
    return Tensor(np.zeros(n), requires_grad=True) if use_bias else None


def _bias_or_zero(b: Tensor | None, n: int) -> Tensor:
    return b if b is not None else Tensor(np.zeros(n))


@dataclass
class SpatialRelationParams:
    """Query/key 1x1 embeddings (``C_e x C``) for the spatial module.

    ``resolution`` pins the ``(H, W)`` the module was built for, because the
    number of relation channels it emits is ``H * W``.
    """

    w_us: Tensor
    b_us: Tensor | None
    w_vs: Tensor
    b_vs: Tensor | None
    resolution: tuple[int, int] | None = None

    def __post_init__(self):
        if self.w_us.shape != self.w_vs.shape or self.w_us.ndim != 2:
            raise DimensionError(f"embedding weights differ: {self.w_us.shape} vs {self.w_vs.shape}")

    @classmethod
    def init(cls, channels: int, c_e: int, rng: np.random.Generator, use_bias: bool = True,
             resolution: tuple[int, int] | None = None) -> "SpatialRelationParams":
        if c_e < 1:
            raise ConfigError(f"embedding width must be >= 1, got {c_e}")
        w = [Tensor(glorot_uniform(rng, (c_e, channels), channels, c_e), requires_grad=True) for _ in range(2)]
        return cls(w[0], _zeros(c_e, use_bias), w[1], _zeros(c_e, use_bias), resolution)

    def tensors(self) -> dict[str, Tensor]:
        named = {"w_us": self.w_us, "b_us": self.b_us, "w_vs": self.w_vs, "b_vs": self.b_vs}
        return {k: v for k, v in named.items() if v is not None}


@dataclass
class ChannelRelationParams:
    """Per-channel embeddings of pooled descriptors (``C_e x C``).

    Column ``p`` embeds the scalar descriptor of channel ``p`` into ``C_e``
    dimensions, so permuting channels permutes the embedding columns with them.
    """

    w_uc: Tensor
    b_uc: Tensor | None
    w_vc: Tensor
    b_vc: Tensor | None

    def __post_init__(self):
        if self.w_uc.shape != self.w_vc.shape or self.w_uc.ndim != 2:
            raise DimensionError(f"embedding weights differ: {self.w_uc.shape} vs {self.w_vc.shape}")

    @classmethod
    def init(cls, channels: int, c_e: int, rng: np.random.Generator,
             use_bias: bool = True) -> "ChannelRelationParams":
        if c_e < 1:
            raise ConfigError(f"embedding width must be >= 1, got {c_e}")
        w = [Tensor(glorot_uniform(rng, (c_e, channels), channels, c_e), requires_grad=True) for _ in range(2)]
        return cls(w[0], _zeros(c_e, use_bias), w[1], _zeros(c_e, use_bias))

    def tensors(self) -> dict[str, Tensor]:
        named = {"w_uc": self.w_uc, "b_uc": self.b_uc, "w_vc": self.w_vc, "b_vc": self.b_vc}
        return {k: v for k, v in named.items() if v is not None}


def spatial_relation_feature(x: Tensor, p: SpatialRelationParams) -> Tensor:
    """``HW x H x W`` map whose channel ``j`` at position ``i`` is ``relu(u(x_i) . v(x_j))``.

    A leading batch axis is carried through: ``N x C x H x W`` gives ``N x HW x H x W``.
    """
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected [N x] C x H x W input, got {x.shape}")
    *lead, c, h, w = x.shape
    if p.resolution is not None and tuple(p.resolution) != (h, w):
        raise DimensionError(f"spatial relation module built for {tuple(p.resolution)}, got {h}x{w} input")
    if p.w_us.shape[1] != c:
        raise DimensionError(f"embedding expects {p.w_us.shape[1]} channels, input has {c}")
    c_e = p.w_us.shape[0]
    u = reshape(conv1x1(x, p.w_us, _bias_or_zero(p.b_us, c_e)), (*lead, c_e, h * w))
    v = reshape(conv1x1(x, p.w_vs, _bias_or_zero(p.b_vs, c_e)), (*lead, c_e, h * w))
    # rows of v^T u index the partner position j, columns the position i
    pairs = matmul(transpose2d(v), u)
    return relu(reshape(pairs, (*lead, h * w, h, w)))


def spatial_relation_augment(x: Tensor, p: SpatialRelationParams) -> Tensor:
    return concat_channels(x, spatial_relation_feature(x, p))


def _channel_embedding(d: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    c_e, c = w.shape
    e = mul(w, reshape(d, (*d.shape[:-1], 1, c)))
    return add(e, reshape(b, (c_e, 1))) if b is not None else e


def channel_relation_logits(x: Tensor, p: ChannelRelationParams) -> Tensor:
    """Raw ``C x C`` pairwise channel scores before the row softmax."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected [N x] C x H x W input, got {x.shape}")
    if p.w_uc.shape[1] != x.shape[-3]:
        raise DimensionError(f"embedding expects {p.w_uc.shape[1]} channels, input has {x.shape[-3]}")
    d = global_avg_pool(x)
    e_u = _channel_embedding(d, p.w_uc, p.b_uc)
    e_v = _channel_embedding(d, p.w_vc, p.b_vc)
    return matmul(transpose2d(e_u), e_v)


def channel_relation_map(x: Tensor, p: ChannelRelationParams) -> Tensor:
    return softmax_rows(channel_relation_logits(x, p))


def mix_channels(x: Tensor, cr: Tensor) -> Tensor:
    """``out[q] = sum_p x[p] * cr[p, q]``, via ``(X_flat^T cr)^T``."""
    *lead, c, h, w = x.shape
    if cr.shape != (*lead, c, c):
        raise DimensionError(f"relation map {cr.shape} does not fit input {x.shape}")
    flat = reshape(x, (*lead, c, h * w))
    mixed = matmul(transpose2d(flat), cr)
    return reshape(transpose2d(mixed), (*lead, c, h, w))


def channel_relation_augment(x: Tensor, p: ChannelRelationParams) -> Tensor:
    return mix_channels(x, channel_relation_map(x, p))


def apply_integration(x: Tensor, mode: IntegrationMode | str,
                      sp: SpatialRelationParams | None = None,
                      cp: ChannelRelationParams | None = None) -> Tensor:
    mode = IntegrationMode(mode)
    if mode.uses_spatial and sp is None:
        raise ConfigError(f"mode '{mode.value}' needs spatial relation params")
    if mode.uses_channel and cp is None:
        raise ConfigError(f"mode '{mode.value}' needs channel relation params")
    if mode is IntegrationMode.NONE:
        return x
    if mode is IntegrationMode.SRM_ONLY:
        return spatial_relation_augment(x, sp)
    if mode is IntegrationMode.CRM_ONLY:
        return channel_relation_augment(x, cp)
    if mode is IntegrationMode.SERIAL:
        return spatial_relation_augment(channel_relation_augment(x, cp), sp)
    return concat_channels(spatial_relation_augment(x, sp), channel_relation_augment(x, cp))
