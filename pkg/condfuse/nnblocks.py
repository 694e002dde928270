"""
Reusable neural blocks and the shared four-level convolutional backbone.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from .exceptions import ShapeError, ValidationError
from .tensorcore import Parameter, Tensor, concat, conv2d, gelu, layer_norm, matmul, softmax

logger = logging.getLogger(__name__)

LEVEL_STRIDES = (4, 8, 16, 32)


def _collect(value, path: str) -> List[Tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        value.name = path
        return [(path, value)]
    if isinstance(value, Module):
        return value.named_parameters(prefix=f"{path}.")
    if isinstance(value, (list, tuple)):
        found = []
        for i, item in enumerate(value):
            found.extend(_collect(item, f"{path}.{i}"))
        return found
    if isinstance(value, dict):
        found = []
        for key, item in value.items():
            found.extend(_collect(item, f"{path}.{key}"))
        return found
    return []


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        found: List[Tuple[str, Parameter]] = []
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            found.extend(_collect(value, f"{prefix}{key}"))
        return found

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = OrderedDict(self.named_parameters())
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if missing or unexpected:
            raise ValidationError(
                f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}",
                field="state_dict",
            )
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name} has the wrong shape", "load_state_dict", (p.shape, value.shape))
            p.data[...] = value


def _normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    """y = x @ W + b over the last axis."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        init = np.zeros((in_dim, out_dim)) if zero_init else _normal(rng, (in_dim, out_dim), 1.0 / math.sqrt(in_dim))
        self.weight = Parameter(init)
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected last dim {self.in_dim}", "linear", (x.shape, self.weight.shape))
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x) * self.weight + self.bias


class MLP(Module):
    """Two linear layers with GELU in between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: Optional[int] = None, zero_last: bool = False):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng, zero_init=zero_last)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class AttentionConfig(BaseModel):
    """Width and head count of a multi-head attention block."""

    model_dim: int = Field(gt=0, description="Token dimension D")
    num_heads: int = Field(default=1, gt=0, description="Number of attention heads")

    @model_validator(mode="after")
    def _heads_divide_dim(self) -> "AttentionConfig":
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head Q/K/V projections and an output projection."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        dim = cfg.model_dim
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def forward(self, query: Tensor, key_value: Tensor, return_weights: bool = False):
        """
        Attend from query tokens [.., Nq, D] to key/value tokens [.., Nk, D].

        Args:
            query: Query tokens, unbatched [Nq, D] or batched [B, Nq, D]
            key_value: Key/value tokens with the same batching as the query
            return_weights: Also return the attention map [.., heads, Nq, Nk]

        Returns:
            Attended tokens [.., Nq, D] (and the attention map when requested)

        Raises:
            ShapeError: On dimension mismatch or empty token sets
        """
        dim, heads = self.cfg.model_dim, self.cfg.num_heads
        if query.ndim != key_value.ndim or query.ndim not in (2, 3):
            raise ShapeError("query and key/value must both be [N, D] or [B, N, D]", "attention", (query.shape, key_value.shape))
        if query.shape[-1] != dim or key_value.shape[-1] != dim:
            raise ShapeError(f"token dim must equal model_dim {dim}", "attention", (query.shape, key_value.shape))
        if query.shape[-2] == 0 or key_value.shape[-2] == 0:
            raise ShapeError("attention needs at least one query and one key", "attention", (query.shape, key_value.shape))
        unbatched = query.ndim == 2
        if unbatched:
            query = query.reshape(1, *query.shape)
            key_value = key_value.reshape(1, *key_value.shape)
        if query.shape[0] != key_value.shape[0]:
            raise ShapeError("batch sizes differ", "attention", (query.shape, key_value.shape))

        batch, n_q, n_k = query.shape[0], query.shape[1], key_value.shape[1]
        head_dim = self.cfg.head_dim
        q = self.q_proj(query).reshape(batch, n_q, heads, head_dim).transpose(0, 2, 1, 3)
        k = self.k_proj(key_value).reshape(batch, n_k, heads, head_dim).transpose(0, 2, 3, 1)
        v = self.v_proj(key_value).reshape(batch, n_k, heads, head_dim).transpose(0, 2, 1, 3)
        weights = softmax(matmul(q, k) * (1.0 / math.sqrt(head_dim)))
        context = matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, n_q, dim)
        out = self.out_proj(context)
        if unbatched:
            out = out.reshape(n_q, dim)
            weights = weights.reshape(heads, n_q, n_k)
        return (out, weights) if return_weights else out


class TransformerEncoderLayer(Module):
    """Pre-norm self-attention + MLP, both residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(AttentionConfig(model_dim=dim, num_heads=heads), rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, 4 * dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


class TransformerDecoderLayer(Module):
    """Pre-norm self-attention over queries, cross-attention to memory, MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        cfg = AttentionConfig(model_dim=dim, num_heads=heads)
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.norm3 = LayerNorm(dim)
        self.mlp = MLP(dim, 4 * dim, rng)

    def forward(self, queries: Tensor, memory: Tensor) -> Tensor:
        h = self.norm1(queries)
        queries = queries + self.self_attn(h, h)
        queries = queries + self.cross_attn(self.norm2(queries), memory)
        return queries + self.mlp(self.norm3(queries))


class TransformerEncoderDecoder(Module):
    """Encoder over a token sequence and a decoder over learnable query seeds."""

    def __init__(self, dim: int, heads: int, num_encoder: int, num_decoder: int, num_queries: int, rng: np.random.Generator):
        if num_queries < 1:
            raise ShapeError("need at least one query seed", "transformer_encode_decode", ((num_queries, dim),))
        self.encoder = [TransformerEncoderLayer(dim, heads, rng) for _ in range(num_encoder)]
        self.encoder_norm = LayerNorm(dim)
        self.decoder = [TransformerDecoderLayer(dim, heads, rng) for _ in range(num_decoder)]
        self.decoder_norm = LayerNorm(dim)
        self.query_seeds = Parameter(_normal(rng, (num_queries, dim), 1.0))

    def forward(self, sequence: Tensor, query_seeds: Optional[Tensor] = None) -> Tensor:
        """Encode `sequence` [B, N, D] and decode the query seeds [M, D] against it, returning [B, M, D]."""
        seeds = self.query_seeds if query_seeds is None else query_seeds
        unbatched = sequence.ndim == 2
        if unbatched:
            sequence = sequence.reshape(1, *sequence.shape)
        if sequence.shape[1] == 0 or seeds.shape[0] == 0:
            raise ShapeError("sequence and query seeds must be non-empty", "transformer_encode_decode", (sequence.shape, seeds.shape))
        memory = sequence
        for layer in self.encoder:
            memory = layer(memory)
        memory = self.encoder_norm(memory)
        batch = sequence.shape[0]
        queries = seeds.reshape(1, *seeds.shape)
        if batch > 1:
            queries = concat([queries] * batch, axis=0)
        for layer in self.decoder:
            queries = layer(queries, memory)
        queries = self.decoder_norm(queries)
        return queries.reshape(*seeds.shape) if unbatched else queries


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, gain: float = 1.0):
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(_normal(rng, (out_channels, in_channels, kernel, kernel), gain * math.sqrt(2.0 / fan_in)))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ResidualBlock(Module):
    """x + conv(GELU(conv(x))) with 3x3 kernels."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1, gain=0.5)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(gelu(self.conv1(x)))


class BackboneConfig(BaseModel):
    """Channel widths and depth of the four-level backbone."""

    level_channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 128], description="Channels per level")
    blocks_per_level: int = Field(default=1, ge=0, description="Residual blocks after each downsampling")

    @field_validator("level_channels")
    @classmethod
    def _strictly_increasing(cls, value: List[int]) -> List[int]:
        if len(value) != 4:
            raise ValueError("level_channels needs exactly 4 entries")
        if any(c <= 0 for c in value) or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"level_channels must be positive and strictly increasing, got {value}")
        if any(c % 4 for c in value):
            raise ValueError(f"level_channels must be divisible by 4 for the adapters, got {value}")
        return value

    @property
    def level_strides(self) -> Tuple[int, ...]:
        return LEVEL_STRIDES


@dataclass
class FeaturePyramid:
    """Four feature maps, level l of shape [.., C_l, H / stride_l, W / stride_l]."""

    levels: List[Tensor]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ShapeError(f"a pyramid has exactly 4 levels, got {len(self.levels)}", "pyramid", [t.shape for t in self.levels])

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [t.shape for t in self.levels]

    def is_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.levels)


class BackboneLevel(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, num_blocks: int, rng: np.random.Generator):
        self.downsample = Conv2d(in_channels, out_channels, stride, rng, stride=stride)
        self.blocks = [ResidualBlock(out_channels, rng) for _ in range(num_blocks)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.downsample(x)
        for block in self.blocks:
            x = block(x)
        return x


class Backbone(Module):
    """Strided-conv pyramid: a stride-4 stem, then stride-2 downsampling, each followed by residual blocks."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        channels = [3] + list(cfg.level_channels)
        self.levels = [
            BackboneLevel(channels[i], channels[i + 1], 4 if i == 0 else 2, cfg.blocks_per_level, rng)
            for i in range(4)
        ]

    def forward(self, image: Tensor) -> FeaturePyramid:
        """Map an image [3, H, W] (or a batch [B, 3, H, W]) to its feature pyramid."""
        unbatched = image.ndim == 3
        if unbatched:
            image = image.reshape(1, *image.shape)
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError("expected an image [3, H, W] or batch [B, 3, H, W]", "backbone", (image.shape,))
        height, width = image.shape[-2:]
        if height % 32 or width % 32 or height == 0 or width == 0:
            raise ShapeError("image height and width must be positive multiples of 32", "backbone", (image.shape,))
        levels = []
        x = image
        for level in self.levels:
            x = level(x)
            levels.append(x)
        if unbatched:
            levels = [t.reshape(*t.shape[1:]) for t in levels]
        return FeaturePyramid(levels)
