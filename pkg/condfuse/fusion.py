"""
Feature adapters and the fusion strategies that merge per-modality pyramids.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigurationError, ShapeError, ValidationError
from .nnblocks import AttentionConfig, FeaturePyramid, Linear, Module, MultiHeadAttention
from .tensorcore import Parameter, Tensor, concat, gelu, pad2d, softmax

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 7


class Modality(str, Enum):
    RGB = "rgb"
    LIDAR = "lidar"
    RADAR = "radar"
    EVENT = "event"


MODALITIES: Tuple[Modality, ...] = tuple(Modality)
SECONDARY_MODALITIES: Tuple[Modality, ...] = MODALITIES[1:]


class FusionKind(str, Enum):
    MEAN = "mean"
    RANDOM = "random"
    LEARNED_STATIC = "learned_static"
    CAA = "caa"
    CA2 = "ca2"

    @property
    def uses_condition_token(self) -> bool:
        return self in (FusionKind.CAA, FusionKind.CA2)


class CTTarget(str, Enum):
    """Where the Condition Token joins windowed cross-attention."""

    Q = "q"
    KV = "kv"
    QKV = "qkv"
    NONE = "none"


def _channels_last(x: Tensor) -> Tuple[Tensor, Tuple[int, ...]]:
    axes = list(range(x.ndim))
    channel = x.ndim - 3
    perm = tuple(axes[:channel] + axes[channel + 1:] + [channel])
    return x.transpose(perm), tuple(np.argsort(perm))


class Adapter(Module):
    """Bottleneck MLP over channels, blended with its input by a learnable alpha = sigmoid(blend)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        if channels % 4:
            raise ShapeError("adapter channels must be divisible by 4", "adapter", ((channels,),))
        self.channels = channels
        self.fc1 = Linear(channels, channels // 4, rng)
        self.fc2 = Linear(channels // 4, channels, rng)
        self.blend = Parameter(np.array(0.0))

    @property
    def alpha(self) -> float:
        return float(self.blend.sigmoid().item())

    @property
    def mlp_parameter_count(self) -> int:
        return sum(p.size for p in (self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias))

    def forward(self, feature_map: Tensor) -> Tensor:
        """Adapt a map [.., C, H, W]; the MLP acts on each pixel's channel vector."""
        if feature_map.ndim < 3 or feature_map.shape[-3] != self.channels:
            raise ShapeError(f"expected {self.channels} channels", "adapter", (feature_map.shape,))
        x, inverse = _channels_last(feature_map)
        alpha = self.blend.sigmoid()
        out = self.fc2(gelu(self.fc1(x))) * alpha + x * (1.0 - alpha)
        return out.transpose(inverse)


class AdapterBank(Module):
    """One adapter per (modality, level)."""

    def __init__(self, level_channels: Sequence[int], rng: np.random.Generator):
        self.adapters: Dict[str, List[Adapter]] = {
            m.value: [Adapter(c, rng) for c in level_channels] for m in MODALITIES
        }

    def __len__(self) -> int:
        return sum(len(levels) for levels in self.adapters.values())

    def adapter_forward(self, feature_map: Tensor, modality: Modality, level: int) -> Tensor:
        return self.adapters[Modality(modality).value][level](feature_map)

    def forward(self, pyramid: FeaturePyramid, modality: Modality) -> FeaturePyramid:
        return FeaturePyramid([self.adapter_forward(x, modality, l) for l, x in enumerate(pyramid)])


def _check_compatible(pyramids: Mapping[Modality, FeaturePyramid]) -> None:
    shapes = {m: p.shapes for m, p in pyramids.items()}
    reference = next(iter(shapes.values()))
    if any(s != reference for s in shapes.values()):
        raise ShapeError("modality pyramids differ in shape", "fuse", [tuple(s) for s in shapes.values()])


def weighted_sum(pyramids: Mapping[Modality, FeaturePyramid], weights: Tensor) -> FeaturePyramid:
    """
    Sum pyramids weighted per modality.

    `weights` columns follow MODALITIES order restricted to the keys present. Shapes:
    [M] shared by every scene, [B, M] per scene, or [B, 4, M] per scene and level.
    """
    _check_compatible(pyramids)
    present = [m for m in MODALITIES if m in pyramids]
    levels = []
    for l in range(4):
        total = None
        for j, m in enumerate(present):
            x = pyramids[m][l]
            if weights.ndim == 1:
                w = weights[j]
            elif x.ndim == 3:
                # unbatched levels take the single weight row
                w = weights[0, j] if weights.ndim == 2 else weights[0, l, j]
            elif weights.ndim == 2:
                w = weights[:, j].reshape(-1, 1, 1, 1)
            else:
                w = weights[:, l, j].reshape(-1, 1, 1, 1)
            term = x * w
            total = term if total is None else total + term
        levels.append(total)
    return FeaturePyramid(levels)


class CAAFusion(Module):
    """Condition-aware addition: a zero-initialized FC on the Condition Token, softmaxed into modality weights."""

    def __init__(self, ct_dim: int, rng: np.random.Generator, per_level: bool = False):
        self.per_level = per_level
        self.fc = Linear(ct_dim, len(MODALITIES) * (4 if per_level else 1), rng, zero_init=True)

    def fusion_weights(self, ct: Tensor, present: Sequence[Modality] = MODALITIES) -> Tensor:
        """Weights [B, M] (or [B, 4, M] per level) over the present modalities, rows summing to one."""
        logits = self.fc(ct)
        if self.per_level:
            logits = logits.reshape(ct.shape[0], 4, len(MODALITIES))
        if len(present) != len(MODALITIES):
            logits = logits[..., [MODALITIES.index(m) for m in present]]
        return softmax(logits)

    def forward(self, adapted: Mapping[Modality, FeaturePyramid], ct: Tensor) -> Tuple[FeaturePyramid, Tensor]:
        if ct.ndim == 1:
            ct = ct.reshape(1, -1)
        present = [m for m in MODALITIES if m in adapted]
        weights = self.fusion_weights(ct, present)
        return weighted_sum(adapted, weights), weights


class StaticFusion(Module):
    """Condition-agnostic baselines: uniform, random per forward pass, or one learned weight vector."""

    def __init__(self, kind: FusionKind):
        if kind not in (FusionKind.MEAN, FusionKind.RANDOM, FusionKind.LEARNED_STATIC):
            raise ConfigurationError(f"{kind.value} is not a static fusion strategy")
        self.kind = kind
        self.logits = Parameter(np.zeros(len(MODALITIES))) if kind == FusionKind.LEARNED_STATIC else None

    def fusion_weights(self, present: Sequence[Modality], rng: Optional[np.random.Generator] = None) -> Tensor:
        if self.kind == FusionKind.MEAN:
            return Tensor(np.full(len(present), 1.0 / len(present)))
        if self.kind == FusionKind.RANDOM:
            if rng is None:
                raise ConfigurationError("random fusion needs a random generator")
            return softmax(Tensor(rng.standard_normal(len(present))))
        return softmax(self.logits[[MODALITIES.index(m) for m in present]])

    def forward(self, adapted: Mapping[Modality, FeaturePyramid],
                rng: Optional[np.random.Generator] = None) -> Tuple[FeaturePyramid, Tensor]:
        present = [m for m in MODALITIES if m in adapted]
        weights = self.fusion_weights(present, rng)
        return weighted_sum(adapted, weights), weights


# *** windowed cross-attention ***

@dataclass(frozen=True)
class WindowInfo:
    """What window_reverse needs to restore a partitioned map."""

    batch: Optional[int]
    height: int
    width: int
    window: int

    @property
    def rows(self) -> int:
        return -(-self.height // self.window)

    @property
    def cols(self) -> int:
        return -(-self.width // self.window)

    @property
    def num_windows(self) -> int:
        return self.rows * self.cols


def window_partition(feature_map: Tensor, window: int = DEFAULT_WINDOW) -> Tuple[Tensor, WindowInfo]:
    """
    Split a map [C, H, W] (or [B, C, H, W]) into non-overlapping window tokens.

    H and W are zero-padded up to multiples of `window`. Returns windows of shape
    [Nw, window², C] (batched: [B·Nw, window², C], scene-major) and the info
    window_reverse needs.
    """
    unbatched = feature_map.ndim == 3
    x = feature_map.reshape(1, *feature_map.shape) if unbatched else feature_map
    if x.ndim != 4 or min(x.shape[1:]) < 1:
        raise ShapeError("expected a map [C, H, W] or [B, C, H, W]", "window_partition", (feature_map.shape,))
    batch, channels, height, width = x.shape
    info = WindowInfo(batch=None if unbatched else batch, height=height, width=width, window=window)
    x = pad2d(x, info.rows * window - height, info.cols * window - width)
    x = x.reshape(batch, channels, info.rows, window, info.cols, window).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(batch * info.num_windows, window * window, channels), info


def window_reverse(windows: Tensor, info: WindowInfo) -> Tensor:
    """Inverse of window_partition, cropping the padding."""
    batch = info.batch or 1
    channels = windows.shape[-1]
    w = info.window
    x = windows.reshape(batch, info.rows, info.cols, w, w, channels).transpose(0, 5, 1, 3, 2, 4)
    x = x.reshape(batch, channels, info.rows * w, info.cols * w)[:, :, :info.height, :info.width]
    return x.reshape(channels, info.height, info.width) if info.batch is None else x


def ca2_window_attention(rgb_window: Tensor, ct: Optional[Tensor], secondary_window: Tensor,
                         attention: MultiHeadAttention, target: CTTarget = CTTarget.Q) -> Tensor:
    """
    Cross-attention from RGB window tokens to a secondary modality's window tokens, steered by the CT.

    Args:
        rgb_window: RGB tokens [T, D] or [N, T, D]
        ct: Condition Token already projected to D, [D] or one row per window [N, D]
        secondary_window: Secondary-modality tokens shaped like rgb_window
        attention: The attention block (D = model_dim)
        target: Q appends the CT to the queries, KV to the keys/values, QKV to both, NONE ignores it

    Returns:
        Attended tokens shaped like rgb_window; the CT query row is never part of the output
    """
    if rgb_window.shape != secondary_window.shape:
        raise ShapeError("rgb and secondary windows differ", "ca2_window_attention", (rgb_window.shape, secondary_window.shape))
    target = CTTarget(target)
    if target == CTTarget.NONE:
        return attention(rgb_window, secondary_window)
    if ct is None:
        raise ValidationError(f"ct_target {target.value} needs a Condition Token", field="ct")
    dim = rgb_window.shape[-1]
    if ct.shape[-1] != dim:
        raise ShapeError("condition token dim differs from window token dim", "ca2_window_attention", (rgb_window.shape, ct.shape))
    if rgb_window.ndim == 2:
        ct_row = ct.reshape(1, dim)
    else:
        ct_row = ct.reshape(-1, 1, dim)
        if ct_row.shape[0] != rgb_window.shape[0]:
            raise ShapeError("one condition token per window expected", "ca2_window_attention", (rgb_window.shape, ct.shape))
    axis = rgb_window.ndim - 2
    tokens = rgb_window.shape[-2]
    query = concat([rgb_window, ct_row], axis=axis) if target in (CTTarget.Q, CTTarget.QKV) else rgb_window
    key_value = concat([secondary_window, ct_row], axis=axis) if target in (CTTarget.KV, CTTarget.QKV) else secondary_window
    out = attention(query, key_value)
    if query is rgb_window:
        return out
    return out[:tokens] if out.ndim == 2 else out[:, :tokens]


class MWCALevel(Module):
    """CA² fusion at one pyramid level: a CT projection shared by the secondaries, per-secondary attention and output projection."""

    def __init__(self, channels: int, ct_dim: int, heads: int, rng: np.random.Generator):
        self.ct_proj = Linear(ct_dim, channels, rng)
        cfg = AttentionConfig(model_dim=channels, num_heads=heads)
        self.attention = {m.value: MultiHeadAttention(cfg, rng) for m in SECONDARY_MODALITIES}
        self.project_back = {m.value: Linear(channels, channels, rng, zero_init=True) for m in SECONDARY_MODALITIES}


class MWCAFusion(Module):
    """Multi-window cross-attention fusion of every secondary modality into the RGB pyramid."""

    def __init__(self, level_channels: Sequence[int], ct_dim: int, rng: np.random.Generator,
                 heads: int = 1, window: int = DEFAULT_WINDOW, target: CTTarget = CTTarget.Q):
        self.window = window
        self.target = CTTarget(target)
        self.levels = [MWCALevel(c, ct_dim, heads, rng) for c in level_channels]

    def fuse_level(self, level: int, rgb: Tensor, secondary: Mapping[Modality, Tensor],
                   ct: Optional[Tensor], target: CTTarget) -> Tensor:
        block = self.levels[level]
        rgb_windows, info = window_partition(rgb, self.window)
        ct_rows = None
        if target != CTTarget.NONE:
            batch = info.batch or 1
            if ct.ndim == 1:
                ct = ct.reshape(1, -1)
            projected = block.ct_proj(ct)
            owners = np.repeat(np.arange(batch), info.num_windows)
            if projected.shape[0] != batch:
                owners = np.zeros_like(owners)
            ct_rows = projected[owners]
        delta = None
        for m in SECONDARY_MODALITIES:
            if m not in secondary:
                continue
            if secondary[m].shape != rgb.shape:
                raise ShapeError(f"{m.value} level {level} differs from rgb", "mwca_ca2_fuse", (rgb.shape, secondary[m].shape))
            sec_windows, _ = window_partition(secondary[m], self.window)
            attended = ca2_window_attention(rgb_windows, ct_rows, sec_windows, block.attention[m.value], target)
            term = block.project_back[m.value](attended)
            delta = term if delta is None else delta + term
        if delta is None:
            return rgb
        return rgb + window_reverse(delta, info)

    def forward(self, rgb: FeaturePyramid, secondary: Mapping[Modality, FeaturePyramid],
                ct: Optional[Tensor] = None, target: Optional[CTTarget] = None) -> FeaturePyramid:
        """Fuse secondary pyramids into the RGB pyramid; output shapes equal the RGB shapes."""
        target = self.target if target is None else CTTarget(target)
        if target != CTTarget.NONE and ct is None:
            raise ValidationError(f"ct_target {target.value} needs a Condition Token", field="ct")
        if ct is not None and ct.ndim == 1 and rgb[0].ndim == 4:
            ct = ct.reshape(1, -1)
        return FeaturePyramid([
            self.fuse_level(l, rgb[l], {m: p[l] for m, p in secondary.items()}, ct, target)
            for l in range(4)
        ])


def modality_dropout(images: np.ndarray, p: float, rng: np.random.Generator,
                     present: Sequence[Modality] = MODALITIES) -> Tuple[np.ndarray, np.ndarray]:
    """
    Zero whole modality images independently with probability p.

    Args:
        images: [4, 3, H, W] for one scene or [B, 4, 3, H, W]
        p: Drop rate in [0, 1]
        rng: Random generator
        present: Modalities in use; RGB is restored when all of them are dropped

    Returns:
        (images with dropped modalities zeroed, boolean keep mask [B, 4] or [4])
    """
    if not 0.0 <= p <= 1.0:
        raise ValidationError("drop rate must be within [0, 1]", field="p", value=p)
    single = images.ndim == 4
    batch = images[None] if single else images
    keep = np.ones(batch.shape[:2], dtype=bool)
    columns = [MODALITIES.index(Modality(m)) for m in present]
    drops = rng.random((batch.shape[0], len(columns))) < p
    for row, dropped in enumerate(drops):
        if dropped.all():
            dropped[columns.index(0) if 0 in columns else 0] = False
        keep[row, columns] = ~dropped
    out = batch * keep[:, :, None, None, None]
    return (out[0], keep[0]) if single else (out, keep)
