"""
Per-pixel semantic decoder and the training objective.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np

from .condition import DEFAULT_TEMPERATURE, condition_contrastive_loss
from .exceptions import ShapeError, ValidationError
from .nnblocks import Conv2d, FeaturePyramid, Module
from .tensorcore import Tensor, concat, cross_entropy, gelu, upsample_nearest2d

logger = logging.getLogger(__name__)


class SegmentationHead(Module):
    """Upsample every level to stride 4, concatenate, conv3x3 + GELU, conv1x1 to classes, upsample x4."""

    def __init__(self, level_channels: Sequence[int], num_classes: int, hidden: int, rng: np.random.Generator):
        self.level_channels = list(level_channels)
        self.num_classes = num_classes
        self.conv1 = Conv2d(sum(level_channels), hidden, 3, rng, padding=1)
        self.conv2 = Conv2d(hidden, num_classes, 1, rng)

    def forward(self, fused: FeaturePyramid) -> Tensor:
        """Logits [B, K, H, W] at input resolution ([K, H, W] for an unbatched pyramid)."""
        levels = list(fused)
        unbatched = levels[0].ndim == 3
        if unbatched:
            levels = [x.reshape(1, *x.shape) for x in levels]
        height, width = levels[0].shape[-2:]
        upsampled = []
        for l, (x, channels) in enumerate(zip(levels, self.level_channels)):
            factor = 2 ** l
            if x.ndim != 4 or x.shape[1] != channels or x.shape[2] * factor != height or x.shape[3] * factor != width:
                raise ShapeError(f"level {l} does not match the pyramid layout", "decode", tuple(t.shape for t in levels))
            upsampled.append(upsample_nearest2d(x, factor))
        hidden = gelu(self.conv1(concat(upsampled, axis=1)))
        logits = upsample_nearest2d(self.conv2(hidden), 4)
        return logits.reshape(*logits.shape[1:]) if unbatched else logits


def predict(logits: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Class map from logits [.., K, H, W]; ties go to the lowest class id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=-3)


def segmentation_loss(logits: Tensor, gt_map: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of logits [B, K, H, W] against labels [B, H, W]."""
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
    gt_map = np.asarray(gt_map).reshape(-1, *logits.shape[2:])
    if gt_map.shape[0] != logits.shape[0]:
        raise ShapeError("labels and logits disagree", "segmentation_loss", (logits.shape, gt_map.shape))
    num_classes = logits.shape[1]
    return cross_entropy(logits.transpose(0, 2, 3, 1).reshape(-1, num_classes), gt_map.reshape(-1))


def total_loss(logits: Tensor, gt_map: np.ndarray, ct_batch: Optional[Tensor] = None,
               text_batch: Optional[Tensor] = None, lambda_cond: float = 0.5,
               temperature: Union[Tensor, float] = DEFAULT_TEMPERATURE,
               condition_term: Optional[Tensor] = None) -> Tensor:
    """
    Segmentation cross-entropy plus lambda_cond times the condition loss.

    The condition loss is `condition_term` when given, otherwise the contrastive
    loss between `ct_batch` and `text_batch`; with lambda_cond == 0 it is skipped.

    Raises:
        ValidationError: If lambda_cond > 0 and no condition loss can be formed
    """
    loss = segmentation_loss(logits, gt_map)
    if not lambda_cond:
        return loss
    if condition_term is None:
        if ct_batch is None or text_batch is None:
            raise ValidationError("lambda_cond > 0 needs a condition term or both CT and text batches",
                                  field="lambda_cond", value=lambda_cond)
        condition_term = condition_contrastive_loss(ct_batch, text_batch, temperature)
    return loss + condition_term * lambda_cond
