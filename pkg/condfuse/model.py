"""
The full condition-aware fusion network.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .condition import (ConditionAttributes, ConditionTokenGenerator, LearnableTemperature, PromptDetail,
                        TextEncoder, build_condition_prompt, condition_objective, load_vocabulary)
from .config import ModelConfig
from .exceptions import ShapeError, ValidationError
from .fusion import (MODALITIES, SECONDARY_MODALITIES, AdapterBank, CAAFusion, FusionKind, Modality,
                     MWCAFusion, StaticFusion)
from .nnblocks import Backbone, FeaturePyramid, Module
from .seghead import SegmentationHead, total_loss
from .tensorcore import Tensor, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    logits: Tensor
    ct: Optional[Tensor]
    fusion_weights: Optional[Tensor]
    rgb_pyramid: FeaturePyramid
    modalities: List[Modality]


def resolve_modalities(modalities: Optional[Sequence[Union[Modality, str]]]) -> List[Modality]:
    if modalities is None:
        return list(MODALITIES)
    resolved = [Modality(m) for m in modalities]
    if Modality.RGB not in resolved:
        raise ValidationError("the modality mask must include rgb", field="modalities", value=modalities)
    return [m for m in MODALITIES if m in resolved]


class ConditionAwareFuser(Module):
    """Backbone, adapters, Condition Token branch, fusion block and segmentation head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        channels = cfg.backbone.level_channels
        if cfg.shared_backbone:
            self.backbone = Backbone(cfg.backbone, rng)
        else:
            self.backbones = {m.value: Backbone(cfg.backbone, rng) for m in MODALITIES}
        self.adapters = AdapterBank(channels, rng) if cfg.use_adapters else None

        kind = cfg.fusion_kind
        if kind.uses_condition_token:
            self.ct_generator = ConditionTokenGenerator(
                channels[3], cfg.ct_dim, cfg.grid_tokens, cfg.transformer_heads,
                cfg.ct_encoder_layers, cfg.ct_decoder_layers, rng,
            )
            self.text_encoder = TextEncoder(
                len(load_vocabulary()), cfg.ct_dim, cfg.transformer_heads, cfg.text_layers,
                cfg.context_tokens, cfg.max_prompt_tokens, rng,
            )
            self.temperature = LearnableTemperature()
        if kind == FusionKind.CAA:
            self.fusion = CAAFusion(cfg.ct_dim, rng, per_level=cfg.caa_per_level)
        elif kind == FusionKind.CA2:
            self.fusion = MWCAFusion(channels, cfg.ct_dim, rng, heads=cfg.ca2_heads, window=cfg.window, target=cfg.ct_target)
        else:
            self.fusion = StaticFusion(kind)
        self.head = SegmentationHead(channels, cfg.num_classes, cfg.decoder_channels, rng)
        self._rng = np.random.default_rng(0)
        logger.debug(f"Built {kind.value} model with {self.num_parameters()} parameters")

    @property
    def uses_condition_token(self) -> bool:
        return self.cfg.fusion_kind.uses_condition_token

    def backbone_modules(self) -> List[Backbone]:
        return [self.backbone] if self.cfg.shared_backbone else list(self.backbones.values())

    def extract(self, images: np.ndarray, modalities: Sequence[Modality]) -> Dict[Modality, FeaturePyramid]:
        """Pre-adapter pyramids; the shared backbone runs once over all modalities stacked on the batch axis."""
        batch = images.shape[0]
        columns = [MODALITIES.index(m) for m in modalities]
        if self.cfg.shared_backbone:
            stacked = images[:, columns].transpose(1, 0, 2, 3, 4).reshape(-1, *images.shape[2:])
            pyramid = self.backbone(Tensor(stacked))
            return {
                m: FeaturePyramid([level[j * batch:(j + 1) * batch] for level in pyramid])
                for j, m in enumerate(modalities)
            }
        return {m: self.backbones[m.value](Tensor(images[:, c])) for m, c in zip(modalities, columns)}

    def forward(self, images: np.ndarray, modalities: Optional[Sequence[Modality]] = None,
                rng: Optional[np.random.Generator] = None) -> ModelOutput:
        """
        Segment a batch of scenes.

        Args:
            images: Normalized observations [B, 4, 3, H, W] (or one scene [4, 3, H, W]) in MODALITIES order
            modalities: Modalities to use; must include rgb. Others are ignored entirely.
            rng: Generator for the random-weights baseline

        Returns:
            ModelOutput with logits [B, K, H, W]
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 4:
            images = images[None]
        if images.ndim != 5 or images.shape[1:3] != (len(MODALITIES), 3):
            raise ShapeError("expected images [B, 4, 3, H, W]", "forward", (images.shape,))
        modalities = resolve_modalities(modalities)

        pyramids = self.extract(images, modalities)
        ct = self.ct_generator(pyramids[Modality.RGB]) if self.uses_condition_token else None
        if self.adapters is not None:
            adapted = {m: self.adapters(p, m) for m, p in pyramids.items()}
        else:
            adapted = pyramids

        weights = None
        kind = self.cfg.fusion_kind
        if kind == FusionKind.CAA:
            fused, weights = self.fusion(adapted, ct)
        elif kind == FusionKind.CA2:
            secondary = {m: adapted[m] for m in SECONDARY_MODALITIES if m in adapted}
            fused = self.fusion(adapted[Modality.RGB], secondary, ct)
        else:
            fused, weights = self.fusion(adapted, rng or self._rng)
        return ModelOutput(
            logits=self.head(fused),
            ct=ct,
            fusion_weights=weights,
            rgb_pyramid=pyramids[Modality.RGB],
            modalities=modalities,
        )

    def condition_loss(self, ct: Tensor, attrs: Sequence[ConditionAttributes],
                       detail: PromptDetail = PromptDetail.FULL, attribute_weight: float = 0.25) -> Tensor:
        prompts = [build_condition_prompt(a, detail) for a in attrs]
        return condition_objective(ct, prompts, self.text_encoder, self.temperature(), attribute_weight)

    def loss(self, output: ModelOutput, labels: np.ndarray, attrs: Sequence[ConditionAttributes],
             lambda_cond: float = 0.5, detail: PromptDetail = PromptDetail.FULL,
             attribute_weight: float = 0.25) -> Tensor:
        """Segmentation loss plus the weighted condition loss when the model has a Condition Token."""
        condition_term = None
        if lambda_cond and output.ct is not None:
            condition_term = self.condition_loss(output.ct, attrs, detail, attribute_weight)
        return total_loss(output.logits, labels, lambda_cond=lambda_cond if condition_term is not None else 0.0,
                          condition_term=condition_term)

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path: Union[str, Path]) -> None:
        self.load_state_dict(load_checkpoint(path))


def reference_config(cfg: ModelConfig) -> ModelConfig:
    """One backbone per modality and no adapters, otherwise identical."""
    return cfg.model_copy(update={"shared_backbone": False, "use_adapters": False})
