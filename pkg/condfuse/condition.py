"""
Environmental conditions: attribute schema, prompt rendering, tokenizer,
text encoder, Condition Token generator and the contrastive condition loss.
"""

import itertools
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .exceptions import NumericalError, ShapeError, ValidationError
from .nnblocks import (FeaturePyramid, LayerNorm, Linear, Module, TransformerEncoderDecoder,
                       TransformerEncoderLayer)
from .tensorcore import Parameter, Tensor, concat, cross_entropy, matmul

logger = logging.getLogger(__name__)

VOCAB_PATH = Path(__file__).parent / "vocab.txt"
OOV_TOKEN = "<oov>"
PUNCTUATION = (",", ".")
DEFAULT_TEMPERATURE = 0.07

_TOKEN_RE = re.compile(r"[a-z]+|[^\sa-z]")


class Weather(str, Enum):
    CLEAR = "clear"
    FOG = "fog"
    RAIN = "rain"
    SNOW = "snow"


class TimeOfDay(str, Enum):
    DAY = "day"
    NIGHT = "night"


class PrecipitationType(str, Enum):
    RAIN = "rain"
    SNOW = "snow"


class PrecipitationLevel(str, Enum):
    LIGHT = "light"
    HEAVY = "heavy"


class GroundCondition(str, Enum):
    DRY = "dry"
    WET = "wet"
    SNOWY = "snowy"


class SkyCondition(str, Enum):
    SUNNY = "sunny"
    OVERCAST = "overcast"
    DARK = "dark"


class PromptDetail(str, Enum):
    """How much of the condition a prompt describes."""

    WEATHER = "weather"
    FULL = "full"


WEATHER_ADJECTIVES = {
    Weather.CLEAR: "clear",
    Weather.FOG: "foggy",
    Weather.RAIN: "rainy",
    Weather.SNOW: "snowy",
}

CONDITION_CELLS: Tuple[str, ...] = tuple(f"{w.value}-{t.value}" for w in Weather for t in TimeOfDay)


class ConditionAttributes(BaseModel):
    """Attributes describing the environment of one scene."""

    model_config = ConfigDict(frozen=True)

    weather: Weather
    time_of_day: TimeOfDay
    precipitation_type: Optional[PrecipitationType] = None
    precipitation_level: Optional[PrecipitationLevel] = None
    ground_condition: GroundCondition = GroundCondition.DRY
    sky_condition: Optional[SkyCondition] = None

    @model_validator(mode="after")
    def _consistent(self) -> "ConditionAttributes":
        self.check()
        return self

    def check(self) -> None:
        """Raise ValidationError when the attributes contradict each other."""
        if (self.precipitation_type is None) != (self.precipitation_level is None):
            raise ValidationError(
                "precipitation type and level must both be present or both absent",
                field="precipitation",
                value=(self.precipitation_type, self.precipitation_level),
            )
        if self.weather in (Weather.RAIN, Weather.SNOW):
            expected = PrecipitationType(self.weather.value)
            if self.precipitation_type != expected:
                raise ValidationError(
                    f"{self.weather.value} weather requires {expected.value} precipitation",
                    field="precipitation_type",
                    value=self.precipitation_type,
                )

    @property
    def cell(self) -> str:
        return f"{self.weather.value}-{self.time_of_day.value}"

    @property
    def cell_index(self) -> int:
        return CONDITION_CELLS.index(self.cell)


@dataclass(frozen=True)
class ConditionPrompt:
    text: str
    attribute_tokens: Tuple[str, ...]


def _article(word: str) -> str:
    return "an" if word[:1] in "aeiou" else "a"


def build_condition_prompt(attrs: ConditionAttributes, detail: PromptDetail = PromptDetail.FULL) -> ConditionPrompt:
    """
    Render the condition prompt for a set of attributes.

    Args:
        attrs: Scene condition attributes
        detail: FULL renders the driving-scene template, WEATHER only the weather adjective

    Returns:
        Prompt text plus the raw attribute strings that filled the template

    Raises:
        ValidationError: If the attributes violate their invariants
    """
    attrs.check()
    adjective = WEATHER_ADJECTIVES[attrs.weather]
    if detail == PromptDetail.WEATHER:
        return ConditionPrompt(text=adjective, attribute_tokens=(adjective,))

    time = attrs.time_of_day.value
    if attrs.precipitation_type is None:
        precipitation = "no precipitation"
    else:
        precipitation = f"{attrs.precipitation_level.value} {attrs.precipitation_type.value}"
    ground = attrs.ground_condition.value
    if attrs.sky_condition is not None:
        sky = attrs.sky_condition.value
    else:
        sky = SkyCondition.DARK.value if attrs.time_of_day == TimeOfDay.NIGHT else SkyCondition.OVERCAST.value

    text = (
        f"{_article(adjective).capitalize()} {adjective} driving scene at {time}time with {precipitation}, "
        f"{_article(ground)} {ground} ground and {_article(sky)} {sky} sky."
    )
    return ConditionPrompt(text=text, attribute_tokens=(adjective, time, precipitation, ground, sky))


def iter_condition_attributes() -> Iterator[ConditionAttributes]:
    """Every valid attribute combination, in a fixed order."""
    precipitations = [(None, None)] + list(itertools.product(PrecipitationType, PrecipitationLevel))
    skies = [None] + list(SkyCondition)
    for weather, time, (ptype, plevel), ground, sky in itertools.product(
        Weather, TimeOfDay, precipitations, GroundCondition, skies
    ):
        if weather in (Weather.RAIN, Weather.SNOW) and (ptype is None or ptype.value != weather.value):
            continue
        yield ConditionAttributes(
            weather=weather,
            time_of_day=time,
            precipitation_type=ptype,
            precipitation_level=plevel,
            ground_condition=ground,
            sky_condition=sky,
        )


# *** tokenizer ***

def _split(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


def build_vocabulary() -> List[str]:
    """The closed lexicon: OOV, punctuation, then every word the prompt builder can emit, sorted."""
    words = set()
    for attrs in iter_condition_attributes():
        for detail in PromptDetail:
            prompt = build_condition_prompt(attrs, detail)
            for piece in (prompt.text,) + prompt.attribute_tokens:
                words.update(token for token in _split(piece) if token not in PUNCTUATION)
    return [OOV_TOKEN, *PUNCTUATION, *sorted(words)]


@lru_cache(maxsize=1)
def load_vocabulary() -> Dict[str, int]:
    """Read the shipped vocabulary file; token id is the zero-based line number."""
    tokens = VOCAB_PATH.read_text(encoding="utf-8").splitlines()
    return {token: i for i, token in enumerate(tokens)}


def tokenize(text: str) -> List[int]:
    vocab = load_vocabulary()
    oov = vocab[OOV_TOKEN]
    return [vocab.get(token, oov) for token in _split(text)]


def detokenize(ids: Sequence[int]) -> str:
    vocab = load_vocabulary()
    inverse = {i: token for token, i in vocab.items()}
    text = ""
    for i in ids:
        token = inverse.get(int(i), OOV_TOKEN)
        if token in PUNCTUATION or not text:
            text += token
        else:
            text += f" {token}"
    return text


def normalize_text(text: str) -> str:
    """Lowercase and canonical spacing, for comparing rendered and reconstructed prompts."""
    return " ".join(_split(text)).replace(" ,", ",").replace(" .", ".")


# *** text encoder ***

@dataclass
class TextQueries:
    """Encoded prompt tokens followed by the context tokens, plus their mean."""

    tokens: Tensor
    pooled: Tensor


class TextEncoder(Module):
    """Token + position embeddings, a stack of encoder layers, then appended context tokens."""

    def __init__(self, vocab_size: int, dim: int, heads: int, num_layers: int, context_tokens: int,
                 max_tokens: int, rng: np.random.Generator):
        self.dim = dim
        self.max_tokens = max_tokens
        self.token_embedding = Parameter(rng.normal(0.0, 1.0, size=(vocab_size, dim)))
        self.position_embedding = Parameter(rng.normal(0.0, 0.1, size=(max_tokens, dim)))
        self.layers = [TransformerEncoderLayer(dim, heads, rng) for _ in range(num_layers)]
        self.norm = LayerNorm(dim)
        self.context = Parameter(rng.normal(0.0, 1.0, size=(context_tokens, dim)))

    def forward(self, token_ids: np.ndarray) -> TextQueries:
        """Encode equal-length token id rows [B, T] into TextQueries with tokens [B, T + ctx, D]."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.ndim == 1:
            token_ids = token_ids[None, :]
        batch, length = token_ids.shape
        if length < 1 or length > self.max_tokens:
            raise ValidationError(f"prompt length must be in [1, {self.max_tokens}]", field="token_ids", value=length)
        x = self.token_embedding[token_ids] + self.position_embedding[:length]
        for layer in self.layers:
            x = layer(x)
        x = self.norm(x)
        context = self.context.reshape(1, *self.context.shape)
        tokens = concat([x, concat([context] * batch, axis=0) if batch > 1 else context], axis=1)
        return TextQueries(tokens=tokens, pooled=tokens.mean(axis=1))

    def encode_text(self, prompt: Union[ConditionPrompt, str]) -> TextQueries:
        text = prompt.text if isinstance(prompt, ConditionPrompt) else prompt
        out = self.forward(np.array(tokenize(text)))
        return TextQueries(tokens=out.tokens.reshape(*out.tokens.shape[1:]), pooled=out.pooled.reshape(self.dim))

    def encode_texts(self, texts: Sequence[str]) -> Tensor:
        """Pooled embeddings [B, D] for texts of any lengths, batching texts of equal length together."""
        ids = [tokenize(text) for text in texts]
        groups: Dict[int, List[int]] = {}
        for i, row in enumerate(ids):
            groups.setdefault(len(row), []).append(i)
        rows: List[Optional[Tensor]] = [None] * len(texts)
        for indices in groups.values():
            pooled = self.forward(np.array([ids[i] for i in indices])).pooled
            for k, i in enumerate(indices):
                rows[i] = pooled[k:k + 1]
        return concat(rows, axis=0)


# *** condition token ***

class ConditionTokenGenerator(Module):
    """Projects the top pyramid level to D_ct tokens and decodes one learnable query into the Condition Token."""

    def __init__(self, in_channels: int, ct_dim: int, grid_tokens: int, heads: int,
                 num_encoder: int, num_decoder: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.proj = Linear(in_channels, ct_dim, rng)
        self.position_embedding = Parameter(rng.normal(0.0, 0.1, size=(grid_tokens, ct_dim)))
        self.transformer = TransformerEncoderDecoder(ct_dim, heads, num_encoder, num_decoder, 1, rng)

    def forward(self, rgb_pyramid: Union[FeaturePyramid, Tensor]) -> Tensor:
        """Condition Tokens [B, D_ct] (or [D_ct] for an unbatched pyramid)."""
        top = rgb_pyramid[3] if isinstance(rgb_pyramid, FeaturePyramid) else rgb_pyramid
        unbatched = top.ndim == 3
        if unbatched:
            top = top.reshape(1, *top.shape)
        grid = self.position_embedding.shape[0]
        if top.ndim != 4 or top.shape[1] != self.in_channels or top.shape[2] * top.shape[3] != grid:
            raise ShapeError(
                f"expected top level [B, {self.in_channels}, H4, W4] with {grid} positions",
                "generate_condition_token",
                (top.shape,),
            )
        batch = top.shape[0]
        tokens = top.reshape(batch, self.in_channels, grid).transpose(0, 2, 1)
        tokens = self.proj(tokens) + self.position_embedding
        ct = self.transformer(tokens).reshape(batch, -1)
        return ct.reshape(-1) if unbatched else ct


class LearnableTemperature(Module):
    """Positive temperature stored as its logarithm."""

    def __init__(self, initial: float = DEFAULT_TEMPERATURE):
        self.log_tau = Parameter(np.array(math.log(initial)))

    def forward(self) -> Tensor:
        return self.log_tau.exp()


def _l2_normalize(x: Tensor, side: str) -> Tensor:
    norms = np.sqrt((x.data ** 2).sum(axis=1))
    if not np.all(np.isfinite(norms)) or np.any(norms == 0.0):
        raise NumericalError(f"cannot normalize {side} embeddings with zero or non-finite norm")
    return x / (x * x).sum(axis=1, keepdims=True) ** 0.5


def condition_contrastive_loss(cts: Tensor, pooled_texts: Tensor, temperature: Union[Tensor, float] = DEFAULT_TEMPERATURE) -> Tensor:
    """
    Symmetric InfoNCE between Condition Tokens and the pooled text embeddings of their prompts.

    Row i of `pooled_texts` is the positive for row i of `cts`; every other row is a negative.
    """
    if cts.ndim != 2 or cts.shape != pooled_texts.shape or cts.shape[0] < 1:
        raise ShapeError("expected matching [B, D] batches", "condition_contrastive_loss", (cts.shape, pooled_texts.shape))
    similarity = matmul(_l2_normalize(cts, "condition token"), _l2_normalize(pooled_texts, "text").transpose(1, 0))
    similarity = similarity / temperature if isinstance(temperature, Tensor) else similarity * (1.0 / temperature)
    targets = np.arange(cts.shape[0])
    return (cross_entropy(similarity, targets) + cross_entropy(similarity.transpose(1, 0), targets)) * 0.5


def condition_objective(cts: Tensor, prompts: Sequence[ConditionPrompt], encoder: TextEncoder,
                        temperature: Union[Tensor, float], attribute_weight: float = 0.25) -> Tensor:
    """Contrastive loss against full prompts plus weighted per-attribute terms for multi-attribute prompts."""
    loss = condition_contrastive_loss(cts, encoder.encode_texts([p.text for p in prompts]), temperature)
    slots = len(prompts[0].attribute_tokens)
    if attribute_weight and slots > 1:
        for slot in range(slots):
            texts = [p.attribute_tokens[slot] for p in prompts]
            loss = loss + condition_contrastive_loss(cts, encoder.encode_texts(texts), temperature) * attribute_weight
    return loss
