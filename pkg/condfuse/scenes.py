"""
Synthetic multimodal driving scenes whose sensor quality depends on the condition.

A scene is a semantic map drawn from geometric primitives plus four 3-channel
observations rendered in the same frame: a camera image, sparse lidar
scanlines, coarse radar blocks and an event-style edge map. Each condition
cell corrupts the modalities differently, so the best modality weighting
changes with the weather and the time of day.
"""

import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from .condition import (CONDITION_CELLS, ConditionAttributes, GroundCondition, PrecipitationLevel,
                        PrecipitationType, SkyCondition, TimeOfDay, Weather)
from .exceptions import DatasetFormatError, ValidationError
from .fusion import MODALITIES, Modality

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"CFD1"
DATASET_VERSION = 1
SPLIT_KEYS = {"train": 0, "val": 1, "test": 2}

CLASS_NAMES = ("road", "sky", "vehicle", "person", "vegetation", "building")
NUM_CLASSES = len(CLASS_NAMES)
ROAD, SKY, VEHICLE, PERSON, VEGETATION, BUILDING = range(NUM_CLASSES)

PALETTE = np.array([
    [0.35, 0.35, 0.38],
    [0.45, 0.65, 0.95],
    [0.85, 0.15, 0.15],
    [0.95, 0.80, 0.20],
    [0.20, 0.60, 0.20],
    [0.55, 0.40, 0.30],
])
FOG_COLOR = np.array([0.72, 0.72, 0.74])
LIDAR_REFLECTANCE = np.array([0.2, 0.0, 0.9, 0.5, 0.4, 0.7])
RADAR_CROSS_SECTION = np.array([0.05, 0.0, 1.0, 0.35, 0.15, 0.6])
RADAR_DOPPLER = np.array([0.0, 0.0, 0.8, 0.5, 0.0, 0.0])

_ENUMS = (Weather, TimeOfDay, PrecipitationType, PrecipitationLevel, GroundCondition, SkyCondition)
_OPTIONAL = (False, False, True, True, False, True)
_FIELDS = ("weather", "time_of_day", "precipitation_type", "precipitation_level", "ground_condition", "sky_condition")


class CorruptionConstants(BaseModel):
    """Per-condition sensor degradation. Frozen per benchmark version."""

    model_config = ConfigDict(frozen=True)

    texture_noise: float = Field(default=0.02, description="Camera texture noise, every condition")
    day_noise: float = Field(default=0.02, description="Camera sensor noise by day")
    night_gain: float = Field(default=0.25, description="Camera brightness factor at night")
    night_noise: float = Field(default=0.08, description="Camera sensor noise at night")
    fog_mix: float = Field(default=0.65, description="Camera blend toward the fog color")
    fog_blur: float = Field(default=1.2, description="Gaussian blur sigma in fog, pixels")
    rain_streaks: float = Field(default=0.04, description="Rain streak density at light rain")
    rain_contrast: float = Field(default=0.8, description="Camera contrast factor in rain")
    snow_flakes: float = Field(default=0.05, description="Snowflake density at light snow")
    heavy_factor: float = Field(default=2.5, description="Density multiplier for heavy precipitation")
    lidar_row_step: int = Field(default=2, description="Every n-th row carries a lidar scanline")
    lidar_speckle: float = Field(default=0.08, description="Spurious lidar returns at light precipitation")
    lidar_fog_drop: float = Field(default=0.3, description="Lidar returns lost in fog")
    radar_block: int = Field(default=4, description="Radar resolution reduction")
    radar_noise: float = Field(default=0.05, description="Radar noise, identical in every condition")
    event_speckle: float = Field(default=0.05, description="Spurious events at light precipitation")
    event_noise: float = Field(default=0.01, description="Event sensor noise")


DEFAULT_CORRUPTION = CorruptionConstants()


@dataclass
class Scene:
    semantic_map: np.ndarray
    images: np.ndarray
    attrs: ConditionAttributes
    seed: int

    @property
    def height(self) -> int:
        return self.semantic_map.shape[0]

    @property
    def width(self) -> int:
        return self.semantic_map.shape[1]

    def image(self, modality: Modality) -> np.ndarray:
        return self.images[MODALITIES.index(Modality(modality))]


def sample_condition(rng: np.random.Generator, cell: Optional[int] = None) -> ConditionAttributes:
    """Uniform over the eight weather x time cells, with dependent attributes drawn consistently."""
    cell = int(rng.integers(len(CONDITION_CELLS))) if cell is None else cell
    weather = list(Weather)[cell // 2]
    time = list(TimeOfDay)[cell % 2]
    night = time == TimeOfDay.NIGHT
    level = PrecipitationLevel.HEAVY if rng.random() < 0.5 else PrecipitationLevel.LIGHT
    absent_or = lambda sky: sky if rng.random() < 0.5 else None

    if weather == Weather.CLEAR:
        return ConditionAttributes(
            weather=weather, time_of_day=time, ground_condition=GroundCondition.DRY,
            sky_condition=absent_or(SkyCondition.DARK) if night else SkyCondition.SUNNY,
        )
    if weather == Weather.FOG:
        ground = GroundCondition.WET if rng.random() < 0.5 else GroundCondition.DRY
        return ConditionAttributes(
            weather=weather, time_of_day=time, ground_condition=ground,
            sky_condition=None if night else absent_or(SkyCondition.OVERCAST),
        )
    ptype = PrecipitationType(weather.value)
    ground = GroundCondition.WET if weather == Weather.RAIN else GroundCondition.SNOWY
    return ConditionAttributes(
        weather=weather, time_of_day=time, precipitation_type=ptype, precipitation_level=level,
        ground_condition=ground, sky_condition=None if night else SkyCondition.OVERCAST,
    )


def draw_layout(seed: int, size: int = 32) -> np.ndarray:
    """Semantic map [size, size] from the seed alone, drawn with PIL primitives."""
    rng = np.random.default_rng([seed, 0])
    s = size / 32.0
    canvas = Image.new("L", (size, size), VEGETATION)
    draw = ImageDraw.Draw(canvas)
    horizon = int(rng.integers(int(9 * s), int(15 * s) + 1))
    draw.rectangle([0, 0, size - 1, horizon - 1], fill=SKY)

    for _ in range(int(rng.integers(1, 4))):
        x0 = int(rng.integers(0, size - int(6 * s)))
        width = int(rng.integers(int(5 * s), int(12 * s) + 1))
        top = int(rng.integers(int(2 * s), horizon - 1))
        draw.rectangle([x0, top, x0 + width, horizon + int(2 * s)], fill=BUILDING)
    for _ in range(int(rng.integers(1, 3))):
        cx = int(rng.integers(0, size))
        cy = horizon + int(rng.integers(-int(3 * s), int(3 * s) + 1))
        r = int(rng.integers(int(2 * s), int(5 * s) + 1))
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=VEGETATION)

    center = size / 2 + rng.uniform(-4, 4) * s
    bottom = rng.uniform(0.55, 0.8) * size
    top_width = rng.uniform(0.06, 0.14) * size
    draw.polygon([
        (center - bottom / 2, size - 1), (center + bottom / 2, size - 1),
        (center + top_width / 2, horizon), (center - top_width / 2, horizon),
    ], fill=ROAD)

    for _ in range(int(rng.integers(1, 3))):
        y = int(rng.integers(horizon + int(3 * s), size - int(5 * s)))
        w = int(rng.integers(int(5 * s), int(9 * s) + 1))
        h = int(rng.integers(int(3 * s), int(5 * s) + 1))
        x = int(center + rng.uniform(-0.3, 0.3) * bottom) - w // 2
        draw.rectangle([x, y, x + w, y + h], fill=VEHICLE)
    for _ in range(int(rng.integers(1, 3))):
        x = int(rng.integers(1, size - int(3 * s)))
        y = int(rng.integers(horizon + int(1 * s), size - int(5 * s)))
        draw.rectangle([x, y, x + max(1, int(2 * s)), y + int(4 * s)], fill=PERSON)
    return np.array(canvas, dtype=np.uint8)


def _precipitation_scale(attrs: ConditionAttributes, k: CorruptionConstants) -> float:
    if attrs.precipitation_level is None:
        return 0.0
    return k.heavy_factor if attrs.precipitation_level == PrecipitationLevel.HEAVY else 1.0


def _proximity(semantic: np.ndarray) -> np.ndarray:
    rows = (np.arange(semantic.shape[0], dtype=np.float64) + 1.0) / semantic.shape[0]
    proximity = np.broadcast_to(rows[:, None], semantic.shape).copy()
    proximity[semantic == BUILDING] = 0.3
    proximity[semantic == SKY] = 0.0
    return proximity


def _render_rgb(semantic, attrs, k, rng, clean) -> np.ndarray:
    img = PALETTE[semantic]
    if clean:
        return img.transpose(2, 0, 1)
    img = img + rng.normal(0.0, k.texture_noise, img.shape)
    precip = _precipitation_scale(attrs, k)
    if attrs.weather == Weather.FOG:
        img = (1.0 - k.fog_mix) * img + k.fog_mix * FOG_COLOR
        img = ndimage.gaussian_filter(img, sigma=(k.fog_blur, k.fog_blur, 0))
    elif attrs.weather == Weather.RAIN:
        img = img.mean(axis=(0, 1)) + k.rain_contrast * (img - img.mean(axis=(0, 1)))
        drops = rng.random(semantic.shape) < k.rain_streaks * precip
        streaks = ndimage.binary_dilation(drops, structure=np.ones((3, 1), dtype=bool))
        img[streaks] = 0.5 * img[streaks] + 0.5 * np.array([0.78, 0.78, 0.82])
    elif attrs.weather == Weather.SNOW:
        img[rng.random(semantic.shape) < k.snow_flakes * precip] = 1.0
    if attrs.time_of_day == TimeOfDay.NIGHT:
        img = img * k.night_gain + rng.normal(0.0, k.night_noise, img.shape)
    else:
        img = img + rng.normal(0.0, k.day_noise, img.shape)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1)


def _render_lidar(semantic, attrs, k, rng, clean) -> np.ndarray:
    reflectance = LIDAR_REFLECTANCE[semantic]
    channels = np.stack([_proximity(semantic), reflectance, np.hypot(ndimage.sobel(reflectance, 0), ndimage.sobel(reflectance, 1)) / 4.0])
    scanlines = (np.arange(semantic.shape[0]) % k.lidar_row_step == 0)[:, None] & (semantic != SKY)
    if not clean:
        if attrs.weather == Weather.FOG:
            scanlines &= rng.random(semantic.shape) >= k.lidar_fog_drop
        precip = _precipitation_scale(attrs, k)
        if precip:
            speckle = rng.random(semantic.shape) < k.lidar_speckle * precip
            speckle &= (np.arange(semantic.shape[0]) % k.lidar_row_step == 0)[:, None]
            channels[:, speckle] = rng.random((3, int(speckle.sum())))
            scanlines |= speckle
    return channels * scanlines


def _render_radar(semantic, k, seed, clean) -> np.ndarray:
    b = k.radar_block
    height, width = semantic.shape
    fine = np.stack([RADAR_CROSS_SECTION[semantic], RADAR_DOPPLER[semantic], _proximity(semantic)])
    coarse = fine.reshape(3, height // b, b, width // b, b).mean(axis=(2, 4))
    blocks = coarse.repeat(b, axis=1).repeat(b, axis=2)
    if clean:
        return blocks
    noise_rng = np.random.default_rng([seed, 7])
    return blocks + noise_rng.normal(0.0, k.radar_noise, blocks.shape)


def _render_events(semantic, attrs, k, rng, clean) -> np.ndarray:
    intensity = PALETTE[semantic].mean(axis=-1)
    if not clean:
        if attrs.weather == Weather.FOG:
            intensity = (1.0 - k.fog_mix) * intensity + k.fog_mix * FOG_COLOR.mean()
        if attrs.time_of_day == TimeOfDay.NIGHT:
            intensity = intensity * k.night_gain
    log_intensity = np.log(intensity + 0.01)
    gx = ndimage.sobel(log_intensity, axis=1)
    gy = ndimage.sobel(log_intensity, axis=0)
    events = np.stack([
        np.maximum(gx, 0) + np.maximum(gy, 0),
        np.maximum(-gx, 0) + np.maximum(-gy, 0),
        np.hypot(gx, gy),
    ]) / 4.0
    if clean:
        return events
    precip = _precipitation_scale(attrs, k)
    if precip:
        speckle = rng.random(semantic.shape) < k.event_speckle * precip
        polarity = rng.random(semantic.shape) < 0.5
        events[0][speckle & polarity] = 1.0
        events[1][speckle & ~polarity] = 1.0
        events[2][speckle] = 1.0
    return events + rng.normal(0.0, k.event_noise, events.shape)


def render_scene(attrs: ConditionAttributes, seed: int, size: int = 32,
                 constants: CorruptionConstants = DEFAULT_CORRUPTION, clean: bool = False) -> Scene:
    """
    Render one scene deterministically from (attrs, seed).

    The layout depends on the seed only; `clean` skips every condition effect
    and all noise, which gives the reference signal for SNR measurements.
    """
    if size % 32 or size <= 0:
        raise ValidationError("scene size must be a positive multiple of 32", field="size", value=size)
    semantic = draw_layout(seed, size)
    rng = np.random.default_rng([seed, 1 + attrs.cell_index])
    images = np.stack([
        _render_rgb(semantic, attrs, constants, rng, clean),
        _render_lidar(semantic, attrs, constants, rng, clean),
        _render_radar(semantic, constants, seed, clean),
        _render_events(semantic, attrs, constants, rng, clean),
    ]).astype(np.float32)
    return Scene(semantic_map=semantic, images=images, attrs=attrs, seed=int(seed))


def color_oracle_accuracy(scene: Scene) -> float:
    """Pixel accuracy of classifying the camera image by its nearest palette color."""
    rgb = scene.image(Modality.RGB).astype(np.float64).transpose(1, 2, 0)
    distances = ((rgb[:, :, None, :] - PALETTE[None, None]) ** 2).sum(axis=-1)
    return float((distances.argmin(axis=-1) == scene.semantic_map).mean())


def modality_snr(scene: Scene, modality: Modality) -> float:
    """Signal-to-noise ratio in dB of one observation against its clean rendering."""
    reference = render_scene(scene.attrs, scene.seed, scene.height, clean=True).image(modality).astype(np.float64)
    noise = scene.image(modality).astype(np.float64) - reference
    return float(10.0 * np.log10((reference ** 2).mean() / max((noise ** 2).mean(), 1e-20)))


# *** splits ***

def _render_job(job: Tuple[dict, int, int]) -> Scene:
    attrs, seed, size = job
    return render_scene(ConditionAttributes(**attrs), seed, size)


def generate_split(count: int, seed: int, split: str, size: int = 32, stratified: bool = False,
                   workers: int = 1) -> List[Scene]:
    """
    Generate `count` scenes for a split.

    Stratified splits cycle through the condition cells in order; otherwise
    cells are drawn uniformly. Scene seeds come from a stream keyed by (seed, split).
    """
    rng = np.random.default_rng([seed, SPLIT_KEYS[split]])
    jobs = []
    for i in range(count):
        attrs = sample_condition(rng, cell=i % len(CONDITION_CELLS) if stratified else None)
        jobs.append((attrs.model_dump(), int(rng.integers(0, 2 ** 63 - 1)), size))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(_render_job, jobs, chunksize=16))
    else:
        scenes = [_render_job(job) for job in jobs]
    logger.info(f"Generated {count} {split} scenes")
    return scenes


# *** normalization ***

@dataclass
class NormalizationStats:
    """Per-modality, per-channel mean and std, shape [4, 3]."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> Dict[str, List[List[float]]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[List[float]]]) -> "NormalizationStats":
        return cls(mean=np.array(data["mean"], dtype=np.float64), std=np.array(data["std"], dtype=np.float64))

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Normalize images [..., 4, 3, H, W] in float64."""
        return (images.astype(np.float64) - self.mean[..., None, None]) / self.std[..., None, None]


def compute_normalization_stats(scenes: Sequence[Scene]) -> NormalizationStats:
    if not scenes:
        raise ValidationError("cannot compute statistics of an empty split", field="scenes")
    stacked = np.stack([s.images for s in scenes]).astype(np.float64)
    mean = stacked.mean(axis=(0, 3, 4))
    std = stacked.std(axis=(0, 3, 4))
    flat = std == 0.0
    if flat.any():
        logger.warning(f"Zero-variance channels {np.argwhere(flat).tolist()} keep unit scale")
        std = np.where(flat, 1.0, std)
    return NormalizationStats(mean=mean, std=std)


@dataclass
class SceneSplit:
    """Model-ready arrays for one split."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    attrs: List[ConditionAttributes]
    seeds: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def cells(self) -> np.ndarray:
        return np.array([a.cell_index for a in self.attrs], dtype=np.int64)

    @classmethod
    def from_scenes(cls, name: str, scenes: Sequence[Scene], stats: NormalizationStats) -> "SceneSplit":
        if not scenes:
            raise ValidationError(f"split {name} is empty", field="split", value=name)
        return cls(
            name=name,
            images=stats.apply(np.stack([s.images for s in scenes])),
            labels=np.stack([s.semantic_map for s in scenes]).astype(np.int64),
            attrs=[s.attrs for s in scenes],
            seeds=[s.seed for s in scenes],
        )

    def subset(self, indices: Sequence[int]) -> "SceneSplit":
        indices = list(indices)
        return SceneSplit(
            name=self.name,
            images=self.images[indices],
            labels=self.labels[indices],
            attrs=[self.attrs[i] for i in indices],
            seeds=[self.seeds[i] for i in indices] if self.seeds else [],
        )


# *** dataset file ***

class DatasetManifest(BaseModel):
    version: int = DATASET_VERSION
    count: int
    split: str
    height: int
    width: int
    offsets: List[int]
    stats: Dict[str, List[List[float]]]


@dataclass
class DatasetFile:
    manifest: DatasetManifest
    scenes: List[Scene]

    @property
    def stats(self) -> NormalizationStats:
        return NormalizationStats.from_dict(self.manifest.stats)

    def to_split(self, stats: Optional[NormalizationStats] = None) -> SceneSplit:
        return SceneSplit.from_scenes(self.manifest.split, self.scenes, stats or self.stats)


def _encode_attrs(attrs: ConditionAttributes) -> bytes:
    codes = []
    for name, enum, optional in zip(_FIELDS, _ENUMS, _OPTIONAL):
        value = getattr(attrs, name)
        index = -1 if value is None else list(enum).index(value)
        codes.append(index + 1 if optional else index)
    return bytes(codes)


def _decode_attrs(raw: bytes, offset: int) -> ConditionAttributes:
    values = {}
    for code, name, enum, optional in zip(raw, _FIELDS, _ENUMS, _OPTIONAL):
        members = list(enum)
        index = code - 1 if optional else code
        if optional and code == 0:
            values[name] = None
        elif 0 <= index < len(members):
            values[name] = members[index]
        else:
            raise DatasetFormatError(f"invalid {name} code {code}", offset=offset)
    try:
        return ConditionAttributes(**values)
    except ValidationError as exc:
        raise DatasetFormatError(f"inconsistent attributes: {exc.message}", offset=offset)


def _block_size(height: int, width: int) -> int:
    return len(_FIELDS) + 8 + height * width + len(MODALITIES) * 3 * height * width * 4


def write_dataset(scenes: Sequence[Scene], path: Union[str, Path], split: str = "train",
                  stats: Optional[NormalizationStats] = None) -> DatasetManifest:
    """
    Write scenes as a CFD1 file.

    Training splits compute their own statistics; other splits must be given the
    training statistics.
    """
    if not scenes:
        raise ValidationError("cannot write an empty dataset", field="scenes")
    height, width = scenes[0].semantic_map.shape
    for scene in scenes:
        if scene.semantic_map.shape != (height, width):
            raise ValidationError("all scenes in a file share one size", field="semantic_map", value=scene.semantic_map.shape)
    if stats is None:
        if split != "train":
            raise ValidationError("non-training splits need the training statistics", field="stats", value=split)
        stats = compute_normalization_stats(scenes)
    block = _block_size(height, width)
    manifest = DatasetManifest(
        count=len(scenes), split=split, height=height, width=width,
        offsets=[i * block for i in range(len(scenes))], stats=stats.to_dict(),
    )
    header = json.dumps(manifest.model_dump()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(header)))
        fh.write(header)
        for scene in scenes:
            fh.write(_encode_attrs(scene.attrs))
            fh.write(struct.pack("<Q", scene.seed))
            fh.write(np.ascontiguousarray(scene.semantic_map, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(scene.images, dtype="<f4").tobytes())
    logger.info(f"Wrote {len(scenes)} {split} scenes to {path}")
    return manifest


def read_dataset(path: Union[str, Path]) -> DatasetFile:
    """Read a CFD1 file completely; any corruption raises DatasetFormatError with its byte offset."""
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError("bad dataset magic", offset=0)
    if len(raw) < 12:
        raise DatasetFormatError("truncated header", offset=4)
    version, header_length = struct.unpack_from("<II", raw, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}", offset=4)
    offset = 12
    if offset + header_length > len(raw):
        raise DatasetFormatError("truncated manifest", offset=offset)
    try:
        manifest = DatasetManifest(**json.loads(raw[offset:offset + header_length].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise DatasetFormatError(f"unreadable manifest: {exc}", offset=offset)
    offset += header_length
    base = offset

    height, width = manifest.height, manifest.width
    pixels = height * width
    block = _block_size(height, width)
    if len(manifest.offsets) != manifest.count:
        raise DatasetFormatError("manifest offsets do not match the scene count", offset=base - header_length)
    scenes = []
    for i, relative in enumerate(manifest.offsets):
        start = base + relative
        if relative != i * block:
            raise DatasetFormatError(f"scene {i} offset {relative} is not block aligned", offset=start)
        if start + block > len(raw):
            raise DatasetFormatError(f"truncated scene {i}", offset=min(start, len(raw)))
        attrs = _decode_attrs(raw[start:start + len(_FIELDS)], start)
        cursor = start + len(_FIELDS)
        (seed,) = struct.unpack_from("<Q", raw, cursor)
        cursor += 8
        semantic = np.frombuffer(raw, dtype=np.uint8, count=pixels, offset=cursor).reshape(height, width).copy()
        if semantic.max(initial=0) >= NUM_CLASSES:
            raise DatasetFormatError(f"scene {i} has class ids >= {NUM_CLASSES}", offset=cursor)
        cursor += pixels
        images = np.frombuffer(raw, dtype="<f4", count=len(MODALITIES) * 3 * pixels, offset=cursor)
        images = images.astype(np.float32).reshape(len(MODALITIES), 3, height, width)
        scenes.append(Scene(semantic_map=semantic, images=images, attrs=attrs, seed=int(seed)))
    end = base + manifest.count * block
    if end != len(raw):
        raise DatasetFormatError("trailing bytes after the last scene", offset=end)
    return DatasetFile(manifest=manifest, scenes=scenes)


@dataclass
class SceneDataset:
    """Normalized train/val/test splits sharing the training statistics."""

    train: SceneSplit
    val: SceneSplit
    test: SceneSplit
    stats: NormalizationStats

    def split(self, name: str) -> SceneSplit:
        if name not in ("train", "val", "test"):
            raise ValidationError(f"unknown split {name}", field="split", value=name)
        return getattr(self, name)

    @classmethod
    def load(cls, data_dir: Union[str, Path]) -> "SceneDataset":
        data_dir = Path(data_dir)
        train = read_dataset(data_dir / "train.cfd")
        stats = train.stats
        return cls(
            train=train.to_split(stats),
            val=read_dataset(data_dir / "val.cfd").to_split(stats),
            test=read_dataset(data_dir / "test.cfd").to_split(stats),
            stats=stats,
        )

    @classmethod
    def from_scenes(cls, train: Sequence[Scene], val: Sequence[Scene], test: Sequence[Scene]) -> "SceneDataset":
        stats = compute_normalization_stats(train)
        return cls(
            train=SceneSplit.from_scenes("train", train, stats),
            val=SceneSplit.from_scenes("val", val, stats),
            test=SceneSplit.from_scenes("test", test, stats),
            stats=stats,
        )


def generate_dataset(out_dir: Union[str, Path], train: int, val: int, test: int, seed: int,
                     size: int = 32, workers: int = 1) -> Dict[str, DatasetManifest]:
    """Generate and write train/val/test files; evaluation splits are stratified by condition cell."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_scenes = generate_split(train, seed, "train", size, workers=workers)
    stats = compute_normalization_stats(train_scenes)
    manifests = {"train": write_dataset(train_scenes, out_dir / "train.cfd", "train", stats)}
    for name, count in (("val", val), ("test", test)):
        scenes = generate_split(count, seed, name, size, stratified=True, workers=workers)
        manifests[name] = write_dataset(scenes, out_dir / f"{name}.cfd", name, stats)
    return manifests
