"""
Training, evaluation, parameter accounting, ablations and reports.
"""

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .condition import CONDITION_CELLS, ConditionAttributes, condition_contrastive_loss
from .config import ModelConfig, Settings
from .exceptions import CondFuseError, ConfigurationError, TrainingDivergedError, ValidationError
from .fusion import (MODALITIES, Adapter, CAAFusion, CTTarget, FusionKind, Modality, MWCAFusion,
                     ca2_window_attention, modality_dropout, window_partition)
from .model import ConditionAwareFuser, reference_config, resolve_modalities
from .nnblocks import (AttentionConfig, Backbone, BackboneConfig, FeaturePyramid, Linear, MLP, Module,
                       MultiHeadAttention, TransformerEncoderDecoder)
from .scenes import SceneDataset, SceneSplit
from .seghead import SegmentationHead, predict
from .tensorcore import (Parameter, Tensor, concat, conv2d, cross_entropy, gelu, gradcheck, layer_norm, matmul,
                         no_grad, pad2d, softmax, upsample_nearest2d)

logger = logging.getLogger(__name__)

FUSION_GROUPS = ("backbone", "backbones", "adapters", "fusion")


# *** optimizer ***

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Parameter], lr: float = 3e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.steps = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


# *** reports ***

class EvalResult(BaseModel):
    per_class_iou: List[Optional[float]]
    miou: float
    cell_miou: Dict[str, float]


class RunReport(BaseModel):
    """Outcome of one training run."""

    seed: int
    config: Dict[str, Any] = Field(default_factory=dict)
    split_miou: Dict[str, float] = Field(default_factory=dict)
    cell_miou: Dict[str, float] = Field(default_factory=dict)
    caa_weights: Optional[Dict[str, List[float]]] = None
    parameter_count: int = 0
    loss_curve: List[float] = Field(default_factory=list)
    step_losses: List[float] = Field(default_factory=list)


# *** training ***

def build_model(cfg: ModelConfig, seed: int) -> ConditionAwareFuser:
    return ConditionAwareFuser(cfg, np.random.default_rng([seed, 0]))


def _batches(count: int, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[np.ndarray]:
    order = np.arange(count) if order is None else order
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def train(settings: Settings, dataset: SceneDataset, run_dir: Optional[Union[str, Path]] = None,
          evaluate: bool = True) -> Tuple[ConditionAwareFuser, RunReport]:
    """
    Train one model with AdamW on the training split.

    Deterministic given the settings and the dataset: initialization, shuffling,
    modality dropout and random fusion weights each draw from their own stream
    seeded by `train.seed`.

    Raises:
        TrainingDivergedError: When a loss becomes non-finite
    """
    model_cfg, cfg = settings.model, settings.train
    model = build_model(model_cfg, cfg.seed)
    if cfg.freeze_backbone:
        for backbone in model.backbone_modules():
            backbone.freeze()
    optimizer = AdamW([p for p in model.parameters() if p.requires_grad], lr=cfg.learning_rate,
                      betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    fusion_rng = np.random.default_rng([cfg.seed, 3])

    split = dataset.train
    if len(split) == 0:
        raise ValidationError("training split is empty", field="train")
    run_log = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        run_log = open(run_dir / "train.log", "w", encoding="utf-8")

    step_losses: List[float] = []
    loss_curve: List[float] = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            epoch_losses = []
            for idx in _batches(len(split), cfg.batch_size, shuffle_rng.permutation(len(split))):
                images = split.images[idx]
                if cfg.dropout_p > 0:
                    images, _ = modality_dropout(images, cfg.dropout_p, dropout_rng, cfg.modalities)
                output = model(images, cfg.modalities, rng=fusion_rng)
                loss = model.loss(output, split.labels[idx], [split.attrs[i] for i in idx], cfg.lambda_cond,
                                  cfg.prompt_detail, cfg.attribute_loss_weight)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(f"non-finite loss {value}", step=step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step_losses.append(value)
                epoch_losses.append(value)
                logger.debug(f"step {step} loss {value:.6f}")
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            loss_curve.append(float(np.mean(epoch_losses)))
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss {loss_curve[-1]:.4f}")
            if run_log is not None:
                run_log.write(f"epoch {epoch + 1} steps {step} loss {loss_curve[-1]!r}\n")
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if run_log is not None:
            run_log.close()

    report = RunReport(
        seed=cfg.seed,
        config=settings.model_dump(mode="json", include={"model", "train"}),
        parameter_count=model.num_parameters(),
        loss_curve=loss_curve,
        step_losses=step_losses,
    )
    if evaluate:
        for name in ("val", "test"):
            result = evaluate_miou(model, dataset.split(name), cfg.modalities, cfg.eval_batch_size, cfg.seed)
            report.split_miou[name] = result.miou
            if name == "test":
                report.cell_miou = result.cell_miou
        if model_cfg.fusion_kind == FusionKind.CAA:
            report.caa_weights = caa_weights_by_cell(model, dataset.test, cfg.modalities, cfg.eval_batch_size)
    return model, report


# *** evaluation ***

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts [K, K] with ground truth on rows and predictions on columns."""
    gt = np.asarray(gt, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if gt.size and (gt.max() >= num_classes or gt.min() < 0):
        raise ValidationError(f"ground-truth class ids must lie in [0, {num_classes})", field="gt")
    return np.bincount(num_classes * gt + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> Tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from the ground truth) and their mean over present classes."""
    cm = np.asarray(cm, dtype=np.float64)
    intersection = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - intersection
    present = cm.sum(axis=1) > 0
    iou = np.full(cm.shape[0], np.nan)
    iou[present] = intersection[present] / union[present]
    return iou, float(iou[present].mean()) if present.any() else float("nan")


@dataclass
class InferenceBatch:
    indices: np.ndarray
    pred: np.ndarray
    ct: Optional[np.ndarray]
    weights: Optional[np.ndarray]
    rgb_features: np.ndarray


def run_inference(model: ConditionAwareFuser, split: SceneSplit, modalities: Optional[Sequence[Modality]] = None,
                  batch_size: int = 32, seed: int = 0) -> Iterator[InferenceBatch]:
    if len(split) == 0:
        raise ValidationError(f"split {split.name} is empty", field="split", value=split.name)
    rng = np.random.default_rng([seed, 4])
    with no_grad():
        for idx in _batches(len(split), batch_size):
            output = model(split.images[idx], modalities, rng=rng)
            yield InferenceBatch(
                indices=idx,
                pred=predict(output.logits),
                ct=None if output.ct is None else output.ct.numpy(),
                weights=None if output.fusion_weights is None else output.fusion_weights.numpy(),
                rgb_features=np.concatenate([level.numpy().mean(axis=(2, 3)) for level in output.rgb_pyramid], axis=1),
            )


def evaluate_miou(model: ConditionAwareFuser, split: SceneSplit, modalities: Optional[Sequence[Modality]] = None,
                  batch_size: int = 32, seed: int = 0) -> EvalResult:
    """Per-class IoU, mIoU over classes present in the ground truth, and mIoU per condition cell."""
    num_classes = model.cfg.num_classes
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    cells = {cell: np.zeros_like(total) for cell in CONDITION_CELLS}
    for batch in run_inference(model, split, modalities, batch_size, seed):
        for row, i in enumerate(batch.indices):
            cm = confusion_matrix(batch.pred[row], split.labels[i], num_classes)
            total += cm
            cells[split.attrs[i].cell] += cm
    per_class, miou = iou_from_confusion(total)
    cell_miou = {cell: iou_from_confusion(cm)[1] for cell, cm in cells.items() if cm.sum()}
    logger.info(f"{split.name} mIoU {miou:.4f}")
    return EvalResult(
        per_class_iou=[None if np.isnan(v) else float(v) for v in per_class],
        miou=miou,
        cell_miou=cell_miou,
    )


# *** parameter accounting ***

class ParameterCount(BaseModel):
    total: int
    by_group: Dict[str, int]
    fusion_path: int
    reference_fusion_path: int

    @property
    def reduction_ratio(self) -> float:
        return self.fusion_path / self.reference_fusion_path


def group_parameters(model: Module) -> Dict[str, int]:
    groups: Dict[str, int] = {}
    for name, p in model.named_parameters():
        prefix = name.split(".", 1)[0]
        groups[prefix] = groups.get(prefix, 0) + p.size
    return groups


def count_parameters(model: ConditionAwareFuser) -> ParameterCount:
    """
    Parameter totals grouped by top-level submodule, plus the backbone-and-fusion
    path compared against the variant with one backbone per modality and no adapters.
    """
    groups = group_parameters(model)
    reference = group_parameters(ConditionAwareFuser(reference_config(model.cfg), np.random.default_rng(0)))
    return ParameterCount(
        total=sum(groups.values()),
        by_group=groups,
        fusion_path=sum(groups.get(g, 0) for g in FUSION_GROUPS),
        reference_fusion_path=sum(reference.get(g, 0) for g in FUSION_GROUPS),
    )


# *** condition weights ***

def caa_weights_by_cell(model: ConditionAwareFuser, split: SceneSplit,
                        modalities: Optional[Sequence[Modality]] = None, batch_size: int = 32) -> Dict[str, List[float]]:
    """Mean CAA weights in percent per condition cell, one entry per modality in MODALITIES order."""
    if model.cfg.fusion_kind != FusionKind.CAA:
        raise ConfigurationError(f"CAA weights need a caa model, this one fuses with {model.cfg.fusion_kind.value}")
    modalities = resolve_modalities(modalities)
    columns = [MODALITIES.index(m) for m in modalities]
    sums: Dict[str, np.ndarray] = {}
    counts: Dict[str, int] = {}
    for batch in run_inference(model, split, modalities, batch_size):
        weights = batch.weights if batch.weights.ndim == 2 else batch.weights.mean(axis=1)
        for row, i in enumerate(batch.indices):
            full = np.zeros(len(MODALITIES))
            full[columns] = weights[row]
            cell = split.attrs[i].cell
            sums[cell] = sums.get(cell, 0.0) + full
            counts[cell] = counts.get(cell, 0) + 1
    return {cell: (100.0 * sums[cell] / counts[cell]).tolist() for cell in CONDITION_CELLS if cell in sums}


def report_caa_weights(model: ConditionAwareFuser, split: SceneSplit, out_dir: Union[str, Path],
                       modalities: Optional[Sequence[Modality]] = None) -> Dict[str, List[float]]:
    """Write the per-cell CAA weight table as CSV and a stacked horizontal bar chart as SVG."""
    table = caa_weights_by_cell(model, split, modalities)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "caa_weights.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell"] + [m.value for m in MODALITIES])
        for cell, row in table.items():
            writer.writerow([cell] + [repr(v) for v in row])
    plot_caa_weights(table, out_dir / "caa_weights.svg")
    logger.info(f"Wrote CAA weight report to {out_dir}")
    return table


def plot_caa_weights(table: Dict[str, List[float]], path: Union[str, Path]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cells = list(table)
    values = np.array([table[c] for c in cells])
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(cells) + 1.2))
    left = np.zeros(len(cells))
    for j, modality in enumerate(MODALITIES):
        bars = ax.barh(cells, values[:, j], left=left, label=modality.value)
        for bar, value in zip(bars, values[:, j]):
            if value >= 6:
                ax.text(bar.get_x() + bar.get_width() / 2, bar.get_y() + bar.get_height() / 2, f"{value:.0f}",
                        ha="center", va="center", fontsize=8)
        left += values[:, j]
    ax.set_xlim(0, 100)
    ax.set_xlabel("fusion weight (%)")
    ax.invert_yaxis()
    ax.legend(ncol=len(MODALITIES), loc="upper center", bbox_to_anchor=(0.5, 1.15), frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# *** condition probe ***

class ProbeResult(BaseModel):
    train_accuracy: float
    test_accuracy: float


PROBE_FEATURES = ("ct", "rgb")


def _collect_features(model: ConditionAwareFuser, split: SceneSplit, features: str, batch_size: int) -> np.ndarray:
    batches = run_inference(model, split, batch_size=batch_size)
    return np.concatenate([b.ct if features == "ct" else b.rgb_features for b in batches], axis=0)


def condition_probe(model: ConditionAwareFuser, train_split: SceneSplit, test_split: SceneSplit,
                    steps: int = 300, lr: float = 0.05, seed: int = 0, batch_size: int = 32,
                    features: str = "ct") -> ProbeResult:
    """
    Linear softmax probe classifying the condition cell from frozen features.

    `features` is "ct" for the Condition Tokens or "rgb" for the RGB backbone
    pyramid, average-pooled per level and concatenated.
    """
    if features not in PROBE_FEATURES:
        raise ConfigurationError(f"unknown probe features {features!r}", {"choices": list(PROBE_FEATURES)})
    if features == "ct" and not model.uses_condition_token:
        raise ConfigurationError(f"{model.cfg.fusion_kind.value} models have no Condition Token to probe")
    train_x = _collect_features(model, train_split, features, batch_size)
    test_x = _collect_features(model, test_split, features, batch_size)
    mean, std = train_x.mean(axis=0), train_x.std(axis=0) + 1e-8
    train_x, test_x = (train_x - mean) / std, (test_x - mean) / std
    probe = Linear(train_x.shape[1], len(CONDITION_CELLS), np.random.default_rng(seed))
    optimizer = AdamW(probe.parameters(), lr=lr, weight_decay=0.0)
    inputs = Tensor(train_x)
    for _ in range(steps):
        loss = cross_entropy(probe(inputs), train_split.cells)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    with no_grad():
        train_acc = float((probe(inputs).data.argmax(axis=1) == train_split.cells).mean())
        test_acc = float((probe(Tensor(test_x)).data.argmax(axis=1) == test_split.cells).mean())
    logger.info(f"Condition probe on {features} features: train {train_acc:.3f}, test {test_acc:.3f}")
    return ProbeResult(train_accuracy=train_acc, test_accuracy=test_acc)


# *** ablations ***

ABLATION_AXES: Dict[str, Dict[str, Dict[str, Any]]] = {
    "fusion": {kind.value: {"model.fusion_kind": kind.value} for kind in FusionKind},
    "ct_target": {t.value: {"model.fusion_kind": "ca2", "model.ct_target": t.value} for t in CTTarget},
    "condition_loss": {"without": {"train.lambda_cond": 0.0}, "with": {}},
    "prompt": {"weather": {"train.prompt_detail": "weather"}, "full": {"train.prompt_detail": "full"}},
    "modalities": {
        "C": {"train.modalities": ["rgb"]},
        "CL": {"train.modalities": ["rgb", "lidar"]},
        "CLR": {"train.modalities": ["rgb", "lidar", "radar"]},
        "CLRE": {"train.modalities": ["rgb", "lidar", "radar", "event"]},
    },
    "backbone": {
        "shared": {"model.shared_backbone": True, "model.use_adapters": True},
        "shared_no_adapter": {"model.shared_backbone": True, "model.use_adapters": False},
        "separate": {"model.shared_backbone": False, "model.use_adapters": False},
    },
    "adapter": {
        "off": {"model.fusion_kind": "mean", "model.use_adapters": False},
        "on": {"model.fusion_kind": "mean", "model.use_adapters": True},
    },
    "caa_levels": {
        "shared": {"model.fusion_kind": "caa", "model.caa_per_level": False},
        "per_level": {"model.fusion_kind": "caa", "model.caa_per_level": True},
    },
}

CSV_COLUMNS = ["axis", "value", "seed", "mIoU"] + list(CONDITION_CELLS) + ["error"]


@dataclass
class AblationJob:
    axis: str
    value: str
    seed: int
    overrides: Dict[str, Any]


@dataclass
class AblationRow:
    axis: str
    value: str
    seed: int
    miou: Optional[float]
    cell_miou: Dict[str, float] = field(default_factory=dict)
    error: str = ""
    report: Optional[RunReport] = None


def build_grid(axes: Sequence[str], seeds: Sequence[int],
               custom: Optional[Dict[str, Sequence[Any]]] = None) -> List[AblationJob]:
    """
    Expand named ablation axes (one factor at a time) and an optional custom
    dotted-key grid (full product) into jobs, each repeated for every seed.
    """
    jobs = []
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ConfigurationError(f"unknown ablation axis {axis}; choose from {sorted(ABLATION_AXES)}")
        for value, overrides in ABLATION_AXES[axis].items():
            jobs.extend(AblationJob(axis, value, seed, dict(overrides)) for seed in seeds)
    if custom:
        names = list(custom)
        for combo in product(*custom.values()):
            overrides = dict(zip(names, combo))
            value = ";".join(f"{k}={json.dumps(v)}" for k, v in overrides.items())
            jobs.extend(AblationJob("grid", value, seed, dict(overrides)) for seed in seeds)
    return jobs


def run_job(settings: Settings, dataset: SceneDataset, job: AblationJob) -> AblationRow:
    """Train and evaluate one grid cell; failures become rows with an error message."""
    logger.info(f"Ablation {job.axis}={job.value} seed {job.seed}: start")
    try:
        run_settings = settings.with_overrides({**job.overrides, "train.seed": job.seed})
        _, report = train(run_settings, dataset)
    except CondFuseError as exc:
        logger.warning(f"Ablation {job.axis}={job.value} seed {job.seed} failed: {exc}")
        return AblationRow(job.axis, job.value, job.seed, None, error=str(exc))
    logger.info(f"Ablation {job.axis}={job.value} seed {job.seed}: mIoU {report.split_miou['test']:.4f}")
    return AblationRow(job.axis, job.value, job.seed, report.split_miou["test"], dict(report.cell_miou), report=report)


_worker_state: Dict[str, Any] = {}


def _init_worker(settings_json: str, dataset: SceneDataset, log_level: str) -> None:
    logging.basicConfig(level=log_level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    _worker_state["settings"] = Settings.model_validate_json(settings_json)
    _worker_state["dataset"] = dataset


def _run_in_worker(job: AblationJob) -> AblationRow:
    return run_job(_worker_state["settings"], _worker_state["dataset"], job)


def run_ablation(settings: Settings, dataset: SceneDataset, jobs: Sequence[AblationJob], workers: int = 1,
                 out_dir: Optional[Union[str, Path]] = None) -> List[AblationRow]:
    """
    Run every job, in parallel processes when workers > 1, and optionally write
    `ablation.csv` and `ablation_summary.csv` to out_dir.
    """
    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_init_worker,
            initargs=(settings.model_dump_json(), dataset, logging.getLevelName(logger.getEffectiveLevel())),
        ) as pool:
            rows = list(pool.map(_run_in_worker, jobs))
    else:
        rows = [run_job(settings, dataset, job) for job in jobs]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_ablation_csv(rows, out_dir / "ablation.csv")
        write_summary_csv(rows, out_dir / "ablation_summary.csv")
    return rows


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_ablation_csv(rows: Sequence[AblationRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([row.axis, row.value, row.seed, _fmt(row.miou)]
                            + [_fmt(row.cell_miou.get(cell)) for cell in CONDITION_CELLS] + [row.error])
    logger.info(f"Wrote {len(rows)} ablation rows to {path}")


def read_ablation_csv(path: Union[str, Path]) -> List[AblationRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValidationError(f"unexpected ablation columns {reader.fieldnames}", field="columns")
        for record in reader:
            rows.append(AblationRow(
                axis=record["axis"],
                value=record["value"],
                seed=int(record["seed"]),
                miou=float(record["mIoU"]) if record["mIoU"] else None,
                cell_miou={cell: float(record[cell]) for cell in CONDITION_CELLS if record[cell]},
                error=record["error"],
            ))
    return rows


def summarize(rows: Sequence[AblationRow]) -> List[Dict[str, Any]]:
    """Mean and sample std of test mIoU per (axis, value) over successful seeds."""
    groups: Dict[Tuple[str, str], List[AblationRow]] = {}
    for row in rows:
        groups.setdefault((row.axis, row.value), []).append(row)
    summary = []
    for (axis, value), members in groups.items():
        ok = [r for r in members if r.miou is not None]
        scores = np.array([r.miou for r in ok])
        entry = {
            "axis": axis,
            "value": value,
            "runs": len(ok),
            "failed": len(members) - len(ok),
            "mIoU_mean": float(scores.mean()) if ok else None,
            "mIoU_std": float(scores.std(ddof=1)) if len(ok) > 1 else (0.0 if ok else None),
        }
        for cell in CONDITION_CELLS:
            values = [r.cell_miou[cell] for r in ok if cell in r.cell_miou]
            entry[cell] = float(np.mean(values)) if values else None
        summary.append(entry)
    return summary


def write_summary_csv(rows: Sequence[AblationRow], path: Union[str, Path]) -> None:
    summary = summarize(rows)
    columns = ["axis", "value", "runs", "failed", "mIoU_mean", "mIoU_std"] + list(CONDITION_CELLS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for entry in summary:
            writer.writerow([_fmt(entry[c]) if isinstance(entry[c], float) or entry[c] is None else entry[c]
                             for c in columns])


# *** gradient checks ***

class GradcheckResult(BaseModel):
    name: str
    max_relative_error: float
    passed: bool


def _tiny_model_config(**updates: Any) -> ModelConfig:
    base = ModelConfig(
        backbone=BackboneConfig(level_channels=[4, 8, 12, 16], blocks_per_level=1),
        ct_dim=8, transformer_heads=2, ct_encoder_layers=1, ct_decoder_layers=1, text_layers=1,
        context_tokens=2, decoder_channels=4, window=2,
    )
    return ModelConfig.model_validate({**base.model_dump(), **updates})


def _random_composite(rng: np.random.Generator, depth: int) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    ops: List[Callable[[Tensor], Tensor]] = [
        lambda t: gelu(t),
        lambda t: softmax(t),
        lambda t: layer_norm(t),
        lambda t: matmul(t, w),
        lambda t: t * t + t,
        lambda t: (t * 0.5).exp(),
        lambda t: concat([t[:, :2], t[:, 2:]], axis=1).transpose(1, 0).reshape(3, 4),
    ]
    chosen = [ops[i] for i in rng.integers(0, len(ops), size=depth)]

    def fn() -> Tensor:
        t = x
        for op in chosen:
            t = op(t)
        return (t * t).mean()

    return fn, [x, w]


def gradcheck_cases(seed: int = 0) -> Dict[str, Callable[[], Tuple[Callable[[], Tensor], List[Tensor]]]]:
    """Named builders returning (scalar function, inputs to check)."""
    rng = np.random.default_rng(seed)

    def t(*shape, scale: float = 1.0) -> Tensor:
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    def primitive(op: Callable[..., Tensor], *inputs: Tensor):
        weights = rng.normal(size=op(*inputs).shape)
        return (lambda: (op(*inputs) * weights).sum()), list(inputs)

    def block(module: Module, *inputs: Tensor, call=None):
        call = call or (lambda: module(*inputs))
        weights = rng.normal(size=call().shape)
        return (lambda: (call() * weights).sum()), list(inputs) + module.parameters()[:4]

    def tiny_model_case(kind: str):
        cfg = _tiny_model_config(fusion_kind=kind)
        model = ConditionAwareFuser(cfg, rng)
        images = rng.normal(size=(2, 4, 3, 32, 32))
        labels = rng.integers(0, cfg.num_classes, size=(2, 32, 32))
        attrs = [ConditionAttributes(weather="fog", time_of_day="night"),
                 ConditionAttributes(weather="clear", time_of_day="day", sky_condition="sunny")]
        checked = [p for name, p in model.named_parameters()
                   if name.endswith("blend") or name.startswith("fusion.") and p.size <= 40
                   or name in ("head.conv2.bias", "temperature.log_tau")]
        return (lambda: model.loss(model(images), labels, attrs, lambda_cond=0.5)), checked

    def ca2_case(target: CTTarget):
        attention = MultiHeadAttention(AttentionConfig(model_dim=4, num_heads=2), rng)
        rgb, sec, ct = t(6, 4), t(6, 4), t(4)
        return block(attention, rgb, ct, sec, call=lambda: ca2_window_attention(rgb, ct, sec, attention, target))

    def caa_case():
        fusion = CAAFusion(6, rng)
        fusion.fc.weight.data[...] = rng.normal(size=fusion.fc.weight.shape)
        pyramids = {m: FeaturePyramid([t(1, 2, 2, 2) for _ in range(4)]) for m in MODALITIES}
        ct = t(1, 6)
        inputs = [ct, fusion.fc.weight] + [pyramids[m][0] for m in MODALITIES]
        weights = rng.normal(size=(1, 2, 2, 2))
        return (lambda: sum(((fusion(pyramids, ct)[0][l]) * weights).sum() for l in range(4))), inputs

    def decode_fuse_case():
        fusion = MWCAFusion([4, 8, 12, 16], 8, rng, heads=1, window=2)
        for level in fusion.levels:
            for proj in level.project_back.values():
                proj.weight.data[...] = rng.normal(0.0, 0.3, size=proj.weight.shape)
        head = SegmentationHead([4, 8, 12, 16], 6, 4, rng)
        shape = lambda c, s: (1, c, s, s)
        sizes = [(4, 8), (8, 4), (12, 2), (16, 1)]
        rgb = FeaturePyramid([t(*shape(c, s)) for c, s in sizes])
        secondary = {m: FeaturePyramid([t(*shape(c, s)) for c, s in sizes]) for m in MODALITIES[1:]}
        ct = t(1, 8)
        labels = rng.integers(0, 6, size=(1, 32, 32))
        loss = lambda: cross_entropy(head(fusion(rgb, secondary, ct)).transpose(0, 2, 3, 1).reshape(-1, 6), labels.ravel())
        return loss, [rgb[0], secondary[Modality.LIDAR][1], ct, head.conv2.bias]

    def contrastive_case():
        from .condition import ConditionTokenGenerator, TextEncoder, load_vocabulary
        generator = ConditionTokenGenerator(16, 8, 1, 2, 1, 1, rng)
        encoder = TextEncoder(len(load_vocabulary()), 8, 2, 1, 2, 32, rng)
        top = t(3, 16, 1, 1)
        texts = ["A foggy driving scene.", "A rainy driving scene.", "A clear driving scene."]
        tau = Tensor(np.array(0.5), requires_grad=True)
        fn = lambda: condition_contrastive_loss(generator(top), encoder.encode_texts(texts), tau)
        return fn, [top, tau, generator.proj.weight, encoder.context]

    def text_case():
        from .condition import TextEncoder, load_vocabulary, tokenize
        encoder = TextEncoder(len(load_vocabulary()), 8, 2, 2, 4, 32, rng)
        ids = np.array(tokenize("A rainy driving scene at nighttime."))
        weights = rng.normal(size=8)
        return (lambda: (encoder(ids).pooled.reshape(8) * weights).sum()), [encoder.token_embedding]

    cases: Dict[str, Callable[[], Tuple[Callable[[], Tensor], List[Tensor]]]] = {
        "matmul": lambda: primitive(matmul, t(2, 3, 4), t(4, 5)),
        "add_mul_broadcast": lambda: primitive(lambda a, b: a * b + b - a, t(3, 4), t(1, 4)),
        "div": lambda: primitive(lambda a, b: a / b, t(3, 2), Tensor(rng.uniform(1.0, 2.0, size=(3, 1)), requires_grad=True)),
        "gelu": lambda: primitive(gelu, t(4, 5)),
        "softmax": lambda: primitive(softmax, t(3, 6)),
        "layer_norm": lambda: primitive(layer_norm, t(3, 8)),
        "exp_log": lambda: primitive(lambda a: (a * 0.3).exp() + (a * a + 1.0).log(), t(3, 3)),
        "sigmoid_pow": lambda: primitive(lambda a: a.sigmoid() + (a * a + 1.0) ** 1.5, t(4,)),
        "conv2d": lambda: primitive(lambda x, w, b: conv2d(x, w, b, stride=2, padding=1), t(2, 3, 5, 5), t(4, 3, 3, 3), t(4)),
        "upsample": lambda: primitive(lambda a: upsample_nearest2d(a, 2), t(1, 2, 3, 3)),
        "pad2d": lambda: primitive(lambda a: pad2d(a, 2, 1), t(2, 3, 3)),
        "concat_slice": lambda: primitive(lambda a, b: concat([a, b], axis=1)[:, 1:4], t(2, 3), t(2, 2)),
        "gather": lambda: primitive(lambda a: a[np.array([0, 2, 2])], t(4, 3)),
        "reshape_transpose": lambda: primitive(lambda a: a.reshape(3, 2, 4).transpose(2, 0, 1).mean(axis=(1, 2)), t(6, 4)),
        "cross_entropy": lambda: primitive(lambda a: cross_entropy(a, np.array([0, 2, 1, 2])), t(4, 3)),
        "composite": lambda: _random_composite(rng, 6),
        "linear": lambda: block(Linear(5, 3, rng), t(4, 5)),
        "mlp": lambda: block(MLP(4, 8, rng), t(3, 4)),
        "attention": lambda: block(MultiHeadAttention(AttentionConfig(model_dim=8, num_heads=2), rng), t(3, 8), t(5, 8)),
        "encoder_decoder": lambda: block(TransformerEncoderDecoder(8, 2, 2, 2, 1, rng), t(1, 8)),
        "backbone": lambda: _backbone_case(rng),
        "adapter": lambda: block(Adapter(8, rng), t(8, 2, 3)),
        "window_partition": lambda: primitive(lambda a: window_partition(a, 3)[0], t(2, 4, 5)),
        "ca2_q": lambda: ca2_case(CTTarget.Q),
        "ca2_kv": lambda: ca2_case(CTTarget.KV),
        "ca2_qkv": lambda: ca2_case(CTTarget.QKV),
        "caa_fuse": caa_case,
        "decode_fuse": decode_fuse_case,
        "text_encoder": text_case,
        "ct_contrastive": contrastive_case,
        "end_to_end_caa": lambda: tiny_model_case("caa"),
        "end_to_end_ca2": lambda: tiny_model_case("ca2"),
    }
    return cases


def _backbone_case(rng: np.random.Generator):
    backbone = Backbone(BackboneConfig(level_channels=[4, 8, 12, 16]), rng)
    image = Tensor(rng.normal(0.0, 0.5, size=(1, 3, 32, 32)), requires_grad=True)
    weights = [rng.normal(size=shape) for shape in backbone(image).shapes]
    fn = lambda: sum((level * w).sum() for level, w in zip(backbone(image), weights))
    return fn, [backbone.levels[0].downsample.bias, backbone.levels[3].blocks[0].conv2.bias]


def run_gradcheck_suite(names: Optional[Sequence[str]] = None, seed: int = 0, h: float = 1e-5,
                        tolerance: float = 1e-4) -> List[GradcheckResult]:
    """Compare backward() against central differences for every named case."""
    cases = gradcheck_cases(seed)
    selected = list(cases) if not names else list(names)
    unknown = [n for n in selected if n not in cases]
    if unknown:
        raise ConfigurationError(f"unknown gradcheck cases {unknown}; choose from {sorted(cases)}")
    results = []
    for name in selected:
        fn, inputs = cases[name]()
        error = gradcheck(fn, inputs, h)
        results.append(GradcheckResult(name=name, max_relative_error=error, passed=error <= tolerance))
        logger.info(f"gradcheck {name}: {error:.2e}")
    return results
