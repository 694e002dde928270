import csv
import math
import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from condfuse.condition import CONDITION_CELLS
from condfuse.config import ModelConfig, Settings, TrainConfig
from condfuse.exceptions import ConfigurationError, TrainingDivergedError, ValidationError
from condfuse.harness import (CSV_COLUMNS, AblationJob, AblationRow, AdamW, RunReport, _tiny_model_config,
                              build_grid, build_model, caa_weights_by_cell, condition_probe, confusion_matrix,
                              count_parameters, evaluate_miou, iou_from_confusion, read_ablation_csv,
                              report_caa_weights, run_ablation, run_gradcheck_suite, run_job, summarize, train,
                              write_ablation_csv)
from condfuse.model import ConditionAwareFuser
from condfuse.scenes import SceneDataset, generate_split
from condfuse.tensorcore import Parameter, Tensor


def _tiny_dataset():
    return SceneDataset.from_scenes(
        generate_split(8, 0, "train"),
        generate_split(8, 0, "val", stratified=True),
        generate_split(8, 0, "test", stratified=True),
    )


def _tiny_settings(**train_updates):
    values = dict(epochs=2, batch_size=4, max_steps=3, eval_batch_size=8)
    values.update(train_updates)
    return Settings(model=_tiny_model_config(), train=TrainConfig(**values))


class MetricTests(unittest.TestCase):
    def test_two_class_confusion_and_iou(self):
        cm = confusion_matrix(np.array([0, 0, 1, 1]), np.array([0, 0, 0, 1]), 2)

        iou, miou = iou_from_confusion(cm)

        np.testing.assert_array_equal(np.array([[2, 1], [0, 1]]), cm)
        np.testing.assert_allclose(np.array([2.0 / 3.0, 0.5]), iou)
        self.assertAlmostEqual(7.0 / 12.0, miou, places=12)

    def test_absent_classes_are_excluded(self):
        cm = confusion_matrix(np.array([0, 1, 2]), np.array([0, 1, 1]), 3)

        iou, miou = iou_from_confusion(cm)

        self.assertTrue(math.isnan(iou[2]))
        self.assertAlmostEqual((1.0 + 0.5) / 2.0, miou, places=12)

    def test_ground_truth_out_of_range(self):
        with self.assertRaises(ValidationError):
            confusion_matrix(np.array([0]), np.array([4]), 3)


class AdamWTests(unittest.TestCase):
    def test_first_step_moves_by_learning_rate(self):
        p = Parameter(np.array([1.0, -1.0]))
        p.grad = np.array([2.0, -0.5])
        optimizer = AdamW([p], lr=0.1, weight_decay=0.01)

        optimizer.step()

        np.testing.assert_allclose(np.array([0.999 - 0.1, -0.999 + 0.1]), p.data, atol=1e-7)
        self.assertEqual(1, optimizer.steps)

    def test_parameters_without_gradient_are_skipped(self):
        p = Parameter(np.array([1.0]))
        optimizer = AdamW([p], lr=0.1)

        optimizer.step()

        self.assertEqual(1.0, p.data[0])

    def test_zero_grad(self):
        p = Parameter(np.array([1.0]))
        p.grad = np.array([1.0])

        AdamW([p]).zero_grad()

        self.assertIsNone(p.grad)


class ParameterCountTests(unittest.TestCase):
    def test_default_shared_model_halves_fusion_path(self):
        model = ConditionAwareFuser(ModelConfig(), np.random.default_rng(0))

        count = count_parameters(model)

        self.assertEqual(481172, count.fusion_path)
        self.assertEqual(1744964, count.reference_fusion_path)
        self.assertLess(count.reduction_ratio, 0.5)
        self.assertEqual(436176, count.by_group["backbone"])
        self.assertEqual(44736, count.by_group["adapters"])
        self.assertEqual(model.num_parameters(), count.total)

    def test_groups_follow_top_level_modules(self):
        count = count_parameters(build_model(_tiny_model_config(), 0))

        self.assertEqual({"backbone", "adapters", "ct_generator", "text_encoder", "temperature", "fusion", "head"},
                         set(count.by_group))


class TrainingTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = _tiny_dataset()

    def test_training_is_deterministic_and_logged(self):
        settings = _tiny_settings()
        with tempfile.TemporaryDirectory() as tmp:
            _, first = train(settings, self.dataset, run_dir=tmp)
            with open(os.path.join(tmp, "train.log"), encoding="utf-8") as fh:
                lines = fh.read().splitlines()
        _, second = train(settings, self.dataset, evaluate=False)

        self.assertEqual(first.step_losses, second.step_losses)
        self.assertEqual(3, len(first.step_losses))
        self.assertEqual(2, len(first.loss_curve))
        self.assertTrue(lines[0].startswith("epoch 1 steps 2 loss "))
        self.assertEqual({"val", "test"}, set(first.split_miou))
        self.assertEqual(set(CONDITION_CELLS), set(first.cell_miou))
        self.assertEqual(set(CONDITION_CELLS), set(first.caa_weights))

    def test_single_scene_is_overfit(self):
        dataset = SceneDataset.from_scenes(*(generate_split(1, 3, name) for name in ("train", "val", "test")))
        settings = _tiny_settings(epochs=50, batch_size=1, max_steps=50, dropout_p=0.0, learning_rate=1e-3)

        _, report = train(settings, dataset, evaluate=False)

        losses = report.step_losses
        self.assertEqual(50, len(losses))
        for i in range(len(losses) - 10):
            self.assertLess(losses[i + 10], losses[i], f"step {i}")

    def test_seed_changes_the_run(self):
        _, first = train(_tiny_settings(seed=1, max_steps=1), self.dataset, evaluate=False)
        _, second = train(_tiny_settings(seed=2, max_steps=1), self.dataset, evaluate=False)

        self.assertNotEqual(first.step_losses, second.step_losses)

    def test_non_finite_loss_stops_training(self):
        with patch.object(ConditionAwareFuser, "loss", return_value=Tensor(np.array(np.nan))):
            with self.assertRaises(TrainingDivergedError) as ctx:
                train(_tiny_settings(), self.dataset, evaluate=False)

        self.assertEqual(0, ctx.exception.step)

    def test_frozen_backbone_keeps_its_weights(self):
        settings = _tiny_settings(freeze_backbone=True, max_steps=1)
        reference = build_model(settings.model, settings.train.seed).backbone.state_dict()

        model, _ = train(settings, self.dataset, evaluate=False)

        for name, value in model.backbone.state_dict().items():
            np.testing.assert_array_equal(reference[name], value, err_msg=name)

    def test_evaluation_scores_are_bounded(self):
        model = build_model(_tiny_model_config(), 0)

        result = evaluate_miou(model, self.dataset.test, batch_size=4)

        self.assertGreaterEqual(result.miou, 0.0)
        self.assertLessEqual(result.miou, 1.0)
        self.assertEqual(6, len(result.per_class_iou))


class ConditionReportTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = _tiny_dataset()

    def test_untrained_caa_weights_are_uniform(self):
        model = build_model(_tiny_model_config(), 0)

        table = caa_weights_by_cell(model, self.dataset.test)

        self.assertEqual(list(CONDITION_CELLS), list(table))
        for row in table.values():
            np.testing.assert_allclose([25.0, 25.0, 25.0, 25.0], row)

    def test_absent_modalities_report_zero(self):
        model = build_model(_tiny_model_config(), 0)

        table = caa_weights_by_cell(model, self.dataset.test, ["rgb", "lidar"])

        np.testing.assert_allclose([50.0, 50.0, 0.0, 0.0], table["fog-night"])

    def test_weights_need_a_caa_model(self):
        model = build_model(_tiny_model_config(fusion_kind="mean"), 0)

        with self.assertRaises(ConfigurationError):
            caa_weights_by_cell(model, self.dataset.test)

    def test_report_files(self):
        model = build_model(_tiny_model_config(), 0)

        with tempfile.TemporaryDirectory() as tmp:
            report_caa_weights(model, self.dataset.test, tmp)
            with open(os.path.join(tmp, "caa_weights.csv"), newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
            self.assertTrue(os.path.getsize(os.path.join(tmp, "caa_weights.svg")) > 0)

        self.assertEqual(["cell", "rgb", "lidar", "radar", "event"], rows[0])
        self.assertEqual(9, len(rows))

    def test_condition_probe(self):
        model = build_model(_tiny_model_config(), 0)

        result = condition_probe(model, self.dataset.train, self.dataset.test, steps=20)

        self.assertGreaterEqual(result.test_accuracy, 0.0)
        self.assertLessEqual(result.train_accuracy, 1.0)

    def test_probe_needs_condition_token(self):
        model = build_model(_tiny_model_config(fusion_kind="learned_static"), 0)

        with self.assertRaises(ConfigurationError):
            condition_probe(model, self.dataset.train, self.dataset.test)

    def test_rgb_probe_works_without_condition_token(self):
        model = build_model(_tiny_model_config(fusion_kind="mean"), 0)

        result = condition_probe(model, self.dataset.train, self.dataset.test, steps=20, features="rgb")

        self.assertGreaterEqual(result.test_accuracy, 0.0)
        self.assertLessEqual(result.train_accuracy, 1.0)

    def test_unknown_probe_features_raise(self):
        model = build_model(_tiny_model_config(), 0)

        with self.assertRaises(ConfigurationError):
            condition_probe(model, self.dataset.train, self.dataset.test, features="lidar")


class AblationTests(unittest.TestCase):
    def test_build_grid_repeats_seeds(self):
        jobs = build_grid(["fusion", "modalities"], [1, 2, 3])

        self.assertEqual((5 + 4) * 3, len(jobs))
        self.assertEqual({"train.modalities": ["rgb", "lidar"]},
                         next(j.overrides for j in jobs if j.value == "CL"))

    def test_custom_grid_labels(self):
        jobs = build_grid([], [0], custom={"train.lambda_cond": [0.0, 1.0], "model.window": [2]})

        self.assertEqual(["train.lambda_cond=0.0;model.window=2", "train.lambda_cond=1.0;model.window=2"],
                         [j.value for j in jobs])
        self.assertEqual("grid", jobs[0].axis)

    def test_unknown_axis(self):
        with self.assertRaises(ConfigurationError):
            build_grid(["optimizer"], [1])

    def test_failed_job_becomes_error_row(self):
        job = AblationJob("modalities", "L", 1, {"train.modalities": ["lidar"]})

        row = run_job(Settings(), None, job)

        self.assertIsNone(row.miou)
        self.assertIn("invalid configuration", row.error)

    def test_run_ablation_writes_csvs(self):
        report = RunReport(seed=1, split_miou={"test": 0.5}, cell_miou={"fog-day": 0.25})
        jobs = build_grid(["condition_loss"], [1, 2])

        with tempfile.TemporaryDirectory() as tmp:
            with patch("condfuse.harness.train", return_value=(None, report)) as mock_train:
                rows = run_ablation(Settings(), None, jobs, out_dir=tmp)
            restored = read_ablation_csv(os.path.join(tmp, "ablation.csv"))
            with open(os.path.join(tmp, "ablation_summary.csv"), newline="", encoding="utf-8") as fh:
                summary = list(csv.DictReader(fh))

        self.assertEqual(4, mock_train.call_count)
        self.assertEqual(0.0, mock_train.call_args_list[0].args[0].train.lambda_cond)
        self.assertEqual([0.5] * 4, [r.miou for r in rows])
        self.assertEqual([(r.axis, r.value, r.seed) for r in rows], [(r.axis, r.value, r.seed) for r in restored])
        self.assertEqual({"fog-day": 0.25}, restored[0].cell_miou)
        self.assertEqual(["without", "with"], [s["value"] for s in summary])
        self.assertEqual("0.0", summary[0]["mIoU_std"])

    def test_csv_round_trip_keeps_errors(self):
        rows = [
            AblationRow("fusion", "caa", 1, 0.625, {"clear-day": 0.5}),
            AblationRow("fusion", "ca2", 1, None, error="ct_target q needs a Condition Token"),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "ablation.csv")
            write_ablation_csv(rows, path)
            with open(path, newline="", encoding="utf-8") as fh:
                header = next(csv.reader(fh))
            restored = read_ablation_csv(path)

        self.assertEqual(CSV_COLUMNS, header)
        self.assertEqual(0.625, restored[0].miou)
        self.assertIsNone(restored[1].miou)
        self.assertEqual(rows[1].error, restored[1].error)

    def test_read_rejects_foreign_columns(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "other.csv")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("a,b\n1,2\n")
            with self.assertRaises(ValidationError):
                read_ablation_csv(path)

    def test_summary_statistics(self):
        rows = [
            AblationRow("fusion", "caa", 1, 0.5, {"clear-day": 0.4}),
            AblationRow("fusion", "caa", 2, 0.7, {"clear-day": 0.6}),
            AblationRow("fusion", "caa", 3, None, error="diverged"),
        ]

        (entry,) = summarize(rows)

        self.assertEqual(2, entry["runs"])
        self.assertEqual(1, entry["failed"])
        self.assertAlmostEqual(0.6, entry["mIoU_mean"], places=12)
        self.assertAlmostEqual(math.sqrt(0.02), entry["mIoU_std"], places=12)
        self.assertAlmostEqual(0.5, entry["clear-day"], places=12)
        self.assertIsNone(entry["fog-day"])


class GradcheckSuiteTests(unittest.TestCase):
    def test_selected_cases_pass(self):
        names = ["matmul", "softmax", "layer_norm", "conv2d", "window_partition", "ca2_qkv", "caa_fuse",
                 "adapter", "ct_contrastive", "end_to_end_caa"]

        results = run_gradcheck_suite(names)

        self.assertEqual(names, [r.name for r in results])
        for result in results:
            self.assertTrue(result.passed, f"{result.name}: {result.max_relative_error}")

    def test_unknown_case(self):
        with self.assertRaises(ConfigurationError):
            run_gradcheck_suite(["fft"])


if __name__ == "__main__":
    unittest.main()
