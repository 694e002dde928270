import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from pydantic import ValidationError as PydanticValidationError

from condfuse.config import (ModelConfig, Settings, TrainConfig, flatten_config, parse_assignments,
                             parse_config_file, parse_value, unflatten)
from condfuse.exceptions import ConfigurationError
from condfuse.fusion import CTTarget, FusionKind, Modality


class SettingsTests(unittest.TestCase):
    def test_defaults(self):
        with patch.dict(os.environ, {}, clear=True):
            settings = Settings.from_env()

        self.assertEqual("INFO", settings.log_level)
        self.assertEqual(Path("data"), settings.data_dir)
        self.assertEqual(FusionKind.CAA, settings.model.fusion_kind)
        self.assertEqual(0.5, settings.train.lambda_cond)
        self.assertEqual(list(Modality), settings.train.modalities)

    def test_environment_overrides_nested_fields(self):
        env = {
            "CONDFUSE_LOG_LEVEL": "DEBUG",
            "CONDFUSE_TRAIN__EPOCHS": "3",
            "CONDFUSE_MODEL__FUSION_KIND": "ca2",
        }
        with patch.dict(os.environ, env, clear=True):
            settings = Settings.from_env()

        self.assertEqual("DEBUG", settings.log_level)
        self.assertEqual(3, settings.train.epochs)
        self.assertEqual(FusionKind.CA2, settings.model.fusion_kind)

    def test_file_then_overrides(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.conf")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("# toy run\n")
                fh.write("model.fusion_kind = ca2\n")
                fh.write("model.ct_target = kv  # keys only\n")
                fh.write("train.epochs = 5\n")
                fh.write('train.modalities = ["rgb", "radar"]\n')
            with patch.dict(os.environ, {}, clear=True):
                settings = Settings.load(path, ["train.epochs=7"])

        self.assertEqual(FusionKind.CA2, settings.model.fusion_kind)
        self.assertEqual(CTTarget.KV, settings.model.ct_target)
        self.assertEqual(7, settings.train.epochs)
        self.assertEqual([Modality.RGB, Modality.RADAR], settings.train.modalities)

    def test_file_beats_environment(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.conf")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("train.epochs = 9\n")
            with patch.dict(os.environ, {"CONDFUSE_TRAIN__EPOCHS": "2"}, clear=True):
                settings = Settings.load(path)

        self.assertEqual(9, settings.train.epochs)

    def test_load_starts_from_environment(self):
        with patch.dict(os.environ, {"CONDFUSE_TRAIN__SEED": "5"}, clear=True):
            with patch.object(Settings, "from_env", wraps=Settings.from_env) as from_env:
                settings = Settings.load(overrides=["train.epochs=3"])

        from_env.assert_called_once_with()
        self.assertEqual(5, settings.train.seed)
        self.assertEqual(3, settings.train.epochs)

    def test_invalid_environment_becomes_configuration_error(self):
        with patch.dict(os.environ, {"CONDFUSE_TRAIN__EPOCHS": "0"}, clear=True):
            with self.assertRaises(ConfigurationError):
                Settings.load()

    def test_unknown_top_level_key(self):
        with self.assertRaises(ConfigurationError):
            Settings.load(overrides=["optimizer.lr=0.1"])

    def test_invalid_value_becomes_configuration_error(self):
        with self.assertRaises(ConfigurationError):
            Settings.load(overrides=["train.modalities=[\"lidar\"]"])

    def test_missing_file(self):
        with self.assertRaises(ConfigurationError):
            Settings.load("/nonexistent/condfuse.conf")

    def test_with_overrides(self):
        settings = Settings()

        updated = settings.with_overrides({"model.fusion_kind": "mean", "train.seed": 4})

        self.assertEqual(FusionKind.MEAN, updated.model.fusion_kind)
        self.assertEqual(4, updated.train.seed)
        self.assertEqual(FusionKind.CAA, settings.model.fusion_kind)

    def test_with_overrides_rejects_unknown_keys(self):
        with self.assertRaises(ConfigurationError):
            Settings().with_overrides({"train.momentum": 0.9})


class ModelConfigTests(unittest.TestCase):
    def test_image_size_must_divide_by_32(self):
        with self.assertRaises(PydanticValidationError):
            ModelConfig(image_size=48)

    def test_ct_dim_must_divide_by_heads(self):
        with self.assertRaises(PydanticValidationError):
            ModelConfig(ct_dim=10, transformer_heads=4)

    def test_grid_tokens(self):
        self.assertEqual(1, ModelConfig().grid_tokens)
        self.assertEqual(4, ModelConfig(image_size=64).grid_tokens)

    def test_extra_fields_are_rejected(self):
        with self.assertRaises(PydanticValidationError):
            ModelConfig(fusion="caa")

    def test_train_modalities_are_sorted_and_need_rgb(self):
        self.assertEqual([Modality.RGB, Modality.EVENT], TrainConfig(modalities=["event", "rgb"]).modalities)
        with self.assertRaises(PydanticValidationError):
            TrainConfig(modalities=["lidar"])


class ParsingTests(unittest.TestCase):
    def test_parse_value(self):
        self.assertEqual(3, parse_value("3"))
        self.assertEqual([1, 2], parse_value("[1, 2]"))
        self.assertEqual("caa", parse_value("caa"))
        self.assertEqual(True, parse_value("true"))

    def test_assignments_need_equals(self):
        with self.assertRaises(ConfigurationError):
            parse_assignments(["train.epochs"])

    def test_empty_key(self):
        with self.assertRaises(ConfigurationError):
            parse_assignments([" = 3"])

    def test_file_comments_and_blank_lines(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.conf")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("\n# comment\ntrain.batch_size = 4 # trailing\n")
            values = parse_config_file(path)

        self.assertEqual({"train.batch_size": 4}, values)

    def test_flatten_and_unflatten(self):
        nested = {"model": {"backbone": {"blocks_per_level": 2}, "ct_dim": 8}, "log_level": "INFO"}

        flat = flatten_config(nested)

        self.assertEqual({"model.backbone.blocks_per_level": 2, "model.ct_dim": 8, "log_level": "INFO"}, flat)
        self.assertEqual(nested, unflatten(flat))

    def test_unflatten_rejects_scalar_parent(self):
        with self.assertRaises(ConfigurationError):
            unflatten({"model": 1, "model.ct_dim": 8})


if __name__ == "__main__":
    unittest.main()
