import os
import tempfile
import unittest

import numpy as np

from condfuse.condition import (CONDITION_CELLS, ConditionAttributes, GroundCondition, SkyCondition, TimeOfDay,
                                Weather)
from condfuse.exceptions import DatasetFormatError, ValidationError
from condfuse.fusion import Modality
from condfuse.scenes import (NUM_CLASSES, Scene, SceneDataset, color_oracle_accuracy, compute_normalization_stats,
                             draw_layout, generate_dataset, generate_split, modality_snr, read_dataset,
                             render_scene, sample_condition, write_dataset)

CLEAR_DAY = ConditionAttributes(weather="clear", time_of_day="day", sky_condition="sunny")
FOG_DAY = ConditionAttributes(weather="fog", time_of_day="day")
FOG_NIGHT = ConditionAttributes(weather="fog", time_of_day="night")
HEAVY_SNOW = ConditionAttributes(weather="snow", time_of_day="night", precipitation_type="snow",
                                 precipitation_level="heavy", ground_condition="snowy")


class LayoutTests(unittest.TestCase):
    def test_layout_is_deterministic_and_in_range(self):
        first = draw_layout(11)

        np.testing.assert_array_equal(first, draw_layout(11))
        self.assertEqual((32, 32), first.shape)
        self.assertLess(first.max(), NUM_CLASSES)

    def test_layout_scales_with_size(self):
        self.assertEqual((64, 64), draw_layout(3, size=64).shape)

    def test_condition_does_not_move_geometry(self):
        clear = render_scene(CLEAR_DAY, 5)
        snow = render_scene(HEAVY_SNOW, 5)

        np.testing.assert_array_equal(clear.semantic_map, snow.semantic_map)


class RenderTests(unittest.TestCase):
    def test_render_is_deterministic(self):
        first = render_scene(FOG_NIGHT, 21)
        second = render_scene(FOG_NIGHT, 21)

        np.testing.assert_array_equal(first.images, second.images)
        self.assertEqual((4, 3, 32, 32), first.images.shape)
        self.assertEqual(np.float32, first.images.dtype)

    def test_size_must_be_multiple_of_32(self):
        with self.assertRaises(ValidationError):
            render_scene(CLEAR_DAY, 0, size=48)

    def test_clean_camera_is_the_palette(self):
        self.assertEqual(1.0, color_oracle_accuracy(render_scene(FOG_NIGHT, 2, clean=True)))

    def test_fog_hurts_the_camera(self):
        self.assertLess(color_oracle_accuracy(render_scene(FOG_DAY, 4)), color_oracle_accuracy(render_scene(CLEAR_DAY, 4)))

    def test_color_oracle_bounds(self):
        clear = np.mean([color_oracle_accuracy(render_scene(CLEAR_DAY, seed)) for seed in range(100)])
        fog = np.mean([color_oracle_accuracy(render_scene(FOG_NIGHT, seed)) for seed in range(100)])

        self.assertGreaterEqual(clear, 0.95)
        self.assertLessEqual(fog, 0.6)

    def test_fog_thins_lidar_returns(self):
        clear = np.count_nonzero(render_scene(CLEAR_DAY, 8).image(Modality.LIDAR).any(axis=0))
        fog = np.count_nonzero(render_scene(FOG_DAY, 8).image(Modality.LIDAR).any(axis=0))

        self.assertLess(fog, clear)

    def test_radar_ignores_the_condition(self):
        clear = render_scene(CLEAR_DAY, 9)
        snow = render_scene(HEAVY_SNOW, 9)

        np.testing.assert_array_equal(clear.image(Modality.RADAR), snow.image(Modality.RADAR))
        self.assertEqual(modality_snr(clear, Modality.RADAR), modality_snr(snow, Modality.RADAR))

    def test_night_lowers_camera_snr(self):
        day = ConditionAttributes(weather="clear", time_of_day="day")
        night = ConditionAttributes(weather="clear", time_of_day="night")

        self.assertLess(modality_snr(render_scene(night, 3), Modality.RGB), modality_snr(render_scene(day, 3), Modality.RGB))


class SampleConditionTests(unittest.TestCase):
    def test_dependent_attributes_follow_weather(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            attrs = sample_condition(rng)
            if attrs.weather == Weather.RAIN:
                self.assertEqual(GroundCondition.WET, attrs.ground_condition)
            if attrs.weather == Weather.SNOW:
                self.assertEqual(GroundCondition.SNOWY, attrs.ground_condition)
            if attrs.weather == Weather.CLEAR and attrs.time_of_day == TimeOfDay.DAY:
                self.assertEqual(SkyCondition.SUNNY, attrs.sky_condition)
            if attrs.weather in (Weather.CLEAR, Weather.FOG):
                self.assertIsNone(attrs.precipitation_type)

    def test_cells_are_uniform(self):
        rng = np.random.default_rng(2)

        counts = np.bincount([sample_condition(rng).cell_index for _ in range(8000)], minlength=8)

        self.assertEqual(8, len(counts))
        self.assertTrue(np.all(np.abs(counts - 1000) <= 100), counts)

    def test_requested_cell_is_honoured(self):
        rng = np.random.default_rng(1)
        for cell, name in enumerate(CONDITION_CELLS):
            self.assertEqual(name, sample_condition(rng, cell).cell)

    def test_stratified_split_cycles_cells(self):
        scenes = generate_split(16, 0, "val", stratified=True)

        self.assertEqual(list(range(8)) * 2, [s.attrs.cell_index for s in scenes])

    def test_split_streams_differ(self):
        train = generate_split(4, 0, "train")
        test = generate_split(4, 0, "test")

        self.assertNotEqual([s.seed for s in train], [s.seed for s in test])
        self.assertEqual([s.seed for s in train], [s.seed for s in generate_split(4, 0, "train")])


class DatasetFileTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "train.cfd")
        self.scenes = generate_split(3, 2, "train")

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        manifest = write_dataset(self.scenes, self.path)

        loaded = read_dataset(self.path)

        self.assertEqual(3, manifest.count)
        self.assertEqual(manifest, loaded.manifest)
        for original, restored in zip(self.scenes, loaded.scenes):
            self.assertEqual(original.attrs, restored.attrs)
            self.assertEqual(original.seed, restored.seed)
            np.testing.assert_array_equal(original.semantic_map, restored.semantic_map)
            np.testing.assert_array_equal(original.images, restored.images)

    def test_bad_magic(self):
        with open(self.path, "wb") as fh:
            fh.write(b"XXXX" + b"\x00" * 32)

        with self.assertRaises(DatasetFormatError) as ctx:
            read_dataset(self.path)

        self.assertEqual(0, ctx.exception.offset)

    def test_truncated_scene(self):
        write_dataset(self.scenes, self.path)
        with open(self.path, "rb") as fh:
            raw = fh.read()
        with open(self.path, "wb") as fh:
            fh.write(raw[:-100])

        with self.assertRaises(DatasetFormatError):
            read_dataset(self.path)

    def test_trailing_bytes(self):
        write_dataset(self.scenes, self.path)
        with open(self.path, "ab") as fh:
            fh.write(b"\x00")

        with self.assertRaises(DatasetFormatError):
            read_dataset(self.path)

    def test_mixed_sizes_leave_no_file(self):
        scenes = self.scenes + [render_scene(CLEAR_DAY, 4, size=64)]

        with self.assertRaises(ValidationError):
            write_dataset(scenes, self.path)

        self.assertFalse(os.path.exists(self.path))

    def test_evaluation_split_needs_training_stats(self):
        with self.assertRaises(ValidationError):
            write_dataset(self.scenes, self.path, split="val")


class NormalizationTests(unittest.TestCase):
    def test_training_split_is_standardized(self):
        scenes = generate_split(6, 3, "train")

        dataset = SceneDataset.from_scenes(scenes, scenes[:2], scenes[2:4])

        np.testing.assert_allclose(np.zeros((4, 3)), dataset.train.images.mean(axis=(0, 3, 4)), atol=1e-9)
        self.assertEqual(np.float64, dataset.train.images.dtype)
        self.assertEqual((6, 32, 32), dataset.train.labels.shape)

    def test_constant_channels_keep_unit_scale(self):
        scene = Scene(semantic_map=np.zeros((32, 32), dtype=np.uint8), images=np.ones((4, 3, 32, 32), dtype=np.float32),
                      attrs=CLEAR_DAY, seed=0)

        with self.assertLogs("condfuse.scenes", level="WARNING"):
            stats = compute_normalization_stats([scene])

        np.testing.assert_array_equal(np.ones((4, 3)), stats.std)

    def test_unknown_split_name(self):
        scenes = generate_split(2, 0, "train")
        dataset = SceneDataset.from_scenes(scenes, scenes, scenes)

        with self.assertRaises(ValidationError):
            dataset.split("holdout")

    def test_generate_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifests = generate_dataset(tmp, train=4, val=8, test=8, seed=0)
            dataset = SceneDataset.load(tmp)

        self.assertEqual({"train": 4, "val": 8, "test": 8}, {k: m.count for k, m in manifests.items()})
        self.assertEqual(sorted(range(8)), sorted(dataset.test.cells.tolist()))
        np.testing.assert_allclose(dataset.stats.mean, manifests["val"].stats["mean"])


if __name__ == "__main__":
    unittest.main()
