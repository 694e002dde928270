import io
import os
import tempfile
import unittest
from unittest.mock import patch

from condfuse.cli import _parse_grid, build_parser, main
from condfuse.exceptions import ConfigurationError
from condfuse.harness import GradcheckResult

TINY_MODEL = [
    "--set", "model.backbone.level_channels=[4, 8, 12, 16]",
    "--set", "model.ct_dim=8",
    "--set", "model.text_layers=1",
    "--set", "model.ct_encoder_layers=1",
    "--set", "model.ct_decoder_layers=1",
    "--set", "model.context_tokens=2",
    "--set", "model.decoder_channels=4",
    "--set", "model.window=2",
    "--set", "train.max_steps=1",
    "--set", "train.batch_size=4",
]


class ParserTests(unittest.TestCase):
    def test_command_is_required(self):
        with patch("sys.stderr", new_callable=io.StringIO):
            with self.assertRaises(SystemExit):
                build_parser().parse_args([])

    def test_repeated_overrides(self):
        args = build_parser().parse_args(["--set", "a=1", "--set", "b=2", "params"])

        self.assertEqual(["a=1", "b=2"], args.overrides)
        self.assertEqual("params", args.command)

    def test_grid_parsing(self):
        self.assertEqual({"train.lambda_cond": [0, 0.5]}, _parse_grid(["train.lambda_cond=[0, 0.5]"]))
        with self.assertRaises(ConfigurationError):
            _parse_grid(["train.lambda_cond=0.5"])


class MainTests(unittest.TestCase):
    def test_params(self):
        with patch("sys.stdout", new_callable=io.StringIO) as out:
            code = main(["params"])

        self.assertEqual(0, code)
        self.assertIn("backbone+fusion 481172 vs 1744964", out.getvalue())

    def test_unknown_setting_fails(self):
        self.assertEqual(1, main(["--set", "optimizer.lr=1", "params"]))

    def test_check_grad_exit_code_follows_results(self):
        results = [GradcheckResult(name="matmul", max_relative_error=1e-9, passed=True),
                   GradcheckResult(name="softmax", max_relative_error=1e-2, passed=False)]
        with patch("condfuse.cli.run_gradcheck_suite", return_value=results) as suite:
            with patch("sys.stdout", new_callable=io.StringIO) as out:
                code = main(["check-grad", "--only", "matmul", "softmax", "--tolerance", "1e-3"])

        self.assertEqual(1, code)
        suite.assert_called_once_with(["matmul", "softmax"], tolerance=1e-3)
        self.assertIn("FAIL", out.getvalue())

    def test_missing_dataset_fails_cleanly(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["--set", f"data_dir={tmp}/absent", "train", "--out", tmp])

        self.assertEqual(1, code)

    def test_generate_train_evaluate_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            data_dir = os.path.join(tmp, "data")
            run_dir = os.path.join(tmp, "run")
            common = ["--set", f"data_dir={data_dir}"] + TINY_MODEL

            with patch("sys.stdout", new_callable=io.StringIO) as out:
                self.assertEqual(0, main(common + ["gen-data", "--train", "8", "--val", "8", "--test", "8"]))
                self.assertEqual(0, main(common + ["train", "--out", run_dir]))
                self.assertEqual(0, main(["--set", f"data_dir={data_dir}", "eval", "--checkpoint", run_dir, "--no-probe"]))
                self.assertEqual(0, main(["--set", f"data_dir={data_dir}", "report-weights", "--checkpoint", run_dir]))

            for name in ("model.cfw", "settings.json", "report.json", "train.log", "caa_weights.csv", "caa_weights.svg"):
                self.assertTrue(os.path.exists(os.path.join(run_dir, name)), name)
            self.assertIn("test mIoU", out.getvalue())


if __name__ == "__main__":
    unittest.main()
