# tests/test_cli.py
import json
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from click.testing import CliRunner

from layeranat.checkpoint import file_hash
from layeranat.main import EXIT_DIVERGED, EXIT_INVALID, EXIT_OK, cli, main, parse_layers
from layeranat.optim import DivergenceError
from layeranat.reports import closure, read_artifact, write_jsonl
from layeranat.schemas import RunConfig
from tests.test_budget import reference_map

TINY_CONFIG = {
    "model_dim": 8,
    "head_count": 2,
    "block_size": 16,
    "batch_size": 2,
    "corpus_passes": 1,
    "eval_every": 2,
}


class TestCli(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.config = cls.dir / "config.json"
        cls.config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
        cls.runner = CliRunner()
        cls.train = cls.runner.invoke(
            cli, ["train-uniform", "--config", str(cls.config), "--steps", "3", "--out", str(cls.dir / "run")]
        )

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def invoke(self, *args):
        return self.runner.invoke(cli, [*args, "--config", str(self.config)])

    def test_train_writes_checkpoint_history_and_timing(self):
        self.assertEqual(self.train.exit_code, EXIT_OK, self.train.output)
        run = self.dir / "run"
        self.assertTrue((run / "uniform.bin").is_file())
        history = read_artifact(run / "uniform_history.json")
        self.assertEqual(history["kind"], "uniform-history")
        self.assertEqual(history["result"]["steps_total"], 3)
        self.assertNotIn("wall_time", history["result"])
        self.assertIn("wall_time", json.loads((run / "uniform_history.json.timing.json").read_text()))
        self.assertIn("3 steps", self.train.output)

    def test_rerun_gives_identical_history(self):
        again = self.dir / "again"
        result = self.invoke("train-uniform", "--steps", "3", "--out", str(again))
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertEqual(
            (again / "uniform_history.json").read_bytes(), (self.dir / "run" / "uniform_history.json").read_bytes()
        )
        self.assertEqual((again / "uniform.bin").read_bytes(), (self.dir / "run" / "uniform.bin").read_bytes())

    def test_ablate_recover_budget_report(self):
        checkpoint = str(self.dir / "run" / "uniform.bin")
        out = self.dir / "diag"
        result = self.invoke("diag", "ablate", "--checkpoint", checkpoint, "--out", str(out))
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertIn("baseline (0%)", result.output)
        self.assertEqual(len(read_artifact(out / "importance.jsonl")["result"]), 12)

        result = self.invoke(
            "diag",
            "recover",
            "--checkpoint",
            checkpoint,
            "--layers",
            "0,11",
            "--max-steps",
            "2",
            "--eval-every",
            "1",
            "--out",
            str(out),
        )
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertEqual([c["layer"] for c in read_artifact(out / "recovery.jsonl")["result"]], [0, 11])
        self.assertTrue((out / "recovered" / "recovered_L11.bin").is_file())

        result = self.invoke(
            "budget",
            "--importance",
            str(out / "importance.jsonl"),
            "--recovery",
            str(out / "recovery.jsonl"),
            "--out",
            str(out),
        )
        self.assertEqual(result.exit_code, EXIT_INVALID)
        self.assertIn("layers", result.output)

        result = self.runner.invoke(cli, ["report", str(out / "importance.jsonl"), str(out / "recovery.jsonl")])
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertIn("(importance) ==", result.output)
        self.assertIn("(recovery) ==", result.output)

    def test_budget_from_reference_artifacts(self):
        records, curves = reference_map()
        block = closure(RunConfig(), None, None)
        importance = write_jsonl(self.dir / "ref" / "importance.jsonl", "importance", block, records)
        recovery = write_jsonl(self.dir / "ref" / "recovery.jsonl", "recovery", block, curves)
        result = self.invoke(
            "budget", "--importance", str(importance), "--recovery", str(recovery), "--out", str(self.dir / "ref")
        )
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertIn("total-steps: 2760 vs 6000 uniform (54% reduction)", result.output)
        self.assertEqual(read_artifact(self.dir / "ref" / "budget.json")["result"]["total_steps"], 2760)

    def test_comparison_closure_names_both_checkpoints(self):
        out = self.dir / "compare"
        result = self.invoke("compare", "--steps", "6", "--out", str(out))
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        expected = {"growth": file_hash(out / "growth.bin"), "uniform": file_hash(out / "uniform.bin")}
        self.assertEqual(read_artifact(out / "comparison.json")["closure"]["checkpoint_hash"], expected)

        again = self.dir / "compare_again"
        result = self.invoke(
            "compare",
            "--growth-history",
            str(out / "growth_history.json"),
            "--uniform-history",
            str(out / "uniform_history.json"),
            "--out",
            str(again),
        )
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertEqual(read_artifact(again / "comparison.json")["closure"]["checkpoint_hash"], expected)

    def test_missing_path_is_invalid(self):
        result = self.invoke("diag", "ablate", "--checkpoint", str(self.dir / "absent.bin"))
        self.assertEqual(result.exit_code, EXIT_INVALID)

    def test_garbage_checkpoint_is_invalid(self):
        garbage = self.dir / "garbage.bin"
        garbage.write_bytes(b"not a checkpoint")
        result = self.invoke("diag", "ablate", "--checkpoint", str(garbage), "--out", str(self.dir / "g"))
        self.assertEqual(result.exit_code, EXIT_INVALID)
        self.assertIn("Error:", result.output)

    def test_manifest_without_spec_is_invalid(self):
        bare = self.dir / "bare.bin"
        bare.write_bytes(b'LAYERANAT1\n{"version": 1}\n')
        result = self.invoke("diag", "ablate", "--checkpoint", str(bare), "--out", str(self.dir / "bare"))
        self.assertEqual(result.exit_code, EXIT_INVALID)
        self.assertIn("manifest lacks 'spec'", result.output)
        self.assertNotIn("KeyError", result.output)

    def test_divergence_exits_with_two(self):
        with patch("layeranat.main.train_uniform", side_effect=DivergenceError(4, float("nan"))):
            result = self.invoke("train-uniform", "--steps", "3", "--out", str(self.dir / "diverged"))
        self.assertEqual(result.exit_code, EXIT_DIVERGED)
        self.assertIn("diverged at step 4", result.output)

    def test_main_returns_exit_codes(self):
        self.assertEqual(main(["report", str(self.dir / "absent.json")]), EXIT_INVALID)
        with patch("layeranat.main.train_uniform", side_effect=DivergenceError(1, float("inf"))):
            code = main(["train-uniform", "--config", str(self.config), "--steps", "3", "--out", str(self.dir / "d")])
        self.assertEqual(code, EXIT_DIVERGED)

    def test_parse_layers(self):
        self.assertEqual(parse_layers("0, 3,11"), (0, 3, 11))
        self.assertIsNone(parse_layers(""))


if __name__ == "__main__":
    unittest.main()
