"""
Integration tests for the command-line stages.

Runs use a shrunken generator and model so that every stage finishes in
seconds. The desk-scale checks at the bottom only run with RUN_SLOW=1.
"""

import io
import os
import statistics
import tempfile
import unittest
from unittest.mock import patch

import pandas as pd
import pytest

from src.gridsentinel import artifacts
from src.gridsentinel.cli import ABLATION_VARIANTS, ablation_configs, build_parser, main, overrides_from_args
from src.gridsentinel.config import RunConfig
from src.gridsentinel.errors import NumericError
from src.gridsentinel.evaluation import MetricsReport

REPO_CONFIG = os.path.join(os.path.dirname(__file__), "..", "..", "etc", "run_config.json")

TINY_FLAGS = [
    "--gen.n_sub", "4", "--gen.timesteps", "300",
    "--features.window", "4", "--features.stat_window", "4", "--features.smoothing", "3",
    "--model.hidden", "4", "--model.gru_hidden", "3", "--model.gru_layers", "1",
    "--fed.rounds", "1",
]

RUN_SLOW = os.getenv("RUN_SLOW") == "1"


def _run(command, output_dir, *extra):
    with patch("sys.stdout", new_callable=io.StringIO) as out:
        code = main([command, "--config", REPO_CONFIG, "--output_dir", output_dir, *TINY_FLAGS, *extra])
    return code, out.getvalue()


@pytest.mark.unit
class TestArguments(unittest.TestCase):
    """Flags mirror configuration keys."""

    def test_every_key_has_a_flag(self):
        args = build_parser().parse_args(["generate", "--fed.rounds", "3", "--rule.mode", "any", "--force"])
        self.assertEqual(overrides_from_args(args), {"fed.rounds": "3", "rule.mode": "any", "force": "true"})

    def test_unset_flags_are_not_overrides(self):
        args = build_parser().parse_args(["report"])
        self.assertEqual(overrides_from_args(args), {})

    def test_ablation_variants(self):
        config = RunConfig()
        variants = ablation_configs(config)
        self.assertEqual(list(variants), list(ABLATION_VARIANTS))
        self.assertEqual(len(variants), 4)
        self.assertFalse(variants["no_derived"].features.derived)
        self.assertTrue(variants["no_derived"].features.neighbor)
        self.assertEqual(variants["all_inputs"], config)

    def test_architecture_variants_are_appended(self):
        config = RunConfig().with_overrides({"ablate.include_arch": "gru_only,gcn_only"})
        variants = ablation_configs(config)
        self.assertEqual(list(variants)[4:], ["arch_gru_only", "arch_gcn_only_w1"])
        self.assertEqual(variants["arch_gcn_only_w1"].model.arch, "gcn_only")
        self.assertEqual(variants["arch_gcn_only_w1"].features.window, config.features.window)


@pytest.mark.integration
class TestExitCodes(unittest.TestCase):
    """Distinct non-zero codes per failure class."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_config_error(self):
        with patch("sys.stderr", new_callable=io.StringIO) as err:
            code, _ = _run("generate", self.out, "--fed.fraction", "0.5")
        self.assertEqual(code, 2)
        self.assertIn("fed.fraction", err.getvalue())

    def test_refuses_to_overwrite_without_force(self):
        self.assertEqual(_run("generate", self.out)[0], 0)
        with patch("sys.stderr", new_callable=io.StringIO):
            self.assertEqual(_run("generate", self.out)[0], 3)
        self.assertEqual(_run("generate", self.out, "--force")[0], 0)

    def test_short_horizon_generates_but_cannot_train(self):
        """Fifty timesteps leave the validation segment shorter than one window."""
        self.assertEqual(_run("generate", self.out, "--gen.timesteps", "50", "--features.window", "9")[0], 0)
        with patch("sys.stderr", new_callable=io.StringIO) as err:
            code, _ = _run("train", self.out, "--gen.timesteps", "50", "--features.window", "9")
        self.assertEqual(code, 3)
        self.assertIn("validation windows", err.getvalue())

    def test_training_on_a_foreign_dataset_is_refused(self):
        self.assertEqual(_run("generate", self.out)[0], 0)
        with patch("sys.stderr", new_callable=io.StringIO):
            self.assertEqual(_run("train", self.out, "--gen.snr_drop_db", "2.0")[0], 3)

    @patch("src.gridsentinel.cli.cmd_generate", side_effect=NumericError("overflow", op="exp"))
    def test_numeric_failure(self, _):
        with patch("sys.stderr", new_callable=io.StringIO):
            self.assertEqual(_run("generate", self.out)[0], 4)

    @patch("src.gridsentinel.cli.cmd_generate", side_effect=KeyError("frames"))
    def test_unexpected_failure(self, _):
        with patch("sys.stderr", new_callable=io.StringIO), self.assertLogs("gridsentinel.cli", level="ERROR"):
            self.assertEqual(_run("generate", self.out)[0], 1)

    def test_report_without_results(self):
        with patch("sys.stderr", new_callable=io.StringIO):
            self.assertEqual(_run("report", self.out)[0], 3)


@pytest.mark.integration
class TestPipeline(unittest.TestCase):
    """generate, federated and centralized train and evaluate, sweep and report on one run directory."""

    STEPS = (
        ("generate", ()),
        ("train", ()),
        ("evaluate", ()),
        ("sweep", ()),
        ("train_centralized", ("--fed.mode", "centralized")),
        ("evaluate_centralized", ("--fed.mode", "centralized")),
        ("report", ()),
    )

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.out = cls.tmp.name
        cls.codes = {}
        cls.stdout = {}
        for step, extra in cls.STEPS:
            cls.codes[step], cls.stdout[step] = _run(step.removesuffix("_centralized"), cls.out, *extra)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_every_stage_succeeds(self):
        self.assertEqual(self.codes, {step: 0 for step, _ in self.STEPS})

    def test_every_stage_writes_a_manifest_first(self):
        for stage in ("generate", "train", "evaluate", "sweep"):
            manifest = artifacts.read_run_manifest(os.path.join(self.out, stage))
            self.assertEqual(manifest["stage"], stage)
            self.assertEqual(manifest["config"]["fed.rounds"], 1)

    def test_training_outputs(self):
        log = artifacts.read_round_log(os.path.join(self.out, "train", "round_log.jsonl"))
        self.assertEqual([r["round"] for r in log], [1])
        self.assertIn("val_seq_accuracy", log[0])
        _, meta = artifacts.load_checkpoint(os.path.join(self.out, "train", "checkpoint"))
        self.assertEqual(meta["best_round"], 1)
        self.assertEqual(meta["hyperparameters"]["model.hidden"], 4)

    def test_metrics_files_parse_back(self):
        with open(os.path.join(self.out, "evaluate", "metrics_test.txt")) as f:
            report = MetricsReport.from_text(f.read())
        self.assertEqual(report.rule.tau, 0.55)
        self.assertEqual(sorted(report.clients), [0, 1, 2, 3, 5, 6, 10, 11])
        self.assertEqual(report.overall.windows, sum(s.windows for s in report.clients.values()))

    def test_sweep_table(self):
        table = pd.read_csv(os.path.join(self.out, "sweep", "sweep.csv"))
        self.assertEqual(len(table), 28)
        self.assertTrue(os.path.exists(os.path.join(self.out, "sweep", "sweep_heatmap.png")))

    def test_evaluate_writes_confusion_and_client_plots(self):
        for name in ("confusion_test.png", "clients_test.png"):
            self.assertGreater(os.path.getsize(os.path.join(self.out, "evaluate", name)), 0)

    def test_centralized_stages_write_their_own_directories(self):
        manifest = artifacts.read_run_manifest(os.path.join(self.out, "train_centralized"))
        self.assertEqual(manifest["config"]["fed.mode"], "centralized")
        self.assertTrue(os.path.exists(os.path.join(self.out, "train_centralized", "checkpoint", "params.bin")))
        self.assertTrue(os.path.exists(os.path.join(self.out, "train", "checkpoint", "params.bin")))

    def test_centralized_evaluate_compares_against_federated(self):
        stage = os.path.join(self.out, "evaluate_centralized")
        table = pd.read_csv(os.path.join(stage, "compare_test.csv"))
        self.assertEqual(list(table["scope"]), ["global", "0", "1", "2", "3", "5", "6", "10", "11"])
        self.assertTrue(((table["delta_ts_f1"] - (table["fed_ts_f1"] - table["cen_ts_f1"])).abs() < 1e-12).all())
        self.assertGreater(os.path.getsize(os.path.join(stage, "compare_test.png")), 0)

    def test_report_prints_stored_results(self):
        self.assertIn("== metrics_test.txt", self.stdout["report"])
        self.assertIn("== sweep", self.stdout["report"])
        self.assertIn("== metrics_test.txt (centralized)", self.stdout["report"])
        self.assertIn("== federated vs centralized (test)", self.stdout["report"])


@pytest.mark.integration
class TestDeterminism(unittest.TestCase):
    """Identical configuration and seed give identical bytes."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_generate_and_train_are_reproducible(self):
        runs = [os.path.join(self.tmp.name, name) for name in ("a", "b")]
        for run in runs:
            self.assertEqual(_run("generate", run)[0], 0)
            self.assertEqual(_run("train", run)[0], 0)
        manifests = [artifacts.read_dataset_manifest(os.path.join(r, "generate", "dataset")) for r in runs]
        self.assertEqual(manifests[0]["checksum"], manifests[1]["checksum"])
        payloads = []
        for run in runs:
            with open(os.path.join(run, "train", "checkpoint", "params.bin"), "rb") as f:
                payloads.append(f.read())
        self.assertEqual(payloads[0], payloads[1])

    def test_other_seed_changes_the_dataset(self):
        a, b = (os.path.join(self.tmp.name, name) for name in ("a", "b"))
        _run("generate", a)
        _run("generate", b, "--seed", "8")
        checksums = [artifacts.read_dataset_manifest(os.path.join(r, "generate", "dataset"))["checksum"] for r in (a, b)]
        self.assertNotEqual(checksums[0], checksums[1])


@pytest.mark.integration
class TestAblate(unittest.TestCase):
    """Input ablations retrain one model per variant."""

    def test_ablation_table_has_one_row_per_variant(self):
        with tempfile.TemporaryDirectory() as out:
            self.assertEqual(_run("generate", out)[0], 0)
            self.assertEqual(_run("ablate", out)[0], 0)
            table = pd.read_csv(os.path.join(out, "ablate", "ablation.csv"))
        self.assertEqual(list(table["variant"]), ["all_inputs", "no_metadata", "no_derived", "no_neighbor"])
        self.assertEqual(list(table["features"]), ["all", "no_metadata", "no_derived", "no_neighbor"])
        self.assertEqual(list(table["temporal_context"]), [4, 4, 4, 4])


def _desk_run(output_dir, seed, *extra):
    """Default-sized generate, train and evaluate; returns the test report."""
    base = ["--config", REPO_CONFIG, "--output_dir", output_dir, "--seed", str(seed), *extra]
    with patch("sys.stdout", new_callable=io.StringIO):
        for command in ("generate", "train", "evaluate"):
            assert main([command, *base]) == 0, command
    stage = "evaluate_centralized" if "centralized" in extra else "evaluate"
    with open(os.path.join(output_dir, stage, "metrics_test.txt")) as f:
        return MetricsReport.from_text(f.read())


@pytest.mark.slow
@unittest.skipUnless(RUN_SLOW, "desk-scale training; set RUN_SLOW=1")
class TestDeskScale(unittest.TestCase):
    """Default configuration across three seeds."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.federated = [_desk_run(os.path.join(cls.tmp.name, f"fed{s}"), s) for s in (7, 8, 9)]

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_detection_quality(self):
        self.assertGreaterEqual(statistics.median(r.overall.timestep.f1 for r in self.federated), 0.85)
        self.assertLessEqual(statistics.median(r.overall.sequence.fpr for r in self.federated), 0.01)

    def test_centralized_false_positive_rate_is_not_worse(self):
        centralized = [_desk_run(os.path.join(self.tmp.name, f"cen{s}"), s, "--fed.mode", "centralized")
                       for s in (7, 8, 9)]
        self.assertLessEqual(statistics.median(r.overall.sequence.fpr for r in centralized),
                             statistics.median(r.overall.sequence.fpr for r in self.federated))


def _desk_ablation(output_dir, seed):
    """Default-sized generate and ablate; returns the ablation table."""
    base = ["--config", REPO_CONFIG, "--output_dir", output_dir, "--seed", str(seed)]
    with patch("sys.stdout", new_callable=io.StringIO):
        for command in ("generate", "ablate"):
            assert main([command, *base]) == 0, command
    return pd.read_csv(os.path.join(output_dir, "ablate", "ablation.csv")).set_index("variant")


@pytest.mark.slow
@unittest.skipUnless(RUN_SLOW, "desk-scale ablation; set RUN_SLOW=1")
class TestAblationDirections(unittest.TestCase):
    """Removing an input family costs sequence F1, derived features the most."""

    def test_median_sequence_f1_ordering(self):
        # Arrange
        with tempfile.TemporaryDirectory() as tmp:
            tables = [_desk_ablation(os.path.join(tmp, f"seed{s}"), s) for s in (7, 8, 9)]

        # Act
        median = {variant: statistics.median(t.loc[variant, "seq_f1"] for t in tables) for variant in ABLATION_VARIANTS}

        # Assert
        self.assertGreater(median["all_inputs"], median["no_neighbor"])
        self.assertGreater(median["no_neighbor"], median["no_metadata"])
        self.assertGreater(median["no_metadata"], median["no_derived"])
        self.assertLessEqual(median["no_derived"], median["all_inputs"] - 0.05)


if __name__ == "__main__":
    unittest.main()
