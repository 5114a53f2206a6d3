"""
Unit tests for the run viewer loaders.
"""

import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import pytest

from src.gridsentinel.artifacts import append_round_log
from src.gridsentinel.config import DecisionRule
from src.gridsentinel.dashboard import (
    list_runs,
    load_ablation,
    load_comparison,
    load_metrics,
    load_round_log,
    load_sweep,
    metrics_frame,
    show_dashboard_page,
)
from src.gridsentinel.evaluation import WindowPrediction, compute_metrics, sweep, write_sweep_csv


@pytest.mark.unit
class TestLoaders(unittest.TestCase):
    """Reading finished stage outputs from a run directory."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = self.tmp.name
        self.run = os.path.join(self.root, "baseline")
        for stage in ("evaluate", "train", "sweep"):
            os.makedirs(os.path.join(self.run, stage))
        os.makedirs(os.path.join(self.root, "scratch"))

        predictions = [
            WindowPrediction(0, 0, np.array([0.9, 0.8, 0.1]), np.array([1, 1, 0])),
            WindowPrediction(3, 0, np.array([0.2, 0.6, 0.1]), np.array([0, 0, 0])),
        ]
        self.report = compute_metrics(predictions, DecisionRule(tau=0.5, m=1))
        with open(os.path.join(self.run, "evaluate", "metrics_test.txt"), "w") as f:
            f.write(self.report.to_text())
        for r in (1, 2):
            append_round_log(os.path.join(self.run, "train", "round_log.jsonl"),
                             {"round": r, "val_seq_accuracy": 0.5 * r, "best_val_seq_accuracy": 0.5 * r,
                              "wall_time_s": 1.0, "client_losses": {}})
        write_sweep_csv(sweep(predictions, (0.5, 0.7), (1, 2)), os.path.join(self.run, "sweep", "sweep.csv"))

    def tearDown(self):
        self.tmp.cleanup()

    def test_only_directories_with_stages_are_runs(self):
        self.assertEqual(list_runs(self.root), ["baseline"])
        self.assertEqual(list_runs(os.path.join(self.root, "absent")), [])

    def test_metrics_table(self):
        report = load_metrics(self.run, "test")
        frame = metrics_frame(report)
        self.assertEqual(list(frame["scope"]), ["global", "0", "3"])
        self.assertEqual(frame.loc[0, "windows"], 2)
        self.assertEqual(frame.loc[2, "seq_fpr"], 1.0)

    def test_round_log_and_sweep(self):
        rounds = load_round_log(self.run)
        self.assertEqual(list(rounds.columns), ["round", "val_seq_accuracy", "best_val_seq_accuracy", "wall_time_s"])
        self.assertEqual(list(rounds["round"]), [1, 2])
        self.assertEqual(len(load_sweep(self.run)), 4)

    def test_missing_outputs_load_as_none(self):
        self.assertIsNone(load_metrics(self.run, "val"))
        self.assertIsNone(load_ablation(self.run))
        empty = os.path.join(self.root, "scratch")
        self.assertIsNone(load_round_log(empty))
        self.assertIsNone(load_sweep(empty))

    def test_comparison_needs_both_training_modes(self):
        # Arrange
        self.assertIsNone(load_comparison(self.run, "test"))
        centralized = compute_metrics([
            WindowPrediction(0, 0, np.array([0.9, 0.2, 0.1]), np.array([1, 1, 0])),
            WindowPrediction(3, 0, np.array([0.1, 0.1, 0.1]), np.array([0, 0, 0])),
        ], DecisionRule(tau=0.5, m=1))
        os.makedirs(os.path.join(self.run, "evaluate_centralized"))
        with open(os.path.join(self.run, "evaluate_centralized", "metrics_test.txt"), "w") as f:
            f.write(centralized.to_text())

        # Act
        table = load_comparison(self.run, "test").set_index("scope")

        # Assert
        self.assertAlmostEqual(table.loc["0", "delta_ts_f1"], 1.0 / 3.0)
        self.assertEqual(table.loc["3", "fed_seq_fpr"], 1.0)
        self.assertEqual(table.loc["3", "cen_seq_fpr"], 0.0)

    @patch("src.gridsentinel.dashboard.st")
    def test_page_without_runs_shows_a_warning(self, mock_st):
        show_dashboard_page(os.path.join(self.root, "absent"))
        mock_st.warning.assert_called_once()
        mock_st.dataframe.assert_not_called()


if __name__ == "__main__":
    unittest.main()
