"""
Unit tests for the spatiotemporal encoder.
"""

import unittest
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from src.gridsentinel.config import LossConfig, ModelConfig
from src.gridsentinel.encoder import (
    EncoderInputs,
    InputDims,
    ModelParams,
    build_node_matrix,
    check_compatible,
    encode_batch,
    encode_window,
    gcn_layer,
    init_params,
    param_shapes,
    star_edges,
    temporal_context,
)
from src.gridsentinel.errors import CheckpointError, DimensionError
from src.gridsentinel.features import WindowSample
from src.gridsentinel.fedtrain import objective
from src.gridsentinel.numerics import Graph, grad_check

TINY = ModelConfig(hidden=4, gru_hidden=3, gru_layers=1)
DIMS = InputDims(raw=3, nbr=2, meta=2)


def _inputs(batch=3, window=2, k=1, dims=DIMS, seed=0):
    rng = np.random.default_rng(seed)
    return EncoderInputs(
        x_raw=rng.normal(size=(batch, window, dims.raw)),
        x_nbr=rng.normal(size=(batch, window, k, dims.nbr)),
        meta=rng.integers(0, 2, size=(batch, dims.meta)).astype(np.float64),
    )


@pytest.mark.unit
class TestBuildingBlocks(unittest.TestCase):
    """Node matrices and one graph-convolution layer."""

    def test_node_matrix_for_gateway_star(self):
        """Seven neighbors at width 128 give an 8 x 256 matrix."""
        # Arrange
        graph = Graph()
        rng = np.random.default_rng(0)
        h_raw = graph.constant(rng.normal(size=(1, 128)))
        h_nbr = graph.constant(rng.normal(size=(7, 128)))

        # Act
        z = build_node_matrix(graph, h_raw, h_nbr, 7)

        # Assert
        self.assertEqual(z.values.shape, (8, 256))
        np.testing.assert_array_equal(z.values[0, :128], h_raw.values[0])
        np.testing.assert_array_equal(z.values[0, 128:], 0.0)
        np.testing.assert_array_equal(z.values[1:, :128], 0.0)
        np.testing.assert_array_equal(z.values[1:, 128:], h_nbr.values)

    def test_node_matrix_without_neighbors(self):
        graph = Graph()
        z = build_node_matrix(graph, graph.constant(np.ones((1, 4))), graph.constant(np.zeros((0, 4))), 0)
        self.assertEqual(z.values.shape, (1, 8))

    def test_node_matrix_rejects_mismatched_blocks(self):
        graph = Graph()
        with self.assertRaises(DimensionError):
            build_node_matrix(graph, graph.constant(np.ones((1, 4))), graph.constant(np.ones((2, 4))), 3)

    def test_single_node_layer_is_a_linear_map(self):
        graph = Graph()
        z = np.array([[1.0, -2.0, 0.5]])
        w = np.random.default_rng(1).normal(size=(3, 2))
        out = gcn_layer(graph.constant(z), [], graph.constant(w), num_nodes=1)
        np.testing.assert_allclose(out.values, z @ w, atol=1e-12)

    def test_constant_rows_survive_a_two_node_star(self):
        """With W = I and one neighbor, normalized propagation averages equal rows."""
        graph = Graph()
        z = np.tile([[0.3, -1.2, 2.0]], (2, 1))
        out = gcn_layer(graph.constant(z), [(0, 1), (1, 0)], graph.constant(np.eye(3)))
        np.testing.assert_allclose(out.values, z, atol=1e-12)


@pytest.mark.unit
class TestForward(unittest.TestCase):
    """Output shapes, determinism and architecture variants."""

    def setUp(self):
        self.params = init_params(TINY, DIMS, seed=3)

    def test_full_window_output_shapes(self):
        inputs = _inputs(batch=2, window=9, k=7)
        out = encode_batch(inputs, self.params, TINY)
        self.assertEqual(out.logits.shape, (2, 9, 2))
        self.assertEqual(out.probs.shape, (2, 9))
        self.assertTrue(np.all((out.probs > 0) & (out.probs < 1)))

    def test_eval_mode_is_deterministic(self):
        inputs = _inputs()
        first = encode_batch(inputs, self.params, TINY, mode="eval", seed=1)
        second = encode_batch(inputs, self.params, TINY, mode="eval", seed=2)
        np.testing.assert_array_equal(first.probs, second.probs)

    def test_train_mode_applies_dropout(self):
        cfg = replace(TINY, gru_layers=2, dropout_gcn=0.5, dropout_gru=0.5)
        params = init_params(cfg, DIMS, seed=3)
        inputs = _inputs(window=4)
        train = encode_batch(inputs, params, cfg, mode="train", seed=11)
        evaluated = encode_batch(inputs, params, cfg, mode="eval")
        self.assertFalse(np.array_equal(train.probs, evaluated.probs))

    def test_probabilities_match_softmax_of_logits(self):
        out = encode_batch(_inputs(), self.params, TINY)
        logits = out.logits
        expected = np.exp(logits[..., 1]) / np.exp(logits).sum(axis=-1)
        np.testing.assert_allclose(out.probs, expected, atol=1e-12)

    def test_samples_in_a_batch_are_independent(self):
        """Encoding a window alone or inside a batch gives the same probabilities."""
        inputs = _inputs(batch=4, window=3, k=2)
        batched = encode_batch(inputs, self.params, TINY).probs
        sample = WindowSample(ego=5, start=0, x_raw=inputs.x_raw[2], x_nbr=inputs.x_nbr[2], meta=inputs.meta[2],
                              labels=np.zeros(3, dtype=np.int64), split="test")
        alone = encode_window(sample, self.params, TINY)
        self.assertEqual(alone.logits.shape, (3, 2))
        np.testing.assert_allclose(alone.probs, batched[2], atol=1e-12)

    def test_ego_without_neighbors(self):
        out = encode_batch(_inputs(k=0), self.params, TINY)
        self.assertEqual(out.probs.shape, (3, 2))

    def test_architecture_variants(self):
        for arch in ("gru_only", "gcn_only"):
            with self.subTest(arch=arch):
                cfg = replace(TINY, arch=arch)
                shapes = param_shapes(cfg, DIMS)
                self.assertEqual("gcn1.weight" in shapes, arch != "gru_only")
                self.assertEqual(any(name.startswith("gru.") for name in shapes), arch != "gcn_only")
                out = encode_batch(_inputs(), init_params(cfg, DIMS), cfg)
                self.assertEqual(out.probs.shape, (3, 2))

    def test_ablated_inputs_have_zero_width(self):
        dims = InputDims(raw=3, nbr=0, meta=0)
        params = init_params(TINY, dims)
        self.assertEqual(params["nbr.weight"].shape, (0, 4))
        out = encode_batch(_inputs(dims=dims), params, TINY)
        self.assertTrue(np.all(np.isfinite(out.probs)))

    def test_neighbor_order_does_not_matter(self):
        """Reordering the neighbors of every star leaves eval-mode probabilities unchanged."""
        # Arrange
        inputs = _inputs(k=3)
        permuted = EncoderInputs(inputs.x_raw, inputs.x_nbr[:, :, [2, 0, 1], :], inputs.meta)

        for arch in ("gcn_bigru", "gru_only", "gcn_only"):
            with self.subTest(arch=arch):
                cfg = replace(TINY, arch=arch)
                params = init_params(cfg, DIMS, seed=5)

                # Act
                original = encode_batch(inputs, params, cfg, mode="eval").probs
                shuffled = encode_batch(permuted, params, cfg, mode="eval").probs

                # Assert
                np.testing.assert_allclose(shuffled, original, rtol=0.0, atol=1e-12)

    def test_forward_runs_two_graph_convolutions(self):
        for arch, calls in (("gcn_bigru", 2), ("gcn_only", 2), ("gru_only", 0)):
            with self.subTest(arch=arch):
                cfg = replace(TINY, arch=arch)
                with patch("src.gridsentinel.encoder.gcn_layer", wraps=gcn_layer) as layer:
                    encode_batch(_inputs(k=2), init_params(cfg, DIMS), cfg)
                self.assertEqual(layer.call_count, calls)
                for call in layer.call_args_list:
                    self.assertEqual(call.args[1], star_edges(2))

    def test_graph_only_variant_has_no_temporal_context(self):
        """Without recurrence every timestep scores as a one-step window."""
        # Arrange
        cfg = replace(TINY, arch="gcn_only")
        params = init_params(cfg, DIMS, seed=2)
        inputs = _inputs(batch=2, window=5, k=2)

        # Act
        full = encode_batch(inputs, params, cfg).probs
        steps = [encode_batch(EncoderInputs(inputs.x_raw[:, t:t + 1], inputs.x_nbr[:, t:t + 1], inputs.meta),
                              params, cfg).probs[:, 0] for t in range(5)]

        # Assert
        np.testing.assert_allclose(full, np.stack(steps, axis=1), atol=1e-12)
        self.assertEqual(temporal_context(cfg, 5), 1)
        self.assertEqual(temporal_context(TINY, 5), 5)


@pytest.mark.unit
class TestModelParams(unittest.TestCase):
    """Parameter container, serialization and compatibility."""

    def test_initialization(self):
        params = init_params(TINY, DIMS)
        self.assertEqual(params.manifest(), list(param_shapes(TINY, DIMS).items()))
        np.testing.assert_array_equal(params["ln.gain"], 1.0)
        np.testing.assert_array_equal(params["ln.bias"], 0.0)
        self.assertEqual(params.count(), sum(int(np.prod(s)) for s in param_shapes(TINY, DIMS).values()))

    def test_same_seed_same_parameters(self):
        a, b = init_params(TINY, DIMS, seed=5), init_params(TINY, DIMS, seed=5)
        self.assertEqual(a.tobytes(), b.tobytes())

    def test_bytes_round_trip(self):
        params = init_params(TINY, DIMS)
        rebuilt = ModelParams.frombytes(params.manifest(), params.tobytes())
        self.assertEqual(rebuilt.tobytes(), params.tobytes())

    def test_truncated_payload_is_rejected(self):
        params = init_params(TINY, DIMS)
        with self.assertRaises(CheckpointError):
            ModelParams.frombytes(params.manifest(), params.tobytes()[:-8])

    def test_check_compatible(self):
        params = init_params(TINY, DIMS)
        check_compatible(params, TINY, DIMS)
        with self.assertRaises(CheckpointError):
            check_compatible(params, replace(TINY, gru_hidden=5), DIMS)

    def test_linear_combination(self):
        a = ModelParams({"w": np.array([1.0, 2.0])})
        b = ModelParams({"w": np.array([3.0, 6.0])})
        mixed = ModelParams.linear_combination([a, b], [0.25, 0.75])
        np.testing.assert_allclose(mixed["w"], [2.5, 5.0])


@pytest.mark.unit
class TestEncoderGradients(unittest.TestCase):
    """Finite-difference check of the full local objective on a tiny encoder."""

    def setUp(self):
        self.params = init_params(TINY, DIMS, seed=9)
        self.inputs = _inputs(batch=3, window=2, k=1, seed=4)
        self.labels = np.array([[0, 1], [0, 0], [1, 1]])

    def _check(self, loss_cfg, anchor=None, mu=0.0):
        def f(graph, weights):
            total, _ = objective(graph, weights, self.inputs, self.labels, (0.8, 1.4),
                                 TINY, loss_cfg, anchor=anchor, mu=mu)
            return total

        return grad_check(f, dict(self.params), max_coords=80, seed=2, floor=1e-4)

    def test_supervised_objective(self):
        report = self._check(LossConfig(weight_decay=0.0))
        self.assertTrue(report.passed, report.worst)

    def test_objective_with_regularizers(self):
        rng = np.random.default_rng(6)
        anchor = {name: value + rng.normal(scale=0.05, size=value.shape) for name, value in self.params.items()}
        report = self._check(LossConfig(weight_decay=1e-3), anchor=anchor, mu=0.1)
        self.assertTrue(report.passed, report.worst)


if __name__ == "__main__":
    unittest.main()
