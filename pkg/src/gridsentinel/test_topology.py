"""
Unit tests for the grid topology, star subgraphs and metadata encoding.
"""

import unittest

import numpy as np
import pytest

from src.gridsentinel.errors import ConfigError, NotAClientError
from src.gridsentinel.topology import (
    METADATA_DIM,
    GridTopology,
    Layer,
    NodeDescriptor,
    Role,
    Technology,
    default_topology,
    metadata_vector,
    normalized_adjacency,
    star_subgraph,
)


@pytest.mark.unit
class TestDefaultTopology(unittest.TestCase):
    """The fixed 12-node graph."""

    def setUp(self):
        self.topo = default_topology()

    def test_has_twelve_connected_nodes(self):
        self.assertEqual(len(self.topo), 12)
        self.assertTrue(self.topo._connected())

    def test_adjacency_is_symmetric_without_self_loops(self):
        a = self.topo.adjacency
        np.testing.assert_array_equal(a, a.T)
        self.assertEqual(int(np.trace(a)), 0)
        self.assertEqual(int(a.sum()) // 2, len(self.topo.edges))

    def test_wireless_clients_are_zigbee_and_lte_nodes(self):
        """PLC and fiber nodes never become clients."""
        self.assertEqual(self.topo.client_ids, [0, 1, 2, 3, 5, 6, 10, 11])
        for node in self.topo.nodes:
            self.assertEqual(node.wireless, node.technology in (Technology.ZIGBEE, Technology.LTE))

    def test_role_layer_pairing(self):
        for node in self.topo.nodes:
            if node.role in (Role.SMART_METER, Role.DER):
                self.assertEqual(node.layer, Layer.HAN)
            elif node.role == Role.NEIGHBORHOOD_GATEWAY:
                self.assertEqual(node.layer, Layer.NAN)
            else:
                self.assertEqual(node.layer, Layer.WAN)

    def test_records_round_trip(self):
        """Serialized node table and edge list rebuild the same graph."""
        rebuilt = GridTopology.from_records(self.topo.to_records())
        self.assertEqual(rebuilt.nodes, self.topo.nodes)
        self.assertEqual(rebuilt.edges, self.topo.edges)

    def test_disconnected_graph_is_rejected(self):
        nodes = [
            NodeDescriptor(0, "SM1", Role.SMART_METER, Layer.HAN, Technology.ZIGBEE),
            NodeDescriptor(1, "SM2", Role.SMART_METER, Layer.HAN, Technology.ZIGBEE),
        ]
        with self.assertRaises(ConfigError):
            GridTopology(nodes, [])

    def test_wrong_layer_is_rejected(self):
        nodes = [NodeDescriptor(0, "PMU", Role.PMU, Layer.HAN, Technology.FIBER_ETHERNET)]
        with self.assertRaises(ConfigError):
            GridTopology(nodes, [])


@pytest.mark.unit
class TestStarSubgraph(unittest.TestCase):
    """Ego-centric stars over wireless neighbors."""

    def setUp(self):
        self.topo = default_topology()

    def test_gateway_has_seven_wireless_neighbors(self):
        """NG1 reaches four HAN devices, NG2 and both LTE WAN nodes."""
        star = star_subgraph(self.topo, 5)
        self.assertEqual(star.k, 7)
        self.assertEqual(star.size, 8)
        self.assertEqual(star.neighbors, (0, 1, 2, 3, 6, 10, 11))

    def test_edge_index_is_exactly_the_star(self):
        """Only ego-neighbor pairs in both directions; no neighbor-neighbor edges."""
        for ego in self.topo.client_ids:
            star = star_subgraph(self.topo, ego)
            expected = {(0, j) for j in range(1, star.size)} | {(j, 0) for j in range(1, star.size)}
            self.assertEqual(set(star.edge_index), expected)
            self.assertEqual(len(star.edge_index), 2 * star.k)

    def test_wired_ego_is_not_a_client(self):
        with self.assertRaises(NotAClientError):
            star_subgraph(self.topo, 7)

    def test_ego_without_wireless_neighbors(self):
        """A ZigBee meter hanging only off a PLC device has an empty star."""
        # Arrange
        nodes = [
            NodeDescriptor(0, "SM1", Role.SMART_METER, Layer.HAN, Technology.ZIGBEE),
            NodeDescriptor(1, "DER2", Role.DER, Layer.HAN, Technology.PLC),
        ]
        topo = GridTopology(nodes, [(0, 1)])

        # Act
        star = star_subgraph(topo, 0)

        # Assert
        self.assertEqual(star.k, 0)
        self.assertEqual(star.edge_index, [])
        np.testing.assert_array_equal(star.normalized_adjacency(), [[1.0]])

    def test_stars_are_idempotent_and_cover_all_clients(self):
        covered = set()
        for ego in reversed(self.topo.client_ids):
            first, second = star_subgraph(self.topo, ego), star_subgraph(self.topo, ego)
            self.assertEqual(first, second)
            covered |= {ego, *first.neighbors}
        self.assertEqual(covered, set(self.topo.client_ids))


@pytest.mark.unit
class TestMetadataAndAdjacency(unittest.TestCase):
    """One-hot metadata and symmetric normalization."""

    def test_smart_meter_vector(self):
        """Three one-hot entries plus the wireless flag."""
        vec = metadata_vector(NodeDescriptor(0, "SM1", Role.SMART_METER, Layer.HAN, Technology.ZIGBEE))
        self.assertEqual(len(vec), METADATA_DIM)
        self.assertEqual(METADATA_DIM, 15)
        self.assertEqual(int(np.count_nonzero(vec)), 4)
        self.assertEqual(vec[-1], 1.0)

    def test_each_block_sums_to_one_for_default_nodes(self):
        for node in default_topology().nodes:
            vec = metadata_vector(node)
            self.assertEqual(vec[:7].sum(), 1.0)
            self.assertEqual(vec[7:10].sum(), 1.0)
            self.assertEqual(vec[10:14].sum(), 1.0)
            self.assertIn(vec[14], (0.0, 1.0))

    def test_vectors_unique_per_combination(self):
        seen = {}
        for node in default_topology().nodes:
            key = (node.role, node.layer, node.technology)
            vec = tuple(metadata_vector(node))
            if key in seen:
                self.assertEqual(seen[key], vec)
            else:
                self.assertNotIn(vec, seen.values())
                seen[key] = vec

    def test_single_node_normalization_is_identity(self):
        np.testing.assert_array_equal(normalized_adjacency([], 1), [[1.0]])

    def test_star_normalization_matches_degrees(self):
        """Entries are 1/sqrt(d_i d_j) with self-loop degrees."""
        a_hat = normalized_adjacency([(0, 1), (1, 0), (0, 2), (2, 0)], 3)
        self.assertAlmostEqual(a_hat[0, 0], 1.0 / 3.0)
        self.assertAlmostEqual(a_hat[0, 1], 1.0 / np.sqrt(6.0))
        self.assertAlmostEqual(a_hat[1, 1], 0.5)
        self.assertEqual(a_hat[1, 2], 0.0)
        np.testing.assert_allclose(a_hat, a_hat.T)


if __name__ == "__main__":
    unittest.main()
