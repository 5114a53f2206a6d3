"""
Smart-grid communication topology: node metadata, the fixed 12-node default
graph and ego-centric star subgraphs over wireless neighbors.
"""

import logging
from dataclasses import dataclass
from enum import StrEnum
from functools import cached_property

import numpy as np

from src.gridsentinel.errors import ConfigError, NotAClientError

logger = logging.getLogger("gridsentinel.topology")

TOPOLOGY_VERSION = "grid12-v1"


class Role(StrEnum):
    SMART_METER = "SmartMeter"
    DER = "DER"
    NEIGHBORHOOD_GATEWAY = "NeighborhoodGateway"
    SCADA = "SCADA"
    PMU = "PMU"
    SUBSTATION_CONTROLLER = "SubstationController"
    AMI = "AMI"


class Layer(StrEnum):
    HAN = "HAN"
    NAN = "NAN"
    WAN = "WAN"


class Technology(StrEnum):
    ZIGBEE = "ZigBee"
    PLC = "PLC"
    LTE = "LTE"
    FIBER_ETHERNET = "FiberEthernet"


WIRELESS_TECHNOLOGIES = frozenset({Technology.ZIGBEE, Technology.LTE})

ROLE_LAYERS = {
    Role.SMART_METER: Layer.HAN,
    Role.DER: Layer.HAN,
    Role.NEIGHBORHOOD_GATEWAY: Layer.NAN,
    Role.SCADA: Layer.WAN,
    Role.PMU: Layer.WAN,
    Role.SUBSTATION_CONTROLLER: Layer.WAN,
    Role.AMI: Layer.WAN,
}

METADATA_DIM = len(Role) + len(Layer) + len(Technology) + 1


@dataclass(frozen=True)
class NodeDescriptor:
    id: int
    name: str
    role: Role
    layer: Layer
    technology: Technology

    @property
    def wireless(self):
        return self.technology in WIRELESS_TECHNOLOGIES

    def to_record(self):
        kind = "wireless" if self.wireless else "wired"
        return f"node\t{self.id}\t{self.name}\t{self.role}\t{self.layer}\t{self.technology}\t{kind}"


@dataclass(frozen=True)
class StarSubgraph:
    ego: int
    neighbors: tuple

    @property
    def k(self):
        return len(self.neighbors)

    @property
    def size(self):
        return 1 + len(self.neighbors)

    @property
    def edge_index(self):
        """Local (source, target) pairs; ego is local index 0."""
        pairs = []
        for local in range(1, self.size):
            pairs.append((0, local))
            pairs.append((local, 0))
        return pairs

    def normalized_adjacency(self):
        return normalized_adjacency(self.edge_index, self.size)


class GridTopology:
    """Static, validated communication graph."""

    def __init__(self, nodes, edges):
        self.nodes = tuple(sorted(nodes, key=lambda n: n.id))
        self.edges = frozenset(tuple(sorted(e)) for e in edges)
        self._validate()

    def _validate(self):
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ConfigError(f"node ids must be 0..N-1, got {ids}")
        for node in self.nodes:
            if ROLE_LAYERS[node.role] != node.layer:
                raise ConfigError(f"{node.name}: role {node.role} does not belong to layer {node.layer}")
        for a, b in self.edges:
            if a == b or not (0 <= a < len(ids) and 0 <= b < len(ids)):
                raise ConfigError(f"invalid edge ({a}, {b})")
        if not self._connected():
            raise ConfigError("topology graph is not connected")

    def _connected(self):
        if not self.nodes:
            return False
        seen, frontier = {0}, [0]
        while frontier:
            current = frontier.pop()
            for other in np.flatnonzero(self.adjacency[current]):
                if int(other) not in seen:
                    seen.add(int(other))
                    frontier.append(int(other))
        return len(seen) == len(self.nodes)

    @cached_property
    def adjacency(self):
        a = np.zeros((len(self.nodes), len(self.nodes)), dtype=np.int8)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1
        return a

    def __len__(self):
        return len(self.nodes)

    def node(self, node_id):
        if not 0 <= node_id < len(self.nodes):
            raise KeyError(f"no node with id {node_id}")
        return self.nodes[node_id]

    @property
    def wireless_ids(self):
        return [n.id for n in self.nodes if n.wireless]

    @property
    def client_ids(self):
        """Wireless nodes, the only federated clients."""
        return self.wireless_ids

    def wireless_neighbors(self, node_id):
        return [int(j) for j in np.flatnonzero(self.adjacency[node_id]) if self.nodes[j].wireless]

    def to_records(self):
        """Node table followed by the edge list, one record per line."""
        lines = [n.to_record() for n in self.nodes]
        lines += [f"edge\t{a}\t{b}" for a, b in sorted(self.edges)]
        return lines

    @classmethod
    def from_records(cls, lines):
        nodes, edges = [], []
        for line in lines:
            fields = line.rstrip("\n").split("\t")
            match fields[0]:
                case "node":
                    nodes.append(NodeDescriptor(int(fields[1]), fields[2], Role(fields[3]),
                                                Layer(fields[4]), Technology(fields[5])))
                case "edge":
                    edges.append((int(fields[1]), int(fields[2])))
                case "":
                    continue
                case other:
                    raise ConfigError(f"unknown topology record type {other!r}")
        return cls(nodes, edges)


def default_topology():
    """The canonical 12-node HAN/NAN/WAN graph.

    HAN devices hang off two LTE neighborhood gateways; gateways reach the
    fiber WAN backbone both over fiber and over LTE redundancy links.
    """
    nodes = [
        NodeDescriptor(0, "SM1", Role.SMART_METER, Layer.HAN, Technology.ZIGBEE),
        NodeDescriptor(1, "SM2", Role.SMART_METER, Layer.HAN, Technology.ZIGBEE),
        NodeDescriptor(2, "SM3", Role.SMART_METER, Layer.HAN, Technology.ZIGBEE),
        NodeDescriptor(3, "DER1", Role.DER, Layer.HAN, Technology.ZIGBEE),
        NodeDescriptor(4, "DER2", Role.DER, Layer.HAN, Technology.PLC),
        NodeDescriptor(5, "NG1", Role.NEIGHBORHOOD_GATEWAY, Layer.NAN, Technology.LTE),
        NodeDescriptor(6, "NG2", Role.NEIGHBORHOOD_GATEWAY, Layer.NAN, Technology.LTE),
        NodeDescriptor(7, "SCADA", Role.SCADA, Layer.WAN, Technology.FIBER_ETHERNET),
        NodeDescriptor(8, "PMU1", Role.PMU, Layer.WAN, Technology.FIBER_ETHERNET),
        NodeDescriptor(9, "PMU2", Role.PMU, Layer.WAN, Technology.FIBER_ETHERNET),
        NodeDescriptor(10, "SUB", Role.SUBSTATION_CONTROLLER, Layer.WAN, Technology.LTE),
        NodeDescriptor(11, "AMI", Role.AMI, Layer.WAN, Technology.LTE),
    ]
    edges = [
        # HAN access
        (0, 5), (1, 5), (2, 5), (2, 6), (3, 5), (3, 6), (4, 6),
        # NAN backbone
        (5, 6),
        # gateway uplinks (LTE redundancy plus one fiber path)
        (5, 10), (6, 10), (5, 11), (6, 11), (6, 7),
        # WAN fiber
        (7, 8), (7, 9), (7, 10), (7, 11), (8, 10), (9, 10),
    ]
    return GridTopology(nodes, edges)


def star_subgraph(topo, ego):
    """Ego plus its wireless neighbors in ascending id order."""
    node = topo.node(ego)
    if not node.wireless:
        raise NotAClientError(f"node {ego} ({node.name}, {node.technology}) is wired and cannot be a client")
    return StarSubgraph(ego=ego, neighbors=tuple(topo.wireless_neighbors(ego)))


def metadata_vector(node):
    """One-hot role, layer, technology, then the wireless flag (length 15)."""
    vec = np.zeros(METADATA_DIM)
    vec[list(Role).index(node.role)] = 1.0
    vec[len(Role) + list(Layer).index(node.layer)] = 1.0
    vec[len(Role) + len(Layer) + list(Technology).index(node.technology)] = 1.0
    vec[-1] = 1.0 if node.wireless else 0.0
    return vec


def normalized_adjacency(edge_index, num_nodes):
    """Symmetric normalization with self-loops: D^-1/2 (A + I) D^-1/2."""
    a = np.eye(num_nodes)
    for src, dst in edge_index:
        a[src, dst] = 1.0
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]
