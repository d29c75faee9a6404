"""Road network substrate: directed multi-lane edges discretized into CA cells.

Networks are built from a versioned JSON document, are immutable during
simulation (detector placement happens at setup time), and provide route
enumeration plus the graph-distance helpers the imputation module relies on.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

DEFAULT_CELL_LENGTH_M = 1.5
MAX_ENUMERATED_PATHS = 10_000

_NETWORK_FIELDS = {"version", "cell_length_m", "nodes", "edges", "detectors"}
_NODE_FIELDS = {"id", "x", "y"}
_EDGE_FIELDS = {"id", "from", "to", "length_m", "lanes", "v_max_kmh", "lane_policy"}
_DETECTOR_FIELDS = {"id", "edge", "cell", "lanes"}


class NetworkError(ValueError):
    """Inconsistent or malformed network description."""


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float


@dataclass
class Edge:
    id: str
    from_node: str
    to_node: str
    length_m: float
    lanes: int
    v_max_cells: int
    cell_count: int
    # per-lane set of allowed class names; None entry = lane open to all
    lane_policy: tuple | None = None


@dataclass
class Detector:
    id: str
    edge: str
    cell: int
    lanes: tuple


@dataclass(frozen=True)
class Route:
    """Ordered edge-id sequence; ``circular`` routes wrap from last to first edge."""

    edges: tuple
    free_flow_time_s: float
    circular: bool = False


@dataclass
class RoadNetwork:
    nodes: dict
    edges: dict
    detectors: dict
    cell_length_m: float = DEFAULT_CELL_LENGTH_M
    _out_edges: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._out_edges:
            for e in self.edges.values():
                self._out_edges.setdefault(e.from_node, []).append(e.id)
            for lst in self._out_edges.values():
                lst.sort()

    def out_edges(self, node_id: str) -> list:
        return self._out_edges.get(node_id, [])

    def free_flow_time(self, edge_ids) -> float:
        """Seconds to traverse the edges at each edge's speed limit."""
        return sum(self.edges[eid].cell_count / self.edges[eid].v_max_cells for eid in edge_ids)

    def point_at(self, edge_id: str, cell: int) -> tuple:
        """Planar position of a cell center, for the radio co-simulation."""
        e = self.edges[edge_id]
        a, b = self.nodes[e.from_node], self.nodes[e.to_node]
        frac = min(1.0, (cell + 0.5) * self.cell_length_m / e.length_m)
        return (a.x + frac * (b.x - a.x), a.y + frac * (b.y - a.y))


def _require_fields(obj: dict, allowed: set, kind: str):
    unknown = set(obj) - allowed
    if unknown:
        raise NetworkError(f"unknown field(s) {sorted(unknown)} in {kind}")


def _parse_lane_policy(raw, lanes: int, edge_id: str):
    if raw is None:
        return None
    if len(raw) != lanes:
        raise NetworkError(f"edge {edge_id}: lane_policy length {len(raw)} != lanes {lanes}")
    return tuple(None if entry is None else frozenset(entry) for entry in raw)


def build_network(spec: dict) -> RoadNetwork:
    """Build a validated, cell-discretized network from its JSON description.

    Rejects unknown fields, dangling node references, non-positive lengths and
    zero-lane edges; every error names the offending element.
    """
    _require_fields(spec, _NETWORK_FIELDS, "network spec")
    if spec.get("version") != 1:
        raise NetworkError(f"unsupported network spec version {spec.get('version')!r}")
    cell_len = float(spec.get("cell_length_m", DEFAULT_CELL_LENGTH_M))
    if cell_len <= 0:
        raise NetworkError("cell_length_m must be positive")

    nodes = {}
    for nd in spec.get("nodes", []):
        _require_fields(nd, _NODE_FIELDS, f"node {nd.get('id')!r}")
        nid = str(nd["id"])
        if nid in nodes:
            raise NetworkError(f"duplicate node id {nid!r}")
        nodes[nid] = Node(nid, float(nd["x"]), float(nd["y"]))

    edges = {}
    for ed in spec.get("edges", []):
        _require_fields(ed, _EDGE_FIELDS, f"edge {ed.get('id')!r}")
        eid = str(ed["id"])
        if eid in edges:
            raise NetworkError(f"duplicate edge id {eid!r}")
        frm, to = str(ed["from"]), str(ed["to"])
        for ref in (frm, to):
            if ref not in nodes:
                raise NetworkError(f"edge {eid!r} references unknown node {ref!r}")
        length = float(ed["length_m"])
        if length <= 0:
            raise NetworkError(f"edge {eid!r} has non-positive length {length}")
        lanes = int(ed["lanes"])
        if lanes < 1:
            raise NetworkError(f"edge {eid!r} has zero lanes")
        v_kmh = float(ed.get("v_max_kmh", 108.0))
        if v_kmh <= 0:
            raise NetworkError(f"edge {eid!r} has non-positive v_max_kmh")
        v_cells = max(1, round(v_kmh / 3.6 / cell_len))
        cells = max(1, math.ceil(length / cell_len))
        edges[eid] = Edge(eid, frm, to, length, lanes, v_cells, cells,
                          _parse_lane_policy(ed.get("lane_policy"), lanes, eid))

    net = RoadNetwork(nodes=nodes, edges=edges, detectors={}, cell_length_m=cell_len)
    for dd in spec.get("detectors", []):
        _require_fields(dd, _DETECTOR_FIELDS, f"detector {dd.get('id')!r}")
        place_detector(net, dd["edge"], int(dd["cell"]), dd.get("lanes"), detector_id=str(dd["id"]))
    return net


def load_network(path) -> RoadNetwork:
    with open(path) as fh:
        return build_network(json.load(fh))


def place_detector(net: RoadNetwork, edge_id: str, cell: int, lanes=None, detector_id=None) -> str:
    """Register a loop detector at (edge, cell); returns its id.

    ``lanes`` defaults to every lane of the edge. Two detectors may share a
    cell; each gets its own id and is served independently.
    """
    if edge_id not in net.edges:
        raise NetworkError(f"detector references unknown edge {edge_id!r}")
    e = net.edges[edge_id]
    if not 0 <= cell < e.cell_count:
        raise NetworkError(
            f"detector cell {cell} out of range [0, {e.cell_count}) on edge {edge_id!r}")
    lane_set = tuple(range(e.lanes)) if lanes is None else tuple(sorted(int(l) for l in lanes))
    for l in lane_set:
        if not 0 <= l < e.lanes:
            raise NetworkError(f"detector lane {l} out of range on edge {edge_id!r}")
    if detector_id is None:
        detector_id = f"det{len(net.detectors)}"
    if detector_id in net.detectors:
        raise NetworkError(f"duplicate detector id {detector_id!r}")
    net.detectors[detector_id] = Detector(detector_id, edge_id, cell, lane_set)
    return detector_id


def _simple_paths(net: RoadNetwork, origin: str, dest: str, limit: int = MAX_ENUMERATED_PATHS):
    """All node-simple edge sequences origin->dest (desk-scale exhaustive DFS)."""
    paths = []
    stack = [(origin, (), frozenset((origin,)))]
    while stack:
        node, edges_so_far, visited = stack.pop()
        for eid in net.out_edges(node):
            e = net.edges[eid]
            nxt = e.to_node
            if nxt == dest:
                paths.append(edges_so_far + (eid,))
                if len(paths) > limit:
                    raise NetworkError(
                        f"more than {limit} simple paths between {origin!r} and {dest!r}")
            elif nxt not in visited:
                stack.append((nxt, edges_so_far + (eid,), visited | {nxt}))
    return paths


def route_candidates(net: RoadNetwork, origin: str, dest: str, k: int) -> list:
    """Up to k loop-free routes, fastest (free-flow) first.

    Ties break on the lexicographic edge-id sequence. No path -> empty list.
    """
    for ref in (origin, dest):
        if ref not in net.nodes:
            raise NetworkError(f"unknown node {ref!r}")
    if origin == dest:
        raise NetworkError("origin and destination must differ")
    if k < 1:
        return []
    scored = [(net.free_flow_time(p), p) for p in _simple_paths(net, origin, dest)]
    scored.sort(key=lambda tp: (tp[0], tp[1]))
    return [Route(edges=p, free_flow_time_s=t) for t, p in scored[:k]]


def node_distances(net: RoadNetwork, source: str) -> dict:
    """Dijkstra over the undirected road graph, edge weights in meters."""
    adj = {}
    for e in net.edges.values():
        adj.setdefault(e.from_node, []).append((e.to_node, e.length_m))
        adj.setdefault(e.to_node, []).append((e.from_node, e.length_m))
    dist = {source: 0.0}
    heap = [(0.0, source)]
    while heap:
        d, node = heapq.heappop(heap)
        if d > dist.get(node, math.inf):
            continue
        for nxt, w in adj.get(node, []):
            nd = d + w
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return dist


def ring_network(n_cells: int, lanes: int = 1, cell_length_m: float = DEFAULT_CELL_LENGTH_M,
                 v_max_cells: int = 20) -> RoadNetwork:
    """Single self-loop edge with periodic boundary; the CA test substrate."""
    node = Node("ring", 0.0, 0.0)
    edge = Edge("ring", "ring", "ring", n_cells * cell_length_m, lanes, v_max_cells, n_cells)
    return RoadNetwork(nodes={"ring": node}, edges={"ring": edge}, detectors={},
                       cell_length_m=cell_length_m)
