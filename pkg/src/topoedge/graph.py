"""Attributed behavior multigraph: entities as nodes, behaviors as labeled edges.

Edges are undirected, may be parallel (same endpoint pair) and may be
self-loops.  Every edge carries a fixed-width attribute vector and one of
three labels.  Node and edge ids are dense 0-based integers assigned in
input order, so an id doubles as a row index into the attribute matrices.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NORMAL = "normal"
ANOMALOUS = "anomalous"
UNLABELED = "unlabeled"
LABELS = (NORMAL, ANOMALOUS, UNLABELED)


class GraphError(Exception):
    """Base class for graph construction and serialization failures."""


class UnknownEndpointKey(GraphError):
    """An edge references an entity key with no corresponding node."""


class InconsistentDimension(GraphError):
    """Attribute vectors within one graph disagree on dimensionality."""


class DuplicateEntityKey(GraphError):
    """Two nodes share the same entity key."""


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    entity_key: str
    attr: np.ndarray


@dataclass(frozen=True, eq=False)
class Edge:
    id: int
    # Canonical unordered pair: endpoints[0] <= endpoints[1].
    endpoints: tuple[int, int]
    attr: np.ndarray
    label: str


class BehaviorGraph:
    """Immutable-by-convention container with per-node incidence lists."""

    def __init__(self, nodes: list[Node], edges: list[Edge],
                 node_dim: int, edge_dim: int):
        self.nodes = nodes
        self.edges = edges
        self.node_dim = node_dim
        self.edge_dim = edge_dim
        self.key_to_id = {n.entity_key: n.id for n in nodes}
        incidence: list[list[int]] = [[] for _ in nodes]
        for e in edges:
            u, v = e.endpoints
            incidence[u].append(e.id)
            if v != u:
                incidence[v].append(e.id)
        # Sorted ids keep every derived quantity independent of edge input order.
        self.incidence = [sorted(ids) for ids in incidence]

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def degree(self, node_id: int) -> int:
        """Number of incident edges; a self-loop counts once."""
        return len(self.incidence[node_id])

    def node_attr_matrix(self) -> np.ndarray:
        if any(n.attr.size != self.node_dim for n in self.nodes):
            raise InconsistentDimension(
                "some node attrs are unfilled; run node_attr_from_edges first")
        return np.array([n.attr for n in self.nodes], dtype=float).reshape(
            self.node_count, self.node_dim)

    def edge_attr_matrix(self) -> np.ndarray:
        return np.array([e.attr for e in self.edges], dtype=float).reshape(
            self.edge_count, self.edge_dim)

    def labels(self) -> list[str]:
        return [e.label for e in self.edges]

    def with_edge_attrs(self, attrs: np.ndarray) -> "BehaviorGraph":
        """Copy of the graph with edge attribute rows replaced."""
        if attrs.shape != (self.edge_count, self.edge_dim):
            raise InconsistentDimension(
                f"expected edge attr shape {(self.edge_count, self.edge_dim)}, "
                f"got {attrs.shape}")
        edges = [Edge(e.id, e.endpoints, np.array(attrs[e.id], dtype=float),
                      e.label) for e in self.edges]
        return BehaviorGraph(self.nodes, edges, self.node_dim, self.edge_dim)

    def with_node_attrs(self, attrs: np.ndarray) -> "BehaviorGraph":
        """Copy of the graph with node attribute rows replaced."""
        if attrs.shape[0] != self.node_count:
            raise InconsistentDimension(
                f"expected {self.node_count} node attr rows, got {attrs.shape[0]}")
        nodes = [Node(n.id, n.entity_key, np.array(attrs[n.id], dtype=float))
                 for n in self.nodes]
        return BehaviorGraph(nodes, self.edges, int(attrs.shape[1]),
                             self.edge_dim)


def build_graph(nodes: Iterable[tuple[str, Sequence[float]]],
                edges: Iterable[tuple[str, str, Sequence[float], str]],
                ) -> BehaviorGraph:
    """Assemble a BehaviorGraph from (key, attr) nodes and keyed edges.

    Node attrs may be empty sequences; node_attr_from_edges can fill them
    later.  Raises DuplicateEntityKey, UnknownEndpointKey or
    InconsistentDimension on malformed input.
    """
    node_objs: list[Node] = []
    key_to_id: dict[str, int] = {}
    node_dim: int | None = None
    for key, attr in nodes:
        if key in key_to_id:
            raise DuplicateEntityKey(f"entity key {key!r} appears twice")
        vec = np.asarray(attr, dtype=float).reshape(-1)
        # An empty attr means "derive me later"; only sized attrs must agree.
        if vec.size > 0:
            if node_dim is None:
                node_dim = vec.size
            elif vec.size != node_dim:
                raise InconsistentDimension(
                    f"node {key!r} attr has dim {vec.size}, expected {node_dim}")
        node_id = len(node_objs)
        key_to_id[key] = node_id
        node_objs.append(Node(node_id, key, vec))

    edge_objs: list[Edge] = []
    edge_dim: int | None = None
    for key_a, key_b, attr, label in edges:
        if key_a not in key_to_id:
            raise UnknownEndpointKey(f"unknown endpoint key {key_a!r}")
        if key_b not in key_to_id:
            raise UnknownEndpointKey(f"unknown endpoint key {key_b!r}")
        if label not in LABELS:
            raise GraphError(f"bad edge label {label!r}")
        vec = np.asarray(attr, dtype=float).reshape(-1)
        if edge_dim is None:
            edge_dim = vec.size
        elif vec.size != edge_dim:
            raise InconsistentDimension(
                f"edge ({key_a!r}, {key_b!r}) attr has dim {vec.size}, "
                f"expected {edge_dim}")
        u, v = sorted((key_to_id[key_a], key_to_id[key_b]))
        edge_objs.append(Edge(len(edge_objs), (u, v), vec, label))

    return BehaviorGraph(node_objs, edge_objs,
                         node_dim or 0, edge_dim or 0)


@dataclass(frozen=True)
class AdjacencyEntry:
    """One directed adjacency record for a pair of edges sharing a node.

    outer_self is the endpoint of the owning edge that is not the shared
    node, outer_neighbor the analogous endpoint of the neighbor edge.  For
    a self-loop both endpoints coincide, so its outer node is the loop
    node itself.
    """
    neighbor: int
    shared: int
    outer_self: int
    outer_neighbor: int


class EdgeAdjacencyIndex:
    """Per-edge adjacency entries, symmetric and excluding the edge itself.

    Parallel edges share two nodes and therefore contribute two entries,
    one per shared node.
    """

    def __init__(self, entries: list[tuple[AdjacencyEntry, ...]]):
        self.entries = entries

    def neighbors(self, edge_id: int) -> tuple[AdjacencyEntry, ...]:
        return self.entries[edge_id]

    @property
    def total_entries(self) -> int:
        return sum(len(e) for e in self.entries)


def _other_endpoint(edge: Edge, node_id: int) -> int:
    u, v = edge.endpoints
    return v if node_id == u else u


def build_edge_adjacency(g: BehaviorGraph) -> EdgeAdjacencyIndex:
    """Index every pair of distinct edges that share at least one node."""
    raw: list[list[AdjacencyEntry]] = [[] for _ in g.edges]
    for node_id, incident in enumerate(g.incidence):
        for e_id in incident:
            e = g.edges[e_id]
            for f_id in incident:
                if f_id == e_id:
                    continue
                f = g.edges[f_id]
                raw[e_id].append(AdjacencyEntry(
                    neighbor=f_id,
                    shared=node_id,
                    outer_self=_other_endpoint(e, node_id),
                    outer_neighbor=_other_endpoint(f, node_id)))
    entries = [tuple(sorted(lst, key=lambda a: (a.neighbor, a.shared)))
               for lst in raw]
    return EdgeAdjacencyIndex(entries)


def node_attr_from_edges(g: BehaviorGraph) -> BehaviorGraph:
    """Fill empty node attrs with [log(1+degree)] ++ mean incident edge attr.

    Nodes that already carry attributes keep them, but their dimension must
    match the derived one.  Isolated nodes receive all zeros.
    """
    derived_dim = 1 + g.edge_dim
    attrs = np.zeros((g.node_count, derived_dim))
    for n in g.nodes:
        if n.attr.size == 0:
            incident = g.incidence[n.id]
            attrs[n.id, 0] = math.log(1 + len(incident))
            if incident:
                attrs[n.id, 1:] = np.mean(
                    [g.edges[e_id].attr for e_id in incident], axis=0)
        elif n.attr.size == derived_dim:
            attrs[n.id] = n.attr
        else:
            raise InconsistentDimension(
                f"node {n.entity_key!r} has attr dim {n.attr.size}, cannot mix "
                f"with derived dim {derived_dim}")
    return g.with_node_attrs(attrs)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_graph(g: BehaviorGraph, out_dir: str | Path) -> None:
    """Write nodes.csv, edges.csv and meta.json under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity_key"] + [f"a{i}" for i in range(g.node_dim)])
        for n in g.nodes:
            w.writerow([n.entity_key] + [_fmt(x) for x in n.attr])
    with open(out / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key_a", "key_b", "label"]
                   + [f"a{i}" for i in range(g.edge_dim)])
        for e in g.edges:
            u, v = e.endpoints
            w.writerow([g.nodes[u].entity_key, g.nodes[v].entity_key, e.label]
                       + [_fmt(x) for x in e.attr])
    meta = {"node_count": g.node_count, "edge_count": g.edge_count,
            "node_dim": g.node_dim, "edge_dim": g.edge_dim}
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_graph(in_dir: str | Path) -> BehaviorGraph:
    """Inverse of save_graph; validates against meta.json."""
    src = Path(in_dir)
    with open(src / "meta.json") as fh:
        meta = json.load(fh)
    nodes: list[tuple[str, list[float]]] = []
    with open(src / "nodes.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            nodes.append((row[0], [float(x) for x in row[1:]]))
    edges: list[tuple[str, str, list[float], str]] = []
    with open(src / "edges.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            edges.append((row[0], row[1], [float(x) for x in row[3:]], row[2]))
    g = build_graph(nodes, edges)
    if (g.node_count != meta["node_count"] or g.edge_count != meta["edge_count"]
            or g.node_dim != meta["node_dim"] or g.edge_dim != meta["edge_dim"]):
        raise GraphError(f"graph in {src} does not match its meta.json")
    return g
