"""Persistent homology over edge-attribute point clouds.

Edges of a behavior graph become points (one point per edge, carrying the
edge id).  A Vietoris-Rips filtration up to 2-simplices is built over the
pairwise Euclidean distances, persistence is computed for dimensions 0
and 1, and the most persistent finite features select the edge set whose
attributes get pulled toward their common mean.

Scale convention: a simplex appears when the largest pairwise distance
among its vertices is reached, so scales are diameters, not radii.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import ANOMALOUS, NORMAL, BehaviorGraph

SCALE_CONVENTION = "diameter"


class HomologyError(Exception):
    pass


class TooFewEdges(HomologyError):
    """A point cloud needs at least two edges."""


class EmptySelection(HomologyError):
    """No persistent structure was selected."""


@dataclass(frozen=True)
class PhoConfig:
    """Knobs for the homology stage.

    persistence_rule is either "mean_plus_std" (keep finite features whose
    persistence exceeds mean plus one population standard deviation) or
    "top_fraction:<f>" (keep the ceil(f * count) most persistent).  dims
    restricts which homology dimensions contribute members.  max_scale
    overrides the quantile-derived filtration cutoff when set.
    """
    alpha: float = 0.7
    max_points: int = 2000
    max_scale_quantile: float = 0.5
    max_scale: float | None = None
    persistence_rule: str = "mean_plus_std"
    dims: tuple[int, ...] = (0, 1)
    seed: int = 0


@dataclass(frozen=True)
class PointCloud:
    ids: tuple[int, ...]  # edge ids, ascending
    X: np.ndarray         # one row per id


@dataclass(frozen=True, slots=True)
class Simplex:
    vertices: tuple[int, ...]  # ascending edge ids
    scale: float


@dataclass(frozen=True)
class Filtration:
    simplices: tuple[Simplex, ...]  # sorted by (scale, dimension, vertices)
    max_scale: float


@dataclass(frozen=True)
class PersistenceFeature:
    dimension: int
    birth: float
    death: float  # math.inf for essential features
    members: frozenset[int]

    @property
    def persistence(self) -> float:
        return self.death - self.birth


@dataclass(frozen=True)
class PersistenceDiagram:
    features: tuple[PersistenceFeature, ...]
    max_scale: float
    point_count: int


def build_point_cloud(g: BehaviorGraph, cfg: PhoConfig) -> PointCloud:
    """Edge attributes as points; seeded subsample above cfg.max_points."""
    if g.edge_count < 2:
        raise TooFewEdges(f"need at least 2 edges, have {g.edge_count}")
    ids = list(range(g.edge_count))
    if g.edge_count > cfg.max_points:
        rng = np.random.default_rng(cfg.seed)
        ids = sorted(rng.choice(g.edge_count, size=cfg.max_points,
                                replace=False).tolist())
    X = g.edge_attr_matrix()[ids]
    return PointCloud(tuple(ids), X)


def _pairwise_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    D2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D2, 0.0, out=D2)
    D = np.sqrt(D2)
    np.fill_diagonal(D, 0.0)
    return D


def build_filtration(pc: PointCloud, max_scale: float | None = None,
                     max_scale_quantile: float = 0.5) -> Filtration:
    """Vietoris-Rips complex up to 2-simplices under a scale cutoff.

    Every pair within max_scale appears at its distance; every triangle
    whose three sides are all within max_scale appears at the largest of
    the three side scales.  When max_scale is None it defaults to the
    requested quantile of all pairwise distances.
    """
    n = len(pc.ids)
    D = _pairwise_distances(pc.X)
    iu, ju = np.triu_indices(n, k=1)
    dists = D[iu, ju]
    if max_scale is None:
        max_scale = float(np.quantile(dists, max_scale_quantile))
    ids = pc.ids

    simplices: list[Simplex] = [Simplex((i,), 0.0) for i in ids]
    within = dists <= max_scale
    pair_i = iu[within]
    pair_j = ju[within]
    pair_d = dists[within]
    for i, j, d in zip(pair_i.tolist(), pair_j.tolist(), pair_d.tolist()):
        simplices.append(Simplex((ids[i], ids[j]), d))

    # Triangles: for each retained pair, common neighbors above the pair.
    adj = np.zeros((n, n), dtype=bool)
    adj[pair_i, pair_j] = True
    adj[pair_j, pair_i] = True
    idx = np.arange(n)
    for i, j in zip(pair_i.tolist(), pair_j.tolist()):
        common = np.nonzero(adj[i] & adj[j] & (idx > j))[0]
        for k in common.tolist():
            scale = max(D[i, j], D[i, k], D[j, k])
            simplices.append(Simplex((ids[i], ids[j], ids[k]), float(scale)))

    simplices.sort(key=lambda s: (s.scale, len(s.vertices), s.vertices))
    return Filtration(tuple(simplices), float(max_scale))


class _UnionFind:
    """Union-find with elder-rule merges and explicit member tracking."""

    def __init__(self):
        self.parent: dict[int, int] = {}
        self.members: dict[int, list[int]] = {}
        self.eldest: dict[int, int] = {}

    def add(self, x: int) -> None:
        self.parent[x] = x
        self.members[x] = [x]
        self.eldest[x] = x

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, u: int, v: int) -> frozenset[int] | None:
        """Merge the components of u and v under the elder rule.

        All vertices are born at scale 0, so seniority falls back to the
        filtration order of the creating vertices, i.e. the smaller id.
        Returns a snapshot of the dying component's members, or None when
        u and v are already connected.
        """
        ru, rv = self.find(u), self.find(v)
        if ru == rv:
            return None
        surv, dead = (ru, rv) if self.eldest[ru] < self.eldest[rv] else (rv, ru)
        snapshot = frozenset(self.members[dead])
        self.parent[dead] = surv
        self.members[surv].extend(self.members.pop(dead))
        self.eldest[surv] = min(self.eldest[surv], self.eldest.pop(dead))
        return snapshot


def _forest_cycle(forest: dict[int, list[int]], u: int, v: int) -> frozenset[int]:
    """Vertices on the unique u-v path in the spanning forest, plus u, v."""
    if u == v:
        return frozenset([u])
    prev = {u: u}
    frontier = [u]
    while frontier and v not in prev:
        nxt = []
        for x in frontier:
            for y in forest.get(x, ()):
                if y not in prev:
                    prev[y] = x
                    nxt.append(y)
        frontier = nxt
    path = [v]
    while path[-1] != u:
        path.append(prev[path[-1]])
    return frozenset(path)


def compute_persistence(filt: Filtration) -> PersistenceDiagram:
    """Persistence pairs for dimensions 0 and 1.

    Dimension 0 runs union-find over the 1-simplices in filtration order;
    when two components merge, the younger one dies and its member set is
    recorded.  Dimension 1 reduces the triangle boundary columns over the
    1-simplices (Z/2 column additions); a non-zero reduced column kills
    the cycle created by its largest 1-simplex and holds a representative
    cycle for the member set.  Zero-persistence pairs are dropped.
    """
    vertices: list[int] = []
    edges: list[Simplex] = []
    triangles: list[Simplex] = []
    for s in filt.simplices:
        k = len(s.vertices)
        if k == 1:
            vertices.append(s.vertices[0])
        elif k == 2:
            edges.append(s)
        else:
            triangles.append(s)

    features: list[PersistenceFeature] = []
    uf = _UnionFind()
    for v in vertices:
        uf.add(v)
    forest: dict[int, list[int]] = defaultdict(list)
    edge_rank: dict[tuple[int, int], int] = {}
    positive: dict[int, Simplex] = {}  # rank -> cycle-creating 1-simplex

    for rank, s in enumerate(edges):
        u, v = s.vertices
        edge_rank[s.vertices] = rank
        dead_members = uf.union(u, v)
        if dead_members is None:
            positive[rank] = s
            continue
        forest[u].append(v)
        forest[v].append(u)
        if s.scale > 0.0:
            features.append(PersistenceFeature(0, 0.0, s.scale, dead_members))

    roots = {uf.find(v) for v in vertices}
    for r in sorted(roots):
        features.append(PersistenceFeature(
            0, 0.0, math.inf, frozenset(uf.members[r])))

    pivots: dict[int, set[int]] = {}
    for s in triangles:
        a, b, c = s.vertices
        col = {edge_rank[(a, b)], edge_rank[(a, c)], edge_rank[(b, c)]}
        while col:
            low = max(col)
            if low not in pivots:
                break
            col ^= pivots[low]
        if not col:
            continue
        low = max(col)
        assert low in positive, "reduced column must end on a cycle edge"
        pivots[low] = col
        birth = positive[low].scale
        if birth < s.scale:
            members = set()
            for r in col:
                members.update(edges[r].vertices)
            features.append(PersistenceFeature(1, birth, s.scale,
                                               frozenset(members)))

    for rank in sorted(positive):
        if rank in pivots:
            continue
        s = positive[rank]
        u, v = s.vertices
        features.append(PersistenceFeature(
            1, s.scale, math.inf, _forest_cycle(forest, u, v)))

    features.sort(key=lambda f: (f.dimension, f.birth, f.death,
                                 tuple(sorted(f.members))))
    return PersistenceDiagram(tuple(features), filt.max_scale, len(vertices))


def parse_rule(rule: str) -> tuple[str, float | None]:
    if rule == "mean_plus_std":
        return "mean_plus_std", None
    if rule.startswith("top_fraction:"):
        try:
            frac = float(rule.split(":", 1)[1])
        except ValueError:
            raise HomologyError(f"malformed persistence rule {rule!r}") from None
        if not 0.0 < frac <= 1.0:
            raise HomologyError(f"top_fraction needs a value in (0, 1]: {rule}")
        return "top_fraction", frac
    raise HomologyError(f"unknown persistence rule {rule!r}")


def select_persistent(diag: PersistenceDiagram, cfg: PhoConfig) -> frozenset[int]:
    """Edge ids belonging to the selected persistent features.

    Only finite features in cfg.dims participate.  With no finite feature,
    or none above the mean-plus-std threshold, the selection is empty and
    callers skip the optimization step.
    """
    kind, frac = parse_rule(cfg.persistence_rule)
    finite = [f for f in diag.features
              if f.dimension in cfg.dims and math.isfinite(f.death)]
    if not finite:
        return frozenset()
    pers = np.array([f.persistence for f in finite])
    if kind == "mean_plus_std":
        threshold = float(pers.mean() + pers.std())
        chosen = [f for f, p in zip(finite, pers) if p > threshold]
    else:
        count = math.ceil(frac * len(finite))
        order = sorted(
            range(len(finite)),
            key=lambda i: (-pers[i], finite[i].dimension, finite[i].birth,
                           tuple(sorted(finite[i].members))))
        chosen = [finite[i] for i in order[:count]]
    out: set[int] = set()
    for f in chosen:
        out.update(f.members)
    return frozenset(out)


def optimize_attributes(g: BehaviorGraph, vr_edges: frozenset[int],
                        alpha: float) -> BehaviorGraph:
    """Blend each selected edge attr with the selected-set mean.

    attr' = alpha * attr + (1 - alpha) * m where m is the mean attribute
    over vr_edges.  Unselected edges are untouched.
    """
    if not vr_edges:
        raise EmptySelection("no edges selected for optimization")
    attrs = g.edge_attr_matrix()
    sel = sorted(vr_edges)
    m = attrs[sel].mean(axis=0)
    attrs[sel] = alpha * attrs[sel] + (1.0 - alpha) * m
    return g.with_edge_attrs(attrs)


def structure_composition(g: BehaviorGraph,
                          vr_edges: frozenset[int]) -> dict[str, float | int]:
    """Label mix of the selected edges, as fractions of the labeled ones."""
    if not vr_edges:
        raise EmptySelection("no selected edges to summarize")
    labels = [g.edges[e].label for e in sorted(vr_edges)]
    n_anom = labels.count(ANOMALOUS)
    n_norm = labels.count(NORMAL)
    labeled = n_anom + n_norm
    if labeled == 0:
        raise EmptySelection("selected edges carry no labels")
    return {"fraction_anomalous": n_anom / labeled,
            "fraction_normal": n_norm / labeled,
            "selected_count": len(vr_edges)}


def diagram_metadata(diag: PersistenceDiagram) -> dict:
    return {"scale_convention": SCALE_CONVENTION,
            "max_scale": diag.max_scale,
            "point_count": diag.point_count}


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else format(x, ".17g")


def save_diagram(diag: PersistenceDiagram, path: str | Path) -> None:
    """CSV rows dimension,birth,death,member_ids with ';'-joined members."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dimension", "birth", "death", "member_ids"])
        for f in diag.features:
            w.writerow([f.dimension, _fmt(f.birth), _fmt(f.death),
                        ";".join(str(m) for m in sorted(f.members))])


def load_diagram(path: str | Path, max_scale: float,
                 point_count: int) -> PersistenceDiagram:
    features = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for dim, birth, death, members in reader:
            ids = frozenset(int(m) for m in members.split(";") if m)
            features.append(PersistenceFeature(
                int(dim), float(birth), float(death), ids))
    return PersistenceDiagram(tuple(features), max_scale, point_count)
