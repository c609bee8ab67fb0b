"""Category-correlation graph construction.

A graph is a KxK nonnegative matrix A whose entry a_ij weighs how strongly
category j's message contributes to category i's update.  Two informative
builders (semantic embeddings, taxonomy hierarchy) share the same
lambda-decay map from distances to correlations; two non-informative
builders (uniform, random) exist for ablations.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import as_matrix
from .errors import DataError, FormatError

log = logging.getLogger(__name__)

PROVENANCES = ("semantic", "hierarchy", "uniform", "random")


@dataclass
class CategoryGraph:
    size: int
    adjacency: np.ndarray
    provenance: str

    def __post_init__(self):
        self.adjacency = as_matrix(self.adjacency, "adjacency")
        if self.adjacency.shape != (self.size, self.size):
            raise DataError(
                f"adjacency is {self.adjacency.shape}, expected {(self.size, self.size)}"
            )
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance {self.provenance!r}")
        if self.adjacency.size and self.adjacency.min() < 0:
            raise DataError("adjacency entries must be nonnegative")


@dataclass
class EmbeddingTable:
    """K semantic vectors, one row per category, plus the id -> row map."""

    ids: list[int]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = as_matrix(self.vectors, "embeddings")
        if len(self.ids) != self.vectors.shape[0]:
            raise DataError("embedding id count does not match row count")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate category id in embedding table")
        if self.vectors.shape[1] == 0:
            raise DataError("embedding dimension must be positive")
        self.row_of = {cid: i for i, cid in enumerate(self.ids)}


@dataclass
class HierarchyEdges:
    """Undirected taxonomy edges over string node ids.

    `leaf_ids` are the category nodes, in the order that defines graph rows;
    internal nodes may use any ids that do not collide with them.
    """

    edges: list[tuple[str, str]]
    leaf_ids: list[str]
    nodes: set[str] = field(init=False)

    def __post_init__(self):
        self.nodes = set()
        for a, b in self.edges:
            self.nodes.add(a)
            self.nodes.add(b)
        if len(set(self.leaf_ids)) != len(self.leaf_ids):
            raise DataError("duplicate leaf id in hierarchy")


def _decay_from_distances(dist, decay_lambda, provenance):
    """a_ij = lambda^(d_ij - min_{k != i} d_ik) off-diagonal, a_ii = 1."""
    k = dist.shape[0]
    offdiag = dist + np.where(np.eye(k, dtype=bool), np.inf, 0.0)
    row_min = offdiag.min(axis=1, keepdims=True)
    a = decay_lambda ** (dist - row_min)
    over = a > 1.0
    np.fill_diagonal(over, False)
    if over.any():
        # Only reachable through duplicate points; keep correlations in [0,1].
        log.warning("%s graph: clamped %d correlation(s) above 1", provenance, over.sum())
        a = np.minimum(a, 1.0)
    np.fill_diagonal(a, 1.0)
    return a


def build_semantic_graph(emb: EmbeddingTable, decay_lambda: float = 0.4) -> CategoryGraph:
    """Correlations from Euclidean distances between semantic embeddings."""
    if not 0.0 < decay_lambda < 1.0:
        raise ValueError(f"decay_lambda must be in (0, 1), got {decay_lambda}")
    k = len(emb.ids)
    if k < 2:
        raise DataError("semantic graph needs at least 2 categories")
    diff = emb.vectors[:, None, :] - emb.vectors[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    return CategoryGraph(k, _decay_from_distances(dist, decay_lambda, "semantic"), "semantic")


def shortest_path_lengths(edges: HierarchyEdges) -> np.ndarray:
    """Unweighted shortest-path lengths between all leaf pairs (BFS per leaf)."""
    adj: dict[str, list[str]] = {}
    for a, b in edges.edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    k = len(edges.leaf_ids)
    out = np.zeros((k, k))
    leaf_pos = {cid: i for i, cid in enumerate(edges.leaf_ids)}
    for i, start in enumerate(edges.leaf_ids):
        if start not in adj:
            raise DataError(f"category {start!r} does not appear in the hierarchy")
        seen = {start: 0}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nxt in adj[node]:
                if nxt not in seen:
                    seen[nxt] = seen[node] + 1
                    queue.append(nxt)
        for other in edges.leaf_ids:
            if other not in seen:
                raise DataError(f"category {other!r} is not connected to {start!r}")
            out[i, leaf_pos[other]] = seen[other]
    return out


def build_hierarchy_graph(edges: HierarchyEdges, decay_lambda: float = 0.4) -> CategoryGraph:
    """Correlations from taxonomy shortest-path distances."""
    if not 0.0 < decay_lambda < 1.0:
        raise ValueError(f"decay_lambda must be in (0, 1), got {decay_lambda}")
    if len(edges.leaf_ids) < 2:
        raise DataError("hierarchy graph needs at least 2 categories")
    dist = shortest_path_lengths(edges)
    k = len(edges.leaf_ids)
    return CategoryGraph(k, _decay_from_distances(dist, decay_lambda, "hierarchy"), "hierarchy")


def build_uniform_graph(k: int) -> CategoryGraph:
    """Every entry (diagonal included) equals 1/K."""
    if k < 1:
        raise ValueError("K must be >= 1")
    return CategoryGraph(k, np.full((k, k), 1.0 / k), "uniform")


def build_random_graph(k: int, seed: int) -> CategoryGraph:
    """Entries i.i.d. uniform on [0, 1); deterministic per seed."""
    if k < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    return CategoryGraph(k, rng.random((k, k)), "random")


# -- file formats -------------------------------------------------------------


def load_embeddings(path) -> EmbeddingTable:
    """Text layout: one line per category, `<id> <v1> <v2> ... <ve>`."""
    ids, rows = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                ids.append(int(parts[0]))
                rows.append([float(p) for p in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if len(rows[-1]) == 0:
                raise FormatError(f"{path}:{lineno}: no embedding values")
            if len(rows[-1]) != len(rows[0]):
                raise FormatError(f"{path}:{lineno}: inconsistent embedding width")
    if not ids:
        raise FormatError(f"{path}: empty embedding file")
    return EmbeddingTable(ids, np.array(rows))


def save_embeddings(path, emb: EmbeddingTable):
    with open(path, "w", encoding="utf-8") as fh:
        for cid, row in zip(emb.ids, emb.vectors):
            fh.write(str(cid) + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_hierarchy(path, leaf_ids: list[str]) -> HierarchyEdges:
    """Text layout: one undirected edge per line, `<node-id> <node-id>`."""
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected two node ids")
            edges.append((parts[0], parts[1]))
    return HierarchyEdges(edges, leaf_ids)


def save_hierarchy(path, edges: HierarchyEdges):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in edges.edges:
            fh.write(f"{a} {b}\n")


def save_graph(path, graph: CategoryGraph):
    """Header `K=<K> provenance=<p>`, then K rows of K floats."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"K={graph.size} provenance={graph.provenance}\n")
        for row in graph.adjacency:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_graph(path) -> CategoryGraph:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        try:
            fields = dict(part.split("=", 1) for part in header)
            k = int(fields["K"])
            provenance = fields["provenance"]
        except (ValueError, KeyError):
            raise FormatError(f"{path}: bad graph header {header!r}") from None
        rows = []
        for lineno, line in enumerate(fh, 2):
            if line.strip():
                rows.append([float(v) for v in line.split()])
        if len(rows) != k or any(len(r) != k for r in rows):
            raise FormatError(f"{path}: expected {k}x{k} matrix body")
    return CategoryGraph(k, np.array(rows), provenance)
