"""Attributed graphs and train/test tasks."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


def canonical_edges(edges, n: int) -> np.ndarray:
    """Return an ``(E, 2)`` int64 array with ``i < j``, sorted, unique, no self-loops."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise ValueError(f"edge endpoint outside [0, {n})")
    lo = np.minimum(e[:, 0], e[:, 1])
    hi = np.maximum(e[:, 0], e[:, 1])
    keep = lo != hi
    key = np.unique(lo[keep] * n + hi[keep])
    return np.stack([key // n, key % n], axis=1).astype(np.int64)


@dataclass
class Graph:
    """Undirected attributed graph with integer node labels in ``[0, C)``."""

    n: int
    edges: np.ndarray
    X: np.ndarray
    y: np.ndarray
    C: int

    def __post_init__(self):
        self.n = int(self.n)
        self.C = int(self.C)
        self.edges = canonical_edges(self.edges, self.n)
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] != self.n or self.y.shape != (self.n,):
            raise ValueError("feature/label row count does not match n")
        if self.C < 1:
            raise ValueError("class count must be >= 1")

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> sparse.csr_matrix:
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        return sparse.csr_matrix(
            (data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(self.n, self.n)
        )

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n)


@dataclass
class Task:
    """A graph with a disjoint train/test node partition."""

    graph: Graph
    train_ids: np.ndarray
    test_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_ids = np.asarray(self.train_ids, dtype=np.int64)
        self.test_ids = np.asarray(self.test_ids, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        n = self.graph.n
        if len(self.train_ids) == 0:
            raise ValueError("train split is empty")
        both = np.concatenate([self.train_ids, self.test_ids])
        if both.size and (both.min() < 0 or both.max() >= n):
            raise ValueError("split index outside the graph")
        if len(np.unique(both)) != len(both):
            raise ValueError("train and test splits overlap or repeat nodes")

    @property
    def train_labels(self) -> np.ndarray:
        return self.graph.y[self.train_ids]

    @property
    def test_labels(self) -> np.ndarray:
        return self.graph.y[self.test_ids]

    def digest(self) -> str:
        """Content hash over all arrays (used to check task freshness)."""
        h = hashlib.sha256()
        g = self.graph
        for arr in (g.X, g.y, g.edges, self.train_ids, self.test_ids):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.asarray([g.n, g.C], dtype=np.int64).tobytes())
        return h.hexdigest()


def edge_homophily(g: Graph) -> float:
    """Fraction of edges whose endpoints share a label."""
    if g.n_edges == 0:
        raise ValueError("edge homophily is undefined on an edgeless graph")
    same = g.y[g.edges[:, 0]] == g.y[g.edges[:, 1]]
    return float(same.mean())


@dataclass
class PpdMatrix:
    """Per-test-node class probabilities.

    Column ``k`` is the probability of original label ``classes[k]``; row
    ``r`` belongs to node ``node_ids[r]``.
    """

    probs: np.ndarray
    classes: np.ndarray
    node_ids: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        if self.probs.shape != (len(self.node_ids), len(self.classes)):
            raise ValueError("probability matrix shape does not match node ids / classes")

    def argmax_labels(self) -> np.ndarray:
        """Original label of the most probable class; ties go to the lower column."""
        if self.probs.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return self.classes[np.argmax(self.probs, axis=1)]

    def row_sums(self) -> np.ndarray:
        return self.probs.sum(axis=1)
