"""Weighted digraphs, their Laplacians and the left null vector oracle.

Convention: ``adjacency[i, j] = a_ij > 0`` iff there is an edge j -> i, so node
j is an in-neighbour of node i and row i of the Laplacian sums over in-neighbours.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy import linalg

from dooc.errors import GraphError

NULL_SPACE_RTOL = 1e-8

# Five-node example network, 1-based (from, to).
FIG1_EDGES: tuple[tuple[int, int], ...] = (
    (3, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (4, 5),
    (2, 5),
    (5, 1),
)


@dataclass(frozen=True)
class Digraph:
    """A weighted directed graph on ``n`` nodes."""

    adjacency: np.ndarray

    def __post_init__(self) -> None:
        a = np.array(self.adjacency, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise GraphError(f"Adjacency must be a non-empty square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise GraphError("Adjacency contains non-finite weights")
        if np.any(a < 0):
            raise GraphError("Adjacency weights must be nonnegative")
        if np.any(np.diag(a) != 0):
            raise GraphError("Self-loops are not allowed (a_ii must be 0)")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int, float]]) -> Digraph:
        """Build a digraph from 0-based ``(from, to, weight)`` triples."""
        if n < 1:
            raise GraphError(f"Node count must be positive, got {n}")
        a = np.zeros((n, n))
        for src, dst, weight in edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise GraphError(f"Edge {src}->{dst} references a node outside 0..{n - 1}")
            if weight <= 0:
                raise GraphError(f"Edge {src}->{dst} must have positive weight, got {weight}")
            a[dst, src] = weight
        return cls(a)

    def to_networkx(self) -> nx.DiGraph:
        # from_numpy_array reads entry (j, i) as edge j -> i.
        return nx.from_numpy_array(self.adjacency.T, create_using=nx.DiGraph)


@dataclass(frozen=True)
class Laplacian:
    """Laplacian ``L = D_in - A`` together with the digraph it came from."""

    matrix: np.ndarray
    source: Digraph = field(repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def example_digraph(weights: dict[tuple[int, int], float] | None = None) -> Digraph:
    """The five-node unbalanced example network, unit weights unless overridden.

    Args:
        weights: Optional ``{(from, to): weight}`` overrides, 1-based.
    """
    weights = weights or {}
    edges = [(src - 1, dst - 1, weights.get((src, dst), 1.0)) for src, dst in FIG1_EDGES]
    return Digraph.from_edges(5, edges)


def laplacian(g: Digraph) -> Laplacian:
    """Laplacian with ``l_ii = sum_j a_ij`` and ``l_ij = -a_ij``."""
    a = g.adjacency
    matrix = np.diag(a.sum(axis=1)) - a
    matrix.setflags(write=False)
    return Laplacian(matrix=matrix, source=g)


def is_strongly_connected(g: Digraph) -> bool:
    """True iff every node reaches every other node along directed edges."""
    return nx.is_strongly_connected(g.to_networkx())


def is_weight_balanced(lap: Laplacian, atol: float = 1e-12) -> bool:
    """True iff ``1^T L = 0``, i.e. in-weights equal out-weights at every node."""
    return bool(np.allclose(lap.matrix.sum(axis=0), 0.0, atol=atol))


def left_eigenvector(lap: Laplacian) -> np.ndarray:
    """Positive left null vector ``r`` of ``L`` normalised so that ``sum(r) = 1``.

    Raises:
        GraphError: if the digraph is not strongly connected, or the null space of
            ``L^T`` is not one-dimensional with a sign-definite basis vector.
    """
    if not is_strongly_connected(lap.source):
        raise GraphError("Left eigenvector requires a strongly connected digraph")
    n = lap.n
    if n == 1:
        return np.ones(1)

    _, sigma, vt = linalg.svd(lap.matrix.T)
    scale = sigma[0]
    if sigma[-1] > NULL_SPACE_RTOL * scale or sigma[-2] <= NULL_SPACE_RTOL * scale:
        raise GraphError(
            f"Null space of L^T is not one-dimensional (singular values {sigma[-2]:.3g}, "
            f"{sigma[-1]:.3g})"
        )
    r = vt[-1]
    r = r / r.sum()
    if np.any(r <= 0):
        raise GraphError(f"Left null vector is not positive: {r}")
    return r
