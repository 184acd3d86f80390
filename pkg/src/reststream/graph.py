"""Distance-based coupling graphs over sensor layouts.

A layout is a set of named 3-D points. The graph construction normalizes the
layout (centroid at the origin, largest pairwise distance 1), then connects
every pair within a distance threshold with a Gaussian kernel weight

    a_ij = exp(-d_ij^2 / sigma^2)   if d_ij <= threshold, else 0

where sigma is the population standard deviation of all pairwise distances.
Self-weights a_ii are stored as 1 but the recurrent cell ignores the diagonal
when mixing neighbor columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


def normalize_layout(coords: np.ndarray) -> np.ndarray:
    """Center coordinates on their centroid and scale max pairwise distance to 1.

    Idempotent up to floating point noise. Raises if all points coincide.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValidationError(f"layout must be (N, 3), got {coords.shape}")
    if coords.shape[0] < 2:
        raise ValidationError("layout needs at least 2 points")
    centered = coords - coords.mean(axis=0)
    scale = pairwise_distances(centered).max()
    if scale == 0.0:
        raise ValidationError("degenerate layout: all points coincide")
    return centered / scale


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    """Symmetric Euclidean distance matrix with an exactly zero diagonal."""
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, 0.0)
    return dist


@dataclass
class DistanceGraph:
    """Thresholded Gaussian-kernel coupling over a normalized layout."""

    names: tuple[str, ...]
    adjacency: np.ndarray  # (N, N) float64, symmetric, unit diagonal
    sigma: float
    threshold: float
    _neighbor_cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def neighbor_weights(self) -> np.ndarray:
        """Adjacency with the diagonal zeroed, for neighbor-only mixing."""
        if self._neighbor_cache is None:
            off = self.adjacency.copy()
            np.fill_diagonal(off, 0.0)
            self._neighbor_cache = off
        return self._neighbor_cache


def build_graph(
    names: tuple[str, ...] | list[str],
    coords: np.ndarray,
    threshold: float = 0.9,
) -> DistanceGraph:
    """Build the coupling graph for a layout.

    ``threshold`` cuts edges by normalized distance. sigma is the population
    standard deviation of the upper-triangle pairwise distances; a layout
    where all distances are equal has sigma 0 and is rejected.
    """
    coords = normalize_layout(coords)
    n = coords.shape[0]
    if len(names) != n:
        raise ValidationError(f"{len(names)} names for {n} points")
    if not threshold > 0.0:
        raise ValidationError(f"threshold must be positive, got {threshold}")
    dist = pairwise_distances(coords)
    upper = dist[np.triu_indices(n, k=1)]
    sigma = float(upper.std())
    # the layout is normalized, so distances are O(1) and any spread below
    # 1e-12 means they are equal up to rounding
    if sigma <= 1e-12:
        raise ValidationError("degenerate layout: all pairwise distances equal")
    adjacency = np.where(
        dist <= threshold, np.exp(-(dist**2) / sigma**2), 0.0
    )
    np.fill_diagonal(adjacency, 1.0)
    return DistanceGraph(tuple(names), adjacency, sigma, float(threshold))


def neighbor_lists(graph: DistanceGraph) -> list[list[int]]:
    """Indices of connected neighbors per node, diagonal excluded."""
    off = graph.neighbor_weights()
    return [list(np.flatnonzero(off[i] > 0.0)) for i in range(graph.n_nodes)]


def to_dot(graph: DistanceGraph) -> str:
    """Render the graph in DOT format with edge weights as labels."""
    lines = ["graph coupling {"]
    for name in graph.names:
        lines.append(f'  "{name}";')
    off = graph.neighbor_weights()
    n = graph.n_nodes
    for i in range(n):
        for j in range(i + 1, n):
            if off[i, j] > 0.0:
                lines.append(
                    f'  "{graph.names[i]}" -- "{graph.names[j]}"'
                    f' [label="{off[i, j]:.4f}"];'
                )
    lines.append("}")
    return "\n".join(lines) + "\n"
