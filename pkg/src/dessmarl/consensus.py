"""
Communication graph, Metropolis-Hastings weights and first-order average
consensus.

Node ids are zero-based. Self-loops are implicit: every node always has
access to its own value, so they never appear in ``edges``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


class TopologyError(ValueError):
    """Raised for malformed or disconnected communication graphs."""


class ConsensusError(RuntimeError):
    """Raised when a weight matrix fails the convergence probe."""


@dataclass(frozen=True)
class GraphTopology:
    """Undirected connected communication graph."""

    node_count: int
    edges: frozenset[tuple[int, int]]

    def __init__(self, node_count: int, edges: Iterable[tuple[int, int]]):
        if node_count < 1:
            raise TopologyError(f"node_count must be positive, got {node_count}")
        canon: set[tuple[int, int]] = set()
        for i, j in edges:
            i, j = int(i), int(j)
            for v in (i, j):
                if not 0 <= v < node_count:
                    raise TopologyError(f"edge ({i}, {j}) references node {v} outside [0, {node_count})")
            if i == j:
                raise TopologyError(f"explicit self-loop on node {i}; self-loops are implicit")
            e = (min(i, j), max(i, j))
            if e in canon:
                raise TopologyError(f"duplicate edge {e}")
            canon.add(e)
        object.__setattr__(self, "node_count", int(node_count))
        object.__setattr__(self, "edges", frozenset(canon))
        nbrs: dict[int, list[int]] = {i: [] for i in range(node_count)}
        for a, b in canon:
            nbrs[a].append(b)
            nbrs[b].append(a)
        object.__setattr__(self, "_nbrs", {i: tuple(sorted(v)) for i, v in nbrs.items()})
        self._check_connected()

    @classmethod
    def from_adjacency(cls, adjacency: Mapping[int, Iterable[int]], node_count: int | None = None) -> "GraphTopology":
        """Build from an adjacency list ``{node: [neighbors]}``.

        Each undirected edge may be listed from either side or from both.
        """
        if node_count is None:
            ids = set(int(k) for k in adjacency)
            for nbrs in adjacency.values():
                ids.update(int(j) for j in nbrs)
            node_count = max(ids) + 1 if ids else 0
        edges = {(min(int(i), int(j)), max(int(i), int(j))) for i, nbrs in adjacency.items() for j in nbrs}
        return cls(node_count, edges)

    def _check_connected(self) -> None:
        if self.node_count == 1:
            return
        rows = [e[0] for e in self.edges]
        cols = [e[1] for e in self.edges]
        adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.node_count,) * 2)
        n_comp, labels = connected_components(adj, directed=False)
        if n_comp > 1:
            comps = [sorted(np.flatnonzero(labels == c).tolist()) for c in range(n_comp)]
            comps.sort(key=len)
            raise TopologyError(
                f"topology is disconnected: {n_comp} components; "
                f"component {comps[0]} is isolated from the rest ({comps[1:]})"
            )

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Neighbors of node ``i`` in ascending id order (excluding ``i``)."""
        return self._nbrs[i]

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def degrees(self) -> np.ndarray:
        return np.array([self.degree(i) for i in range(self.node_count)])

    def adjacency(self) -> dict[int, list[int]]:
        return {i: list(self.neighbors(i)) for i in range(self.node_count)}

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges


def reference_topology() -> GraphTopology:
    """The five-unit ring-with-chords graph used throughout the experiments."""
    return GraphTopology.from_adjacency({0: [1, 3, 4], 1: [0, 2], 2: [1, 3, 4], 3: [0, 2], 4: [0, 2]})


def complete_topology(n: int) -> GraphTopology:
    return GraphTopology(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


@dataclass(frozen=True)
class ConsensusConfig:
    tolerance: float = 1e-6
    max_iterations: int = 500

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"consensus tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass(frozen=True)
class ConsensusResult:
    estimates: np.ndarray
    iterations: int
    converged: bool

    def __iter__(self):
        # allows ``estimates, iterations = run_consensus(...)``
        return iter((self.estimates, self.iterations))


def metropolis_weights(topology: GraphTopology) -> np.ndarray:
    """
    Metropolis-Hastings averaging weights for a connected topology.

    ``w_ij = 1 / (max(d_i, d_j) + 1)`` on edges, ``w_ii = 1 - sum_j w_ij``,
    zero elsewhere. The result is symmetric and doubly stochastic.

    Parameters
    ----------
    topology : GraphTopology

    Returns
    -------
    W : ndarray, shape (N, N)
    """
    n = topology.node_count
    d = topology.degrees()
    W = np.zeros((n, n))
    for i, j in topology.edges:
        W[i, j] = W[j, i] = 1.0 / (max(d[i], d[j]) + 1)
    for i in range(n):
        # sum in ascending neighbor order so that equal inputs give equal rows
        W[i, i] = 1.0 - sum(W[i, j] for j in topology.neighbors(i))
    return W


def validate_weights(W: np.ndarray, topology: GraphTopology | None = None, atol: float = 1e-12) -> None:
    """Raise ``ValueError`` unless ``W`` is a valid averaging matrix."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"weight matrix must be square, got shape {W.shape}")
    if not np.array_equal(W, W.T):
        raise ValueError("weight matrix is not symmetric")
    if np.any(W < 0) or np.any(W > 1):
        raise ValueError("weight entries must lie in [0, 1]")
    rows = W.sum(axis=1)
    if np.max(np.abs(rows - 1.0)) > atol:
        raise ValueError(f"row sums deviate from 1 by {np.max(np.abs(rows - 1.0)):.3e}")
    if topology is not None:
        if W.shape[0] != topology.node_count:
            raise ValueError("weight matrix size does not match topology")
        for i in range(W.shape[0]):
            for j in range(W.shape[0]):
                if i != j and W[i, j] != 0 and not topology.has_edge(i, j):
                    raise ValueError(f"nonzero weight w[{i},{j}] on a non-edge")


def consensus_step(values, W: np.ndarray) -> np.ndarray:
    """One synchronous averaging round, ``x <- W x``.

    ``values`` may be a vector of length N or an (N, k) array holding k
    independent quantities that are averaged simultaneously.
    """
    x = np.asarray(values, dtype=float)
    if x.shape[0] != W.shape[0]:
        raise ValueError(f"values have length {x.shape[0]}, weight matrix is {W.shape[0]}x{W.shape[1]}")
    return W @ x


def spread(x: np.ndarray) -> float:
    """Largest max-minus-min over the node axis."""
    return float(np.max(x.max(axis=0) - x.min(axis=0)))


_POWER_BLOCK = 32
_power_cache: dict[bytes, np.ndarray] = {}


def _matrix_powers(W: np.ndarray) -> np.ndarray:
    """Stack ``[W, W^2, ..., W^B]`` built by repeated multiplication."""
    key = W.tobytes() + bytes(str(W.shape), "ascii")
    P = _power_cache.get(key)
    if P is None:
        P = np.empty((_POWER_BLOCK,) + W.shape)
        P[0] = W
        for k in range(1, _POWER_BLOCK):
            P[k] = W @ P[k - 1]
        if len(_power_cache) > 64:
            _power_cache.clear()
        _power_cache[key] = P
    return P


def run_consensus(values, W: np.ndarray, cfg: ConsensusConfig = ConsensusConfig()) -> ConsensusResult:
    """
    Iterate ``x <- W x`` until the node estimates agree.

    Stops at the first iterate whose spread (max - min across nodes) is at
    most ``cfg.tolerance`` in every column. Because every estimate stays
    inside the convex hull of the previous round, the spread also bounds each
    node's distance to the true mean.

    Iterates are evaluated a block at a time as ``W^k x`` using cached
    matrix powers; the returned iteration count is the first ``k`` that
    meets the tolerance, exactly as in the one-step-at-a-time loop.

    Returns
    -------
    ConsensusResult
        ``converged`` is False when ``max_iterations`` was exhausted.
    """
    x = np.array(values, dtype=float)
    if x.shape[0] != W.shape[0]:
        raise ValueError(f"values have length {x.shape[0]}, weight matrix is {W.shape[0]}x{W.shape[1]}")
    tol = cfg.tolerance
    if spread(x) <= tol:
        return ConsensusResult(x, 0, True)
    P = _matrix_powers(W)
    done = 0
    while done < cfg.max_iterations:
        block = P[: min(_POWER_BLOCK, cfg.max_iterations - done)]
        X = block @ x  # (B, N) or (B, N, k)
        s = X.max(axis=1) - X.min(axis=1)
        if s.ndim > 1:
            s = s.max(axis=1)
        hit = np.flatnonzero(s <= tol)
        if hit.size:
            k = int(hit[0])
            return ConsensusResult(X[k], done + k + 1, True)
        x = X[-1]
        done += len(block)
    return ConsensusResult(x, done, False)


def second_largest_eigenvalue_modulus(W: np.ndarray) -> float:
    """Spectral convergence factor of a symmetric averaging matrix."""
    ev = np.sort(np.abs(np.linalg.eigvalsh(W)))
    return float(ev[-2]) if len(ev) > 1 else 0.0


def check_convergence(W: np.ndarray, cfg: ConsensusConfig = ConsensusConfig(), seed: int = 0) -> int:
    """Probe ``W`` with one random vector; raise ``ConsensusError`` if it stalls.

    Returns the number of iterations the probe needed.
    """
    probe = np.random.default_rng(seed).uniform(-1.0, 1.0, W.shape[0])
    res = run_consensus(probe, W, cfg)
    if not res.converged or np.max(np.abs(res.estimates - probe.mean())) > cfg.tolerance:
        raise ConsensusError(
            f"weight matrix failed the convergence probe after {res.iterations} iterations"
        )
    return res.iterations
