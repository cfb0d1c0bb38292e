"""Agent graph: Erdős–Rényi sampling, Byzantine assignment, spectra, weights.

The simulator distinguishes the full communication graph (what DPSGD sees)
from the regular subgraph (R, E_R) spanned by edges with no Byzantine
endpoint, which must stay connected for the robust methods to make sense.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import InfeasibilityError, InvalidInputError, rng_stream


@dataclass(frozen=True)
class Network:
    """Undirected agent graph with a regular/Byzantine partition.

    ``adjacency`` is a symmetric boolean matrix without self-loops.
    ``regular_neighbors[w]`` / ``byzantine_neighbors[w]`` partition the
    neighbor set of every regular agent w.
    """

    adjacency: np.ndarray
    byzantine_ids: tuple[int, ...]
    regular_ids: tuple[int, ...] = field(init=False)
    neighbors: tuple[tuple[int, ...], ...] = field(init=False)
    regular_neighbors: dict = field(init=False)
    byzantine_neighbors: dict = field(init=False)

    def __post_init__(self):
        adj = self.adjacency
        n = adj.shape[0]
        if adj.shape != (n, n) or adj.dtype != np.bool_:
            raise InvalidInputError("adjacency must be a square boolean matrix")
        if not np.array_equal(adj, adj.T) or np.any(np.diag(adj)):
            raise InvalidInputError("adjacency must be symmetric with no self-loops")
        byz = set(self.byzantine_ids)
        if byz and (min(byz) < 0 or max(byz) >= n):
            raise InvalidInputError("byzantine id out of range")
        regular = tuple(w for w in range(n) if w not in byz)
        neigh = tuple(tuple(int(v) for v in np.flatnonzero(adj[w])) for w in range(n))
        object.__setattr__(self, "byzantine_ids", tuple(sorted(byz)))
        object.__setattr__(self, "regular_ids", regular)
        object.__setattr__(self, "neighbors", neigh)
        object.__setattr__(
            self,
            "regular_neighbors",
            {w: tuple(v for v in neigh[w] if v not in byz) for w in regular},
        )
        object.__setattr__(
            self,
            "byzantine_neighbors",
            {w: tuple(v for v in neigh[w] if v in byz) for w in regular},
        )

    @property
    def n_agents(self) -> int:
        return self.adjacency.shape[0]

    def regular_edges(self) -> list[tuple[int, int]]:
        """Edges of E_R (no Byzantine endpoint), sorted as (u, v) with u < v."""
        byz = set(self.byzantine_ids)
        n = self.n_agents
        return [
            (u, v)
            for u in range(n)
            for v in range(u + 1, n)
            if self.adjacency[u, v] and u not in byz and v not in byz
        ]


def network_from_edges(n: int, edges, byzantine_ids=()) -> Network:
    adj = np.zeros((n, n), dtype=bool)
    for u, v in edges:
        if u == v or not (0 <= u < n and 0 <= v < n):
            raise InvalidInputError(f"bad edge ({u}, {v}) for {n} agents")
        adj[u, v] = adj[v, u] = True
    return Network(adj, tuple(byzantine_ids))


def generate_erdos_renyi(n: int, q: float, rng: np.random.Generator) -> Network:
    """Sample G(n, q): each unordered pair connected independently w.p. q."""
    if n < 1:
        raise InvalidInputError("need at least one agent")
    if not 0.0 <= q <= 1.0:
        raise InvalidInputError(f"edge probability q={q} outside [0, 1]")
    draws = rng.random((n, n))
    upper = np.triu(draws < q, k=1)
    return Network(upper | upper.T, ())


def is_regular_subgraph_connected(net: Network) -> bool:
    """True iff (R, E_R) is connected; a single regular agent counts."""
    regular = net.regular_ids
    if len(regular) <= 1:
        return True
    byz = set(net.byzantine_ids)
    seen = {regular[0]}
    queue = deque(seen)
    while queue:
        w = queue.popleft()
        for v in net.neighbors[w]:
            if v not in byz and v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == len(regular)


def assign_byzantine(net: Network, b: int, rng: np.random.Generator, max_retries: int = 10000) -> Network:
    """Mark b agents Byzantine, resampling until (R, E_R) stays connected."""
    n = net.n_agents
    if not 0 <= b < n:
        raise InvalidInputError(f"need 0 <= B < N, got B={b}, N={n}")
    if b == 0:
        return Network(net.adjacency, ())
    for _ in range(max_retries):
        ids = tuple(sorted(int(w) for w in rng.choice(n, size=b, replace=False)))
        candidate = Network(net.adjacency, ids)
        if is_regular_subgraph_connected(candidate):
            return candidate
    raise InfeasibilityError(
        f"no assignment of {b} Byzantine agents kept the regular subgraph "
        f"connected after {max_retries} draws"
    )


@dataclass(frozen=True)
class IncidenceMatrix:
    """Oriented agent-edge incidence of (R, E_R): +1 at the smaller-id endpoint."""

    values: np.ndarray  # shape (R, |E_R|)
    regular_ids: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]


def incidence_matrix(net: Network) -> IncidenceMatrix:
    if not is_regular_subgraph_connected(net):
        raise InvalidInputError("incidence matrix requires a connected regular subgraph")
    regular = net.regular_ids
    row = {w: i for i, w in enumerate(regular)}
    edges = tuple(net.regular_edges())
    a = np.zeros((len(regular), len(edges)))
    for e, (u, v) in enumerate(edges):
        a[row[u], e] = 1.0
        a[row[v], e] = -1.0
    return IncidenceMatrix(a, regular, edges)


def min_nonzero_singular(a: IncidenceMatrix) -> float:
    """Smallest nonzero singular value of the incidence matrix.

    Computed as the square root of the second-smallest eigenvalue of the
    regular-subgraph Laplacian A Aᵀ, which is numerically stabler than a
    singular decomposition of the rectangular A at these sizes.
    """
    values = a.values
    if values.size == 0 or not values.any():
        raise InvalidInputError("incidence matrix is all-zero")
    lap = values @ values.T
    eig = np.linalg.eigvalsh(lap)
    tol = max(lap.shape) * np.finfo(float).eps * max(eig[-1], 1.0)
    nonzero = eig[eig > tol]
    if nonzero.size == 0:
        raise InvalidInputError("incidence matrix has no nonzero singular value")
    return float(np.sqrt(nonzero[0]))


def metropolis_weights(net: Network) -> np.ndarray:
    """Metropolis mixing matrix on the full graph (identities unknown to DPSGD).

    W[w, v] = 1 / (1 + max(deg_w, deg_v)) on edges, diagonal absorbs the
    remainder; the result is symmetric and doubly stochastic.
    """
    adj = net.adjacency
    deg = adj.sum(axis=1)
    n = net.n_agents
    w = np.zeros((n, n))
    for u in range(n):
        for v in net.neighbors[u]:
            if v > u:
                w[u, v] = w[v, u] = 1.0 / (1.0 + max(deg[u], deg[v]))
    np.fill_diagonal(w, 1.0 - w.sum(axis=1))
    return w


def save_network(net: Network, path, seed: int = 0) -> None:
    """Write an edge-list dump: header ``N B seed``, then one ``u v`` per line.

    Only the Byzantine count is stored; loading re-derives the assignment
    from the stored seed, so a dump made through this module round-trips.
    """
    lines = [f"{net.n_agents} {len(net.byzantine_ids)} {seed}"]
    n = net.n_agents
    for u in range(n):
        for v in range(u + 1, n):
            if net.adjacency[u, v]:
                lines.append(f"{u} {v}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_network(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise InvalidInputError(f"{path}: empty network file")
    try:
        n, b, seed = (int(tok) for tok in lines[0].split())
        edges = [tuple(int(tok) for tok in ln.split()) for ln in lines[1:]]
    except ValueError as exc:
        raise InvalidInputError(f"{path}: malformed network file: {exc}") from None
    net = network_from_edges(n, edges)
    if b > 0:
        net = assign_byzantine(net, b, rng_stream(seed, purpose="byzantine"))
    return net
