"""Client communication graph, modality subgraphs and Metropolis-Hastings mixing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DisconnectedSubgraph,
    EmptyModalitySet,
    InvalidEdge,
    NonConvergent,
)


@dataclass(frozen=True)
class ClientGraph:
    """Undirected client graph with per-client modality sets.

    Edges are stored as sorted ``(i, j)`` pairs with ``i < j``; modality
    sets are sorted tuples. Use :func:`build_graph` to construct one.
    """

    n_clients: int
    edges: tuple[tuple[int, int], ...]
    modality_sets: tuple[tuple[int, ...], ...]
    n_modalities: int
    _adj: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj: list[list[int]] = [[] for _ in range(self.n_clients)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(a)) for a in adj))

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    def members(self, k: int) -> list[int]:
        return [i for i, ms in enumerate(self.modality_sets) if k in ms]

    def groups(self) -> dict[tuple[int, ...], list[int]]:
        """Clients keyed by identical modality set, in a stable order."""
        out: dict[tuple[int, ...], list[int]] = {}
        for key in sorted(set(self.modality_sets), key=lambda s: (len(s), s)):
            out[key] = [i for i, ms in enumerate(self.modality_sets) if ms == key]
        return out

    def is_connected(self) -> bool:
        return len(connected_components(range(self.n_clients), self.edges)) <= 1


@dataclass(frozen=True)
class ModalitySubgraph:
    modality: int
    members: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class MixingMatrix:
    """Gossip weights over the members of one modality subgraph.

    Row ``a`` of ``weights`` belongs to client ``members[a]``.
    """

    modality: int
    members: tuple[int, ...]
    weights: np.ndarray

    def index(self, client: int) -> int:
        return self.members.index(client)


def build_graph(
    n_clients: int,
    edges: Iterable[Sequence[int]],
    modality_sets: Sequence[Iterable[int]],
    n_modalities: int | None = None,
) -> ClientGraph:
    if n_clients < 1:
        raise InvalidEdge(f"n_clients must be positive, got {n_clients}")
    if len(modality_sets) != n_clients:
        raise EmptyModalitySet(
            f"expected {n_clients} modality sets, got {len(modality_sets)}"
        )
    norm_edges = set()
    for e in edges:
        i, j = (int(v) for v in e)
        if not (0 <= i < n_clients and 0 <= j < n_clients):
            raise InvalidEdge(f"edge ({i}, {j}) has endpoint outside [0, {n_clients})")
        if i == j:
            raise InvalidEdge(f"self-loop at client {i}")
        norm_edges.add((min(i, j), max(i, j)))
    sets = []
    for i, ms in enumerate(modality_sets):
        s = tuple(sorted({int(k) for k in ms}))
        if not s:
            raise EmptyModalitySet(f"client {i} has no modalities")
        if s[0] < 0:
            raise EmptyModalitySet(f"client {i} has negative modality id {s[0]}")
        sets.append(s)
    top = max(s[-1] for s in sets) + 1
    if n_modalities is None:
        n_modalities = top
    elif top > n_modalities:
        raise EmptyModalitySet(f"modality id {top - 1} outside [0, {n_modalities})")
    return ClientGraph(n_clients, tuple(sorted(norm_edges)), tuple(sets), int(n_modalities))


def connected_components(nodes: Iterable[int], edges: Iterable[tuple[int, int]]) -> list[list[int]]:
    nodes = sorted(nodes)
    parent = {v: v for v in nodes}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    comps: dict[int, list[int]] = {}
    for v in nodes:
        comps.setdefault(find(v), []).append(v)
    return sorted(comps.values())


def induced_subgraph(g: ClientGraph, nodes: Iterable[int], modality: int = -1) -> ModalitySubgraph:
    keep = set(nodes)
    edges = tuple(e for e in g.edges if e[0] in keep and e[1] in keep)
    return ModalitySubgraph(modality, tuple(sorted(keep)), edges)


def modality_subgraph(g: ClientGraph, k: int) -> ModalitySubgraph:
    """Subgraph induced by the clients holding modality ``k``.

    Raises:
        DisconnectedSubgraph: the induced subgraph has more than one component.
    """
    if not 0 <= k < g.n_modalities:
        raise ValueError(f"modality {k} outside [0, {g.n_modalities})")
    sub = induced_subgraph(g, g.members(k), k)
    comps = connected_components(sub.members, sub.edges)
    if len(comps) > 1:
        raise DisconnectedSubgraph(k, comps)
    return sub


def metropolis_weights(sub: ModalitySubgraph) -> MixingMatrix:
    """Metropolis-Hastings weights ``1 / (1 + max(deg_i, deg_j))`` on ``sub``.

    Degrees are counted inside the subgraph. The construction is symmetric
    and doubly stochastic whether or not ``sub`` is connected.
    """
    n = len(sub.members)
    pos = {c: a for a, c in enumerate(sub.members)}
    deg = np.zeros(n, dtype=np.int64)
    for i, j in sub.edges:
        deg[pos[i]] += 1
        deg[pos[j]] += 1
    w = np.zeros((n, n))
    for i, j in sub.edges:
        a, b = pos[i], pos[j]
        w[a, b] = w[b, a] = 1.0 / (1.0 + max(deg[a], deg[b]))
    for a in range(n):
        w[a, a] = 1.0 - sum(w[a, b] for b in range(n) if b != a)
    return MixingMatrix(sub.modality, tuple(sub.members), w)


def spectral_gap(w: MixingMatrix | np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Return ``1 - |lambda_2(W)|`` by power iteration on ``W - 11^T/n``."""
    mat = w.weights if isinstance(w, MixingMatrix) else np.asarray(w, dtype=float)
    n = mat.shape[0]
    if n == 1:
        return 1.0
    defl = mat - np.full((n, n), 1.0 / n)
    # non-symmetric ramp so the start is not orthogonal to (anti)symmetric eigenvectors
    v = np.arange(1, n + 1, dtype=float) ** 1.5
    v -= v.mean()
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        u = defl @ v
        new = float(np.linalg.norm(u))
        if new == 0.0:
            return 1.0
        if abs(new - est) < tol:
            return 1.0 - new
        est = new
        v = u / new
    raise NonConvergent(f"power iteration did not reach tol={tol} in {max_iter} iterations")


def mixing_matrices(g: ClientGraph) -> dict[int, MixingMatrix]:
    """Validated mixing matrix for every modality with at least one member."""
    out = {}
    for k in range(g.n_modalities):
        if not g.members(k):
            continue
        out[k] = metropolis_weights(modality_subgraph(g, k))
    return out



def reference_topology() -> ClientGraph:
    """Nine clients in three groups of three: {0}, {1} and {0, 1}.

    Each group is a triangle; cross links keep both modality subgraphs
    connected and couple single-modality groups through the sheaf.
    """
    sets = [(0,)] * 3 + [(1,)] * 3 + [(0, 1)] * 3
    edges = [
        (0, 1), (1, 2), (0, 2),
        (3, 4), (4, 5), (3, 5),
        (6, 7), (7, 8), (6, 8),
        (2, 6), (1, 7), (5, 8), (4, 7), (0, 3),
    ]
    return build_graph(9, edges, sets, 2)


def drone_topology() -> ClientGraph:
    """Twenty clients: 7 with modality 0 only, 7 with modality 1 only, 6 with both.

    Only clients sharing at least one modality are linked.
    """
    g1, g2, g3 = list(range(0, 7)), list(range(7, 14)), list(range(14, 20))
    edges = []
    for grp in (g1, g2, g3):
        edges += [(grp[a], grp[(a + 1) % len(grp)]) for a in range(len(grp))]
    for a, c in enumerate(g1):
        edges.append((c, g3[a % len(g3)]))
    for a, c in enumerate(g2):
        edges.append((c, g3[(a + 3) % len(g3)]))
    sets = [(0,)] * 7 + [(1,)] * 7 + [(0, 1)] * 6
    return build_graph(20, edges, sets, 2)
