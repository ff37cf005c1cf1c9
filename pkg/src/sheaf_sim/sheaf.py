"""Restriction maps and the sheaf Laplacian over task-head stalks.

Each undirected edge ``(i, j)`` carries two maps: ``P_ij`` from client
``i``'s head space to the edge stalk and ``P_ji`` from client ``j``'s.
Maps are keyed by the ordered pair ``(source, other)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidGamma, InvalidSigma, NonFinite
from .graph import ClientGraph


@dataclass(frozen=True)
class SheafState:
    head_dims: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    edge_dims: dict[tuple[int, int], int]
    maps: dict[tuple[int, int], np.ndarray]
    gamma: float
    lam: float
    eta: float

    def neighbors(self, i: int) -> list[int]:
        return sorted(j for (a, j) in self.maps if a == i)

    def with_params(self, **kw) -> "SheafState":
        return replace(self, **kw)


def edge_dim(d_i: int, d_j: int, gamma: float) -> int:
    """Edge-stalk dimension ``max(1, floor(gamma * (d_i + d_j) / 2))``."""
    if not (0.0 < gamma <= 1.0):
        raise InvalidGamma(f"gamma must lie in (0, 1], got {gamma}")
    if d_i < 1 or d_j < 1:
        raise DimensionMismatch(f"head dims must be positive, got {d_i}, {d_j}")
    return max(1, math.floor(gamma * (d_i + d_j) / 2))


def init_restriction_maps(
    graph: ClientGraph,
    head_dims: Sequence[int],
    gamma: float,
    scheme: str = "identity",
    sigma2: float = 1.0,
    seed: int = 0,
    lam: float = 0.0,
    eta: float = 0.0,
) -> SheafState:
    """Create ``P_ij`` for every edge incidence.

    ``identity`` takes the leading ``d_ij`` rows of ``I_{d_i}`` (zero rows
    past ``d_i`` when the edge stalk is wider than the head). ``random``
    draws i.i.d. ``N(0, sigma2)`` entries, edges in sorted order, ``P_ij``
    before ``P_ji``.
    """
    if len(head_dims) != graph.n_clients:
        raise DimensionMismatch("need one head dim per client")
    if scheme not in ("identity", "random"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    if scheme == "random" and not sigma2 > 0:
        raise InvalidSigma(f"sigma2 must be positive, got {sigma2}")
    rng = np.random.default_rng(seed)
    edge_dims, maps = {}, {}
    for i, j in graph.edges:
        d = edge_dim(head_dims[i], head_dims[j], gamma)
        edge_dims[(i, j)] = d
        for a, b in ((i, j), (j, i)):
            if scheme == "identity":
                maps[(a, b)] = np.eye(d, head_dims[a])
            else:
                maps[(a, b)] = rng.normal(0.0, math.sqrt(sigma2), size=(d, head_dims[a]))
    return SheafState(tuple(int(d) for d in head_dims), graph.edges, edge_dims, maps,
                      float(gamma), float(lam), float(eta))


def _check(omega, s: SheafState):
    if len(omega) != len(s.head_dims):
        raise DimensionMismatch(f"expected {len(s.head_dims)} head vectors, got {len(omega)}")
    for i, w in enumerate(omega):
        if w.shape != (s.head_dims[i],):
            raise DimensionMismatch(f"head {i} has shape {w.shape}, expected ({s.head_dims[i]},)")


def edge_residual(omega, s: SheafState, i: int, j: int) -> np.ndarray:
    """``P_ij w_i - P_ji w_j`` (disagreement seen from ``i``)."""
    return s.maps[(i, j)] @ omega[i] - s.maps[(j, i)] @ omega[j]


def sheaf_quadratic(omega, s: SheafState) -> float:
    """Sum over undirected edges, each counted once, of ``||P_ij w_i - P_ji w_j||^2``."""
    _check(omega, s)
    total = 0.0
    for i, j in s.edges:
        r = edge_residual(omega, s, i, j)
        total += float(r @ r)
    return total


def sheaf_gradient(omega, s: SheafState, i: int) -> np.ndarray:
    """``lam * sum_j P_ij^T (P_ij w_i - P_ji w_j)``, the head-gradient of ``lam/2 * quadratic``."""
    _check(omega, s)
    g = np.zeros(s.head_dims[i])
    for j in s.neighbors(i):
        g += s.maps[(i, j)].T @ edge_residual(omega, s, i, j)
    return s.lam * g


def sheaf_gradients(omega, s: SheafState) -> list[np.ndarray]:
    return [sheaf_gradient(omega, s, i) for i in range(len(s.head_dims))]


def map_gradients(omega, s: SheafState) -> dict[tuple[int, int], np.ndarray]:
    """Gradient of ``lam/2 * quadratic`` with respect to every ``P_ij``."""
    _check(omega, s)
    out = {}
    for i, j in s.edges:
        r = edge_residual(omega, s, i, j)
        out[(i, j)] = s.lam * np.outer(r, omega[i])
        out[(j, i)] = -s.lam * np.outer(r, omega[j])
    return out


def update_restriction_maps(s: SheafState, omega_new) -> SheafState:
    """One synchronous step ``P_ij <- P_ij - eta*lam*(P_ij w_i - P_ji w_j) w_i^T``.

    All residuals are taken from the pre-update maps.
    """
    _check(omega_new, s)
    step = s.eta * s.lam
    maps = dict(s.maps)
    for i, j in s.edges:
        with np.errstate(over="ignore", invalid="ignore"):
            r = edge_residual(omega_new, s, i, j)
            p_ij = s.maps[(i, j)] - step * np.outer(r, omega_new[i])
            p_ji = s.maps[(j, i)] - step * np.outer(-r, omega_new[j])
        if not (np.all(np.isfinite(p_ij)) and np.all(np.isfinite(p_ji))):
            raise NonFinite(f"restriction map update on edge ({i}, {j}) is not finite")
        maps[(i, j)], maps[(j, i)] = p_ij, p_ji
    return replace(s, maps=maps)


def assemble_block_matrix(s: SheafState, graph: ClientGraph) -> np.ndarray:
    """Dense coboundary: one block row per edge, ``+P_ij`` at column ``i``, ``-P_ji`` at ``j``."""
    if tuple(graph.edges) != tuple(s.edges):
        raise DimensionMismatch("graph edges do not match sheaf edges")
    col = np.concatenate([[0], np.cumsum(s.head_dims)])
    rows = sum(s.edge_dims[e] for e in s.edges)
    out = np.zeros((rows, int(col[-1])))
    r0 = 0
    for i, j in s.edges:
        d = s.edge_dims[(i, j)]
        p_ij, p_ji = s.maps[(i, j)], s.maps[(j, i)]
        if p_ij.shape != (d, s.head_dims[i]) or p_ji.shape != (d, s.head_dims[j]):
            raise DimensionMismatch(f"map shapes inconsistent on edge ({i}, {j})")
        out[r0:r0 + d, col[i]:col[i + 1]] = p_ij
        out[r0:r0 + d, col[j]:col[j + 1]] = -p_ji
        r0 += d
    return out


def sheaf_laplacian(s: SheafState, graph: ClientGraph) -> np.ndarray:
    p = assemble_block_matrix(s, graph)
    return p.T @ p


def message_scalars(s: SheafState) -> int:
    """Scalars exchanged per round: each incidence sends its projection twice."""
    return sum(2 * 2 * s.edge_dims[e] for e in s.edges)
