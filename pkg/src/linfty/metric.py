"""Graph-geodesic distances and the geometry of the distance function.

All distances are shortest-path lengths on the stencil graph (edge lengths
``h`` and ``h*sqrt(2)``).  The same metric is used for slopes and transport
costs, which keeps the discrete duality statements exact.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .domain import GridDomain, LinftyError, ScalarField


class EmptySeedSet(LinftyError):
    pass


class CrossCheckFailure(LinftyError):
    pass


def _adjacency_lists(domain: GridDomain):
    cache = domain.__dict__.get("_adj_lists")
    if cache is None:
        indptr, nbr, ln, _ = domain.adjacency
        nbr_l, ln_l, ptr = nbr.tolist(), ln.tolist(), indptr.tolist()
        cache = [list(zip(nbr_l[ptr[i]:ptr[i + 1]], ln_l[ptr[i]:ptr[i + 1]]))
                 for i in range(domain.n_nodes)]
        domain.__dict__["_adj_lists"] = cache
    return cache


def dijkstra(domain: GridDomain, seeds: Iterable[int], allowed: np.ndarray | None = None,
             with_pred: bool = False):
    """Multi-source Dijkstra on the stencil graph.

    Ties are resolved by node index (the heap orders ``(distance, node)``), so
    distances and predecessor trees are deterministic.

    Parameters
    ----------
    seeds : iterable of int
        Source node ids (distance 0).
    allowed : bool array, optional
        Restrict the search to these nodes.

    Returns
    -------
    dist : ndarray
        ``inf`` for unreachable nodes.
    pred : ndarray, only if ``with_pred``
        Predecessor on a shortest path, ``-1`` for seeds and unreached nodes.
    """
    adj = _adjacency_lists(domain)
    n = domain.n_nodes
    dist = [float("inf")] * n
    pred = [-1] * n
    ok = None if allowed is None else allowed.tolist()
    heap = []
    for s in sorted(set(int(s) for s in seeds)):
        if ok is not None and not ok[s]:
            continue
        dist[s] = 0.0
        heap.append((0.0, s))
    heapq.heapify(heap)
    done = [False] * n
    push, pop = heapq.heappush, heapq.heappop
    while heap:
        d, v = pop(heap)
        if done[v]:
            continue
        done[v] = True
        for w, ln in adj[v]:
            if done[w] or (ok is not None and not ok[w]):
                continue
            nd = d + ln
            if nd < dist[w] or (nd == dist[w] and v < pred[w]):
                dist[w] = nd
                pred[w] = v
                push(heap, (nd, w))
    out = np.array(dist)
    if with_pred:
        return out, np.array(pred, dtype=np.int64)
    return out


def distance_to_set(domain: GridDomain, seeds: Iterable[int]) -> ScalarField:
    """Graph-geodesic distance to a node set (0 on the seeds)."""
    seeds = np.unique(np.asarray(list(seeds), dtype=np.int64))
    if seeds.size == 0:
        raise EmptySeedSet("distance_to_set needs at least one seed")
    return ScalarField(domain, dijkstra(domain, seeds), name="dist")


def distance_to_boundary(domain: GridDomain) -> ScalarField:
    """Graph-geodesic distance ``d_Omega`` to the Boundary node set (zero-trace)."""
    cached = domain.__dict__.get("_d_omega")
    if cached is None:
        d = dijkstra(domain, domain.boundary_nodes)
        cached = ScalarField(domain, d, zero_trace=True, name="d")
        domain.__dict__["_d_omega"] = cached
    return cached


def inradius(dist: ScalarField) -> float:
    """Largest value of a distance field, the discrete inradius."""
    return float(np.max(dist.values))


@dataclass(frozen=True, eq=False)
class RidgeSet:
    """Near-argmax nodes of a distance field.

    Attributes
    ----------
    nodes : ndarray
        Sorted node ids.
    tol : float
        Tolerance used for extraction.
    level : float
        Maximum of the field.
    """

    nodes: np.ndarray
    tol: float
    level: float

    def __len__(self) -> int:
        return int(self.nodes.size)


def high_ridge(dist: ScalarField, tol: float | None = None) -> RidgeSet:
    """Nodes whose value is within ``tol`` of the maximum (default ``tol = h``)."""
    if tol is None:
        tol = dist.domain.h
    if tol < 0:
        raise ValueError("tol must be non-negative")
    top = float(np.max(dist.values))
    nodes = np.flatnonzero(dist.values >= top - tol)
    return RidgeSet(nodes, float(tol), top)


def generalized_inball(domain: GridDomain, ridge: RidgeSet, r: float) -> np.ndarray:
    """Node ids at graph distance strictly less than ``r`` from the ridge."""
    if not r > 0:
        raise ValueError("r must be positive")
    dr = distance_to_set(domain, ridge.nodes).values
    return np.flatnonzero(dr < r)


def inner_distance(domain: GridDomain, ridge: RidgeSet, r: float | None = None,
                   check: bool = True) -> ScalarField:
    """Inner distance ``d_in = max(r - dist(., ridge), 0)``.

    The value is additionally capped by ``d_Omega``.  With a ridge extracted at
    a positive tolerance, ridge nodes sit up to ``tol`` below ``r`` and the raw
    formula would overshoot ``d_Omega`` (and the boundary) by that much; the cap
    restores zero trace and ``d_in <= d_Omega``.

    When ``check`` is set, a second route is evaluated: the distance transform
    to the complement of the generalized inball, restricted to the inball.  The
    two must agree within ``2h`` or :class:`CrossCheckFailure` is raised.
    """
    d_omega = distance_to_boundary(domain).values
    if r is None:
        r = float(np.max(d_omega))
    if len(ridge) == 0:
        raise EmptySeedSet("ridge is empty")
    dr = distance_to_set(domain, ridge.nodes).values
    raw = np.maximum(r - dr, 0.0)
    vals = np.minimum(raw, d_omega)
    out = ScalarField(domain, vals, zero_trace=True, name="d_in")
    if check:
        gap = inner_distance_crosscheck(domain, ridge, r, out)
        if gap > 2 * domain.h + 1e-12:
            raise CrossCheckFailure(f"inner distance routes differ by {gap:.3g} > 2h")
    return out


def inner_distance_crosscheck(domain: GridDomain, ridge: RidgeSet, r: float,
                              d_in: ScalarField) -> float:
    """Sup difference between ``d_in`` and the distance to the inball's complement."""
    dr = distance_to_set(domain, ridge.nodes).values
    inside = dr < r
    outside = np.flatnonzero(~inside)
    if outside.size == 0:
        alt = np.full(domain.n_nodes, np.inf)
    else:
        alt = dijkstra(domain, outside)
    alt = np.where(inside, alt, 0.0)
    alt = np.minimum(alt, distance_to_boundary(domain).values)
    return float(np.max(np.abs(alt - d_in.values)))
