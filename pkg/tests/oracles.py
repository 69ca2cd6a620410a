"""Independent oracles shared by the transport and acceptance tests."""

import itertools
import math

import numpy as np
from scipy.optimize import linprog

from linfty.transport import FlowProblem, solve_flow


def _connected(n, edges):
    seen, stack = {0}, [0]
    adj = {i: [] for i in range(n)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == n


def dual_by_enumeration(n, edges, cost, demand):
    """Best vertex of ``{p : |p_a - p_b| <= c, p_0 = 0}`` for the objective ``p . demand``."""
    rows, rhs = [], []
    for (a, b), c in zip(edges, cost):
        for s in (1, -1):
            r = np.zeros(n)
            r[b], r[a] = s, -s
            rows.append(r[1:])
            rhs.append(c)
    A, c = np.array(rows), np.array(rhs)
    best = -math.inf
    combos = np.array(list(itertools.combinations(range(A.shape[0]), n - 1)))
    for chunk in np.array_split(combos, max(1, combos.shape[0] // 20000)):
        M = A[chunk]
        ok = np.abs(np.linalg.det(M)) > 1e-9
        if not ok.any():
            continue
        p = np.linalg.solve(M[ok], c[chunk[ok]][..., None])[..., 0]
        feas = np.all(p @ A.T <= c + 1e-9, axis=1)
        if feas.any():
            best = max(best, float(np.max(p[feas] @ demand[1:])))
    return best


def primal_by_lp(n, edges, cost, demand):
    m = len(edges)
    inc = np.zeros((n, m))
    for k, (a, b) in enumerate(edges):
        inc[a, k], inc[b, k] = -1, 1
    res = linprog(np.concatenate([cost, cost]), A_eq=np.hstack([inc, -inc]), b_eq=demand,
                  bounds=(0, None), method="highs")
    return res.fun


def small_graphs():
    rng = np.random.default_rng(7)
    # every connected graph on up to four nodes
    for n in (2, 3, 4):
        pairs = list(itertools.combinations(range(n), 2))
        for mask in range(1, 2 ** len(pairs)):
            edges = [p for k, p in enumerate(pairs) if mask >> k & 1]
            if _connected(n, edges):
                yield n, edges, rng
    # random connected graphs on five to eight nodes
    for _ in range(40):
        n = int(rng.integers(5, 9))
        pairs = list(itertools.combinations(range(n), 2))
        while True:
            m = int(rng.integers(n - 1, min(len(pairs), n + 2) + 1))
            edges = [pairs[i] for i in rng.choice(len(pairs), m, replace=False)]
            if _connected(n, edges):
                break
        yield n, edges, rng


def small_graph_check():
    """Worst relative gap between the flow solver and vertex enumeration, and the graph count."""
    worst, count = 0.0, 0
    for n, edges, rng in small_graphs():
        cost = rng.integers(1, 6, len(edges)).astype(float) * rng.choice([1.0, 0.5, math.sqrt(2)])
        demand = rng.normal(size=n)
        demand -= demand.mean()
        sol = solve_flow(FlowProblem(n, np.array(edges), cost, demand))
        enum = dual_by_enumeration(n, edges, cost, demand)
        gap = abs(sol.value - enum) / max(1.0, abs(enum))
        worst = max(worst, gap)
        count += 1
    return worst, count
