"""Discrete Lipschitz calculus on the stencil graph.

Slopes are measured edge-wise: the slope of ``u`` at a node is the largest
``|u(a) - u(b)| / len(a, b)`` over incident edges.  Its maximum is exactly the
graph-Lipschitz constant, the discrete ``J_inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import GridDomain, LinftyError, ScalarField
from .metric import distance_to_boundary


class ZeroFunction(LinftyError):
    pass


def edge_slopes(u: ScalarField) -> np.ndarray:
    """Signed slope ``(u(b) - u(a)) / len`` of every edge ``a < b``."""
    d = u.domain
    e = d.edges
    return (u.values[e[:, 1]] - u.values[e[:, 0]]) / d.edge_len


def local_slope(u: ScalarField) -> np.ndarray:
    """Per-node maximum incident edge slope (non-negative)."""
    d = u.domain
    s = np.abs(edge_slopes(u))
    out = np.zeros(d.n_nodes)
    e = d.edges
    np.maximum.at(out, e[:, 0], s)
    np.maximum.at(out, e[:, 1], s)
    return out


def lip_constant(u: ScalarField) -> float:
    """Graph-Lipschitz constant of ``u`` (discrete ``J_inf``)."""
    s = edge_slopes(u)
    return float(np.max(np.abs(s))) if s.size else 0.0


def rayleigh(u: ScalarField) -> float:
    """``lip_constant(u) / max|u|``."""
    sup = u.sup
    if sup == 0.0:
        raise ZeroFunction("Rayleigh quotient of the zero function")
    return lip_constant(u) / sup


def omega_max_abs(u: ScalarField, tol: float) -> np.ndarray:
    """Nodes where ``|u|`` is within ``tol`` of its maximum."""
    a = np.abs(u.values)
    return np.flatnonzero(a >= a.max() - tol)


# ---------------------------------------------------------------------------
# mollification


@dataclass(frozen=True)
class MollifierSchedule:
    """Decreasing mollification radii and the kernel shape.

    Attributes
    ----------
    radii : tuple of float
        Strictly decreasing, each at least the grid spacing.
    kernel : str
        ``"box"`` (default) or ``"triangle"``.
    """

    radii: tuple
    kernel: str = "box"

    def __post_init__(self):
        r = tuple(float(x) for x in self.radii)
        object.__setattr__(self, "radii", r)
        if not r:
            raise ValueError("schedule needs at least one radius")
        if any(b >= a for a, b in zip(r, r[1:])):
            raise ValueError("radii must be strictly decreasing")
        if self.kernel not in ("box", "triangle"):
            raise ValueError(f"unknown kernel {self.kernel!r}")

    @classmethod
    def in_cells(cls, h: float, factors=(8, 4, 2), kernel: str = "box") -> "MollifierSchedule":
        return cls(tuple(f * h for f in factors), kernel)

    def validate(self, h: float) -> None:
        if self.radii[-1] < h * (1 - 1e-12):
            raise ValueError("mollifier radii must be at least h")


def _chamfer_offsets(dim: int, rmax_cells: float):
    """Lattice offsets with chamfer length <= rmax (in cells), sorted by length."""
    m = int(math.floor(rmax_cells + 1e-9))
    rng = np.arange(-m, m + 1)
    if dim == 1:
        offs = rng[:, None]
        lens = np.abs(rng).astype(float)
    else:
        gx, gy = np.meshgrid(rng, rng, indexing="ij")
        a, b = np.abs(gx).ravel(), np.abs(gy).ravel()
        lens = np.maximum(a, b) + (math.sqrt(2) - 1) * np.minimum(a, b)
        offs = np.stack([gx.ravel(), gy.ravel()], axis=1)
    keep = lens <= rmax_cells + 1e-9
    offs, lens = offs[keep], lens[keep]
    order = np.argsort(lens, kind="stable")
    return offs[order], lens[order]


def _ball_average(u: ScalarField, radius: float, kernel: str) -> np.ndarray:
    d = u.domain
    h = d.h
    # Ball radius is capped by the node's distance to the boundary, so the
    # ball is symmetric and never leaves the active node set.
    cap = distance_to_boundary(d).values
    rad = np.minimum(radius, cap) / h
    offs, lens = _chamfer_offsets(d.dim, radius / h)
    levels = np.unique(lens)
    # node -> largest level <= its radius
    lvl_idx = np.searchsorted(levels, rad + 1e-9, side="right") - 1
    lat = u.lattice(fill=0.0)
    pad = int(math.ceil(radius / h)) + 1
    lat = np.pad(lat, pad)
    ijk = d.ijk + pad
    out = u.values.copy()
    for li in np.unique(lvl_idx):
        if li <= 0:
            continue
        rcut = levels[li]
        sel = np.flatnonzero(lvl_idx == li)
        use = lens <= rcut + 1e-9
        o, ln = offs[use], lens[use]
        if kernel == "box":
            w = np.ones(ln.size)
        else:
            w = 1.0 - ln / (rcut + 1.0)
        w = w / w.sum()
        acc = np.zeros(sel.size)
        base = ijk[sel]
        for k in range(o.shape[0]):
            idx = tuple(base[:, j] + o[k, j] for j in range(d.dim))
            acc += w[k] * lat[idx]
        out[sel] = acc
    return out


def lipschitz_envelope(u: ScalarField, lip: float, max_sweeps: int = 100000) -> np.ndarray:
    """Largest ``lip``-Lipschitz minorant ``min_y u(y) + lip * d(x, y)``.

    Computed by vectorized relaxation over the stencil; nodes whose
    incident slopes are already within ``lip`` are left unchanged.
    """
    d = u.domain
    nb, ln = d.neighbor_table
    ok = nb >= 0
    v = np.array(u.values, dtype=float)
    for _ in range(max_sweeps):
        cand = np.where(ok, v[np.where(ok, nb, 0)] + lip * ln, np.inf).min(axis=1)
        lower = cand < v
        if not lower.any():
            break
        v = np.where(lower, cand, v)
    return v


def mollify(u: ScalarField, radius: float, kernel: str = "box") -> ScalarField:
    """Kernel average over graph balls, with the slope bound enforced.

    Balls are capped at the node's distance to the boundary, which can push
    a few boundary-adjacent slopes above ``J(u)``.  Those are removed by
    taking the ``J(u)``-Lipschitz envelope from below (a local change),
    followed by the factor ``min(1, J(u) / J(result))`` to absorb rounding,
    so ``lip_constant(result) <= lip_constant(u)`` holds exactly.
    """
    if radius < u.domain.h * (1 - 1e-12):
        raise ValueError("radius must be at least h")
    avg = u.with_values(_ball_average(u, radius, kernel))
    j_u = lip_constant(u)
    if lip_constant(avg) > j_u:
        avg = avg.with_values(lipschitz_envelope(avg, j_u))
    j_m = lip_constant(avg)
    if j_m > j_u and j_m > 0:
        avg = avg.with_values(avg.values * (j_u / j_m))
    return avg


@dataclass(frozen=True, eq=False)
class OmegaMaxResult:
    """Output of :func:`omega_max_grad`.

    Attributes
    ----------
    nodes : ndarray
        Node ids in the discrete Omega_max.
    slopes : ndarray, shape (len(radii), n)
        Local slope of each mollified field, coarse to fine.
    radii : tuple
    threshold : float
        ``(1 - delta) * lip_constant(u)``.
    lip : float
    tail : int
        Number of finest radii that must all clear the threshold.
    """

    nodes: np.ndarray
    slopes: np.ndarray = field(repr=False)
    radii: tuple
    threshold: float
    lip: float
    tail: int

    def indicator(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.nodes] = True
        return m


def omega_max_grad(u: ScalarField, schedule: MollifierSchedule | None = None,
                   delta: float = 0.05, tail: int = 2,
                   interior_only: bool = True) -> OmegaMaxResult:
    """Discrete Omega_max: nodes where mollified slopes stay near ``J_inf(u)``.

    A node qualifies when the local slope of ``mollify(u, r)`` is at least
    ``(1 - delta) * lip_constant(u)`` for each of the ``tail`` finest radii of
    the schedule.  Requiring the last two radii (rather than only the last)
    separates slopes that have stabilized at the maximum from slopes that are
    merely close to it at grid resolution; see the README.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    d = u.domain
    if schedule is None:
        schedule = MollifierSchedule.in_cells(d.h)
    schedule.validate(d.h)
    tail = max(1, min(int(tail), len(schedule.radii)))
    lip = lip_constant(u)
    slopes = np.stack([local_slope(mollify(u, r, schedule.kernel)) for r in schedule.radii])
    thr = (1.0 - delta) * lip
    ok = np.all(slopes[-tail:] >= thr, axis=0) if lip > 0 else np.zeros(d.n_nodes, bool)
    if interior_only:
        ok &= d.is_interior
    return OmegaMaxResult(np.flatnonzero(ok), slopes, schedule.radii, thr, lip, tail)


def dilate(domain: GridDomain, nodes: np.ndarray, radius: float) -> np.ndarray:
    """Nodes within lattice-chamfer distance ``radius`` of the given node set."""
    mark = np.zeros(domain.n_nodes, dtype=bool)
    mark[np.asarray(nodes, dtype=np.int64)] = True
    lat = np.pad(domain.lattice_values(mark.astype(float), 0.0) > 0, int(radius / domain.h) + 1)
    pad = int(radius / domain.h) + 1
    offs, _ = _chamfer_offsets(domain.dim, radius / domain.h)
    ijk = domain.ijk + pad
    out = np.zeros(domain.n_nodes, dtype=bool)
    for k in range(offs.shape[0]):
        idx = tuple(ijk[:, j] + offs[k, j] for j in range(domain.dim))
        out |= lat[idx]
    return np.flatnonzero(out)
