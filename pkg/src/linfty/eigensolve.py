"""Finite-p Rayleigh minimization, an infinity-harmonic solver, and the
explicit L-infinity minimizers built from distance functions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import GridDomain, LinftyError, ScalarField
from .lipcalc import lip_constant, rayleigh
from .metric import (RidgeSet, dijkstra, distance_to_boundary, distance_to_set,
                     generalized_inball, high_ridge, inradius, inner_distance)


class BadP(LinftyError):
    pass


class NoConvergence(LinftyError):
    pass


class StadiumDomain(LinftyError):
    pass


class NotNormalized(LinftyError):
    pass


class InconsistentData(UserWarning):
    pass


# ---------------------------------------------------------------------------
# discrete p-energies


class _PEnergy:
    """Cell-quadrature p-norms of ``u`` and of its forward-difference gradient.

    Values live on the interior nodes; boundary and exterior lattice nodes
    are zero.  All quantities are evaluated in scaled form so that ``p`` in
    the hundreds does not overflow.
    """

    def __init__(self, domain: GridDomain, p: float):
        self.d = domain
        self.p = float(p)
        self.w = domain.h ** domain.dim
        self.free = domain.interior_nodes
        self.lat_idx = tuple(domain.ijk[self.free].T)

    def _lattice(self, x: np.ndarray) -> np.ndarray:
        lat = np.zeros(tuple(n + 1 for n in self.d.shape))
        lat[self.lat_idx] = x
        return lat

    def _grads(self, lat):
        h = self.d.h
        if self.d.dim == 1:
            return [(lat[1:] - lat[:-1]) / h]
        gx = (lat[1:, :-1] - lat[:-1, :-1]) / h
        gy = (lat[:-1, 1:] - lat[:-1, :-1]) / h
        return [gx, gy]

    def log_norms(self, x: np.ndarray):
        """Return ``(log ||grad u||_p, log ||u||_p)``."""
        p = self.p
        g = self._grads(self._lattice(x))
        mag = np.sqrt(sum(c * c for c in g))
        sg = mag.max()
        su = np.abs(x).max()
        lg = math.log(sg) + math.log(self.w * np.sum((mag / sg) ** p)) / p
        lu = math.log(su) + math.log(self.w * np.sum((np.abs(x) / su) ** p)) / p
        return lg, lu

    def log_quotient(self, x):
        lg, lu = self.log_norms(x)
        return lg - lu

    def gradient(self, x: np.ndarray):
        """Gradient of ``log Q`` and the scale of its second term."""
        p, h = self.p, self.d.h
        lat = self._lattice(x)
        g = self._grads(lat)
        mag = np.sqrt(sum(c * c for c in g))
        sg = mag.max()
        m = mag / sg
        eg = np.sum(m ** p)
        coef = np.where(m > 0, m ** (p - 2), 0.0) / (sg * eg)
        if self.d.dim == 1:
            f = coef * g[0] / sg
            div = np.zeros_like(lat)
            div[1:] += f
            div[:-1] -= f
            dg = div / h
        else:
            fx = coef * g[0] / sg
            fy = coef * g[1] / sg
            div = np.zeros_like(lat)
            div[1:, :-1] += fx
            div[:-1, :-1] -= fx
            div[:-1, 1:] += fy
            div[:-1, :-1] -= fy
            dg = div / h
        dg = dg[self.lat_idx]
        su = np.abs(x).max()
        a = np.abs(x) / su
        eu = np.sum(a ** p)
        du = np.sign(x) * a ** (p - 1) / (su * eu)
        return dg - du, du


def _laplacian(domain: GridDomain) -> sp.csc_matrix:
    """Dirichlet 5-point (3-point in 1D) Laplacian on the interior nodes."""
    free = domain.interior_nodes
    pos = -np.ones(domain.n_nodes, dtype=np.int64)
    pos[free] = np.arange(free.size)
    nb, ln = domain.neighbor_table
    axial = np.isclose(ln[0], domain.h)
    rows, cols, vals = [], [], []
    for k in np.flatnonzero(axial):
        j = nb[free, k]
        ok = pos[j] >= 0
        rows.append(np.arange(free.size)[ok])
        cols.append(pos[j[ok]])
        vals.append(-np.ones(ok.sum()))
    rows.append(np.arange(free.size))
    cols.append(np.arange(free.size))
    vals.append(np.full(free.size, 2.0 * domain.dim))
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(free.size, free.size))
    return A / domain.h ** 2


def _preconditioner(domain: GridDomain):
    cache = domain.__dict__.get("_lap_lu")
    if cache is None:
        cache = spla.splu(_laplacian(domain))
        domain.__dict__["_lap_lu"] = cache
    return cache


@dataclass(frozen=True, eq=False)
class EigenReport:
    """Result of a finite-p (or limiting) eigen-solve.

    Attributes
    ----------
    u : ScalarField
        Normalized to ``max|u| = 1``, positive at the first ridge node.
    lam : float
        Discrete quotient ``||grad u||_p / ||u||_p`` of ``u``.
    p : float
        Exponent (``math.inf`` for the limiting problem).
    pde_residual : float
        Relative weak residual of the p-eigen-equation.
    iterations : int
    converged : bool
    history : list of float
        Quotient value after each accepted step.
    """

    u: ScalarField
    lam: float
    p: float
    pde_residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"p": self.p, "lambda": self.lam, "pde_residual": self.pde_residual,
                "iterations": self.iterations, "converged": self.converged}


def p_quotient(u: ScalarField, p: float) -> float:
    """Discrete ``||grad u||_p / ||u||_p`` of a zero-trace field."""
    e = _PEnergy(u.domain, p)
    return math.exp(e.log_quotient(u.values[e.free]))


def _orient(domain: GridDomain, x_full: np.ndarray) -> np.ndarray:
    ridge = high_ridge(distance_to_boundary(domain))
    v = x_full / np.max(np.abs(x_full))
    first = v[ridge.nodes[0]]
    if first < 0 or (first == 0 and v[np.argmax(np.abs(v))] < 0):
        v = -v
    return v


def p_eigenpair(domain: GridDomain, p: float, init: ScalarField | None = None,
                tol: float = 1e-6, max_iter: int = 3000, min_decrease: float = 1e-13,
                ) -> EigenReport:
    """Minimize the discrete p-Rayleigh quotient by normalized descent.

    The search direction is the quotient's first variation preconditioned by
    the inverse Dirichlet Laplacian, combined Polak-Ribiere style with the
    previous direction; the step is chosen by Armijo backtracking and the
    iterate is renormalized to ``||u||_p = 1`` after each step.

    Parameters
    ----------
    domain : GridDomain
    p : float
        Exponent, ``p > 1``.
    init : ScalarField, optional
        Zero-trace starting field; defaults to ``d_Omega``.
    tol : float
        Target for the relative weak residual.
    max_iter : int
        Zero evaluates the quotient of ``init`` only.
    min_decrease : float
        Stop when the log-quotient improves by less than this for 20 steps.
    """
    if not p > 1:
        raise BadP(f"p must exceed 1, got {p}")
    if init is None:
        init = distance_to_boundary(domain)
    e = _PEnergy(domain, p)
    x = np.array(init.values[e.free], dtype=float)
    if not np.any(x):
        raise ValueError("initial field vanishes on the interior")
    lu = e.log_norms(x)[1]
    x = x / math.exp(lu)
    lu_solver = _preconditioner(domain)

    f = e.log_quotient(x)
    history = [math.exp(f)]
    grad, du = e.gradient(x)
    resid = float(np.max(np.abs(grad)) / np.max(np.abs(du)))
    direction = None
    prev_grad = prev_pg = None
    step = 1.0
    stall = 0
    it = 0
    while it < max_iter and resid > tol:
        pg = lu_solver.solve(grad)
        # keep the direction orthogonal to the scaling mode
        if direction is None:
            direction = -pg
        else:
            beta = max(0.0, float(grad @ (pg - prev_pg)) / float(prev_grad @ prev_pg))
            direction = -pg + beta * direction
        slope = float(grad @ direction)
        if slope >= 0:
            direction = -pg
            slope = float(grad @ direction)
        scale = np.max(np.abs(x)) / max(np.max(np.abs(direction)), 1e-300)
        t = min(step * 2.0, 1.0) if step < 1.0 else 1.0
        accepted = False
        for _ in range(60):
            trial = x + (t * scale) * direction
            if np.any(trial):
                ft = e.log_quotient(trial)
                if ft <= f + 1e-4 * t * scale * slope:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        step = t
        x = trial / math.exp(e.log_norms(trial)[1])
        stall = stall + 1 if f - ft < min_decrease else 0
        f = ft
        history.append(math.exp(f))
        prev_grad, prev_pg = grad, pg
        grad, du = e.gradient(x)
        resid = float(np.max(np.abs(grad)) / np.max(np.abs(du)))
        it += 1
        if stall >= 20:
            break

    full = np.zeros(domain.n_nodes)
    full[e.free] = x
    full = _orient(domain, full)
    u = ScalarField(domain, full, zero_trace=True, name=f"u_p{p:g}")
    lam = p_quotient(u, p)
    return EigenReport(u, lam, float(p), resid, it, resid <= tol, history)


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Table of ``(p, lambda_p)`` with the reports and the limit gap ``|lambda_last - 1/r|``."""

    table: list
    reports: list = field(repr=False)
    limit_gap: float
    inv_inradius: float

    def to_dict(self) -> dict:
        return {"table": [{"p": p, "lambda": lam} for p, lam in self.table],
                "limit_gap": self.limit_gap, "inv_inradius": self.inv_inradius,
                "reports": [r.to_dict() for r in self.reports]}


def p_sweep(domain: GridDomain, ps, tol: float = 1e-6, max_iter: int = 3000) -> SweepResult:
    """Solve for each exponent in increasing order, warm-starting from the previous field."""
    ps = [float(p) for p in ps]
    if any(b <= a for a, b in zip(ps, ps[1:])):
        raise ValueError("exponents must be increasing")
    if any(p <= 1 for p in ps):
        raise BadP("all exponents must exceed 1")
    init = distance_to_boundary(domain)
    reports = []
    for p in ps:
        rep = p_eigenpair(domain, p, init, tol=tol, max_iter=max_iter)
        reports.append(rep)
        init = rep.u
    inv_r = 1.0 / inradius(distance_to_boundary(domain))
    return SweepResult([(r.p, r.lam) for r in reports], reports,
                       abs(reports[-1].lam - inv_r), inv_r)


# ---------------------------------------------------------------------------
# infinity-harmonic extension


@dataclass(frozen=True, eq=False)
class InfHarmResult:
    u: ScalarField
    iterations: int
    change: float
    converged: bool


def _envelope_init(domain: GridDomain, fixed: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Average of the upper and lower Lipschitz envelopes of the fixed data."""
    fv = vals[fixed]
    hi, lo = fv.max(), fv.min()
    if hi == lo:
        return np.full(domain.n_nodes, hi)
    top = np.flatnonzero(fixed & (vals == hi))
    bot = np.flatnonzero(fixed & (vals == lo))
    gap = float(dijkstra(domain, top)[bot].min())
    lip = (hi - lo) / max(gap, domain.h)
    d_top = dijkstra(domain, top)
    d_bot = dijkstra(domain, bot)
    upper = np.minimum(hi, lo + lip * d_bot)
    lower = np.maximum(lo, hi - lip * d_top)
    return 0.5 * (upper + lower)


def infinity_harmonic(domain: GridDomain, fixed: np.ndarray, values, tol: float = 1e-8,
                      max_iter: int = 200000, init: np.ndarray | None = None,
                      lip_bound: float | None = None, strict: bool = False) -> InfHarmResult:
    """Discrete infinity-harmonic extension of fixed nodal data.

    Each free node is set to the value ``t`` that balances the steepest
    ascent and descent slopes to its stencil neighbors,
    ``max_y (u(y) - t)/len = max_y (t - u(y))/len``, which is a
    distance-weighted midpoint of one upper and one lower neighbor.  The
    update is monotone in the neighbor values, so the fixed point obeys a
    comparison principle.  Sweeps are Gauss-Seidel over the lattice parity
    classes in a fixed order, until the sup-change is at most ``tol``.

    Parameters
    ----------
    fixed : bool array or int array
        Fixed nodes; must include every Boundary node.
    values : array
        Either one value per node (only fixed entries are read) or one value
        per fixed node in increasing node order.
    init : array, optional
        Starting values for the free nodes.  Defaults to the mean of the
        upper and lower Lipschitz envelopes of the data.
    lip_bound : float, optional
        If given, warn with :class:`InconsistentData` when the data are not
        ``lip_bound``-Lipschitz on the graph beyond ``tol``.
    strict : bool
        Raise :class:`NoConvergence` instead of returning an unconverged result.
    """
    n = domain.n_nodes
    fixed = np.asarray(fixed)
    if fixed.dtype != bool:
        m = np.zeros(n, dtype=bool)
        m[fixed.astype(np.int64)] = True
        fixed = m
    if not np.all(fixed[domain.is_boundary]):
        raise ValueError("fixed set must contain every boundary node")
    values = np.asarray(values, dtype=float)
    if values.size == n:
        vals = values.copy()
    elif values.size == fixed.sum():
        vals = np.zeros(n)
        vals[fixed] = values
    else:
        raise ValueError("values must be per node or per fixed node")
    if not np.all(np.isfinite(vals[fixed])):
        raise ValueError("fixed values must be finite")
    if lip_bound is not None:
        fv = vals[fixed]
        upper = lip_bound * dijkstra(domain, np.flatnonzero(fixed & (vals == fv.min())))
        if np.any(vals[fixed] - fv.min() > upper[fixed] + tol):
            warnings.warn("fixed data violate the requested Lipschitz bound", InconsistentData)

    u = _envelope_init(domain, fixed, vals) if init is None else np.array(init, dtype=float)
    u[fixed] = vals[fixed]
    free = ~fixed
    nb, ln = domain.neighbor_table
    r2 = math.sqrt(2.0)
    if domain.dim == 1:
        groups = [np.flatnonzero(free & (domain.ijk[:, 0] % 2 == c)) for c in range(2)]
        tables = [(nb[g],) for g in groups]
    else:
        axial = np.isclose(ln[0], domain.h)
        par = (domain.ijk[:, 0] % 2) * 2 + domain.ijk[:, 1] % 2
        groups = [np.flatnonzero(free & (par == c)) for c in range(4)]
        tables = [(nb[g][:, axial], nb[g][:, ~axial]) for g in groups]
    change = math.inf
    it = 0
    while it < max_iter:
        change = 0.0
        for g, tab in zip(groups, tables):
            if g.size == 0:
                continue
            if domain.dim == 1:
                nbv = u[tab[0]]
                new = 0.5 * (nbv.max(axis=1) + nbv.min(axis=1))
            else:
                ua, ud = u[tab[0]], u[tab[1]]
                amax, amin = ua.max(axis=1), ua.min(axis=1)
                dmax, dmin = ud.max(axis=1), ud.min(axis=1)
                c1 = 0.5 * (amax + amin)
                c2 = (r2 * amax + dmin) / (1.0 + r2)
                c3 = (dmax + r2 * amin) / (1.0 + r2)
                c4 = 0.5 * (dmax + dmin)
                new = np.maximum(np.minimum(c1, c2), np.minimum(c3, c4))
            change = max(change, float(np.max(np.abs(new - u[g]))))
            u[g] = new
        it += 1
        if change <= tol:
            break
    converged = change <= tol
    if strict and not converged:
        raise NoConvergence(f"sup-change {change:.3g} after {it} sweeps")
    zero_trace = bool(np.all(u[domain.is_boundary] == 0.0))
    return InfHarmResult(ScalarField(domain, u, zero_trace, "u_inf"), it, change, converged)


def ridge_potential(domain: GridDomain, ridge: RidgeSet | None = None, value: float | None = None,
                    **kw) -> InfHarmResult:
    """Infinity-harmonic potential: 0 on the boundary and ``value`` (default ``r``) on the ridge."""
    d = distance_to_boundary(domain)
    if ridge is None:
        ridge = high_ridge(d)
    if value is None:
        value = inradius(d)
    fixed = domain.is_boundary.copy()
    fixed[ridge.nodes] = True
    vals = np.zeros(domain.n_nodes)
    vals[ridge.nodes] = value
    return infinity_harmonic(domain, fixed, vals, **kw)


# ---------------------------------------------------------------------------
# constructive minimizers


def construct_sign_changing(domain: GridDomain, ridge: RidgeSet | None = None,
                            r: float | None = None) -> ScalarField:
    """Minimizer equal to ``d_in`` on the generalized inball and negative outside it.

    Writing ``D`` for the graph distance to the ridge, the field is
    ``max(min(r - D, d_Omega), -d_Omega)``: the inner distance inside the
    inball and ``-min(D - r, d_Omega)`` in the pockets outside it.  Both
    pieces are 1-Lipschitz, so the result has graph-Lipschitz constant 1.

    Raises
    ------
    StadiumDomain
        When the inball covers every interior node, or when every pocket is
        at most ``2h`` deep (pockets of that size are artifacts of the
        graph metric, not genuine room for a sign change).
    """
    d = distance_to_boundary(domain).values
    if r is None:
        r = float(d.max())
    if ridge is None:
        ridge = high_ridge(distance_to_boundary(domain))
    D = distance_to_set(domain, ridge.nodes).values
    inball = D < r
    if np.all(inball[domain.is_interior]):
        raise StadiumDomain("the generalized inball covers the whole domain")
    vals = np.maximum(np.minimum(r - D, d), -d)
    depth = -float(vals.min())
    if depth <= 2 * domain.h:
        raise StadiumDomain(f"pockets outside the inball are only {depth:.3g} deep (<= 2h)")
    return ScalarField(domain, vals, zero_trace=True, name="u_sign")


@dataclass(frozen=True)
class EnvelopeReport:
    below_dmax: bool
    above_din: bool | None
    argmax_on_ridge: bool
    worst_above_dmax: float
    worst_below_din: float | None
    slack: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_envelope(u: ScalarField, ridge: RidgeSet | None = None, slack: float | None = None
                   ) -> EnvelopeReport:
    """Compare ``|u|`` with ``d_Omega`` (from above) and ``d_in`` (from below).

    ``u`` must be zero-trace with ``lip_constant(u) = 1``.  The lower
    comparison is evaluated only when the argmax of ``|u|`` lies on the ridge.
    """
    lip = lip_constant(u)
    if abs(lip - 1.0) > 1e-9:
        raise NotNormalized(f"lip_constant(u) = {lip!r}, expected 1")
    dom = u.domain
    if slack is None:
        slack = 2 * dom.h
    dist = distance_to_boundary(dom)
    if ridge is None:
        ridge = high_ridge(dist)
    a = np.abs(u.values)
    top = np.flatnonzero(a >= a.max() * (1 - 1e-12))
    on_ridge = bool(np.all(np.isin(top, ridge.nodes)))
    over = float(np.max(a - dist.values))
    below_ok = over <= slack
    if on_ridge:
        din = inner_distance(dom, ridge, check=False).values
        under = float(np.max(din - a))
        return EnvelopeReport(below_ok, under <= slack, True, over, under, slack)
    return EnvelopeReport(below_ok, None, False, over, None, slack)


def normalize_lip(u: ScalarField) -> ScalarField:
    """Scale a field to graph-Lipschitz constant 1."""
    lip = lip_constant(u)
    if lip == 0:
        raise ValueError("constant field cannot be normalized")
    v = u.values / lip
    # one rescale can leave the constant a few ulps away from 1
    for _ in range(3):
        l2 = lip_constant(u.with_values(v))
        if abs(l2 - 1.0) <= 1e-12:
            break
        v = v / l2
    return u.with_values(v)
