"""Node measures, edge fluxes and the diagnostics that tie them to slopes.

Sign convention
---------------
A flux value on edge ``(a, b)`` with ``a < b`` is mass moving from ``a`` to
``b``.  :func:`weak_divergence` returns the *net inflow* at each node, so a
flux running uphill along ``u`` deposits positive mass at the top of ``u``.
In continuum notation this is ``-div sigma``, and summation by parts reads::

    sum_x phi(x) * w(x) = sum_e flux_e * (phi(b) - phi(a))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import (_HALF_STENCIL, FormatError, GridDomain, IoError, LinftyError,
                     ScalarField, read_node_csv)
from .lipcalc import (MollifierSchedule, dilate, lip_constant, omega_max_abs,
                      omega_max_grad)
from .metric import distance_to_boundary


class UnsupportedDomain(LinftyError):
    pass


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Signed node weights on a grid domain.

    Parameters
    ----------
    domain : GridDomain
    weights : array_like, shape (n_nodes,)
    probability : bool
        Require non-negative weights summing to one (within 1e-12).
    """

    domain: GridDomain
    weights: np.ndarray
    probability: bool = False

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.size != self.domain.n_nodes:
            raise ValueError(f"expected {self.domain.n_nodes} weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("measure weights must be finite")
        if self.probability and (np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12):
            raise ValueError("probability measure needs non-negative weights summing to 1")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, domain: GridDomain, node: int, mass: float = 1.0) -> "DiscreteMeasure":
        w = np.zeros(domain.n_nodes)
        w[int(node)] = mass
        return cls(domain, w, probability=(mass == 1.0))

    @classmethod
    def uniform(cls, domain: GridDomain, nodes=None) -> "DiscreteMeasure":
        nodes = np.arange(domain.n_nodes) if nodes is None else np.asarray(nodes)
        w = np.zeros(domain.n_nodes)
        w[nodes] = 1.0 / nodes.size
        w[nodes] /= w.sum()
        return cls(domain, w)

    @property
    def total_variation(self) -> float:
        return float(np.abs(self.weights).sum())

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights != 0)

    def pair(self, u: ScalarField) -> float:
        return float(self.weights @ u.values)

    def scaled(self, c: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.domain, self.weights * c)

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        return DiscreteMeasure(self.domain, self.weights + other.weights)

    def __sub__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        return DiscreteMeasure(self.domain, self.weights - other.weights)


@dataclass(frozen=True, eq=False)
class EdgeFlux:
    """Signed mass per undirected edge, positive from lower to higher node id."""

    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        f = np.array(self.values, dtype=float).reshape(-1)
        if f.size != self.domain.n_edges:
            raise ValueError(f"expected {self.domain.n_edges} edge values, got {f.size}")
        if not np.all(np.isfinite(f)):
            raise ValueError("flux must be finite")
        f.flags.writeable = False
        object.__setattr__(self, "values", f)

    @classmethod
    def zeros(cls, domain: GridDomain) -> "EdgeFlux":
        return cls(domain, np.zeros(domain.n_edges))

    @property
    def total_variation(self) -> float:
        """``sum |flux| * length``."""
        return float(np.abs(self.values) @ self.domain.edge_len)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.values != 0)

    def scaled(self, c: float) -> "EdgeFlux":
        return EdgeFlux(self.domain, self.values * c)

    def __add__(self, other: "EdgeFlux") -> "EdgeFlux":
        return EdgeFlux(self.domain, self.values + other.values)

    def normalized(self) -> "EdgeFlux":
        tv = self.total_variation
        if tv == 0:
            raise ValueError("cannot normalize a zero flux")
        return self.scaled(1.0 / tv)


def flux_from_path(domain: GridDomain, path, mass: float = 1.0) -> EdgeFlux:
    """Flux carrying ``mass`` along consecutive nodes of ``path``."""
    lookup = _edge_lookup(domain)
    f = np.zeros(domain.n_edges)
    for a, b in zip(path[:-1], path[1:]):
        a, b = int(a), int(b)
        e = lookup[(min(a, b), max(a, b))]
        f[e] += mass if a < b else -mass
    return EdgeFlux(domain, f)


def _edge_lookup(domain: GridDomain) -> dict:
    cache = domain.__dict__.get("_edge_lookup")
    if cache is None:
        e = domain.edges
        cache = {(int(a), int(b)): k for k, (a, b) in enumerate(e)}
        domain.__dict__["_edge_lookup"] = cache
    return cache


# ---------------------------------------------------------------------------
# divergence and pairings


def weak_divergence(flux: EdgeFlux) -> DiscreteMeasure:
    """Net inflow at every node: incoming minus outgoing flux."""
    d = flux.domain
    e = d.edges
    w = np.zeros(d.n_nodes)
    np.add.at(w, e[:, 1], flux.values)
    np.subtract.at(w, e[:, 0], flux.values)
    return DiscreteMeasure(d, w)


def edge_pairing(u: ScalarField, flux: EdgeFlux, edges: np.ndarray | None = None) -> float:
    """``sum_e flux_e * (u(b) - u(a))``, optionally restricted to an edge subset.

    Over all edges this equals ``<weak_divergence(flux), u>``.
    """
    e = u.domain.edges
    du = u.values[e[:, 1]] - u.values[e[:, 0]]
    if edges is None:
        return float(flux.values @ du)
    return float(flux.values[edges] @ du[edges])


def edges_in_box(domain: GridDomain, lo, hi) -> np.ndarray:
    """Edges with both endpoints in the closed box ``[lo, hi]``."""
    x = domain.coords
    inside = np.all((x >= np.asarray(lo)) & (x <= np.asarray(hi)), axis=1)
    e = domain.edges
    return np.flatnonzero(inside[e[:, 0]] & inside[e[:, 1]])


def pairing_bound(u: ScalarField, flux: EdgeFlux, edges: np.ndarray | None = None) -> dict:
    """Compare ``|pairing|`` with ``J(u) * |flux|`` on an edge subset."""
    if edges is None:
        edges = np.arange(u.domain.n_edges)
    pairing = edge_pairing(u, flux, edges)
    mass = float(np.abs(flux.values[edges]) @ u.domain.edge_len[edges])
    bound = lip_constant(u) * mass
    return {"pairing": pairing, "bound": bound, "holds": abs(pairing) <= bound * (1 + 1e-12) + 1e-300}


def _conductance_laplacian(domain: GridDomain):
    """Graph Laplacian with edge weights ``1/len`` (incidence form)."""
    e = domain.edges
    m = e.shape[0]
    B = sp.csr_matrix((np.concatenate([-np.ones(m), np.ones(m)]),
                       (np.concatenate([np.arange(m)] * 2), np.concatenate([e[:, 0], e[:, 1]]))),
                      shape=(m, domain.n_nodes))
    W = sp.diags(1.0 / domain.edge_len)
    return B, (B.T @ W @ B).tocsc(), W


def potential_flux(domain: GridDomain, target: np.ndarray, free: np.ndarray) -> EdgeFlux:
    """Gradient flux whose net inflow equals ``target`` on the ``free`` nodes.

    Solves a Dirichlet graph-Laplacian problem with zero potential off the
    free set; the flux on edge ``(a, b)`` is ``(phi(b) - phi(a)) / len``.
    """
    B, L, W = _conductance_laplacian(domain)
    idx = np.flatnonzero(free)
    phi = np.zeros(domain.n_nodes)
    if idx.size:
        phi[idx] = spla.spsolve(L[idx][:, idx].tocsc(), target[idx])
    return EdgeFlux(domain, W @ (B @ phi))


@dataclass(frozen=True, eq=False)
class FluxDecomposition:
    """``flux = gradient + circulation`` with the circulation divergence-free on the free nodes."""

    gradient: EdgeFlux
    circulation: EdgeFlux
    gradient_mass: float
    circulation_mass: float
    max_circulation_divergence: float


def decompose_flux(flux: EdgeFlux) -> FluxDecomposition:
    """Split a flux into a potential part carrying its interior divergence and a rest.

    Diagnostic only: the split depends on the chosen edge conductances and no
    uniqueness is implied.
    """
    d = flux.domain
    wdiv = weak_divergence(flux).weights
    g = potential_flux(d, wdiv, d.is_interior)
    rest = EdgeFlux(d, flux.values - g.values)
    rdiv = weak_divergence(rest).weights[d.is_interior]
    return FluxDecomposition(g, rest, g.total_variation, rest.total_variation,
                             float(np.max(np.abs(rdiv))) if rdiv.size else 0.0)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class CheckReport:
    """Named conditions with pass flags and worst violations."""

    conditions: dict = field(default_factory=dict)

    def add(self, name: str, ok: bool, value: float, **extra) -> None:
        self.conditions[name] = {"pass": bool(ok), "value": float(value), **extra}

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.conditions.values())

    def __getitem__(self, name: str) -> dict:
        return self.conditions[name]

    def to_dict(self) -> dict:
        return {"pass": self.passed, "conditions": self.conditions}


def duality_map_check(u: ScalarField, mu: DiscreteMeasure, tol: float = 1e-6) -> CheckReport:
    """Is ``mu`` in the duality map of ``u`` (unit mass, on the argmax of |u|, polar)?"""
    sup = u.sup
    if sup == 0:
        raise ValueError("u must be nonzero")
    rep = CheckReport()
    tv = mu.total_variation
    rep.add("mass", abs(tv - 1.0) <= tol, abs(tv - 1.0))
    top = np.zeros(u.domain.n_nodes, dtype=bool)
    top[omega_max_abs(u, tol * sup)] = True
    off = np.abs(mu.weights[~top]).sum()
    rep.add("support", off <= tol, off, stray_nodes=int(np.count_nonzero(mu.weights[~top])))
    polar = np.abs(mu.weights - (u.values / sup) * np.abs(mu.weights))
    rep.add("polar", polar.max() <= tol, polar.max())
    return rep


def _grad_support(u: ScalarField, schedule: MollifierSchedule | None, delta: float):
    d = u.domain
    if schedule is None:
        schedule = MollifierSchedule.in_cells(d.h)
    om = omega_max_grad(u, schedule, delta=delta)
    zone = np.zeros(d.n_nodes, dtype=bool)
    zone[dilate(d, om.nodes, schedule.radii[0])] = True
    return zone


def _edge_mass(flux: EdgeFlux, mask: np.ndarray) -> float:
    return float(np.abs(flux.values[mask]) @ flux.domain.edge_len[mask])


def calibration_check(u: ScalarField, flux: EdgeFlux, tol: float = 0.1,
                      schedule: MollifierSchedule | None = None, delta: float = 0.05) -> CheckReport:
    """Is ``flux`` a calibration of ``u``?

    Conditions
    ----------
    mass : ``|flux| <= 1 + tol``
    pairing : ``<weak_divergence(flux), u>`` equals ``J(u)`` within ``tol * J(u)``
    support : at most a ``tol`` fraction of the flux mass sits on edges
        leaving ``omega_max_grad(u)`` dilated by the coarsest mollifier radius
    alignment : at most a ``tol`` fraction of the mass sits on edges where
        the flux opposes ``u`` or the slope is below ``(1 - tol) J(u)``
    """
    d = u.domain
    J = lip_constant(u)
    if J == 0:
        raise ValueError("u must be nonzero")
    tv = flux.total_variation
    rep = CheckReport()
    rep.add("mass", tv <= 1 + tol, tv)
    pairing = edge_pairing(u, flux)
    rep.add("pairing", abs(pairing - J) <= tol * J, pairing, target=J)
    e = d.edges
    carrying = flux.values != 0
    zone = _grad_support(u, schedule, delta)
    outside = carrying & ~(zone[e[:, 0]] & zone[e[:, 1]])
    frac_out = _edge_mass(flux, outside) / tv if tv > 0 else 0.0
    rep.add("support", frac_out <= tol, frac_out, edges=int(outside.sum()))
    slope = (u.values[e[:, 1]] - u.values[e[:, 0]]) / d.edge_len
    bad = carrying & ((np.sign(flux.values) != np.sign(slope)) | (np.abs(slope) < (1 - tol) * J))
    frac_bad = _edge_mass(flux, bad) / tv if tv > 0 else 0.0
    rep.add("alignment", frac_bad <= tol, frac_bad, edges=int(bad.sum()))
    return rep


def eigen_system_check(u: ScalarField, lam: float, nu: DiscreteMeasure, flux: EdgeFlux,
                       tol: float = 0.1, schedule: MollifierSchedule | None = None,
                       delta: float = 0.05) -> CheckReport:
    """Check the eigenvalue system ``lam * nu * u = weak_divergence(flux)``.

    Also checks ``nu(Omega) = 1/sup|u|``, unit flux mass (the slope measure
    then has mass ``1/J(u)``), ``nu`` on the argmax of ``|u|``, and the
    flux on the dilated ``omega_max_grad(u)``.  Nodal equation residuals
    are measured on Interior nodes and compared with ``tol * lam``.
    """
    d = u.domain
    sup = u.sup
    if sup == 0:
        raise ValueError("u must be nonzero")
    if np.any(nu.weights < 0):
        raise ValueError("nu must be non-negative")
    rep = CheckReport()
    m = nu.mass
    rep.add("nu_mass", abs(m * sup - 1.0) <= tol, m, target=1.0 / sup)
    tv = flux.total_variation
    rep.add("flux_mass", abs(tv - 1.0) <= tol, tv, target=1.0)
    top = np.zeros(d.n_nodes, dtype=bool)
    top[omega_max_abs(u, tol * sup)] = True
    stray = float(nu.weights[~top].sum())
    rep.add("nu_support", stray <= tol * m, stray)
    zone = _grad_support(u, schedule, delta)
    e = d.edges
    outside = (flux.values != 0) & ~(zone[e[:, 0]] & zone[e[:, 1]])
    frac = _edge_mass(flux, outside) / tv if tv > 0 else 0.0
    rep.add("flux_support", frac <= tol, frac)
    lhs = lam * nu.weights * u.values
    rhs = weak_divergence(flux).weights
    res = np.abs(lhs - rhs)[d.is_interior]
    worst = float(res.max()) if res.size else 0.0
    rep.add("equation", worst <= tol * lam, worst,
            node=int(d.interior_nodes[np.argmax(res)]) if res.size else -1)
    return rep


def min_equation_check(u: ScalarField, lam: float, nu: DiscreteMeasure, flux: EdgeFlux,
                       tol: float = 1e-8) -> CheckReport:
    """Complementarity ``min(J(u) - lam u, |weak_divergence(flux)|) = 0`` on Interior nodes."""
    d = u.domain
    rep = CheckReport()
    neg = float(min(0.0, u.values.min()))
    rep.add("nonnegative", neg >= -tol, neg)
    slack = lip_constant(u) - lam * u.values
    div = np.abs(weak_divergence(flux).weights)
    inner = d.is_interior
    both = np.minimum(slack, div)[inner]
    worst = float(np.abs(both).max()) if both.size else 0.0
    bad = np.flatnonzero(inner & (np.abs(np.minimum(slack, div)) > tol))
    rep.add("complementarity", worst <= tol, worst, nodes=bad[:20].tolist())
    low = float(slack[inner].min()) if inner.any() else 0.0
    rep.add("slack_sign", low >= -tol, low)
    return rep


def parallelity_check(u: ScalarField, v: ScalarField, flux_u: EdgeFlux, tol: float = 0.1) -> CheckReport:
    """Do the slopes of ``v`` follow ``u``'s calibration flux?

    On the support of ``flux_u`` the slopes of ``u`` and ``v`` must agree in
    sign and ``|slope_v| >= (1 - tol) J(v)``; the report gives the flux mass
    fraction that violates this.
    """
    d = u.domain
    rep = CheckReport()
    ru, rv = lip_constant(u) / u.sup, lip_constant(v) / v.sup
    rep.add("same_quotient", abs(ru - rv) <= tol * max(ru, rv), abs(ru - rv))
    e = d.edges
    su = (u.values[e[:, 1]] - u.values[e[:, 0]]) / d.edge_len
    sv = (v.values[e[:, 1]] - v.values[e[:, 0]]) / d.edge_len
    carrying = flux_u.values != 0
    Jv = lip_constant(v)
    bad = carrying & ((np.sign(su) != np.sign(sv)) | (np.abs(sv) < (1 - tol) * Jv))
    tv = flux_u.total_variation
    frac = _edge_mass(flux_u, bad) / tv if tv > 0 else 0.0
    rep.add("parallel", frac <= tol, frac, edges=int(bad.sum()))
    return rep


# ---------------------------------------------------------------------------
# disk example


def _cone_split(sigma: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Coefficient of each stencil step in the conic decomposition of ``sigma``.

    ``sigma`` (m, 2) is written as a non-negative combination of the axial
    and diagonal lattice steps bounding its direction.  The returned value is
    the mass per edge for an edge along ``steps`` (m, 2), signed relative to
    that step; axial edges carry ``alpha * h`` and diagonal edges ``beta * h``
    where ``sigma = alpha * e_axial + beta * (e_diag / sqrt 2) * sqrt 2``.
    """
    sx, sy = sigma[:, 0], sigma[:, 1]
    ax, ay = np.abs(sx), np.abs(sy)
    dx, dy = np.sign(sx), np.sign(sy)
    xdom = ax >= ay
    # axial step and its coefficient
    axial = np.where(xdom[:, None], np.stack([dx, 0 * dx], 1), np.stack([0 * dy, dy], 1))
    a_coef = np.abs(ax - ay)
    diag = np.stack([dx, dy], 1)
    d_coef = np.minimum(ax, ay)
    out = np.zeros(sigma.shape[0])
    for ref, coef in ((axial, a_coef), (diag, d_coef)):
        same = np.all(steps == ref, axis=1)
        opp = np.all(steps == -ref, axis=1)
        out = out + np.where(same, coef, 0.0) - np.where(opp, coef, 0.0)
    return out


def ball_calibration(domain: GridDomain, correct: bool = True):
    """Dirac at the center and the radial calibration flux of a disk.

    The field ``sigma(x) = -x / (2 pi |x|^2)`` is sampled at edge midpoints
    (relative to the center node) and split onto the two lattice directions
    bounding its direction.  With ``correct`` a potential flux is added that
    removes the remaining interior divergence defect, so the net inflow is
    exactly the unit Dirac at the center on Interior nodes.

    Returns
    -------
    nu : DiscreteMeasure
        ``delta_center / sup d_Omega``.
    flux : EdgeFlux
    """
    spec = domain.source
    if domain.dim != 2 or spec is None or spec.kind != "disk":
        raise UnsupportedDomain("ball_calibration needs a disk domain")
    cx, cy, _ = spec.params
    center = domain.nearest_node((cx, cy))
    c = domain.coords[center]
    e = domain.edges
    mid = 0.5 * (domain.coords[e[:, 0]] + domain.coords[e[:, 1]]) - c
    r2 = np.sum(mid * mid, axis=1)
    sigma = -mid / (2 * math.pi * r2[:, None])
    steps = np.asarray(_HALF_STENCIL[2])[domain.edge_dir]
    f = _cone_split(sigma, steps) * domain.h
    flux = EdgeFlux(domain, f)
    if correct:
        target = np.zeros(domain.n_nodes)
        target[center] = 1.0
        defect = target - weak_divergence(flux).weights
        flux = flux + potential_flux(domain, defect, domain.is_interior)
    d = distance_to_boundary(domain)
    nu = DiscreteMeasure.dirac(domain, center, 1.0 / d.sup)
    return nu, flux


# ---------------------------------------------------------------------------
# CSV I/O


def save_measure(mu: DiscreteMeasure, path: str) -> None:
    d = mu.domain
    header = "ix,weight" if d.dim == 1 else "ix,iy,weight"
    try:
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for node in mu.support:
                idx = ",".join(str(int(i)) for i in d.ijk[node])
                fh.write(f"{idx},{float(mu.weights[node])!r}\n")
    except OSError as exc:
        raise IoError(str(exc)) from None


def load_measure(path: str, domain: GridDomain) -> DiscreteMeasure:
    """Read ``ix[,iy],weight`` rows; nodes not listed get weight zero."""
    w, _ = read_node_csv(path, domain, "weight")
    return DiscreteMeasure(domain, w)


def _flux_header(dim: int) -> list:
    return ["ia", "ib", "flux"] if dim == 1 else ["ia", "ja", "ib", "jb", "flux"]


def save_flux(flux: EdgeFlux, path: str) -> None:
    d = flux.domain
    e = d.edges
    try:
        with open(path, "w") as fh:
            fh.write(",".join(_flux_header(d.dim)) + "\n")
            for k in flux.support:
                a, b = d.ijk[e[k, 0]], d.ijk[e[k, 1]]
                idx = ",".join(str(int(i)) for i in (*a, *b))
                fh.write(f"{idx},{float(flux.values[k])!r}\n")
    except OSError as exc:
        raise IoError(str(exc)) from None


def load_flux(path: str, domain: GridDomain) -> EdgeFlux:
    """Read a flux CSV; a row listed as ``b -> a`` is stored with flipped sign."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from None
    want = _flux_header(domain.dim)
    if not lines or [c.strip() for c in lines[0].split(",")] != want:
        raise FormatError(path, 1, f"expected header {','.join(want)}")
    lookup = _edge_lookup(domain)
    f = np.zeros(domain.n_edges)
    k = domain.dim
    for ln, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        parts = text.split(",")
        if len(parts) != len(want):
            raise FormatError(path, ln, f"expected {len(want)} columns, got {len(parts)}")
        try:
            ints = [int(p) for p in parts[:-1]]
            val = float(parts[-1])
        except ValueError:
            raise FormatError(path, ln, f"cannot parse row {text!r}") from None
        if not math.isfinite(val):
            raise FormatError(path, ln, "non-finite flux")
        nodes = []
        for idx in (tuple(ints[:k]), tuple(ints[k:])):
            if any(not 0 <= i < n for i, n in zip(idx, domain.shape)) or domain.node_of[idx] < 0:
                raise FormatError(path, ln, f"index {idx} is not an active node")
            nodes.append(int(domain.node_of[idx]))
        a, b = nodes
        key = (min(a, b), max(a, b))
        if key not in lookup:
            raise FormatError(path, ln, "nodes are not stencil neighbors")
        f[lookup[key]] += val if a < b else -val
    return EdgeFlux(domain, f)
