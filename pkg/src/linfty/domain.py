"""Grid domains, analytic shapes, and field file formats.

A :class:`GridDomain` is a uniform lattice whose nodes are tagged Interior,
Boundary or Exterior.  Only Interior and Boundary nodes ("active" nodes) carry
field values; they are numbered in row-major lattice order and that numbering
is used everywhere else in the package (edges, measures, fluxes).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

EXTERIOR, BOUNDARY, INTERIOR = 0, 1, 2

# Offsets of the stencil with positive row-major index delta.  Every
# undirected edge is stored once, oriented from lower to higher node index.
_HALF_STENCIL = {
    1: ((1,),),
    2: ((0, 1), (1, -1), (1, 0), (1, 1)),
}


class LinftyError(Exception):
    """Base class for all errors raised by this package."""


class EmptyInterior(LinftyError):
    pass


class BadShape(LinftyError):
    pass


class OutsideDomain(LinftyError):
    pass


class UnsupportedShape(LinftyError):
    pass


class FormatError(LinftyError):
    """Malformed input file; ``line`` is 1-based."""

    def __init__(self, path: str, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


class IoError(LinftyError):
    pass


# ---------------------------------------------------------------------------
# shapes


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-15 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) - 1e-15 <= c[0] <= max(a[0], b[0]) + 1e-15 and \
            min(a[1], b[1]) - 1e-15 <= c[1] <= max(a[1], b[1]) + 1e-15

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def _point_segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(pts - a, axis=-1)
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(pts - proj, axis=-1)


@dataclass(frozen=True)
class ShapeSpec:
    """Analytic shape or raster mask describing an open set.

    Use the classmethod constructors rather than the raw initializer.

    Parameters
    ----------
    kind : str
        One of ``interval``, ``rectangle``, ``disk``, ``stadium``,
        ``polygon``, ``mask``.
    params : tuple
        Kind-specific parameters, all lengths in domain units.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        k, p = self.kind, self.params
        if k == "interval":
            if not p[1] > p[0]:
                raise BadShape("interval needs a < b")
        elif k == "rectangle":
            if not (p[2] > p[0] and p[3] > p[1]):
                raise BadShape("rectangle needs positive extent")
        elif k == "disk":
            if not p[2] > 0:
                raise BadShape("disk radius must be positive")
        elif k == "stadium":
            if not p[2] > 0:
                raise BadShape("stadium radius must be positive")
        elif k == "polygon":
            verts = p[0]
            if len(verts) < 3:
                raise BadShape("polygon needs at least 3 vertices")
            n = len(verts)
            for i in range(n):
                for j in range(i + 1, n):
                    if j == i + 1 or (i == 0 and j == n - 1):
                        continue
                    if _segments_intersect(verts[i], verts[(i + 1) % n],
                                           verts[j], verts[(j + 1) % n]):
                        raise BadShape("polygon is self-intersecting")
        elif k == "mask":
            pass
        else:
            raise BadShape(f"unknown shape kind {k!r}")

    # constructors -------------------------------------------------------
    @classmethod
    def interval(cls, a: float, b: float) -> "ShapeSpec":
        return cls("interval", (float(a), float(b)))

    @classmethod
    def rectangle(cls, ax: float, ay: float, bx: float, by: float) -> "ShapeSpec":
        return cls("rectangle", (float(ax), float(ay), float(bx), float(by)))

    @classmethod
    def square(cls, half: float = 1.0) -> "ShapeSpec":
        return cls.rectangle(-half, -half, half, half)

    @classmethod
    def disk(cls, cx: float, cy: float, radius: float) -> "ShapeSpec":
        return cls("disk", (float(cx), float(cy), float(radius)))

    @classmethod
    def stadium(cls, p: Sequence[float], q: Sequence[float], radius: float) -> "ShapeSpec":
        return cls("stadium", ((float(p[0]), float(p[1])), (float(q[0]), float(q[1])),
                               float(radius)))

    @classmethod
    def polygon(cls, vertices: Iterable[Sequence[float]]) -> "ShapeSpec":
        verts = [(float(x), float(y)) for x, y in vertices]
        if len(verts) > 1 and verts[0] == verts[-1]:
            verts = verts[:-1]
        # shoelace; store counterclockwise
        area = sum(verts[i][0] * verts[(i + 1) % len(verts)][1]
                   - verts[(i + 1) % len(verts)][0] * verts[i][1] for i in range(len(verts)))
        if area < 0:
            verts = verts[::-1]
        return cls("polygon", (tuple(verts),))

    @classmethod
    def mask(cls, path: str) -> "ShapeSpec":
        return cls("mask", (str(path),))

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        k, p = self.kind, self.params
        if k == "interval":
            return {"kind": k, "a": p[0], "b": p[1]}
        if k == "rectangle":
            return {"kind": k, "ax": p[0], "ay": p[1], "bx": p[2], "by": p[3]}
        if k == "disk":
            return {"kind": k, "cx": p[0], "cy": p[1], "radius": p[2]}
        if k == "stadium":
            return {"kind": k, "p": list(p[0]), "q": list(p[1]), "radius": p[2]}
        if k == "polygon":
            return {"kind": k, "vertices": [list(v) for v in p[0]]}
        return {"kind": k, "path": p[0]}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | None = None) -> "ShapeSpec":
        try:
            k = d["kind"]
            if k == "interval":
                return cls.interval(d["a"], d["b"])
            if k in ("rectangle", "square"):
                if k == "square" or "half" in d:
                    return cls.square(d.get("half", 1.0))
                return cls.rectangle(d["ax"], d["ay"], d["bx"], d["by"])
            if k == "disk":
                return cls.disk(d.get("cx", 0.0), d.get("cy", 0.0), d["radius"])
            if k == "stadium":
                return cls.stadium(d["p"], d["q"], d["radius"])
            if k == "polygon":
                return cls.polygon(d["vertices"])
            if k in ("mask", "custom-mask"):
                path = d["path"]
                if base_dir and not os.path.isabs(path):
                    path = os.path.join(base_dir, path)
                return cls.mask(path)
        except (KeyError, TypeError, IndexError) as exc:
            raise BadShape(f"bad shape description {d!r}: {exc}") from None
        raise BadShape(f"unknown shape kind {d.get('kind')!r}")

    # geometry ------------------------------------------------------------
    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        k, p = self.kind, self.params
        if k == "interval":
            return np.array([p[0]]), np.array([p[1]])
        if k == "rectangle":
            return np.array(p[:2]), np.array(p[2:])
        if k == "disk":
            c = np.array(p[:2])
            return c - p[2], c + p[2]
        if k == "stadium":
            e = np.array([p[0], p[1]])
            return e.min(axis=0) - p[2], e.max(axis=0) + p[2]
        if k == "polygon":
            v = np.array(p[0])
            return v.min(axis=0), v.max(axis=0)
        raise UnsupportedShape("masks have no analytic bounding box")

    def signed_clearance(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the boundary curve, positive inside and negative outside."""
        pts = np.asarray(pts, dtype=float)
        k, p = self.kind, self.params
        if k == "interval":
            x = pts.reshape(-1) if pts.ndim <= 1 else pts[..., 0]
            return np.minimum(x - p[0], p[1] - x)
        pts = np.atleast_2d(pts)
        x, y = pts[..., 0], pts[..., 1]
        if k == "rectangle":
            inside = np.minimum.reduce([x - p[0], p[2] - x, y - p[1], p[3] - y])
            dx = np.maximum.reduce([p[0] - x, np.zeros_like(x), x - p[2]])
            dy = np.maximum.reduce([p[1] - y, np.zeros_like(y), y - p[3]])
            outside = np.hypot(dx, dy)
            return np.where(inside > 0, inside, -outside)
        if k == "disk":
            return p[2] - np.hypot(x - p[0], y - p[1])
        if k == "stadium":
            return p[2] - _point_segment_distance(pts, np.array(p[0]), np.array(p[1]))
        if k == "polygon":
            verts = np.array(p[0])
            n = len(verts)
            dist = np.full(x.shape, np.inf)
            inside = np.zeros(x.shape, dtype=bool)
            for i in range(n):
                a, b = verts[i], verts[(i + 1) % n]
                dist = np.minimum(dist, _point_segment_distance(pts, a, b))
                cond = (a[1] > y) != (b[1] > y)
                with np.errstate(divide="ignore", invalid="ignore"):
                    xint = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
                inside ^= cond & (x < xint)
            return np.where(inside, dist, -dist)
        raise UnsupportedShape("custom masks have no analytic boundary")


def exact_boundary_distance(shape: ShapeSpec, x: Sequence[float] | float) -> float:
    """Euclidean distance from an inside point to the shape's boundary curve.

    Closed form per edge or arc; this is the reference the grid transforms are
    measured against.
    """
    if shape.kind == "mask":
        raise UnsupportedShape("exact distance is undefined for raster masks")
    pt = np.atleast_1d(np.asarray(x, dtype=float))
    if pt.shape[0] != shape.dim:
        raise OutsideDomain(f"point {x!r} has wrong dimension for a {shape.kind}")
    d = float(shape.signed_clearance(pt[None, :])[0])
    if d < -1e-12:
        raise OutsideDomain(f"point {tuple(pt)} lies outside the {shape.kind}")
    return max(d, 0.0)


def load_shape(path: str) -> ShapeSpec:
    """Read a JSON shape description."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise IoError(str(exc)) from None
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, exc.msg) from None
    return ShapeSpec.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# grid domain


@dataclass(frozen=True, eq=False)
class GridDomain:
    """Rasterized domain on a uniform lattice.

    Attributes
    ----------
    dim : int
        1 or 2.
    shape : tuple of int
        Lattice node counts per axis.
    h : float
        Grid spacing.
    origin : tuple of float
        Coordinates of lattice node ``(0, ..., 0)``.
    cls : ndarray of int8
        Per-lattice-node tag, ``EXTERIOR``, ``BOUNDARY`` or ``INTERIOR``.
    source : ShapeSpec or None
        Shape the domain was rasterized from, if any.
    """

    dim: int
    shape: tuple
    h: float
    origin: tuple
    cls: np.ndarray = field(repr=False)
    source: ShapeSpec | None = None

    def __post_init__(self):
        cls = np.array(self.cls, dtype=np.int8).reshape(self.shape)
        cls.flags.writeable = False
        object.__setattr__(self, "cls", cls)
        if self.dim not in (1, 2) or len(self.shape) != self.dim:
            raise BadShape("dimension mismatch")
        if not self.h > 0:
            raise BadShape("grid spacing must be positive")
        if not np.any(cls == INTERIOR):
            raise EmptyInterior("no interior node")
        # no interior node may touch the exterior (or the lattice edge)
        interior = cls == INTERIOR
        padded = np.pad(cls, 1, constant_values=EXTERIOR)
        for off in _full_stencil(self.dim):
            sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, self.shape))
            if np.any(interior & (padded[sl] == EXTERIOR)):
                raise BadShape("interior node adjacent to exterior")

    # node bookkeeping ------------------------------------------------------
    @cached_property
    def lattice_index(self) -> np.ndarray:
        """Row-major lattice index of every active node, increasing."""
        return np.flatnonzero(self.cls.reshape(-1) != EXTERIOR)

    @cached_property
    def node_of(self) -> np.ndarray:
        """Lattice-shaped array mapping lattice positions to node ids (-1 if exterior)."""
        m = np.full(self.cls.size, -1, dtype=np.int64)
        m[self.lattice_index] = np.arange(self.lattice_index.size)
        m = m.reshape(self.shape)
        m.flags.writeable = False
        return m

    @property
    def n_nodes(self) -> int:
        return int(self.lattice_index.size)

    @cached_property
    def ijk(self) -> np.ndarray:
        """Integer lattice coordinates of active nodes, shape (n, dim)."""
        return np.stack(np.unravel_index(self.lattice_index, self.shape), axis=1)

    @cached_property
    def coords(self) -> np.ndarray:
        """Physical coordinates of active nodes, shape (n, dim)."""
        return np.asarray(self.origin)[None, :] + self.h * self.ijk

    @cached_property
    def node_class(self) -> np.ndarray:
        return self.cls.reshape(-1)[self.lattice_index]

    @cached_property
    def is_boundary(self) -> np.ndarray:
        return self.node_class == BOUNDARY

    @cached_property
    def is_interior(self) -> np.ndarray:
        return self.node_class == INTERIOR

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.is_boundary)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.is_interior)

    # edges -------------------------------------------------------------------
    @cached_property
    def _edge_data(self):
        tails, heads, lens, kinds = [], [], [], []
        node_of = self.node_of
        for k, off in enumerate(_HALF_STENCIL[self.dim]):
            src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, self.shape))
            dst = tuple(slice(max(0, o), n + min(0, o)) for o, n in zip(off, self.shape))
            a = node_of[src].reshape(-1)
            b = node_of[dst].reshape(-1)
            ok = (a >= 0) & (b >= 0)
            a, b = a[ok], b[ok]
            tails.append(a)
            heads.append(b)
            lens.append(np.full(a.size, self.h * math.sqrt(sum(o * o for o in off))))
            kinds.append(np.full(a.size, k, dtype=np.int8))
        a = np.concatenate(tails)
        b = np.concatenate(heads)
        ln = np.concatenate(lens)
        kd = np.concatenate(kinds)
        order = np.lexsort((b, a))
        return a[order], b[order], ln[order], kd[order]

    @property
    def edges(self) -> np.ndarray:
        """Undirected edges as (E, 2) int array with ``edges[:, 0] < edges[:, 1]``."""
        a, b, _, _ = self._edge_data
        return np.stack([a, b], axis=1)

    @property
    def edge_len(self) -> np.ndarray:
        return self._edge_data[2]

    @property
    def edge_dir(self) -> np.ndarray:
        """Index into the half stencil for every edge."""
        return self._edge_data[3]

    @property
    def n_edges(self) -> int:
        return int(self._edge_data[0].size)

    @cached_property
    def adjacency(self):
        """CSR adjacency: ``(indptr, nbr, length, edge_id)`` with neighbors sorted by id."""
        a, b, ln, _ = self._edge_data
        eid = np.arange(a.size)
        src = np.concatenate([a, b])
        dst = np.concatenate([b, a])
        lens = np.concatenate([ln, ln])
        ids = np.concatenate([eid, eid])
        order = np.lexsort((dst, src))
        src, dst, lens, ids = src[order], dst[order], lens[order], ids[order]
        indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        indptr = np.cumsum(indptr)
        return indptr, dst, lens, ids

    @cached_property
    def neighbor_table(self):
        """Dense (n, k) neighbor ids and lengths over the full stencil; -1 where absent."""
        offs = _full_stencil(self.dim)
        nb = np.full((self.n_nodes, len(offs)), -1, dtype=np.int64)
        ln = np.zeros((self.n_nodes, len(offs)))
        padded = np.pad(self.node_of, 1, constant_values=-1)
        ijk = self.ijk + 1
        for k, off in enumerate(offs):
            idx = tuple(ijk[:, d] + off[d] for d in range(self.dim))
            nb[:, k] = padded[idx]
            ln[:, k] = self.h * math.sqrt(sum(o * o for o in off))
        return nb, ln

    def nearest_node(self, x: Sequence[float] | float) -> int:
        """Id of the active node closest to a physical point (ties: lowest id)."""
        pt = np.atleast_1d(np.asarray(x, dtype=float))
        d = np.linalg.norm(self.coords - pt[None, :], axis=1)
        return int(np.argmin(d))

    def lattice_values(self, values: np.ndarray, fill: float = np.nan) -> np.ndarray:
        """Scatter node values onto the full lattice."""
        out = np.full(self.cls.size, fill, dtype=float)
        out[self.lattice_index] = values
        return out.reshape(self.shape)

    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "shape": list(self.shape),
            "h": self.h,
            "origin": list(self.origin),
            "n_nodes": self.n_nodes,
            "interior": int(self.is_interior.sum()),
            "boundary": int(self.is_boundary.sum()),
            "edges": self.n_edges,
        }


def _full_stencil(dim: int) -> tuple:
    if dim == 1:
        return ((-1,), (1,))
    return ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _classify(candidate: np.ndarray) -> np.ndarray:
    """Interior = candidate; Boundary = non-candidate stencil neighbors."""
    dim = candidate.ndim
    cls = np.where(candidate, INTERIOR, EXTERIOR).astype(np.int8)
    padded = np.pad(candidate, 1, constant_values=False)
    touch = np.zeros_like(candidate)
    for off in _full_stencil(dim):
        sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, candidate.shape))
        touch |= padded[sl]
    cls[(~candidate) & touch] = BOUNDARY
    return cls


def rasterize(shape: ShapeSpec, h: float) -> GridDomain:
    """Rasterize a shape on a lattice of spacing ``h``.

    The lattice starts at the lower corner of the bounding box.  A node is
    Interior when it lies strictly inside with clearance at least ``h/2`` from
    the boundary curve; non-interior stencil neighbors of Interior nodes are
    Boundary; everything else is Exterior.
    """
    if not h > 0:
        raise BadShape("grid spacing must be positive")
    if shape.kind == "mask":
        return _rasterize_mask(shape, h)
    lo, hi = shape.bbox()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise BadShape("unbounded shape")
    counts = []
    for a, b in zip(lo, hi):
        n = int(math.floor((b - a) / h + 1e-9)) + 1
        if a + (n - 1) * h < b - 1e-12 * max(1.0, abs(b)):
            n += 1
        counts.append(n)
    axes = [a + h * np.arange(n) for a, n in zip(lo, counts)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    clr = shape.signed_clearance(pts).reshape(counts)
    candidate = (clr > 0) & (clr >= 0.5 * h * (1 - 1e-9))
    if not candidate.any():
        raise EmptyInterior(f"no node of the {shape.kind} has clearance h/2 at h={h}")
    return GridDomain(shape.dim, tuple(counts), float(h), tuple(float(a) for a in lo),
                      _classify(candidate), shape)


def _rasterize_mask(shape: ShapeSpec, h: float) -> GridDomain:
    img = read_pgm(shape.params[0])
    # image rows run top to bottom; lattice axis 1 runs upward
    candidate = (img > 127).T[:, ::-1]
    candidate = np.pad(candidate, 1, constant_values=False)
    if not candidate.any():
        raise EmptyInterior("mask has no candidate pixel")
    origin = (-h, -h)
    return GridDomain(2, candidate.shape, float(h), origin, _classify(candidate), shape)


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class ScalarField:
    """One real value per active node.

    ``zero_trace`` marks fields that vanish on every Boundary node.
    """

    domain: GridDomain
    values: np.ndarray = field(repr=False)
    zero_trace: bool = False
    name: str = "u"

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.domain.n_nodes:
            raise ValueError(f"expected {self.domain.n_nodes} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        if self.zero_trace and np.any(v[self.domain.is_boundary] != 0.0):
            raise ValueError("zero-trace field is nonzero on the boundary")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def with_values(self, values, zero_trace: bool | None = None, name: str | None = None) -> "ScalarField":
        return ScalarField(self.domain, values,
                           self.zero_trace if zero_trace is None else zero_trace,
                           self.name if name is None else name)

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __mul__(self, c: float) -> "ScalarField":
        return self.with_values(c * self.values)

    __rmul__ = __mul__

    def lattice(self, fill: float = np.nan) -> np.ndarray:
        return self.domain.lattice_values(self.values, fill)


def zero_trace_field(domain: GridDomain, values, name: str = "u") -> ScalarField:
    """Build a zero-trace field, forcing Boundary values to zero."""
    v = np.array(values, dtype=float).reshape(-1).copy()
    v[domain.is_boundary] = 0.0
    return ScalarField(domain, v, True, name)


# ---------------------------------------------------------------------------
# file formats


def write_pgm(path: str, img: np.ndarray) -> None:
    """Write an 8-bit grayscale image as plain PGM (P2); ``img`` is (rows, cols)."""
    img = np.asarray(img, dtype=np.int64)
    if img.ndim == 1:
        img = img[None, :]
    rows, cols = img.shape
    try:
        with open(path, "w") as fh:
            fh.write(f"P2\n{cols} {rows}\n255\n")
            for r in range(rows):
                fh.write(" ".join(str(int(v)) for v in img[r]) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from None


def read_pgm(path: str) -> np.ndarray:
    """Read a plain PGM (P2) image into a (rows, cols) int array."""
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(str(exc)) from None
    tokens: list[tuple[int, str]] = []
    for ln, text in enumerate(lines, start=1):
        text = text.split("#", 1)[0]
        tokens.extend((ln, t) for t in text.split())
    if not tokens or tokens[0][1] != "P2":
        raise FormatError(path, tokens[0][0] if tokens else 1, "expected P2 magic")
    try:
        cols, rows, maxval = (int(t) for _, t in tokens[1:4])
    except (ValueError, IndexError):
        raise FormatError(path, tokens[min(3, len(tokens) - 1)][0], "bad PGM header") from None
    body = tokens[4:]
    if len(body) != rows * cols:
        raise FormatError(path, body[-1][0] if body else len(lines),
                          f"expected {rows * cols} pixels, found {len(body)}")
    vals = np.empty(rows * cols, dtype=np.int64)
    for i, (ln, t) in enumerate(body):
        try:
            vals[i] = int(t)
        except ValueError:
            raise FormatError(path, ln, f"non-integer pixel {t!r}") from None
        if not 0 <= vals[i] <= maxval:
            raise FormatError(path, ln, f"pixel {t} out of range")
    if maxval != 255:
        vals = vals * 255 // maxval
    return vals.reshape(rows, cols)


def quantize(values: np.ndarray) -> np.ndarray:
    """Map ``[min, max]`` linearly onto 0..255 with the floor rule."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.int64)
    q = np.floor((v - lo) / (hi - lo) * 255.0).astype(np.int64)
    return np.clip(q, 0, 255)


def lattice_image(domain: GridDomain, pixels: np.ndarray) -> np.ndarray:
    """Arrange per-node pixel values as an image (top row = largest y); exterior is 0."""
    lat = np.zeros(domain.cls.size, dtype=np.int64)
    lat[domain.lattice_index] = pixels
    lat = lat.reshape(domain.shape)
    if domain.dim == 1:
        return lat[None, :]
    return lat.T[::-1, :]


def save_field(f: ScalarField, path: str) -> None:
    """Save a field as CSV (bit-exact) or PGM heatmap, chosen by extension."""
    if str(path).lower().endswith(".pgm"):
        write_pgm(path, lattice_image(f.domain, quantize(f.values)))
        return
    d = f.domain
    header = "ix,value" if d.dim == 1 else "ix,iy,value"
    try:
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for idx, v in zip(d.ijk, f.values):
                fh.write(",".join(str(int(i)) for i in idx) + "," + repr(float(v)) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from None


def read_node_csv(path: str, domain: GridDomain, column: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse a ``ix[,iy],<column>`` CSV into per-node values and a presence mask."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from None
    want = (["ix"] if domain.dim == 1 else ["ix", "iy"]) + [column]
    if not lines or [c.strip() for c in lines[0].split(",")] != want:
        raise FormatError(path, 1, f"expected header {','.join(want)}")
    out = np.zeros(domain.n_nodes)
    seen = np.zeros(domain.n_nodes, dtype=bool)
    for ln, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        parts = text.split(",")
        if len(parts) != len(want):
            raise FormatError(path, ln, f"expected {len(want)} columns, got {len(parts)}")
        try:
            idx = tuple(int(p) for p in parts[:-1])
            val = float(parts[-1])
        except ValueError:
            raise FormatError(path, ln, f"cannot parse row {text!r}") from None
        if not math.isfinite(val):
            raise FormatError(path, ln, "non-finite value")
        if any(not 0 <= i < n for i, n in zip(idx, domain.shape)):
            raise FormatError(path, ln, f"index {idx} outside the lattice")
        node = int(domain.node_of[idx])
        if node < 0:
            raise FormatError(path, ln, f"index {idx} is an exterior node")
        if seen[node]:
            raise FormatError(path, ln, f"duplicate node {idx}")
        seen[node] = True
        out[node] = val
    return out, seen


def load_field(path: str, domain: GridDomain, zero_trace: bool = False) -> ScalarField:
    """Load a CSV field written by :func:`save_field`; every active node must be present."""
    values, seen = read_node_csv(path, domain, "value")
    if not seen.all():
        missing = tuple(int(i) for i in domain.ijk[np.flatnonzero(~seen)[0]])
        raise FormatError(path, 1, f"node {missing} missing from file")
    return ScalarField(domain, values, zero_trace)
