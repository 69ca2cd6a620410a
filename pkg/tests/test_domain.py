import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linfty.domain import (BOUNDARY, INTERIOR, BadShape, EmptyInterior, FormatError,
                           OutsideDomain, ScalarField, ShapeSpec, UnsupportedShape,
                           exact_boundary_distance, load_field, load_shape, quantize,
                           rasterize, read_pgm, save_field, write_pgm, zero_trace_field)


def test_interval_classes():
    d = rasterize(ShapeSpec.interval(-1, 1), 0.5)
    assert np.allclose(d.coords[:, 0], [-1, -0.5, 0, 0.5, 1])
    assert d.node_class.tolist() == [BOUNDARY, INTERIOR, INTERIOR, INTERIOR, BOUNDARY]


def test_square_h1_single_interior():
    d = rasterize(ShapeSpec.square(), 1.0)
    assert d.interior_nodes.size == 1
    assert np.allclose(d.coords[d.interior_nodes[0]], [0, 0])
    assert d.boundary_nodes.size == 8


def _brute_interior_count(shape, h):
    lo, hi = shape.bbox()
    xs = np.arange(lo[0], hi[0] + h / 2, h)
    ys = np.arange(lo[1], hi[1] + h / 2, h)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], 1)
    c = shape.signed_clearance(pts)
    return int(np.sum(c >= h / 2 - 1e-12))


def test_disk_interior_count(disk64):
    shape = ShapeSpec.disk(0, 0, 1)
    n = disk64.interior_nodes.size
    # clearance rule by brute force
    assert n == _brute_interior_count(shape, 1 / 64)
    # the h/2 clearance shrinks the disk to radius 1 - h/2
    assert abs(n - math.pi * (1 - 1 / 128) ** 2 * 64 ** 2) / n < 0.01


def test_disk_count_vs_unshrunk_area(disk64):
    # pi / h^2 counts the full disk; the clearance rule loses a rim of width h/2
    n = disk64.interior_nodes.size
    assert abs(n - math.pi * 64 ** 2) / (math.pi * 64 ** 2) < 0.02


def test_invariants(disk64, stadium64):
    for d in (disk64, stadium64):
        nb, _ = d.neighbor_table
        inner = nb[d.interior_nodes]
        assert np.all(inner >= 0)
        assert np.all(d.edges[:, 0] < d.edges[:, 1])


def test_bad_shapes():
    with pytest.raises(BadShape):
        ShapeSpec.interval(1, 1)
    with pytest.raises(BadShape):
        ShapeSpec.disk(0, 0, 0)
    with pytest.raises(BadShape):
        ShapeSpec.polygon([(0, 0), (1, 1), (1, 0), (0, 1)])
    with pytest.raises(EmptyInterior):
        rasterize(ShapeSpec.square(0.1), 1.0)


def test_polygon_orientation_normalized():
    cw = ShapeSpec.polygon([(0, 0), (0, 1), (1, 1), (1, 0)])
    ccw = ShapeSpec.polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
    assert cw.signed_clearance(np.array([[0.5, 0.5]]))[0] == pytest.approx(0.5)
    assert ccw.signed_clearance(np.array([[0.5, 0.5]]))[0] == pytest.approx(0.5)


def test_exact_boundary_distance_examples():
    assert exact_boundary_distance(ShapeSpec.square(), (0, 0)) == pytest.approx(1)
    assert exact_boundary_distance(ShapeSpec.disk(0, 0, 1), (0.25, 0)) == pytest.approx(0.75)
    rect = ShapeSpec.rectangle(-1, -0.5, 1, 0.5)
    brute = min(0.7 + 1, 1 - 0.7, 0.1 + 0.5, 0.5 - 0.1)
    assert exact_boundary_distance(rect, (0.7, 0.1)) == pytest.approx(brute)
    with pytest.raises(OutsideDomain):
        exact_boundary_distance(ShapeSpec.square(), (2, 0))


def test_exact_distance_mask_unsupported(tmp_path):
    img = np.zeros((8, 8), dtype=np.int64)
    img[2:6, 2:6] = 255
    p = tmp_path / "m.pgm"
    write_pgm(str(p), img)
    with pytest.raises(UnsupportedShape):
        exact_boundary_distance(ShapeSpec.mask(str(p)), (0, 0))


def test_mask_roundtrip(tmp_path):
    img = np.zeros((12, 10), dtype=np.int64)
    img[3:9, 2:8] = 255
    p = tmp_path / "m.pgm"
    write_pgm(str(p), img)
    assert np.array_equal(read_pgm(str(p)), img)
    d = rasterize(ShapeSpec.mask(str(p)), 1.0)
    assert d.interior_nodes.size > 0


@given(st.floats(-0.95, 0.95), st.floats(-0.95, 0.95), st.floats(-0.95, 0.95), st.floats(-0.95, 0.95))
@settings(max_examples=200, deadline=None)
def test_exact_distance_is_1_lipschitz(x1, y1, x2, y2):
    for shape in (ShapeSpec.square(), ShapeSpec.stadium((-0.5, 0), (0.5, 0), 0.5),
                  ShapeSpec.polygon([(-1, -1), (1, -1), (1, 1), (0, 0), (-1, 1)])):
        c = shape.signed_clearance(np.array([[x1, y1], [x2, y2]]))
        if np.all(c > 0):
            d1 = exact_boundary_distance(shape, (x1, y1))
            d2 = exact_boundary_distance(shape, (x2, y2))
            assert abs(d1 - d2) <= math.hypot(x1 - x2, y1 - y2) + 1e-12


@pytest.mark.parametrize("shape", [ShapeSpec.disk(0, 0, 1), ShapeSpec.square(),
                                   ShapeSpec.stadium((-0.5, 0), (0.5, 0), 0.5)])
def test_refinement_keeps_feasible_interior(shape):
    # halving h keeps every coarse interior location (clearance >= h/2 > h/4)
    coarse = rasterize(shape, 1 / 8)
    fine = rasterize(shape, 1 / 16)
    pts = coarse.coords[coarse.interior_nodes]
    fine_int = {tuple(np.round(p, 9)) for p in fine.coords[fine.interior_nodes]}
    assert all(tuple(np.round(p, 9)) in fine_int for p in pts)


def test_field_csv_roundtrip(tmp_path, square16, rng):
    v = rng.normal(size=square16.n_nodes) * 1e3
    f = ScalarField(square16, v)
    p = tmp_path / "f.csv"
    save_field(f, str(p))
    g = load_field(str(p), square16)
    assert np.array_equal(f.values, g.values)
    one = ScalarField(square16, np.ones(square16.n_nodes))
    save_field(one, str(p))
    assert np.array_equal(load_field(str(p), square16).values, one.values)


def test_pgm_floor_rule():
    q = quantize(np.array([0.0, 1.0, 2.0]))
    assert q.tolist() == [0, 127, 255]
    assert quantize(np.array([3.0, 3.0])).tolist() == [0, 0]


def test_malformed_csv_names_row(tmp_path, square16):
    p = tmp_path / "bad.csv"
    p.write_text("ix,iy,value\n0,0,0.0\n1,x,2\n")
    with pytest.raises(FormatError) as exc:
        load_field(str(p), square16)
    assert exc.value.line == 3


def test_zero_trace_enforced(square16):
    v = np.ones(square16.n_nodes)
    with pytest.raises(ValueError):
        ScalarField(square16, v, zero_trace=True)
    assert np.all(zero_trace_field(square16, v).values[square16.is_boundary] == 0)
    with pytest.raises(ValueError):
        ScalarField(square16, np.full(square16.n_nodes, np.nan))


def test_shape_json_roundtrip(tmp_path):
    import json
    for s in (ShapeSpec.interval(-1, 1), ShapeSpec.disk(0.5, 0, 2),
              ShapeSpec.stadium((-0.5, 0), (0.5, 0), 0.5),
              ShapeSpec.polygon([(0, 0), (1, 0), (0, 1)])):
        p = tmp_path / "s.json"
        p.write_text(json.dumps(s.to_dict()))
        assert load_shape(str(p)) == s
