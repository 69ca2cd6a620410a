import math

import numpy as np
import pytest

from linfty.domain import ShapeSpec, rasterize
from linfty.measures import DiscreteMeasure, calibration_check, weak_divergence
from linfty.metric import dijkstra, distance_to_boundary, high_ridge, inradius
from oracles import dual_by_enumeration, primal_by_lp, small_graphs
from linfty.transport import (FlowProblem, SignedMeasure, SolverFailure, UnbalancedMass, ZeroDual,
                              dual_minimizer_check, dual_rayleigh, graph_duality_check,
                              j_star_closed, j_star_flow, kr_norm, kr_partial_norm, quantum_for,
                              solve_flow, w1, w1_solution)


def test_small_graphs_exhaustive_duality():
    count = 0
    for n, edges, rng in small_graphs():
        cost = rng.integers(1, 6, len(edges)).astype(float) * rng.choice([1.0, 0.5, math.sqrt(2)])
        demand = rng.normal(size=n)
        demand -= demand.mean()
        sol = solve_flow(FlowProblem(n, np.array(edges), cost, demand))
        enum = dual_by_enumeration(n, edges, cost, demand)
        # flow is optimal for the rounded supplies; compare against the exact LP too
        assert abs(sol.value - enum) <= 1e-9 * max(1.0, abs(enum)) + sol.quantization_bound
        assert abs(sol.value - primal_by_lp(n, edges, cost, demand)) <= 1e-9 * max(1.0, abs(enum)) + sol.quantization_bound
        assert abs(sol.duality_gap) <= 1e-9 * max(1.0, abs(enum))
        p = sol.potential
        e = np.array(edges)
        assert np.all(np.abs(p[e[:, 1]] - p[e[:, 0]]) <= cost + 1e-9)
        count += 1
    assert count > 70


def test_solver_errors():
    with pytest.raises(SolverFailure):
        solve_flow(FlowProblem(4, np.array([[0, 1], [2, 3]]), np.ones(2), np.array([1.0, 0, 0, -1])))
    with pytest.raises(UnbalancedMass):
        solve_flow(FlowProblem(2, np.array([[0, 1]]), np.ones(1), np.array([1.0, 0.5])))
    with pytest.raises(ValueError):
        FlowProblem(2, np.array([[0, 1]]), -np.ones(1), np.zeros(2))
    with pytest.raises(ValueError):
        FlowProblem(2, np.array([[0, 5]]), np.ones(1), np.zeros(2))


def test_quantum():
    assert quantum_for(np.array([1.0])) == 2.0 ** -32
    assert quantum_for(np.array([3.0, -0.1])) == 2.0 ** -30
    assert quantum_for(np.zeros(3)) == 2.0 ** -32


def test_j_star_closed_examples(square64):
    d = distance_to_boundary(square64)
    ridge = high_ridge(d, 0.0)
    assert j_star_closed(DiscreteMeasure.dirac(square64, ridge.nodes[0])) == pytest.approx(1.0, abs=0.09)
    uni = DiscreteMeasure.uniform(square64, square64.interior_nodes)
    assert j_star_closed(uni) == pytest.approx(1 / 3, abs=0.03)
    assert j_star_closed(DiscreteMeasure(square64, np.zeros(square64.n_nodes))) == 0.0
    with pytest.raises(SignedMeasure):
        j_star_closed(DiscreteMeasure.dirac(square64, ridge.nodes[0], -1.0))


def test_j_star_flow_dirac(disk64):
    x = disk64.nearest_node((0.3, -0.4))
    res = j_star_flow(DiscreteMeasure.dirac(disk64, x))
    assert res.value == pytest.approx(distance_to_boundary(disk64).values[x], rel=1e-12)
    div = weak_divergence(res.flux).weights
    inner = disk64.is_interior
    assert np.allclose(div[inner], np.where(np.arange(disk64.n_nodes) == x, 1.0, 0.0)[inner], atol=1e-12)
    # complementary slackness on carrying edges
    u = res.potential.values
    e = disk64.edges
    carry = np.abs(res.flux.values) > 0
    du = (u[e[:, 1]] - u[e[:, 0]]) * np.sign(res.flux.values)
    assert np.allclose(du[carry], disk64.edge_len[carry], atol=1e-9)
    assert np.all(np.abs(u[disk64.is_boundary]) <= 1e-12)


def test_j_star_closed_vs_flow():
    dom = rasterize(ShapeSpec.square(), 1 / 16)
    rng = np.random.default_rng(3)
    for _ in range(20):
        w = rng.random(dom.n_nodes) * (rng.random(dom.n_nodes) < 0.3)
        mu = DiscreteMeasure(dom, w)
        assert abs(j_star_flow(mu).value - j_star_closed(mu)) <= 1e-6 * mu.total_variation


def test_j_star_dipole(stadium64):
    d = distance_to_boundary(stadium64).values
    for pa, pb in (((-0.6, 0.1), (0.6, -0.1)), ((-0.1, 0.0), (0.1, 0.05))):
        a, b = stadium64.nearest_node(pa), stadium64.nearest_node(pb)
        mu = DiscreteMeasure.dirac(stadium64, a) - DiscreteMeasure.dirac(stadium64, b)
        expect = min(dijkstra(stadium64, [a])[b], d[a] + d[b])
        assert j_star_flow(mu).value == pytest.approx(expect, rel=1e-9)


def test_w1(stadium64, rng):
    a, b = stadium64.nearest_node((-0.7, 0.2)), stadium64.nearest_node((0.4, -0.3))
    da, db = DiscreteMeasure.dirac(stadium64, a), DiscreteMeasure.dirac(stadium64, b)
    assert w1(da, da) == 0.0
    assert w1(da, db) == pytest.approx(dijkstra(stadium64, [a])[b], rel=1e-12)
    assert w1(da, db) == w1(db, da)
    inner = stadium64.interior_nodes

    def rand_prob():
        w = np.zeros(stadium64.n_nodes)
        sup = rng.choice(inner, 6, replace=False)
        w[sup] = rng.dirichlet(np.ones(6))
        return DiscreteMeasure(stadium64, w)

    for _ in range(5):
        p, q, s = rand_prob(), rand_prob(), rand_prob()
        assert w1(p, s) <= w1(p, q) + w1(q, s) + 1e-9
    with pytest.raises(UnbalancedMass):
        w1(da, da.scaled(2))
    res = w1_solution(da, db)
    assert res.value == pytest.approx(w1(da, db))


def test_w1_ridge_segment(stadium64):
    d = distance_to_boundary(stadium64)
    ridge = high_ridge(d)
    seg = ridge.nodes[np.abs(stadium64.coords[ridge.nodes, 1]) < 1e-12]
    x = stadium64.coords[seg, 0]
    length = x.max() - x.min()
    mid = seg[np.argmin(np.abs(x))]
    mu = DiscreteMeasure.uniform(stadium64, seg)
    val = w1(mu, DiscreteMeasure.dirac(stadium64, mid))
    assert val == pytest.approx(length / 4, abs=2 * stadium64.h)
    # supplies 1/n are rounded to the 2**-32 quantum
    assert val == pytest.approx(np.mean(np.abs(x - stadium64.coords[mid, 0])), abs=1e-8)


def test_kr_norms(rng):
    big = rasterize(ShapeSpec.rectangle(-4, -4, 4, 4), 1 / 8)
    c = big.nearest_node((0, 0))
    assert kr_norm(DiscreteMeasure.dirac(big, c)) == pytest.approx(1.0)
    unit = rasterize(ShapeSpec.square(), 1 / 16)
    for _ in range(20):
        w = rng.random(unit.n_nodes) * (rng.random(unit.n_nodes) < 0.2)
        w[unit.is_boundary] = 0
        mu = DiscreteMeasure(unit, w)
        assert abs(kr_partial_norm(mu) - j_star_flow(mu).value) <= 1e-6
    w = rng.normal(size=unit.n_nodes)
    mu = DiscreteMeasure(unit, w)
    assert kr_norm(mu.scaled(2)) == pytest.approx(2 * kr_norm(mu), rel=1e-9)
    assert kr_partial_norm(mu.scaled(2)) == pytest.approx(2 * kr_partial_norm(mu), rel=1e-9)
    # in general J* <= max(1, r) KR_partial
    r = inradius(distance_to_boundary(big))
    w = rng.random(big.n_nodes) * (rng.random(big.n_nodes) < 0.05)
    mu = DiscreteMeasure(big, w)
    assert j_star_flow(mu).value <= max(1, r) * kr_partial_norm(mu) + 1e-9
    assert kr_norm(DiscreteMeasure(unit, np.zeros(unit.n_nodes))) == 0.0


def test_dual_rayleigh(square64):
    d = distance_to_boundary(square64)
    r = inradius(d)
    ridge = high_ridge(d, 0.0)
    assert dual_rayleigh(DiscreteMeasure.dirac(square64, ridge.nodes[0])) == pytest.approx(1 / r, rel=1e-9)
    half = np.flatnonzero(np.isclose(d.values, r / 2) & square64.is_interior)[0]
    assert dual_rayleigh(DiscreteMeasure.dirac(square64, half)) == pytest.approx(2 / r, rel=1e-9)
    near = np.flatnonzero(square64.is_interior & (d.values <= square64.h + 1e-12))[0]
    assert dual_rayleigh(DiscreteMeasure.dirac(square64, near)) >= 1 / r
    with pytest.raises(ZeroDual):
        dual_rayleigh(DiscreteMeasure.dirac(square64, square64.boundary_nodes[0]))
    with pytest.raises(ValueError):
        dual_rayleigh(DiscreteMeasure(square64, np.zeros(square64.n_nodes)))


def test_ridge_flux_is_calibration(square64):
    d = distance_to_boundary(square64)
    res = j_star_flow(DiscreteMeasure.dirac(square64, high_ridge(d, 0.0).nodes[0]))
    assert calibration_check(d, res.flux.normalized()).passed
    assert abs(res.solution.duality_gap) <= 1e-9


def test_dual_minimizer_check():
    dom = rasterize(ShapeSpec.square(), 1 / 16)
    rep = dual_minimizer_check(dom, n_samples=60)
    assert rep["pass"], rep
    st = rasterize(ShapeSpec.stadium((-0.5, 0), (0.5, 0), 0.5), 1 / 16)
    rep = dual_minimizer_check(st, n_samples=60)
    assert rep["pass"], rep
    # every probability measure on the ridge segment achieves r
    d = distance_to_boundary(st)
    ridge = high_ridge(d, 0.0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        w = np.zeros(st.n_nodes)
        w[ridge.nodes] = rng.dirichlet(np.ones(len(ridge.nodes)))
        assert j_star_flow(DiscreteMeasure(st, w)).value == pytest.approx(inradius(d), rel=1e-9)


def test_graph_duality_path():
    path = rasterize(ShapeSpec.interval(0, 6), 1.0)
    assert path.interior_nodes.size == 5
    rep = graph_duality_check(path)
    assert rep["pass"]
    assert rep["inf_R"] == pytest.approx(1 / 3, abs=1e-12) and rep["inf_R_star"] == pytest.approx(1 / 3, abs=1e-12)
    one = rasterize(ShapeSpec.interval(0, 2), 1.0)
    rep = graph_duality_check(one)
    assert rep["pass"] and rep["inf_R"] == pytest.approx(1.0) and rep["inf_R_star"] == pytest.approx(1.0)
    sq = rasterize(ShapeSpec.square(), 1 / 8)
    assert graph_duality_check(sq, n_random=20)["pass"]
