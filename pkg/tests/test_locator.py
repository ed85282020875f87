import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from risloc.crb import eta_n
from risloc.experiments import flat_cell_count, run_cost_map
from risloc.geometry import euler_to_rotation, local_direction
from risloc.locator import (
    InfeasibleCandidate,
    SearchSpec,
    candidate_costs,
    candidate_rx_direction,
    coarse_locate,
    cost_landscape,
    locate,
    refine_locate,
    refinement_cost,
    triangulate_rx,
)
from risloc.scenario import layout


def _eta(s):
    return eta_n(s, s.tx, s.rx, s.radio.clock_offset_m)


def test_candidate_direction_truth(sc):
    a = sc.anchors[0]
    e = _eta(sc)
    t = candidate_rx_direction(a, sc.tx, (e[2], e[3]))
    np.testing.assert_allclose(t, [6 / 7, 3 / 7, -2 / 7], atol=1e-12)
    np.testing.assert_allclose(t, local_direction(sc.rx, a.position, a.rotation), atol=1e-12)


def test_candidate_direction_rejects_negative_radicand(sc):
    a = sc.anchors[0]
    t_t = local_direction(sc.tx, a.position, a.rotation)
    with pytest.raises(InfeasibleCandidate):
        candidate_rx_direction(a, sc.tx, (t_t[1] + 1.2, t_t[2]))


def test_triangulate_intersecting_and_skew():
    p = np.array([1.0, 2.0, 3.0])
    d1, d2 = np.array([1.0, 0, 0]), np.array([0.0, 0.6, 0.8])
    np.testing.assert_allclose(triangulate_rx([p - 2 * d1, p + 3 * d2], [d1, d2]), p, atol=1e-12)
    out = triangulate_rx([[0, 0, 0], [0, 1, 1]], [[1, 0, 0], [0, 1, 0]])
    np.testing.assert_allclose(out, [0, 0, 0], atol=1e-12)


def test_triangulate_three_equal_weights():
    rng = np.random.default_rng(0)
    o = rng.standard_normal((3, 3))
    d = rng.standard_normal((3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = []
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        pts.append(triangulate_rx([o[i], o[j]], [d[i], d[j]]))
    np.testing.assert_allclose(triangulate_rx(o, d), np.mean(pts, axis=0), atol=1e-12)


@given(st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
@settings(max_examples=50)
def test_triangulate_rigid_equivariance(ang, shift):
    rng = np.random.default_rng(1)
    o = rng.standard_normal((3, 3)) * 3
    d = rng.standard_normal((3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    w = {(0, 1): 0.5, (0, 2): 0.3, (1, 2): 0.2}
    rot = euler_to_rotation(ang)
    base = triangulate_rx(o, d, w)
    moved = triangulate_rx(o @ rot.T + shift, d @ rot.T, w)
    np.testing.assert_allclose(moved, rot @ base + shift, atol=1e-9)


def test_cost_zero_at_truth(sc):
    cost, rx, b = candidate_costs(sc, _eta(sc), sc.tx[None])
    assert cost[0] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(rx[0], sc.rx, atol=1e-9)
    assert b[0] == pytest.approx(sc.radio.clock_offset_m, abs=1e-9)


def test_coarse_within_half_step(sc):
    spec = SearchSpec(sc.tx + [0.2, -0.4, 0.2])
    fix = coarse_locate(sc, _eta(sc), spec)
    assert np.all(np.abs(fix.tx - sc.tx) <= 0.1 + 1e-12)


def test_blocked_mode_three_ris():
    s = layout("tilted_3", tx=(-1.0, -1.5, 0.0), rx=(1.5, 1.0, 0.5)).replace(los_blocked=True)
    e = _eta(s)
    assert e.size == 9
    coarse, fine = locate(s, e, SearchSpec(s.tx + [0.2, -0.4, 0.2]))
    assert np.all(np.abs(coarse.tx - s.tx) <= 0.1 + 1e-12)
    np.testing.assert_allclose(fine.state, np.concatenate([s.tx, s.rx, [5.0]]), atol=1e-6)


def test_noise_free_refinement_exact(sc):
    e = _eta(sc)
    coarse, fine = locate(sc, e, SearchSpec(sc.tx + [0.2, -0.4, 0.2]))
    np.testing.assert_allclose(fine.state, np.concatenate([sc.tx, sc.rx, [5.0]]), atol=1e-6)
    assert fine.stage == "refined" and not fine.flags


def test_refinement_cost_not_above_coarse(sc):
    e = _eta(sc) + np.random.default_rng(3).normal(0, [0.01, 0.01, 0.002, 0.002, 0.01, 0.002, 0.002])
    sigma = np.array([1e-4, 1e-4, 4e-6, 4e-6, 1e-4, 4e-6, 4e-6])
    coarse, fine = locate(sc, e, SearchSpec(sc.tx), sigma=sigma)
    assert refinement_cost(sc, e, fine.state, sigma) <= refinement_cost(sc, e, coarse.state, sigma)
    scaled = refine_locate(sc, coarse, e, 7.5 * sigma)
    np.testing.assert_allclose(scaled.state, fine.state, atol=1e-9)


def test_cost_nonnegative_and_sharp_minimum():
    s = layout("planar", tx=(-2, 0, 0), rx=(1.01, 1.01, 0))
    res = run_cost_map(s)
    cost = res["cost"]
    assert np.all(cost[np.isfinite(cost)] >= 0)
    iy, ix = np.unravel_index(np.nanargmin(cost), cost.shape)
    assert (res["x"][ix], res["y"][iy]) == pytest.approx((-2.0, 0.0), abs=1e-9)
    yy, xx = np.meshgrid(np.arange(cost.shape[0]), np.arange(cost.shape[1]), indexing="ij")
    far = np.maximum(abs(yy - iy), abs(xx - ix)) >= 2
    assert np.all(cost[far] > cost[iy, ix])


def test_cost_map_blind_area_flat():
    s = layout("planar", tx=(-2, 0, 0), rx=(-0.61, 2.41, 0))
    assert flat_cell_count(run_cost_map(s)["cost"]) >= 5


def test_landscape_shape(sc):
    xs, ys = np.linspace(-3, -1, 5), np.linspace(-5, -3, 4)
    assert cost_landscape(sc, _eta(sc), xs, ys, 0.0).shape == (4, 5)


def test_search_spec_validation():
    with pytest.raises(ValueError):
        SearchSpec(np.zeros(3), step=0)
    with pytest.raises(ValueError):
        SearchSpec(np.zeros(3), pair_weights={(0, 1): 0.4})
    assert SearchSpec(np.zeros(3)).candidates().shape == (11**3, 3)
