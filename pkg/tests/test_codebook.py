import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from risloc.channel import ris_response
from risloc.codebook import (
    CodebookError,
    PriorState,
    build_codebook,
    der_beams,
    dir_beam,
    expand_orthogonal,
    gamma_objective,
    load_codebook,
    optimize_gamma,
    optimize_power_allocation,
    orthogonal_block_matrix,
    power_vector_from_gamma,
    project_simplex,
    random_codebook,
    save_codebook,
)
from risloc.crb import positioning_bounds
from risloc.experiments import fast_profile
from risloc.geometry import spatial_frequencies_from_positions
from risloc.scenario import RisAnchor, table1

FC = 30e9
LAM = 299792458.0 / FC


def test_block_matrix_dft():
    b = orthogonal_block_matrix(3, 2)
    np.testing.assert_allclose(b.conj().T @ b, 3 * np.eye(3), atol=1e-12)
    np.testing.assert_allclose(b[:, 0], 1.0)
    dft4 = np.exp(-2j * np.pi * np.outer(np.arange(4), np.arange(4)) / 4)
    np.testing.assert_allclose(orthogonal_block_matrix(4, 2), dft4[:, :3], atol=1e-12)
    with pytest.raises(CodebookError):
        orthogonal_block_matrix(2, 2)


def test_expand_identity_and_block_structure():
    rng = np.random.default_rng(0)
    base = [np.exp(1j * rng.uniform(0, 6, (4, 5))) for _ in range(2)]
    cb1 = expand_orthogonal([b[:, :5] for b in base], np.ones((1, 3)))
    np.testing.assert_array_equal(cb1.profiles[0], base[0])
    blocks = orthogonal_block_matrix(3, 2)
    cb = expand_orthogonal(base, blocks)
    for l in range(2):
        np.testing.assert_allclose(cb.profiles[l][:, :5], base[l])
        for i in range(3):
            np.testing.assert_allclose(cb.profiles[l][:, 5 * i : 5 * i + 5], np.conj(blocks[i, l + 1]) * base[l], atol=1e-15)


def test_random_codebook_statistics():
    a = RisAnchor(np.zeros(3), np.zeros(3), 10, 10, LAM / 2)
    w = random_codebook(a, 10_000, np.random.default_rng(1))
    np.testing.assert_allclose(np.abs(w), 1.0)
    g = w.T @ ris_response(a, (0.3, -0.2), FC) / 100
    # each normalized gain has unit-variance real+imag parts summing to 1/N
    sigma = np.sqrt(1 / 100)
    assert abs(g.mean()) < 3 * sigma / np.sqrt(10_000) * np.sqrt(2)
    np.testing.assert_array_equal(w, random_codebook(a, 10_000, np.random.default_rng(1)))


def test_dir_beam_properties(sc):
    a = sc.anchors[0]
    sp = sc.spacing(a)
    w = dir_beam(a, sc.tx, sc.rx, FC, sp)
    sf = spatial_frequencies_from_positions(sc.tx, sc.rx, a.position, a.rotation)
    assert abs(w @ ris_response(a, sf, FC, sp)) == pytest.approx(100.0)
    np.testing.assert_allclose(w, dir_beam(a, sc.rx, sc.tx, FC, sp))


def test_der_beams(sc):
    a = sc.anchors[0]
    sp = sc.spacing(a)
    w2, w3 = der_beams(a, sc.tx, sc.rx, FC, sp)
    np.testing.assert_allclose(np.abs(w2), 1.0)
    np.testing.assert_allclose(np.abs(w3), 1.0)
    sf = spatial_frequencies_from_positions(sc.tx, sc.rx, a.position, a.rotation)
    assert abs(w2 @ ris_response(a, sf, FC, sp)) < 1e-10
    assert abs(w3 @ ris_response(a, sf, FC, sp)) < 1e-10
    # transposing the element grid swaps the roles of y and z
    w1 = dir_beam(a, sc.tx, sc.rx, FC, sp)
    m2 = (w2 / w1).reshape(10, 10)
    m3 = (w3 / w1).reshape(10, 10)
    np.testing.assert_allclose(m2, m3.T, atol=1e-12)


def test_build_table_dir_der(sc):
    prior = PriorState.isotropic(sc, 0.1)
    cb = build_codebook("dir_der", sc, prior)
    assert cb.base_length == 64
    assert cb.n_transmissions == 192
    assert cb.roles.count("dir") == 21 and cb.roles.count("extra") == 1
    assert len(cb.samples) == 22
    for p in cb.profiles:
        np.testing.assert_allclose(np.abs(p), 1.0)


def test_zero_variance_prior_gives_identical_dir(sc):
    prior = PriorState.isotropic(sc, 0.0)
    cb = build_codebook("dir", sc, prior)
    a = sc.anchors[1]
    w = dir_beam(a, sc.tx, sc.rx, FC, sc.spacing(a))
    np.testing.assert_allclose(cb.base(2), np.repeat(w[:, None], 64, axis=1))


def test_random_ignores_prior(sc):
    a = build_codebook("random", sc)
    b = build_codebook("random", sc, PriorState.isotropic(sc, 3.0))
    for x, y in zip(a.profiles, b.profiles):
        np.testing.assert_array_equal(x, y)


def test_prior_rejects_indefinite():
    with pytest.raises(CodebookError):
        PriorState(np.zeros(7), -np.eye(7))


def test_power_vector_examples(sc):
    cb = build_codebook("dir_der", sc, PriorState.isotropic(sc, 0.1))
    np.testing.assert_allclose(power_vector_from_gamma(1.0, cb), 1.0)
    d0 = power_vector_from_gamma(0.0, cb)[:64]
    roles = np.array(cb.roles)
    np.testing.assert_allclose(d0[roles == "dir"], np.sqrt(3))
    np.testing.assert_allclose(d0[np.isin(roles, ["der_xi", "der_zeta"])], 0.0)
    for g in (0.0, 0.5, 5.0):
        d = power_vector_from_gamma(g, cb)
        assert d @ d == pytest.approx(192.0, rel=1e-12)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=30), st.floats(0.1, 50))
def test_project_simplex(v, total):
    x = project_simplex(v, total)
    assert np.all(x >= 0)
    assert x.sum() == pytest.approx(total, rel=1e-9)
    # projection is idempotent
    np.testing.assert_allclose(project_simplex(x, total), x, atol=1e-9)


def test_optimize_gamma_by_construction(sc):
    prior = PriorState.isotropic(sc, 0.1)
    cb = build_codebook("dir_der", sc, prior)
    g, val = optimize_gamma(sc, cb)
    f = gamma_objective(sc, cb)
    assert val <= f(0.0) and val <= f(1.0)
    assert 1e-2 <= g <= 1e2 or g in (0.0, 1.0)


def test_optimized_beats_dir_only(sc):
    prior = PriorState.isotropic(sc, 0.1)
    cb = build_codebook("dir_der", sc, prior)
    g, _ = optimize_gamma(sc, cb)
    dd = positioning_bounds(sc, cb, power_vector_from_gamma(g, cb)).peb_r
    dr = build_codebook("dir", sc, prior)
    assert dd < positioning_bounds(sc, dr, np.ones(192)).peb_r


def test_optimal_gamma_interval_table(sc):
    prior = PriorState.isotropic(sc, 0.1)
    g, _ = optimize_gamma(sc, build_codebook("dir_der", sc, prior))
    assert 1.0 <= g <= 3.2


def test_optimal_gamma_interval_calibrated_radio():
    s = table1(subcarrier_spacing_hz=781250.0, noise_figure_db=0.0)
    g, _ = optimize_gamma(s, build_codebook("dir_der", s, PriorState.isotropic(s, 0.1)))
    assert 1.0 <= g <= 3.2


def test_gamma_line_search_converges_for_wide_prior(sc):
    s = fast_profile(sc)
    cb = build_codebook("dir_der", s, PriorState.isotropic(s, 10.0))
    g, val = optimize_gamma(s, cb)
    assert np.isfinite(val)
    assert gamma_objective(s, cb)(g) == pytest.approx(val)


def test_power_allocation_feasible_and_permutation_invariant(sc):
    s = fast_profile(sc)
    prior = PriorState.isotropic(s, 0.1)
    cb = build_codebook("dir_der", s, prior)
    samples = cb.samples[:4]
    res = optimize_power_allocation(s, cb, samples=samples)
    assert np.all(res.gamma >= 0) and res.gamma.sum() == pytest.approx(cb.base_length)
    assert np.all(np.diff(res.history) <= 1e-15 * abs(res.history[0]))
    perm = optimize_power_allocation(s, cb, samples=samples[::-1])
    assert perm.objective == pytest.approx(res.objective, rel=1e-6)


@pytest.mark.parametrize("suffix", [".npz", ".txt"])
def test_codebook_export_round_trip(tmp_path, sc, suffix):
    cb = build_codebook("dir_der", sc, PriorState.isotropic(sc, 0.1))
    save_codebook(cb, tmp_path / f"cb{suffix}")
    back = load_codebook(tmp_path / f"cb{suffix}")
    assert back.kind == cb.kind and back.roles == cb.roles
    for x, y in zip(back.profiles, cb.profiles):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_unknown_kind(sc):
    with pytest.raises(CodebookError):
        build_codebook("dft", sc)
    with pytest.raises(CodebookError):
        build_codebook("dir", sc)
