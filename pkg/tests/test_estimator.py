import json

import numpy as np
import pytest

from risloc.channel import PathDescriptor, channel_paths, noise_free_signal, synthesize
from risloc.estimator import (
    ChannelEstimate,
    _PathModel,
    coarse_delay,
    coarse_spatial_freq,
    concentrated_residual,
    estimate_channel,
    prior_windows,
    refine_path,
    separate_paths,
)
from risloc.geometry import SPEED_OF_LIGHT
from risloc.crb import eta_n


def _truth(sc):
    return channel_paths(sc, np.random.default_rng(11))


def _clean(sc, cb, delta, paths):
    return synthesize(sc, cb, delta, None, with_noise=False, paths=paths)


def test_separation_matches_single_path(sc, random_cb, unit_delta):
    paths = _truth(sc)
    sep = separate_paths(_clean(sc, random_cb, unit_delta, paths), random_cb.blocks)
    for l, p in enumerate(paths):
        alone = noise_free_signal(sc, [p], random_cb, unit_delta)[:, :64]
        np.testing.assert_allclose(sep[l], alone, rtol=0, atol=1e-10 * np.abs(alone).max())


def test_los_only_separation_and_cross_talk(sc, random_cb, unit_delta):
    los = [p for p in _truth(sc) if p.kind == "los"]
    y = _clean(sc, random_cb, unit_delta, los)
    sep = separate_paths(y, random_cb.blocks)
    np.testing.assert_allclose(sep[0], y.samples[:, :64], rtol=1e-14)
    scale = np.abs(y.samples).max()
    assert np.abs(sep[1]).max() <= 1e-14 * scale
    assert np.abs(sep[2]).max() <= 1e-14 * scale


def test_coarse_delay_on_grid(sc):
    r = sc.radio
    tau = 37 / (1024 * r.subcarrier_spacing_hz)
    y = np.exp(-2j * np.pi * np.arange(1, 513) * r.subcarrier_spacing_hz * tau)[:, None] * np.ones((1, 64))
    assert coarse_delay(y, r) == pytest.approx(tau, rel=1e-12)


def test_coarse_delay_table(sc, random_cb, unit_delta):
    paths = _truth(sc)
    sep = separate_paths(_clean(sc, random_cb, unit_delta, paths), random_cb.blocks)
    half_cell = 1 / (2 * 1024 * sc.radio.subcarrier_spacing_hz)
    assert half_cell == pytest.approx(4.07e-9, abs=5e-12)
    assert abs(coarse_delay(sep[0], sc.radio) - paths[0].delay) <= half_cell
    for l in (1, 2):
        assert abs(coarse_delay(sep[l], sc.radio, is_ris=True) - paths[l].delay) <= half_cell


def test_two_close_paths_each_from_own_matrix(sc, random_cb, unit_delta):
    paths = _truth(sc)
    ris = [paths[1], PathDescriptor("ris", 2, paths[2].gain, paths[1].delay + 2.5 / (512 * 120e3), paths[2].xi, paths[2].zeta, paths[2].lengths)]
    sep = separate_paths(_clean(sc, random_cb, unit_delta, ris), random_cb.blocks)
    half_cell = 1 / (2 * 1024 * sc.radio.subcarrier_spacing_hz)
    for l, p in zip((1, 2), ris):
        assert abs(coarse_delay(sep[l], sc.radio, is_ris=True) - p.delay) <= half_cell


def _ris_path(sc, xi, zeta, delay=4e-8):
    return PathDescriptor("ris", 1, 1e-8, delay, xi, zeta, (3.0, 4.0))


def test_coarse_sf_on_grid(sc, random_cb, unit_delta):
    p = _ris_path(sc, -0.38, 0.24)
    sep = separate_paths(_clean(sc, random_cb, unit_delta, [p]), random_cb.blocks)
    a = sc.anchors[0]
    xi, zeta = coarse_spatial_freq(sep[1], random_cb.profiles[0], a, sc.spacing(a), p.delay, sc.radio)
    assert (xi, zeta) == pytest.approx((-0.38, 0.24), abs=1e-12)


def test_coarse_sf_table(sc, random_cb, unit_delta):
    paths = _truth(sc)
    sep = separate_paths(_clean(sc, random_cb, unit_delta, paths), random_cb.blocks)
    for l in (1, 2):
        a = sc.anchors[l - 1]
        tau = coarse_delay(sep[l], sc.radio, is_ris=True)
        xi, zeta = coarse_spatial_freq(sep[l], random_cb.profiles[l - 1], a, sc.spacing(a), tau, sc.radio)
        assert abs(xi - paths[l].xi) <= 0.01 + 1e-12
        assert abs(zeta - paths[l].zeta) <= 0.01 + 1e-12


def test_aliasing_is_flagged(sc, random_cb, unit_delta):
    p = _ris_path(sc, -1.2, 0.1)
    los = [q for q in _truth(sc) if q.kind == "los"]
    other = PathDescriptor("ris", 2, 1e-8, 5e-8, 0.2, -0.3, (3.0, 4.0))
    est = estimate_channel(sc, random_cb, unit_delta, _clean(sc, random_cb, unit_delta, los + [p, other]))
    e1 = est.paths[1]
    assert e1.coarse["xi"] == pytest.approx(0.8, abs=1e-9)
    assert "sf_alias_possible" in e1.flags


def test_prior_window_removes_alias_flag(sc, random_cb, unit_delta):
    paths = _truth(sc)
    win = prior_windows(sc, np.concatenate([sc.tx, sc.rx]), 0.1)
    est = estimate_channel(sc, random_cb, unit_delta, _clean(sc, random_cb, unit_delta, paths), windows=win)
    assert all("sf_alias_possible" not in p.flags for p in est.paths)
    for l, (xw, zw) in win.items():
        assert xw[0] <= paths[l].xi <= xw[1] and zw[0] <= paths[l].zeta <= zw[1]


def test_noise_free_refinement_exact(sc, random_cb, unit_delta):
    paths = _truth(sc)
    est = estimate_channel(sc, random_cb, unit_delta, _clean(sc, random_cb, unit_delta, paths))
    truth = eta_n(sc, sc.tx, sc.rx, sc.radio.clock_offset_m)
    refined = est.eta_n("refined")
    np.testing.assert_allclose(refined, truth, atol=1e-8)
    assert np.max(np.abs(refined[[0, 1, 4]] - truth[[0, 1, 4]])) < 3e-3
    coarse = est.eta_n("coarse")
    assert np.all(np.abs(coarse - truth)[[2, 3, 5, 6]] <= 0.01 + 1e-12)
    for p, q in zip(est.paths, paths):
        assert p.gain == pytest.approx(q.gain, rel=1e-6)


def test_concentrated_gain_identity(sc, random_cb, unit_delta):
    paths = _truth(sc)
    y = _clean(sc, random_cb, unit_delta, paths)
    noisy = y.samples + 1e-7 * np.random.default_rng(2).standard_normal(y.samples.shape)
    sep = separate_paths(noisy, random_cb.blocks)
    a = sc.anchors[0]
    model = _PathModel(sc, 64, None, unit_delta[:64], random_cb.profiles[0], a)
    theta0 = np.array([paths[1].delay * SPEED_OF_LIGHT + 0.01, paths[1].xi + 0.005, paths[1].zeta - 0.005])
    theta, rho, info = refine_path(model, sep[1], theta0)
    assert info["residual_refined"] <= info["residual_coarse"]
    r, _ = concentrated_residual(model, theta, sep[1])
    m = model.mean(theta)
    yy = sep[1]
    closed = np.vdot(yy, yy).real - abs(np.vdot(m, yy)) ** 2 / np.vdot(m, m).real
    assert np.vdot(r, r).real == pytest.approx(closed, rel=1e-9)


def test_estimate_json_round_trip(sc, random_cb, unit_delta):
    y = synthesize(sc, random_cb, unit_delta, np.random.default_rng(5))
    est = estimate_channel(sc, random_cb, unit_delta, y)
    back = ChannelEstimate.from_dict(json.loads(est.to_json()))
    np.testing.assert_array_equal(back.eta_n(), est.eta_n())
    np.testing.assert_array_equal(back.eta_n("coarse"), est.eta_n("coarse"))
