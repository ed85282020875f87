import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from risloc.geometry import SPEED_OF_LIGHT
from risloc.scenario import (
    RadioConfig,
    RisAnchor,
    ScenarioError,
    element_positions,
    layout,
    load_scenario,
    los_gain_magnitude,
    noise_variance,
    path_gain,
    ris_gain_magnitude,
    save_scenario,
    scenario_to_dict,
    table1,
    trial_rng,
    watt_to_dbm,
)


def _anchor(rows, cols, spacing=None):
    return RisAnchor(np.zeros(3), np.zeros(3), rows, cols, spacing)


def test_element_positions_small_arrays():
    np.testing.assert_array_equal(element_positions(_anchor(1, 1, 0.1)), [[0, 0, 0]])
    np.testing.assert_allclose(element_positions(_anchor(1, 2, 0.1)), [[0, -0.05, 0], [0, 0.05, 0]])


def test_element_positions_table_array():
    lam = SPEED_OF_LIGHT / 30e9
    pos = element_positions(_anchor(10, 10), lam / 2)
    assert pos.shape == (100, 3)
    assert np.ptp(pos[:, 1]) == pytest.approx(9 * lam / 2)
    assert np.ptp(pos[:, 2]) == pytest.approx(0.04497, abs=1e-5)
    np.testing.assert_allclose(pos.mean(axis=0), 0.0, atol=1e-15)


@given(st.integers(1, 12), st.integers(1, 12))
def test_element_grid_centered(r, c):
    np.testing.assert_allclose(element_positions(_anchor(r, c, 0.005)).mean(axis=0), 0.0, atol=1e-15)


def test_gain_magnitudes():
    lam = SPEED_OF_LIGHT / 30e9
    assert lam == pytest.approx(9.9931e-3, rel=1e-4)
    assert los_gain_magnitude(lam, np.sqrt(65)) == pytest.approx(9.866e-5, rel=1e-3)
    assert ris_gain_magnitude(lam, np.sqrt(24), 7.0) == pytest.approx(1.845e-8, rel=1e-3)
    rng = np.random.default_rng(0)
    big = abs(path_gain("mp_los", (2.0, 3.0), lam, rng, rcs=1.0))
    for rcs in (1e-4, 1e-8, 1e-12):
        assert abs(path_gain("mp_los", (2.0, 3.0), lam, rng, rcs=rcs)) == pytest.approx(big * np.sqrt(rcs))


@given(st.floats(0.5, 20), st.floats(0.5, 20), st.floats(0.5, 20))
def test_ris_weaker_than_los_beyond_threshold(d_t, d_r, d0):
    lam = SPEED_OF_LIGHT / 30e9
    if d_t * d_r > lam * d0 / (4 * np.pi):
        assert ris_gain_magnitude(lam, d_t, d_r) < los_gain_magnitude(lam, d0)


def test_noise_variance_table():
    assert watt_to_dbm(noise_variance(RadioConfig())) == pytest.approx(-173.855 + 10 + 10 * np.log10(6.144e7), abs=1e-9)
    assert watt_to_dbm(noise_variance(RadioConfig())) == pytest.approx(-85.97, abs=5e-3)


def test_noise_variance_unit_band_and_doubling():
    r = RadioConfig(noise_figure_db=0.0, n_subcarriers=1, subcarrier_spacing_hz=1.0)
    assert watt_to_dbm(noise_variance(r)) == pytest.approx(r.noise_psd_dbm_hz)
    a = watt_to_dbm(noise_variance(RadioConfig()))
    b = watt_to_dbm(noise_variance(RadioConfig(n_subcarriers=1024)))
    assert b - a == pytest.approx(3.0103, abs=1e-4)


def test_table_defaults(tmp_path):
    s = table1()
    np.testing.assert_array_equal(s.anchors[0].position, [-4, 0, 2])
    np.testing.assert_array_equal(s.anchors[1].position, [4, 0, 2])
    path = tmp_path / "t1.yaml"
    save_scenario(s, path)
    s2 = load_scenario(path)
    assert scenario_to_dict(s2) == scenario_to_dict(s)


def test_round_trip_with_multipath(tmp_path):
    from risloc.experiments import two_cluster_multipath

    s = two_cluster_multipath(layout("tilted_3"))
    save_scenario(s, tmp_path / "a.yaml")
    s2 = load_scenario(tmp_path / "a.yaml")
    assert scenario_to_dict(s2) == scenario_to_dict(s)
    assert len(s2.all_scatterers()) == 10


def test_single_anchor_rejected(tmp_path):
    d = scenario_to_dict(table1())
    d["anchors"] = d["anchors"][:1]
    path = tmp_path / "one.yaml"
    path.write_text(yaml.safe_dump(d))
    with pytest.raises(ScenarioError, match="L=2"):
        load_scenario(path)


def test_blocked_needs_three(tmp_path):
    d = scenario_to_dict(table1())
    d["los_blocked"] = True
    path = tmp_path / "b.yaml"
    path.write_text(yaml.safe_dump(d))
    with pytest.raises(ScenarioError, match="L=3"):
        load_scenario(path)


def test_bad_block_count(tmp_path):
    d = scenario_to_dict(table1())
    d["radio"]["n_blocks"] = 5
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(d))
    with pytest.raises(ScenarioError, match="n_blocks"):
        load_scenario(path)


def test_default_block_count():
    assert table1().n_blocks == 3
    assert layout("tilted_4").n_blocks == 6


def test_trial_rng_streams():
    a = trial_rng(2023, 5).standard_normal(4)
    np.testing.assert_array_equal(a, trial_rng(2023, 5).standard_normal(4))
    assert not np.allclose(a, trial_rng(2023, 6).standard_normal(4))


@settings(max_examples=20)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_save_load_identity(x, y, seed):
    import tempfile
    from pathlib import Path

    s = table1().replace(tx=np.array([x, y, 0.5]), seed=seed)
    with tempfile.TemporaryDirectory() as d:
        save_scenario(s, Path(d) / "s.yaml")
        s2 = load_scenario(Path(d) / "s.yaml")
    np.testing.assert_array_equal(s2.tx, s.tx)
    assert s2.seed == s.seed
    assert s2.radio == s.radio
