"""Experiment recipes: Monte-Carlo sweeps, bound maps, CDF studies, codebook
evaluation and cost landscapes. Everything here is deterministic under a
fixed seed and independent of the worker count.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from itertools import combinations
from pathlib import Path

import numpy as np

from . import codebook as cbk
from .channel import channel_paths, synthesize
from .crb import eta_n, positioning_bounds
from .estimator import estimate_channel
from .locator import SearchSpec, coarse_locate, cost_landscape, locate
from .scenario import Scenario, ScatterCluster, scenario_to_dict, trial_rng

FAST_RADIO = {"n_subcarriers": 128, "n_transmissions": 48}
FAST_TRIALS = 50
LAYOUT_LABELS = {
    "tilted_corner": "2-RIS(L)",
    "tilted_parallel": "2-RIS(P)",
    "tilted_3": "3-RIS",
    "tilted_4": "4-RIS",
}


def fast_profile(scenario: Scenario) -> Scenario:
    """Reduced-size radio for quick runs (``K = 128``, ``G = 48``)."""
    radio = replace(scenario.radio, n_blocks=None, **FAST_RADIO)
    return scenario.replace(radio=radio)


def pmap(fn, items, workers: int = 1):
    """Order-preserving map, in-process for one worker."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def two_cluster_multipath(scenario: Scenario, rcs: float = 0.5, height: float = 3.0) -> Scenario:
    """Two 5-point scatterer clusters: one near the TX side, one near the RX side."""
    affects = tuple(range(scenario.n_anchors + 1))
    clusters = (
        ScatterCluster(np.array([0.0, -3.0, height]), 1.0, 5, rcs, affects, "tx"),
        ScatterCluster(np.array([0.0, 2.0, height]), 1.0, 5, rcs, affects, "rx"),
    )
    return scenario.replace(clusters=clusters)


# --- Monte-Carlo --------------------------------------------------------------

def truth_state(scenario: Scenario) -> np.ndarray:
    return np.concatenate([scenario.tx, scenario.rx, [scenario.radio.clock_offset_m]])


def run_trial(job) -> dict:
    """One synthesize -> estimate -> locate realization.

    ``job`` is ``(scenario, codebook, delta, seed, trial, search)`` so it can be
    shipped to worker processes.
    """
    scenario, codebook, delta, seed, trial, search = job
    rng = trial_rng(seed, trial)
    paths = channel_paths(scenario, rng)
    block = synthesize(scenario, codebook, delta, rng, paths=paths)
    est = estimate_channel(scenario, codebook, delta, block)
    eta_true = eta_n(scenario, scenario.tx, scenario.rx, scenario.radio.clock_offset_m)
    eta_c, eta_r = est.eta_n("coarse"), est.eta_n("refined")
    coarse = coarse_locate(scenario, eta_c, search)
    _, fine = locate(scenario, eta_r, search)
    s = truth_state(scenario)
    flags = sorted({f for p in est.paths for f in p.flags if f != "sf_alias_possible"} | set(fine.flags))
    ok = fine.stage == "refined" and bool(np.all(np.isfinite(fine.state)))
    return {
        "trial": trial,
        "ok": ok,
        "flags": flags,
        "eta_err_coarse": (eta_c - eta_true).tolist(),
        "eta_err_refined": (eta_r - eta_true).tolist(),
        "state_err_coarse": (coarse.state - s).tolist(),
        "state_err_refined": (fine.state - s).tolist(),
    }


def run_trials(scenario: Scenario, trials: int, seed: int | None = None, workers: int = 1, codebook=None, delta=None):
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seed = scenario.seed if seed is None else seed
    codebook = cbk.build_codebook("random", scenario) if codebook is None else codebook
    delta = np.ones(scenario.radio.n_transmissions) if delta is None else delta
    search = SearchSpec(scenario.tx)
    jobs = [(scenario, codebook, delta, seed, t, search) for t in range(trials)]
    return pmap(run_trial, jobs, workers)


def _rmse(x):
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x**2))) if x.size else float("nan")


def position_errors(records, stage: str = "refined", which: str = "rx") -> np.ndarray:
    sl = {"tx": slice(0, 3), "rx": slice(3, 6)}[which]
    key = f"state_err_{stage}"
    rows = [r[key][sl] for r in records if (r["ok"] if stage == "refined" else np.all(np.isfinite(r[key])))]
    return np.linalg.norm(np.array(rows, dtype=float).reshape(-1, 3), axis=1)


def eta_labels(scenario: Scenario) -> list[str]:
    out = [] if scenario.los_blocked else ["d0"]
    for l in range(1, scenario.n_anchors + 1):
        out += [f"d{l}", f"xi{l}", f"zeta{l}"]
    return out


def summarize(scenario: Scenario, records, report=None) -> dict:
    """RMSEs (coarse and refined) next to their bounds, plus success statistics."""
    ok = [r for r in records if r["ok"]]
    row = {"trials": len(records), "n_ok": len(ok), "success_rate": len(ok) / max(1, len(records))}
    coarse_ok = [r for r in records if np.all(np.isfinite(r["state_err_coarse"]))]
    row["n_ok_coarse"] = len(coarse_ok)
    for stage in ("coarse", "refined"):
        use = coarse_ok if stage == "coarse" else ok
        se = np.array([r[f"state_err_{stage}"] for r in use], dtype=float).reshape(-1, 7)
        ee = np.array([r[f"eta_err_{stage}"] for r in use], dtype=float).reshape(len(use), -1)
        row[f"rmse_pt_{stage}"] = _rmse(np.linalg.norm(se[:, 0:3], axis=1))
        row[f"rmse_pr_{stage}"] = _rmse(np.linalg.norm(se[:, 3:6], axis=1))
        row[f"rmse_b_{stage}"] = _rmse(se[:, 6])
        for j, name in enumerate(eta_labels(scenario)):
            row[f"rmse_{name}_{stage}"] = _rmse(ee[:, j]) if len(use) else float("nan")
    if report is not None:
        row.update(peb_t=report.peb_t, peb_r=report.peb_r, ceb=report.ceb)
        delays = [n for n in report.names if n.startswith("d")]
        for name, v in zip(delays, report.deb_m):
            row[f"deb_{name}"] = float(v)
        for l in range(scenario.n_anchors):
            row[f"seb_xi{l + 1}"] = float(report.seb_xi[l])
            row[f"seb_zeta{l + 1}"] = float(report.seb_zeta[l])
    row["flags"] = ";".join(sorted({f for r in records for f in r["flags"]}))
    return row


def run_mc_sweep(scenario: Scenario, powers, trials: int = 200, seed=None, workers: int = 1) -> list[dict]:
    """RMSE vs. bound table over transmit powers (random codebook, uniform power)."""
    powers = [float(p) for p in powers]
    if not powers or not np.all(np.isfinite(powers)) or powers != sorted(powers):
        raise ValueError("powers must be finite and sorted")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    codebook = cbk.build_codebook("random", scenario)
    delta = np.ones(scenario.radio.n_transmissions)
    rows = []
    for p in powers:
        sc = scenario.with_power(p)
        recs = run_trials(sc, trials, seed, workers, codebook, delta)
        rep = positioning_bounds(sc, codebook, delta)
        rows.append({"power_dbm": p, **summarize(sc, recs, rep)})
    return rows


# --- bound maps and CDFs --------------------------------------------------------

def heatmap_axis(lo: float = -4.0, hi: float = 4.0, step: float = 0.2) -> np.ndarray:
    n = int(round((hi - lo) / step))
    return np.round(lo + step * np.arange(n + 1), 10)


def _heat_cell(job):
    scenario, codebook, delta, rx, knowns = job
    if np.allclose(rx, scenario.tx) or any(np.allclose(rx, a.position) for a in scenario.anchors):
        return float("nan")
    return positioning_bounds(scenario.replace(rx=rx), codebook, delta, knowns).peb_r


def run_crb_map(scenario: Scenario, xs, ys, z: float = 0.0, knowns=("none",), workers: int = 1) -> dict:
    """``PEB_R`` maps (RX swept, TX fixed, random codebook) for each knowns variant."""
    codebook = cbk.build_codebook("random", scenario)
    delta = np.ones(scenario.radio.n_transmissions)
    out = {}
    for kn in knowns:
        jobs = [(scenario, codebook, delta, np.array([x, y, z]), kn) for y in ys for x in xs]
        out[kn] = np.array(pmap(_heat_cell, jobs, workers)).reshape(len(ys), len(xs))
    return out


def ue_grid(fast: bool = False) -> np.ndarray:
    """UE grid for pair studies: ``x, y in {-3..3}``, ``z in {0, 0.5}``; ``fast`` keeps every 4th point."""
    pts = np.array([[x, y, z] for z in (0.0, 0.5) for x in range(-3, 4) for y in range(-3, 4)], dtype=float)
    return pts[::4] if fast else pts


def ue_pairs(fast: bool = False):
    """Unordered UE pairs (first entry is the TX)."""
    return list(combinations(ue_grid(fast), 2))


def _pair_peb(job):
    scenario, codebook, delta, tx, rx, knowns = job
    return positioning_bounds(scenario.replace(tx=tx, rx=rx), codebook, delta, knowns).peb_r


def pair_pebs(scenario: Scenario, knowns: str = "none", fast: bool = False, workers: int = 1) -> np.ndarray:
    codebook = cbk.build_codebook("random", scenario)
    delta = np.ones(scenario.radio.n_transmissions)
    jobs = [(scenario, codebook, delta, tx, rx, knowns) for tx, rx in ue_pairs(fast)]
    return np.array(pmap(_pair_peb, jobs, workers))


def empirical_cdf(values, eps) -> np.ndarray:
    """Fraction of ``values`` (``inf`` counts as failure) at or below each threshold."""
    v = np.asarray(values, dtype=float)
    v = np.where(np.isnan(v), np.inf, v)
    return np.array([np.mean(v <= e) for e in np.atleast_1d(eps)])


def run_cdf_study(layouts, eps, knowns: str = "none", fast: bool = False, workers: int = 1, scenario_fn=None) -> dict:
    """``PEB_R`` CDFs over all UE pairs for each named anchor layout.

    ``scenario_fn(name)`` builds a scenario for a layout name.
    """
    from .scenario import layout

    scenario_fn = layout if scenario_fn is None else scenario_fn
    out = {}
    for name in layouts:
        sc = scenario_fn(name)
        if fast:
            sc = fast_profile(sc)
        pebs = pair_pebs(sc, knowns, fast, workers)
        out[name] = {"peb": pebs, "cdf": empirical_cdf(pebs, eps)}
    return out


# --- codebooks -------------------------------------------------------------------

def codebook_peb(scenario: Scenario, kind: str, sigma: float, gamma="opt"):
    """``PEB_R`` at the true state for a codebook designed from an isotropic prior.

    ``gamma`` is a fixed DER/DIR ratio, ``"opt"`` for the scalar optimum or
    ``None`` for uniform power. Returns ``(peb_r, gamma_used)``.
    """
    prior = cbk.PriorState.isotropic(scenario, sigma)
    cb = cbk.build_codebook(kind, scenario, prior if kind != "random" else None)
    g = None
    if kind == "dir_der" and gamma is not None:
        g = cbk.optimize_gamma(scenario, cb)[0] if gamma == "opt" else float(gamma)
        delta = cbk.power_vector_from_gamma(g, cb)
    else:
        delta = np.ones(scenario.radio.n_transmissions)
    return positioning_bounds(scenario, cb, delta).peb_r, g


def run_codebook_eval(scenario: Scenario, sigmas, gammas=(0.1, 0.5, 5.0)) -> list[dict]:
    """Prior-error sweep: random, DIR, DIR+DER at fixed and optimized ``gamma_p``."""
    rows = []
    peb_rand, _ = codebook_peb(scenario, "random", 1.0)
    for s in sigmas:
        row = {"sigma_pri": float(s), "peb_random": peb_rand}
        row["peb_dir"], _ = codebook_peb(scenario, "dir", s)
        for g in gammas:
            row[f"peb_dir_der_g{g:g}"], _ = codebook_peb(scenario, "dir_der", s, g)
        row["peb_dir_der_opt"], row["gamma_opt"] = codebook_peb(scenario, "dir_der", s, "opt")
        rows.append(row)
    return rows


def run_gamma_sweep(scenario: Scenario, sigma: float, gammas) -> list[dict]:
    prior = cbk.PriorState.isotropic(scenario, sigma)
    cb = cbk.build_codebook("dir_der", scenario, prior)
    return [
        {"gamma_p": float(g), "peb_r": positioning_bounds(scenario, cb, cbk.power_vector_from_gamma(g, cb)).peb_r}
        for g in gammas
    ]


# --- cost landscapes ---------------------------------------------------------------

def run_cost_map(scenario: Scenario, half_extent: float = 1.0, step: float = 0.05) -> dict:
    """Noise-free coarse-search cost over a horizontal TX window centered on the TX."""
    eta = eta_n(scenario, scenario.tx, scenario.rx, scenario.radio.clock_offset_m)
    n = int(round(half_extent / step))
    off = step * np.arange(-n, n + 1)
    xs, ys = scenario.tx[0] + off, scenario.tx[1] + off
    return {"x": xs, "y": ys, "cost": cost_landscape(scenario, eta, xs, ys, scenario.tx[2])}


def flat_cell_count(cost, frac: float = 0.01) -> int:
    """Cells within ``frac`` of the finite cost range above the minimum."""
    f = cost[np.isfinite(cost)]
    return int(np.sum(cost <= f.min() + frac * (f.max() - f.min())))


# --- output -----------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Scenario):
        return scenario_to_dict(v)
    if isinstance(v, (set, tuple)):
        return list(v)
    return v


def header_lines(meta: dict) -> list[str]:
    return ["# " + json.dumps(meta, default=_jsonable, sort_keys=True)]


def write_csv(path, rows: list[dict], meta: dict | None = None, columns=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        for line in header_lines(meta or {}):
            fh.write(line + "\n")
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _parse(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path) -> tuple[dict, list[dict]]:
    """Inverse of :func:`write_csv`: ``(meta, rows)``; numeric fields become floats."""
    meta, lines = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# "):
                meta.update(json.loads(line[2:]))
            else:
                lines.append(line)
    return meta, [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(lines)]


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, default=_jsonable, indent=2, sort_keys=True))
