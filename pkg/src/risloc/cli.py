"""Command-line driver.

Every subcommand writes data files only: CSV tables whose leading ``# `` line
holds the resolved experiment description as JSON, and JSON documents for
structured results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import codebook as cbk
from . import experiments as X
from .channel import channel_paths, path_geometry, synthesize
from .crb import eta_n
from .estimator import ChannelEstimate, estimate_channel
from .locator import SearchSpec, locate
from .scenario import ScenarioError, layout, load_scenario, noise_variance, scenario_to_dict, table1, trial_rng

KNOWNS = ("none", "b", "height", "tx")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", help="scenario YAML file (default: built-in two-RIS setup)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--out", help="output file or prefix")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--knowns", choices=KNOWNS, default="none")
    p.add_argument("--fast", action="store_true", help="K=128, G=48, 50 trials, 4x sparser grids")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="risloc", description="Multi-RIS sidelink positioning experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a scenario file and print derived quantities")
    _common(p)

    p = sub.add_parser("localize", help="estimate channel and positions for one realization")
    _common(p)
    p.add_argument("--estimate", help="channel-estimate JSON to locate from instead of simulating")
    p.add_argument("--trial", type=int, default=0)

    p = sub.add_parser("mc-sweep", help="Monte-Carlo RMSE vs. bounds over transmit power")
    _common(p)
    p.add_argument("--powers", type=_floats, default=[10, 12, 14, 16, 18, 20, 22, 24, 26, 28, 30])
    p.add_argument("--rcs", type=float, help="add the two-cluster multipath with this RCS (m^2)")

    p = sub.add_parser("crb-map", help="PEB_R heatmap with the RX swept over a plane")
    _common(p)
    p.add_argument("--layout", default=None, help="named anchor layout instead of --scenario")
    p.add_argument("--step", type=float, default=0.2)
    p.add_argument("--extent", type=float, default=4.0)
    p.add_argument("--z", type=float, default=0.0)

    p = sub.add_parser("cdf-study", help="PEB_R CDF over all UE pairs per anchor layout")
    _common(p)
    p.add_argument("--layouts", default="tilted_corner,tilted_parallel,tilted_3,tilted_4")
    p.add_argument("--eps", type=_floats, default=list(np.round(np.logspace(-2, 0, 21), 6)))

    p = sub.add_parser("codebook-eval", help="PEB_R vs. prior error for each codebook design")
    _common(p)
    p.add_argument("--sigmas", type=_floats, default=list(np.round(np.logspace(-2, 1, 16), 6)))
    p.add_argument("--gammas", type=_floats, default=[0.1, 0.5, 5.0])
    p.add_argument("--gamma-sweep", type=float, metavar="SIGMA", help="sweep gamma_p at this prior error instead")
    p.add_argument("--export-codebook", help="also write the DIR+DER codebook at --sigma-export")
    p.add_argument("--sigma-export", type=float, default=0.1)

    p = sub.add_parser("cost-map", help="noise-free coarse-search cost over a TX window")
    _common(p)
    p.add_argument("--rx", type=_floats, help="override RX position x,y,z")
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--extent", type=float, default=1.0)
    return ap


def _scenario(args):
    sc = load_scenario(args.scenario) if args.scenario else table1()
    if args.seed is not None:
        sc = sc.replace(seed=args.seed)
    if args.fast:
        sc = X.fast_profile(sc)
    return sc


def _trials(args) -> int:
    t = X.FAST_TRIALS if args.fast and args.trials == 200 else args.trials
    if t < 1:
        raise ScenarioError("trials must be >= 1")
    return t


def _meta(args, sc, **extra) -> dict:
    d = {k: v for k, v in vars(args).items() if k != "func"}
    d["scenario_resolved"] = scenario_to_dict(sc)
    d.update(extra)
    return d


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_validate(args) -> int:
    sc = _scenario(args)
    geo = path_geometry(sc)
    info = {
        "n_anchors": sc.n_anchors,
        "n_blocks": sc.n_blocks,
        "base_length": sc.radio.n_transmissions // sc.n_blocks,
        "noise_variance_w": noise_variance(sc.radio),
        "noise_variance_dbm": 10 * np.log10(noise_variance(sc.radio)) + 30,
        "paths": [
            {"kind": p["kind"], "anchor": p["anchor"], "delay_s": p["delay"], "lengths_m": list(p["lengths"])}
            for p in geo
        ],
        "eta_n": eta_n(sc, sc.tx, sc.rx, sc.radio.clock_offset_m).tolist(),
    }
    text = json.dumps(info, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_localize(args) -> int:
    sc = _scenario(args)
    search = SearchSpec(sc.tx)
    if args.estimate:
        est = ChannelEstimate.from_dict(json.loads(Path(args.estimate).read_text()))
    else:
        cb = cbk.build_codebook("random", sc)
        delta = np.ones(sc.radio.n_transmissions)
        rng = trial_rng(sc.seed, args.trial)
        block = synthesize(sc, cb, delta, rng, paths=channel_paths(sc, rng))
        est = estimate_channel(sc, cb, delta, block)
    coarse, fine = locate(sc, est.eta_n(), search)
    doc = {"estimate": est.to_dict(), "coarse": coarse.to_dict(), "refined": fine.to_dict()}
    X.write_json(_out(args, "localize.json"), doc)
    print(json.dumps(fine.to_dict()))
    return 0


def cmd_mc_sweep(args) -> int:
    sc = _scenario(args)
    if args.rcs is not None:
        sc = X.two_cluster_multipath(sc, args.rcs)
    rows = X.run_mc_sweep(sc, args.powers, _trials(args), args.seed, args.workers)
    X.write_csv(_out(args, "mc_sweep.csv"), rows, _meta(args, sc))
    return 0


def cmd_crb_map(args) -> int:
    sc = layout(args.layout) if args.layout else _scenario(args)
    if args.layout and args.fast:
        sc = X.fast_profile(sc)
    step = args.step * (4 if args.fast else 1)
    axis = X.heatmap_axis(-args.extent, args.extent, step)
    maps = X.run_crb_map(sc, axis, axis, args.z, (args.knowns,), args.workers)
    peb = maps[args.knowns]
    rows = [{"x": float(x), "y": float(y), "peb_m": float(peb[iy, ix])} for iy, y in enumerate(axis) for ix, x in enumerate(axis)]
    out = _out(args, "crb_map.csv")
    X.write_csv(out, rows, _meta(args, sc), ["x", "y", "peb_m"])
    grid = {
        "x": axis,
        "y": axis,
        "z": args.z,
        "knowns": args.knowns,
        "n_singular": int(np.isinf(peb).sum()),
        "peb_m": np.where(np.isfinite(peb), peb, None).tolist(),
    }
    X.write_json(out.with_suffix(".json"), grid)
    return 0


def cmd_cdf_study(args) -> int:
    names = [n for n in args.layouts.split(",") if n]
    res = X.run_cdf_study(names, args.eps, args.knowns, args.fast, args.workers)
    rows = []
    for i, e in enumerate(args.eps):
        row = {"eps_m": e}
        for n in names:
            row[X.LAYOUT_LABELS.get(n, n)] = float(res[n]["cdf"][i])
        rows.append(row)
    n_pairs = len(X.ue_pairs(args.fast))
    X.write_csv(_out(args, "cdf_study.csv"), rows, _meta(args, table1(), n_pairs=n_pairs, layouts=names))
    return 0


def cmd_codebook_eval(args) -> int:
    sc = _scenario(args)
    out = _out(args, "codebook_eval.csv")
    if args.gamma_sweep is not None:
        gammas = np.logspace(-2, 2, 17)
        rows = X.run_gamma_sweep(sc, args.gamma_sweep, gammas)
    else:
        rows = X.run_codebook_eval(sc, sorted(args.sigmas), args.gammas)
    X.write_csv(out, rows, _meta(args, sc))
    if args.export_codebook:
        prior = cbk.PriorState.isotropic(sc, args.sigma_export)
        cbk.save_codebook(cbk.build_codebook("dir_der", sc, prior), args.export_codebook)
    return 0


def cmd_cost_map(args) -> int:
    sc = _scenario(args)
    if args.rx:
        sc = sc.replace(rx=np.array(args.rx, dtype=float))
    res = X.run_cost_map(sc, args.extent, args.step)
    rows = [
        {"x": float(x), "y": float(y), "cost_m": float(res["cost"][iy, ix])}
        for iy, y in enumerate(res["y"])
        for ix, x in enumerate(res["x"])
    ]
    out = _out(args, "cost_map.csv")
    X.write_csv(out, rows, _meta(args, sc, flat_cells=X.flat_cell_count(res["cost"])), ["x", "y", "cost_m"])
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "localize": cmd_localize,
    "mc-sweep": cmd_mc_sweep,
    "crb-map": cmd_crb_map,
    "cdf-study": cmd_cdf_study,
    "codebook-eval": cmd_codebook_eval,
    "cost-map": cmd_cost_map,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, cbk.CodebookError, ValueError, OSError) as exc:
        print(f"risloc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
