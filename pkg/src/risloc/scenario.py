"""Experiment description: anchors, scatterers, radio settings and their file format.

Scenario files are YAML with explicit units in the key names::

    seed: 7
    tx_m: [-2.0, -4.0, 0.0]
    rx_m: [2.0, 3.0, 0.0]
    los_blocked: false
    radio:
      carrier_freq_hz: 30.0e9
      subcarrier_spacing_hz: 120.0e3
      n_subcarriers: 512
      n_transmissions: 192
      power_dbm: 30.0
      noise_psd_dbm_hz: -173.855
      noise_figure_db: 10.0
      clock_offset_m: 5.0
      n_blocks: 3            # optional, default: smallest divisor of G >= L+1
    anchors:
      - position_m: [-4.0, 0.0, 2.0]
        orientation_rad: [0.0, 0.0, 0.0]   # intrinsic Z-Y-X (yaw, pitch, roll)
        n_rows: 10
        n_cols: 10
        element_spacing_m: null            # null -> half carrier wavelength
    scatterers:
      - position_m: [0.0, 2.0, 3.0]
        rcs_m2: 0.5
        affects: [0, 1, 2]                 # 0 = LOS channel, l >= 1 = RIS l channel
        side: tx                           # tx: TX-SP-RIS-RX, rx: TX-RIS-SP-RX
    clusters:
      - center_m: [0.0, -3.0, 3.0]
        radius_m: 1.0
        count: 5
        rcs_m2: 0.5
        affects: [0, 1, 2]
        side: tx

Clusters are expanded into scatter points uniformly inside a horizontal disk,
deterministically from ``seed``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .geometry import SPEED_OF_LIGHT, euler_to_rotation


class ScenarioError(ValueError):
    """Invalid or unparsable scenario description."""


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watt_to_dbm(w: float) -> float:
    return 10.0 * math.log10(w) + 30.0


@dataclass(frozen=True)
class RadioConfig:
    carrier_freq_hz: float = 30e9
    subcarrier_spacing_hz: float = 120e3
    n_subcarriers: int = 512
    n_transmissions: int = 192
    power_dbm: float = 30.0
    noise_psd_dbm_hz: float = -173.855
    noise_figure_db: float = 10.0
    clock_offset_m: float = 5.0
    n_blocks: int | None = None

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq_hz

    @property
    def power_w(self) -> float:
        return dbm_to_watt(self.power_dbm)

    @property
    def bandwidth_hz(self) -> float:
        # occupied bandwidth, see noise_variance
        return self.n_subcarriers * self.subcarrier_spacing_hz

    def with_power(self, power_dbm: float) -> "RadioConfig":
        return replace(self, power_dbm=float(power_dbm))


@dataclass(frozen=True, eq=False)
class RisAnchor:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    n_rows: int = 10
    n_cols: int = 10
    element_spacing: float | None = None

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.orientation)

    @property
    def n_elements(self) -> int:
        return self.n_rows * self.n_cols


@dataclass(frozen=True, eq=False)
class ScatterPoint:
    position: np.ndarray
    rcs: float = 0.5
    affects: tuple[int, ...] = (0,)
    side: str = "tx"


@dataclass(frozen=True, eq=False)
class ScatterCluster:
    center: np.ndarray
    radius: float
    count: int
    rcs: float = 0.5
    affects: tuple[int, ...] = (0,)
    side: str = "tx"


@dataclass(frozen=True, eq=False)
class Scenario:
    tx: np.ndarray
    rx: np.ndarray
    anchors: tuple[RisAnchor, ...]
    radio: RadioConfig = field(default_factory=RadioConfig)
    scatterers: tuple[ScatterPoint, ...] = ()
    clusters: tuple[ScatterCluster, ...] = ()
    seed: int = 0
    los_blocked: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tx", np.asarray(self.tx, dtype=float))
        object.__setattr__(self, "rx", np.asarray(self.rx, dtype=float))
        object.__setattr__(self, "anchors", tuple(self.anchors))
        object.__setattr__(self, "scatterers", tuple(self.scatterers))
        object.__setattr__(self, "clusters", tuple(self.clusters))
        validate(self)

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    @property
    def n_blocks(self) -> int:
        """Number of time-orthogonal blocks, Gamma."""
        if self.radio.n_blocks is not None:
            return self.radio.n_blocks
        return default_block_count(self.radio.n_transmissions, self.n_anchors)

    @property
    def noise_variance(self) -> float:
        return noise_variance(self.radio)

    def spacing(self, anchor: RisAnchor) -> float:
        if anchor.element_spacing is not None:
            return anchor.element_spacing
        return self.radio.wavelength / 2.0

    def replace(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def with_power(self, power_dbm: float) -> "Scenario":
        return replace(self, radio=self.radio.with_power(power_dbm))

    def all_scatterers(self) -> list[ScatterPoint]:
        """Explicit scatter points followed by the expanded clusters."""
        return list(self.scatterers) + expand_clusters(self.clusters, self.seed)


def default_block_count(n_transmissions: int, n_anchors: int) -> int:
    for gamma in range(n_anchors + 1, n_transmissions + 1):
        if n_transmissions % gamma == 0:
            return gamma
    raise ScenarioError(f"no block count >= {n_anchors + 1} divides G={n_transmissions}")


def validate(s: Scenario) -> None:
    r = s.radio
    for name in ("carrier_freq_hz", "subcarrier_spacing_hz", "n_subcarriers", "n_transmissions"):
        if not getattr(r, name) > 0:
            raise ScenarioError(f"radio.{name}: must be positive, got {getattr(r, name)!r}")
    if r.noise_figure_db < 0:
        raise ScenarioError("radio.noise_figure_db: must be non-negative")
    if r.n_blocks is not None:
        if r.n_blocks < s.n_anchors + 1:
            raise ScenarioError(f"radio.n_blocks: need at least L+1={s.n_anchors + 1} blocks")
        if r.n_transmissions % r.n_blocks:
            raise ScenarioError("radio.n_blocks: must divide radio.n_transmissions")
    need = 3 if s.los_blocked else 2
    if s.n_anchors < need:
        kind = "LOS-blocked" if s.los_blocked else "LOS"
        raise ScenarioError(
            f"anchors: a {kind} scenario needs at least L={need} RIS anchors, got {s.n_anchors}"
        )
    for v, name in ((s.tx, "tx_m"), (s.rx, "rx_m")):
        if v.shape != (3,) or not np.all(np.isfinite(v)):
            raise ScenarioError(f"{name}: expected 3 finite coordinates")
    if np.array_equal(s.tx, s.rx):
        raise ScenarioError("tx_m/rx_m: transmitter and receiver coincide")
    for i, a in enumerate(s.anchors):
        if a.n_rows < 1 or a.n_cols < 1:
            raise ScenarioError(f"anchors[{i}]: n_rows and n_cols must be >= 1")
        if a.element_spacing is not None and a.element_spacing <= 0:
            raise ScenarioError(f"anchors[{i}].element_spacing_m: must be positive")
    for i, sp in enumerate(list(s.scatterers) + list(s.clusters)):
        if sp.rcs <= 0:
            raise ScenarioError(f"scatterers[{i}].rcs_m2: must be positive")
        if sp.side not in ("tx", "rx"):
            raise ScenarioError(f"scatterers[{i}].side: expected 'tx' or 'rx'")
        if any(c < 0 or c > s.n_anchors for c in sp.affects):
            raise ScenarioError(f"scatterers[{i}].affects: channel index out of range")


def expand_clusters(clusters, seed: int) -> list[ScatterPoint]:
    out = []
    for ci, cl in enumerate(clusters):
        rng = np.random.default_rng([int(seed), 0x5C47, ci])
        r = cl.radius * np.sqrt(rng.uniform(size=cl.count))
        phi = rng.uniform(0.0, 2 * np.pi, size=cl.count)
        for k in range(cl.count):
            pos = np.asarray(cl.center, dtype=float) + np.array(
                [r[k] * np.cos(phi[k]), r[k] * np.sin(phi[k]), 0.0]
            )
            out.append(ScatterPoint(pos, cl.rcs, tuple(cl.affects), cl.side))
    return out


def element_positions(anchor: RisAnchor, spacing: float | None = None) -> np.ndarray:
    """Local element coordinates, shape ``(N, 3)``, row-major over (row, col).

    Rows run along the local z axis and columns along the local y axis; the grid
    is centered on the anchor so each coordinate has zero mean.
    """
    s = anchor.element_spacing if spacing is None else spacing
    if s is None:
        raise ScenarioError("element spacing unresolved; pass it or use Scenario.spacing")
    rows = (np.arange(anchor.n_rows) - (anchor.n_rows - 1) / 2.0) * s
    cols = (np.arange(anchor.n_cols) - (anchor.n_cols - 1) / 2.0) * s
    zz, yy = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([np.zeros(zz.size), yy.ravel(), zz.ravel()], axis=1)


def noise_variance(radio: RadioConfig) -> float:
    """Per-sample noise power in watts over the occupied bandwidth K * delta_f."""
    n0 = dbm_to_watt(radio.noise_psd_dbm_hz)
    nf = 10.0 ** (radio.noise_figure_db / 10.0)
    return n0 * nf * radio.bandwidth_hz


# --- path-gain magnitudes ---------------------------------------------------

def los_gain_magnitude(wavelength: float, d0: float) -> float:
    return wavelength / (4 * np.pi * d0)


def ris_gain_magnitude(wavelength: float, d_t: float, d_r: float) -> float:
    return wavelength**2 / (16 * np.pi**2 * d_t * d_r)


def mp_los_gain_magnitude(wavelength: float, rcs: float, d_t: float, d_r: float) -> float:
    return np.sqrt(4 * np.pi * rcs) * wavelength / (16 * np.pi**2 * d_t * d_r)


def mp_ris_gain_magnitude(wavelength: float, rcs: float, d1: float, d2: float, d3: float) -> float:
    return np.sqrt(4 * np.pi * rcs) * wavelength**2 / (64 * np.pi**3 * d1 * d2 * d3)


def path_gain(kind: str, lengths, wavelength: float, rng, rcs: float = 0.0) -> complex:
    """Complex gain with model magnitude and uniformly random phase.

    ``lengths`` holds the segment lengths along the path: ``(d0,)`` for ``los``,
    ``(d_T, d_R)`` for ``ris`` and ``mp_los``, three segments for ``mp_ris``.
    """
    if kind == "los":
        mag = los_gain_magnitude(wavelength, *lengths)
    elif kind == "ris":
        mag = ris_gain_magnitude(wavelength, *lengths)
    elif kind == "mp_los":
        mag = mp_los_gain_magnitude(wavelength, rcs, *lengths)
    elif kind == "mp_ris":
        mag = mp_ris_gain_magnitude(wavelength, rcs, *lengths)
    else:
        raise ValueError(f"unknown path kind {kind!r}")
    return mag * np.exp(1j * rng.uniform(0.0, 2 * np.pi))


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) ^ int(trial))


# --- file format ------------------------------------------------------------

_RADIO_KEYS = {
    "carrier_freq_hz": float,
    "subcarrier_spacing_hz": float,
    "n_subcarriers": int,
    "n_transmissions": int,
    "power_dbm": float,
    "noise_psd_dbm_hz": float,
    "noise_figure_db": float,
    "clock_offset_m": float,
}


def _vec(d: dict, key: str, where: str) -> np.ndarray:
    if key not in d:
        raise ScenarioError(f"{where}.{key}: missing")
    try:
        v = np.array([float(x) for x in d[key]])
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}.{key}: expected a list of numbers") from exc
    if v.shape != (3,):
        raise ScenarioError(f"{where}.{key}: expected 3 values, got {len(v)}")
    return v


def _affects(raw, where: str) -> tuple[int, ...]:
    out = []
    for c in raw if isinstance(raw, list) else [raw]:
        if c in ("los", "LOS"):
            out.append(0)
        else:
            try:
                out.append(int(c))
            except (TypeError, ValueError) as exc:
                raise ScenarioError(f"{where}.affects: bad channel id {c!r}") from exc
    return tuple(out)


def scenario_from_dict(d: dict) -> Scenario:
    if not isinstance(d, dict):
        raise ScenarioError("top level: expected a mapping")
    rd = d.get("radio", {}) or {}
    unknown = set(rd) - set(_RADIO_KEYS) - {"n_blocks"}
    if unknown:
        raise ScenarioError(f"radio: unknown keys {sorted(unknown)}")
    kw = {}
    for k, typ in _RADIO_KEYS.items():
        if k in rd:
            try:
                kw[k] = typ(rd[k])
            except (TypeError, ValueError) as exc:
                raise ScenarioError(f"radio.{k}: cannot convert {rd[k]!r}") from exc
    if rd.get("n_blocks") is not None:
        kw["n_blocks"] = int(rd["n_blocks"])
    radio = RadioConfig(**kw)

    anchors = []
    for i, a in enumerate(d.get("anchors") or []):
        where = f"anchors[{i}]"
        sp = a.get("element_spacing_m")
        anchors.append(
            RisAnchor(
                position=_vec(a, "position_m", where),
                orientation=_vec(a, "orientation_rad", where) if "orientation_rad" in a else np.zeros(3),
                n_rows=int(a.get("n_rows", 10)),
                n_cols=int(a.get("n_cols", 10)),
                element_spacing=None if sp is None else float(sp),
            )
        )
    scatterers = []
    for i, sp in enumerate(d.get("scatterers") or []):
        where = f"scatterers[{i}]"
        scatterers.append(
            ScatterPoint(
                position=_vec(sp, "position_m", where),
                rcs=float(sp.get("rcs_m2", 0.5)),
                affects=_affects(sp.get("affects", [0]), where),
                side=str(sp.get("side", "tx")),
            )
        )
    clusters = []
    for i, cl in enumerate(d.get("clusters") or []):
        where = f"clusters[{i}]"
        clusters.append(
            ScatterCluster(
                center=_vec(cl, "center_m", where),
                radius=float(cl.get("radius_m", 1.0)),
                count=int(cl.get("count", 5)),
                rcs=float(cl.get("rcs_m2", 0.5)),
                affects=_affects(cl.get("affects", [0]), where),
                side=str(cl.get("side", "tx")),
            )
        )
    return Scenario(
        tx=_vec(d, "tx_m", "top level"),
        rx=_vec(d, "rx_m", "top level"),
        anchors=tuple(anchors),
        radio=radio,
        scatterers=tuple(scatterers),
        clusters=tuple(clusters),
        seed=int(d.get("seed", 0)),
        los_blocked=bool(d.get("los_blocked", False)),
    )


def _fl(v) -> list[float]:
    return [float(x) for x in v]


def scenario_to_dict(s: Scenario) -> dict:
    r = s.radio
    radio = {k: getattr(r, k) for k in _RADIO_KEYS}
    if r.n_blocks is not None:
        radio["n_blocks"] = r.n_blocks
    return {
        "seed": int(s.seed),
        "tx_m": _fl(s.tx),
        "rx_m": _fl(s.rx),
        "los_blocked": bool(s.los_blocked),
        "radio": radio,
        "anchors": [
            {
                "position_m": _fl(a.position),
                "orientation_rad": _fl(a.orientation),
                "n_rows": int(a.n_rows),
                "n_cols": int(a.n_cols),
                "element_spacing_m": a.element_spacing,
            }
            for a in s.anchors
        ],
        "scatterers": [
            {"position_m": _fl(p.position), "rcs_m2": float(p.rcs), "affects": list(p.affects), "side": p.side}
            for p in s.scatterers
        ],
        "clusters": [
            {
                "center_m": _fl(c.center),
                "radius_m": float(c.radius),
                "count": int(c.count),
                "rcs_m2": float(c.rcs),
                "affects": list(c.affects),
                "side": c.side,
            }
            for c in s.clusters
        ],
    }


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" (line {mark.line + 1}, column {mark.column + 1})" if mark is not None else ""
        raise ScenarioError(f"{path}: parse error{loc}: {getattr(exc, 'problem', exc)}") from exc
    return scenario_from_dict(data)


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario_to_dict(s), sort_keys=False))


# --- preset layouts ---------------------------------------------------------

_TILT = np.pi / 6  # 30 degrees down

_FACING = {
    # anchor position -> yaw so that the local +x axis points to the room center
    (-4.0, 0.0): 0.0,
    (4.0, 0.0): np.pi,
    (0.0, 4.0): -np.pi / 2,
    (0.0, -4.0): np.pi / 2,
}


def _anchor(pos, yaw, pitch=0.0, size=(10, 10)) -> RisAnchor:
    return RisAnchor(np.array(pos, dtype=float), np.array([yaw, pitch, 0.0]), size[0], size[1])


def table1(**radio_changes) -> Scenario:
    """Default two-RIS scenario."""
    return Scenario(
        tx=np.array([-2.0, -4.0, 0.0]),
        rx=np.array([2.0, 3.0, 0.0]),
        anchors=(_anchor([-4, 0, 2], 0.0), _anchor([4, 0, 2], np.pi)),
        radio=replace(RadioConfig(), **radio_changes),
        seed=2023,
    )


def layout(name: str, tx=(-1.0, -1.0, 0.0), rx=(1.0, 1.0, 0.0), **radio_changes) -> Scenario:
    """Anchor layouts used by the heatmap and CDF studies.

    ``parallel``: two RISs facing each other; ``same_plane``: two RISs on one
    wall; ``corner``: two perpendicular RISs; ``planar``: two RISs facing each
    other in the UE plane (z = 0). The ``tilted_*`` variants use the
    four wall positions with a 30 degree downward tilt: ``tilted_corner``
    (2-RIS L), ``tilted_parallel`` (2-RIS P), ``tilted_3`` and ``tilted_4``.
    """
    walls = [(-4.0, 0.0), (0.0, 4.0), (4.0, 0.0), (0.0, -4.0)]
    if name == "parallel":
        anchors = (_anchor([-4, 0, 2], 0.0), _anchor([4, 0, 2], np.pi))
    elif name == "same_plane":
        anchors = (_anchor([-4, -3, 2], 0.0), _anchor([-4, 3, 2], 0.0))
    elif name == "planar":
        anchors = (_anchor([-4, 0, 0], 0.0), _anchor([4, 0, 0], np.pi))
    elif name == "corner":
        anchors = (_anchor([-4, 0, 2], 0.0), _anchor([0, 4, 2], -np.pi / 2))
    elif name.startswith("tilted_"):
        pick = {
            "tilted_corner": [0, 1],
            "tilted_parallel": [0, 2],
            "tilted_3": [0, 1, 2],
            "tilted_4": [0, 1, 2, 3],
        }.get(name)
        if pick is None:
            raise ScenarioError(f"unknown layout {name!r}")
        anchors = tuple(_anchor([*walls[i], 2.0], _FACING[walls[i]], _TILT) for i in pick)
    else:
        raise ScenarioError(f"unknown layout {name!r}")
    return Scenario(
        tx=np.asarray(tx, dtype=float),
        rx=np.asarray(rx, dtype=float),
        anchors=anchors,
        radio=replace(RadioConfig(), **radio_changes),
        seed=2023,
    )
