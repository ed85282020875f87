"""SISO-OFDM received-signal model with multiple RIS anchors.

Element ``(k, g)`` of the noise-free signal is::

    mu[k, g] = sum_p rho_p * d_k(tau_p) * A_p[g] * sqrt(P) * x_k * delta_g

with ``d_k(tau) = exp(-j 2 pi k df tau)`` for ``k = 1..K`` and ``A_p[g] = 1`` for
uncontrolled paths or ``omega_{l,g}^T a_R(xi_p, zeta_p)`` for paths that bounce
off RIS ``l``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    SPEED_OF_LIGHT,
    angles_to_direction,
    local_direction,
    path_delay,
)
from .scenario import (
    RadioConfig,
    Scenario,
    element_positions,
    noise_variance,
    path_gain,
)

RIS_KINDS = ("ris", "mp_ris")


@dataclass(frozen=True)
class PathDescriptor:
    kind: str  # los | ris | mp_los | mp_ris
    anchor: int  # 0 for uncontrolled paths, l >= 1 for RIS paths
    gain: complex
    delay: float  # seconds
    xi: float | None = None
    zeta: float | None = None
    lengths: tuple[float, ...] = ()

    @property
    def is_ris(self) -> bool:
        return self.kind in RIS_KINDS


@dataclass
class RxBlock:
    samples: np.ndarray  # (K, G) complex
    radio: RadioConfig

    def dump(self, path) -> None:
        """Write ``K, G`` as little-endian int32 followed by interleaved complex64."""
        k, g = self.samples.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<ii", k, g))
            fh.write(self.samples.astype("<c8").tobytes(order="C"))

    @staticmethod
    def read_samples(path) -> np.ndarray:
        raw = Path(path).read_bytes()
        k, g = struct.unpack("<ii", raw[:8])
        return np.frombuffer(raw[8:], dtype="<c8").reshape(k, g).astype(complex)


def wavenumber(carrier_freq: float) -> float:
    return 2 * np.pi * carrier_freq / SPEED_OF_LIGHT


def steering_vector(anchor, angles, carrier_freq: float, spacing: float | None = None) -> np.ndarray:
    z = element_positions(anchor, spacing)
    return np.exp(1j * wavenumber(carrier_freq) * (z @ angles_to_direction(angles)))


def ris_response(anchor, sf, carrier_freq: float, spacing: float | None = None) -> np.ndarray:
    """Joint AoA/AoD response ``a_R(xi, zeta)`` of a planar RIS."""
    z = element_positions(anchor, spacing)
    return np.exp(1j * wavenumber(carrier_freq) * (z[:, 1] * sf[0] + z[:, 2] * sf[1]))


def subcarrier_index(radio: RadioConfig) -> np.ndarray:
    return np.arange(1, radio.n_subcarriers + 1)


def delay_vector(tau: float, radio: RadioConfig) -> np.ndarray:
    return np.exp(-2j * np.pi * subcarrier_index(radio) * radio.subcarrier_spacing_hz * tau)


def equivalent_gains(profiles: np.ndarray, a_r: np.ndarray) -> np.ndarray:
    """RIS gain per transmission, ``omega_g^T a_R``; ``profiles`` is ``(N, G)``."""
    return profiles.T @ a_r


def _profiles(codebook) -> list[np.ndarray]:
    return list(codebook.profiles) if hasattr(codebook, "profiles") else list(codebook)


def path_geometry(scenario: Scenario, tx=None, rx=None, clock_offset=None) -> list[dict]:
    """Delays, spatial frequencies and segment lengths of every modeled path.

    Returns one dict per path in the canonical order: LOS (unless blocked),
    RIS 1..L, then multipath components in scatterer order.
    """
    p_t = scenario.tx if tx is None else np.asarray(tx, dtype=float)
    p_r = scenario.rx if rx is None else np.asarray(rx, dtype=float)
    b = scenario.radio.clock_offset_m if clock_offset is None else float(clock_offset)
    out = []
    if not scenario.los_blocked:
        out.append(dict(kind="los", anchor=0, points=[p_t, p_r]))
    for i, a in enumerate(scenario.anchors, start=1):
        t_t = local_direction(p_t, a.position, a.rotation)
        t_r = local_direction(p_r, a.position, a.rotation)
        out.append(dict(kind="ris", anchor=i, points=[p_t, a.position, p_r], sf=t_t + t_r))
    for sp in scenario.all_scatterers():
        for c in sp.affects:
            if c == 0:
                out.append(dict(kind="mp_los", anchor=0, points=[p_t, sp.position, p_r], rcs=sp.rcs))
                continue
            a = scenario.anchors[c - 1]
            if sp.side == "tx":
                pts = [p_t, sp.position, a.position, p_r]
                sf = local_direction(sp.position, a.position, a.rotation) + local_direction(
                    p_r, a.position, a.rotation
                )
            else:
                pts = [p_t, a.position, sp.position, p_r]
                sf = local_direction(p_t, a.position, a.rotation) + local_direction(
                    sp.position, a.position, a.rotation
                )
            out.append(dict(kind="mp_ris", anchor=c, points=pts, sf=sf, rcs=sp.rcs))
    for p in out:
        pts = np.asarray(p["points"])
        p["lengths"] = tuple(float(x) for x in np.linalg.norm(np.diff(pts, axis=0), axis=1))
        p["delay"] = path_delay(pts, b)
    return out


def channel_paths(scenario: Scenario, rng, tx=None, rx=None, clock_offset=None) -> list[PathDescriptor]:
    """Paths with model gains and random phases drawn from ``rng``."""
    lam = scenario.radio.wavelength
    paths = []
    for p in path_geometry(scenario, tx, rx, clock_offset):
        kind = p["kind"]
        lengths = p["lengths"]
        if kind == "ris":
            lengths = (lengths[0], lengths[1])
        gain = path_gain(kind, lengths, lam, rng, p.get("rcs", 0.0))
        sf = p.get("sf")
        paths.append(
            PathDescriptor(
                kind=kind,
                anchor=p["anchor"],
                gain=complex(gain),
                delay=p["delay"],
                xi=None if sf is None else float(sf[1]),
                zeta=None if sf is None else float(sf[2]),
                lengths=p["lengths"],
            )
        )
    return paths


def path_signal_factors(scenario: Scenario, path: PathDescriptor, profiles, pilots=None):
    """Return ``(u, v)`` with the path's noise-free contribution ``outer(u, v * delta)``."""
    radio = scenario.radio
    x = np.ones(radio.n_subcarriers) if pilots is None else pilots
    u = path.gain * delay_vector(path.delay, radio) * np.sqrt(radio.power_w) * x
    if path.is_ris:
        a = scenario.anchors[path.anchor - 1]
        a_r = ris_response(a, (path.xi, path.zeta), radio.carrier_freq_hz, scenario.spacing(a))
        v = equivalent_gains(profiles[path.anchor - 1], a_r)
    else:
        v = np.ones(radio.n_transmissions, dtype=complex)
    return u, v


def noise_free_signal(scenario: Scenario, paths, codebook, delta, pilots=None) -> np.ndarray:
    profiles = _profiles(codebook)
    delta = np.asarray(delta, dtype=float)
    y = np.zeros((scenario.radio.n_subcarriers, scenario.radio.n_transmissions), dtype=complex)
    for p in paths:
        u, v = path_signal_factors(scenario, p, profiles, pilots)
        y += np.outer(u, v * delta)
    return y


def synthesize(
    scenario: Scenario,
    codebook,
    delta,
    rng,
    with_noise: bool = True,
    paths=None,
    pilots=None,
) -> RxBlock:
    """Received block ``Y`` for one realization.

    Gains are drawn from ``rng`` when ``paths`` is not given; noise (if enabled)
    is drawn afterwards from the same generator.
    """
    radio = scenario.radio
    profiles = _profiles(codebook)
    if len(profiles) != scenario.n_anchors:
        raise ValueError(f"expected {scenario.n_anchors} RIS profile matrices, got {len(profiles)}")
    for p in profiles:
        if p.shape[1] != radio.n_transmissions:
            raise ValueError("profile matrix width must equal n_transmissions")
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (radio.n_transmissions,):
        raise ValueError("power vector length must equal n_transmissions")
    if not np.isclose(delta @ delta, radio.n_transmissions, rtol=1e-9):
        raise ValueError("power vector must satisfy ||delta||^2 = G")
    if paths is None:
        paths = channel_paths(scenario, rng)
    period = 1.0 / radio.subcarrier_spacing_hz
    for p in paths:
        if not 0.0 <= p.delay < period:
            raise ValueError(f"path delay {p.delay:.3e} s outside the unambiguous range [0, {period:.3e})")
    y = noise_free_signal(scenario, paths, profiles, delta, pilots)
    if with_noise:
        sigma2 = noise_variance(radio)
        y = y + np.sqrt(sigma2 / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return RxBlock(y, radio)
