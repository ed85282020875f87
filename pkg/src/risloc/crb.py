"""Fisher information and Cramer-Rao bounds for channel parameters and UE states.

Parameter conventions
---------------------
Channel vector ``eta`` (main block): ``[d0, alpha0, beta0]`` for the LOS path
(absent when blocked) followed by ``[xi_l, zeta_l, d_l, alpha_l, beta_l]`` per
RIS. Delays enter as ranges ``d = c * tau`` in meters, which keeps the FIM well
scaled; bounds are reported both in meters and seconds. Gains are
``rho = alpha * exp(-1j * beta)``. Multipath parameters, when present, follow
the main block and are removed by Schur complement.

State vector ``s``: ``[p_T (3), p_R (3), B, alpha_0, beta_0, ..., alpha_L, beta_L]``.

Every partial derivative of the noise-free signal is rank one,
``d mu / d theta = outer(u_theta, v_theta * delta)``, so the FIM reduces to
``(2 / sigma^2) Re[(U^H U) * (V^H diag(gamma) V)]`` with ``gamma = delta**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import (
    PathDescriptor,
    _profiles,
    channel_paths,
    delay_vector,
    ris_response,
    subcarrier_index,
    wavenumber,
)
from .geometry import SPEED_OF_LIGHT
from .scenario import Scenario, element_positions, noise_variance

COND_LIMIT = 1e12

KNOWN_ROWS = {
    "none": (),
    "b": (6,),
    "height": (2, 5),
    "tx": (0, 1, 2),
}


class SingularFimError(np.linalg.LinAlgError):
    def __init__(self, msg, cond=np.inf):
        super().__init__(msg)
        self.cond = cond


def crb_paths(scenario: Scenario, tx=None, rx=None, clock_offset=None) -> list[PathDescriptor]:
    """Deterministic path realization (phases from the scenario seed) for bound evaluation."""
    return channel_paths(scenario, np.random.default_rng(scenario.seed), tx, rx, clock_offset)


def param_names(paths) -> tuple[list[str], int]:
    """Names of the ``eta_All`` entries and the size of the main (non-multipath) block."""
    main, mp = [], []
    for i, p in enumerate(paths):
        if p.kind == "los":
            main += ["d0", "alpha0", "beta0"]
        elif p.kind == "ris":
            l = p.anchor
            main += [f"xi{l}", f"zeta{l}", f"d{l}", f"alpha{l}", f"beta{l}"]
        elif p.kind == "mp_los":
            mp += [f"mp{i}.d", f"mp{i}.alpha", f"mp{i}.beta"]
        else:
            mp += [f"mp{i}.xi", f"mp{i}.zeta", f"mp{i}.d", f"mp{i}.alpha", f"mp{i}.beta"]
    return main + mp, len(main)


def _ordered(paths):
    main = [p for p in paths if p.kind in ("los", "ris")]
    mp = [p for p in paths if p.kind not in ("los", "ris")]
    return main + mp


def signal_factors(scenario: Scenario, paths, codebook, pilots=None):
    """Rank-one factors of every partial derivative of the noise-free signal.

    Returns ``(U, V)`` with shapes ``(K, P)`` and ``(G, P)`` such that
    ``d mu / d eta_p = outer(U[:, p], V[:, p] * delta)``; columns follow
    :func:`param_names` of the reordered path list (main paths first).
    """
    radio = scenario.radio
    profiles = _profiles(codebook)
    x = np.ones(radio.n_subcarriers) if pilots is None else pilots
    k = subcarrier_index(radio)
    kap = wavenumber(radio.carrier_freq_hz)
    ddel = -2j * np.pi * k * radio.subcarrier_spacing_hz / SPEED_OF_LIGHT
    us, vs = [], []
    for p in _ordered(paths):
        base = delay_vector(p.delay, radio) * np.sqrt(radio.power_w) * x
        phase = np.exp(1j * np.angle(p.gain))
        if p.is_ris:
            a = scenario.anchors[p.anchor - 1]
            z = element_positions(a, scenario.spacing(a))
            a_r = ris_response(a, (p.xi, p.zeta), radio.carrier_freq_hz, scenario.spacing(a))
            w = profiles[p.anchor - 1]
            v0 = w.T @ a_r
            v_xi = w.T @ (a_r * 1j * kap * z[:, 1])
            v_zeta = w.T @ (a_r * 1j * kap * z[:, 2])
            us += [p.gain * base, p.gain * base]
            vs += [v_xi, v_zeta]
        else:
            v0 = np.ones(radio.n_transmissions, dtype=complex)
        us += [p.gain * ddel * base, phase * base, -1j * p.gain * base]
        vs += [v0, v0, v0]
    return np.stack(us, axis=1), np.stack(vs, axis=1)


def fim_from_factors(u, v, gamma, sigma2) -> np.ndarray:
    gu = u.conj().T @ u
    gv = (v.conj() * gamma[:, None]).T @ v
    f = (2.0 / sigma2) * np.real(gu * gv)
    return 0.5 * (f + f.T)


def fim_channel(scenario: Scenario, codebook, delta, paths=None, pilots=None) -> np.ndarray:
    """FIM of ``eta_All`` (main block first, then multipath parameters)."""
    if paths is None:
        paths = crb_paths(scenario)
    u, v = signal_factors(scenario, paths, codebook, pilots)
    gamma = np.asarray(delta, dtype=float) ** 2
    return fim_from_factors(u, v, gamma, noise_variance(scenario.radio))


def fim_per_transmission(scenario: Scenario, codebook, paths=None, pilots=None) -> np.ndarray:
    """Unit-power FIM contribution of each transmission, shape ``(G, P, P)``.

    ``fim_channel(..., delta) == tensordot(delta**2, fim_per_transmission(...), 1)``.
    """
    if paths is None:
        paths = crb_paths(scenario)
    u, v = signal_factors(scenario, paths, codebook, pilots)
    gu = u.conj().T @ u
    terms = np.real(gu[None] * (v.conj()[:, :, None] * v[:, None, :]))
    return (2.0 / noise_variance(scenario.radio)) * terms


def _equilibrate(m):
    d = np.diag(m).copy()
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        return None, np.inf
    s = 1.0 / np.sqrt(d)
    return s, np.linalg.cond(m * s[:, None] * s[None, :])


def sym_inv(m, cond_limit: float = COND_LIMIT) -> np.ndarray:
    """Inverse of a symmetric PSD matrix after diagonal equilibration.

    Raises :class:`SingularFimError` carrying the (equilibrated) condition number
    when it exceeds ``cond_limit``.
    """
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return m.copy()
    s, cond = _equilibrate(m)
    if s is None or cond > cond_limit:
        raise SingularFimError(f"matrix is singular to working precision (cond={cond:.3g})", cond)
    inv = np.linalg.inv(m * s[:, None] * s[None, :])
    return inv * s[:, None] * s[None, :]


def efim(fim, keep) -> np.ndarray:
    """Equivalent FIM of the ``keep`` entries: ``A - B D^-1 B^T``."""
    fim = np.asarray(fim, dtype=float)
    keep = np.asarray(keep)
    drop = np.setdiff1d(np.arange(fim.shape[0]), keep)
    if drop.size == 0:
        return fim[np.ix_(keep, keep)].copy()
    a = fim[np.ix_(keep, keep)]
    b = fim[np.ix_(keep, drop)]
    d = fim[np.ix_(drop, drop)]
    try:
        d_inv = sym_inv(d)
    except SingularFimError:
        # for a PSD FIM the cross block lies in range(d), so the pseudo-inverse
        # gives the exact Schur complement when nuisances are unidentifiable
        s = np.sqrt(np.where(np.diag(d) > 0, np.diag(d), 1.0))
        d_inv = np.linalg.pinv(d / np.outer(s, s), rcond=1e-12, hermitian=True) / np.outer(s, s)
    out = a - b @ d_inv @ b.T
    return 0.5 * (out + out.T)


def error_bounds(fim_eta, names) -> dict:
    """Delay and spatial-frequency error bounds from the main-block FIM.

    Returns arrays keyed ``deb_m`` / ``deb_s`` (per present path, LOS first),
    ``seb_xi`` and ``seb_zeta`` (per RIS). Singular input yields ``inf`` bounds
    and a ``singular`` flag.
    """
    out = {"singular": False}
    try:
        crb = sym_inv(fim_eta)
        diag = np.diag(crb)
    except SingularFimError:
        out["singular"] = True
        diag = np.full(len(names), np.inf)
    idx = {n: i for i, n in enumerate(names)}
    d_names = [n for n in names if n.startswith("d") and n[1:].isdigit()]
    out["deb_m"] = np.sqrt([diag[idx[n]] for n in d_names])
    out["deb_s"] = out["deb_m"] / SPEED_OF_LIGHT
    ris = sorted(int(n[2:]) for n in names if n.startswith("xi"))
    out["seb_xi"] = np.sqrt([diag[idx[f"xi{l}"]] for l in ris])
    out["seb_zeta"] = np.sqrt([diag[idx[f"zeta{l}"]] for l in ris])
    out["paths"] = [int(n[1:]) for n in d_names]
    return out


# --- geometry -> channel parameter mapping ---------------------------------

def _unit(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("degenerate geometry: coincident points")
    return v / n, n


def eta_n(scenario: Scenario, tx, rx, clock_offset) -> np.ndarray:
    """Nuisance-free channel vector ``[d0, d1, xi1, zeta1, ..., dL, xiL, zetaL]`` (meters for ``d``).

    ``d0`` is omitted for LOS-blocked scenarios.
    """
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    out = []
    if not scenario.los_blocked:
        out.append(np.linalg.norm(tx - rx) + clock_offset)
    for a in scenario.anchors:
        ut, dt = _unit(tx - a.position)
        ur, dr = _unit(rx - a.position)
        sf = a.rotation.T @ (ut + ur)
        out += [dt + dr + clock_offset, sf[1], sf[2]]
    return np.array(out)


def eta_n_jacobian(scenario: Scenario, tx, rx, clock_offset=0.0) -> np.ndarray:
    """``d eta_N / d s_N`` in numerator layout, shape ``(len(eta_N), 7)``."""
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    rows = []
    if not scenario.los_blocked:
        u, _ = _unit(tx - rx)
        rows.append(np.concatenate([u, -u, [1.0]]))
    for a in scenario.anchors:
        rot = a.rotation
        ut, dt = _unit(tx - a.position)
        ur, dr = _unit(rx - a.position)
        rows.append(np.concatenate([ut, ur, [1.0]]))
        pt = (np.eye(3) - np.outer(ut, ut)) / dt
        pr = (np.eye(3) - np.outer(ur, ur)) / dr
        for comp in (1, 2):
            rows.append(np.concatenate([pt @ rot[:, comp], pr @ rot[:, comp], [0.0]]))
    return np.array(rows)


def state_jacobian(scenario: Scenario, tx=None, rx=None, clock_offset=None) -> np.ndarray:
    """``J_S = d eta / d s`` in denominator layout, shape ``(n_state, n_eta)``.

    Rows follow the state vector (positions, clock offset, then per-path
    ``alpha, beta``); columns follow the main ``eta`` block.
    """
    tx = scenario.tx if tx is None else np.asarray(tx, float)
    rx = scenario.rx if rx is None else np.asarray(rx, float)
    b = scenario.radio.clock_offset_m if clock_offset is None else clock_offset
    jn = eta_n_jacobian(scenario, tx, rx, b)
    n_paths = scenario.n_anchors + (0 if scenario.los_blocked else 1)
    n_eta = 5 * scenario.n_anchors + (0 if scenario.los_blocked else 3)
    n_state = 7 + 2 * n_paths
    j = np.zeros((n_state, n_eta))
    col, row_n, gain_row = 0, 0, 7
    if not scenario.los_blocked:
        j[:7, 0] = jn[0]
        j[gain_row, 1] = 1.0
        j[gain_row + 1, 2] = 1.0
        col, row_n, gain_row = 3, 1, 9
    for _ in scenario.anchors:
        d_row, xi_row, zeta_row = jn[row_n], jn[row_n + 1], jn[row_n + 2]
        j[:7, col] = xi_row
        j[:7, col + 1] = zeta_row
        j[:7, col + 2] = d_row
        j[gain_row, col + 3] = 1.0
        j[gain_row + 1, col + 4] = 1.0
        col += 5
        row_n += 3
        gain_row += 2
    return j


@dataclass
class FimReport:
    fim_eta: np.ndarray
    fim_state: np.ndarray
    names: list[str]
    deb_m: np.ndarray
    seb_xi: np.ndarray
    seb_zeta: np.ndarray
    peb_t: float
    peb_r: float
    ceb: float
    cond_eta: float
    cond_state: float
    singular: bool = False
    knowns: str = "none"
    extra: dict = field(default_factory=dict)

    @property
    def deb_s(self) -> np.ndarray:
        return self.deb_m / SPEED_OF_LIGHT


def _state_bounds(i_s, knowns: str):
    rows = KNOWN_ROWS[knowns]
    keep = np.setdiff1d(np.arange(i_s.shape[0]), rows)
    sub = i_s[np.ix_(keep, keep)]
    _, cond = _equilibrate(sub)
    try:
        crb_sub = sym_inv(sub)
    except SingularFimError:
        return np.inf, np.inf, np.inf, cond, True
    crb = np.zeros_like(i_s)
    crb[np.ix_(keep, keep)] = crb_sub
    d = np.diag(crb)
    return float(np.sqrt(d[0:3].sum())), float(np.sqrt(d[3:6].sum())), float(np.sqrt(d[6])), cond, False


def positioning_bounds(
    scenario: Scenario, codebook, delta, knowns: str = "none", paths=None, pilots=None
) -> FimReport:
    """Channel and state bounds for the scenario's true UE positions."""
    if knowns not in KNOWN_ROWS:
        raise ValueError(f"knowns must be one of {sorted(KNOWN_ROWS)}")
    if paths is None:
        paths = crb_paths(scenario)
    # bounds are computed at 1 W and rescaled, so the P^-1/2 law holds to rounding
    p_w = scenario.radio.power_w
    full = fim_channel(scenario.with_power(30.0), codebook, delta, paths, pilots)
    names, n_main = param_names(_ordered(paths))
    i_eta = efim(full, np.arange(n_main))
    main_names = names[:n_main]
    eb = error_bounds(i_eta, main_names)
    j = state_jacobian(scenario)
    i_s = j @ i_eta @ j.T
    i_s = 0.5 * (i_s + i_s.T)
    peb_t, peb_r, ceb, cond_s, singular = _state_bounds(i_s, knowns)
    _, cond_eta = _equilibrate(i_eta)
    scale = 1.0 / np.sqrt(p_w)
    return FimReport(
        fim_eta=p_w * i_eta,
        fim_state=p_w * i_s,
        names=main_names,
        deb_m=eb["deb_m"] * scale,
        seb_xi=eb["seb_xi"] * scale,
        seb_zeta=eb["seb_zeta"] * scale,
        peb_t=peb_t * scale,
        peb_r=peb_r * scale,
        ceb=ceb * scale,
        cond_eta=float(cond_eta),
        cond_state=float(cond_s),
        singular=singular or eb["singular"],
        knowns=knowns,
    )


def state_fim_terms(scenario: Scenario, codebook, tx, rx, clock_offset=None) -> np.ndarray:
    """Per-transmission state FIM contributions ``S_g`` at the given UE positions.

    ``I(s) = sum_g gamma_g S_g``; shape ``(G, n_state, n_state)``. Multipath is
    ignored, as in profile design.
    """
    b = scenario.radio.clock_offset_m if clock_offset is None else clock_offset
    sc = scenario.replace(scatterers=(), clusters=())
    paths = crb_paths(sc, tx, rx, b)
    o = fim_per_transmission(sc, codebook, paths)
    j = state_jacobian(sc, tx, rx, b)
    return np.einsum("ia,gab,jb->gij", j, o, j, optimize=True)


def peb_r_squared(i_s, knowns: str = "none") -> float:
    _, peb_r, _, _, singular = _state_bounds(i_s, knowns)
    return np.inf if singular else peb_r**2


def peb_heatmap(scenario: Scenario, codebook, delta, xs, ys, z=None, knowns="none") -> np.ndarray:
    """``PEB_R`` with the receiver swept over an ``(x, y)`` grid, TX fixed.

    Result has shape ``(len(ys), len(xs))``; singular cells are ``inf``.
    Cells where the receiver coincides with the transmitter or an anchor are
    ``nan``.
    """
    z = scenario.rx[2] if z is None else z
    out = np.empty((len(ys), len(xs)))
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            rx = np.array([x, y, z], dtype=float)
            if np.allclose(rx, scenario.tx) or any(np.allclose(rx, a.position) for a in scenario.anchors):
                out[iy, ix] = np.nan
                continue
            sc = scenario.replace(rx=rx)
            out[iy, ix] = positioning_bounds(sc, codebook, delta, knowns).peb_r
    return out
