"""Channel-parameter estimation: path separation, coarse grid search and
per-path maximum-likelihood refinement.

Delays are handled internally as ranges ``d = c * tau`` (meters); estimates
expose both.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .channel import RxBlock, delay_vector, subcarrier_index, wavenumber
from .geometry import SPEED_OF_LIGHT
from .scenario import Scenario, element_positions

N_FFT = 1024
SF_STEP = 0.02


def separate_paths(samples, blocks) -> list[np.ndarray]:
    """Split a ``K x G`` block into per-path ``K x G~`` matrices (LOS first)."""
    y = samples.samples if isinstance(samples, RxBlock) else np.asarray(samples)
    blocks = np.asarray(blocks)
    n_blocks = blocks.shape[0]
    if y.shape[1] % n_blocks:
        raise ValueError(f"G={y.shape[1]} is not divisible by {n_blocks} blocks")
    gt = y.shape[1] // n_blocks
    stacked = y.reshape(y.shape[0], n_blocks, gt)
    return [np.einsum("i,kig->kg", blocks[:, l], stacked) / n_blocks for l in range(blocks.shape[1])]


def _depilot(path, pilots):
    return path if pilots is None else path * np.conj(pilots)[:, None] / np.abs(pilots)[:, None] ** 2


def delay_spectrum(h, subcarrier_spacing: float, n_fft: int = N_FFT) -> tuple[np.ndarray, np.ndarray]:
    """``|d(tau_n)^H h|`` on the grid ``tau_n = n / (n_fft * df)``.

    ``h`` is ``K`` or ``K x M``; columns are combined in 2-norm.
    """
    h = np.asarray(h)
    if h.ndim == 1:
        h = h[:, None]
    k = h.shape[0]
    if n_fft <= k:
        raise ValueError("FFT size must exceed the number of subcarriers")
    buf = np.zeros((n_fft, h.shape[1]), dtype=complex)
    buf[1 : k + 1] = h
    corr = n_fft * np.fft.ifft(buf, axis=0)
    taus = np.arange(n_fft) / (n_fft * subcarrier_spacing)
    return taus, np.linalg.norm(corr, axis=1)


def coarse_delay(path, radio, pilots=None, n_fft: int = N_FFT, is_ris: bool = False) -> float:
    """Grid delay estimate in seconds; LOS sums transmissions first."""
    h = _depilot(path, pilots)
    if not is_ris:
        h = h.sum(axis=1)
    taus, spec = delay_spectrum(h, radio.subcarrier_spacing_hz, n_fft)
    return float(taus[np.argmax(spec)])


def sf_grid(step: float = SF_STEP, window=None) -> np.ndarray:
    """Grid over ``[-1, 1)``, optionally restricted to ``[lo, hi]``."""
    g = -1.0 + step * np.arange(int(round(2.0 / step)))
    if window is not None:
        lo, hi = window
        g = g[(g >= lo - 1e-12) & (g <= hi + 1e-12)]
        if g.size == 0:
            g = np.array([np.clip(0.5 * (lo + hi), -1.0, 1.0 - step)])
    return g


def spatial_spectrum(path, profiles, anchor, spacing, tau, radio, pilots=None, xi_grid=None, zeta_grid=None):
    """Matched-filter magnitude over a ``(zeta, xi)`` grid, shape ``(len(zeta), len(xi))``."""
    xi_grid = sf_grid() if xi_grid is None else xi_grid
    zeta_grid = sf_grid() if zeta_grid is None else zeta_grid
    x = np.ones(path.shape[0]) if pilots is None else pilots
    z_g = (delay_vector(tau, radio) * x) @ np.conj(path)
    w = profiles[:, : path.shape[1]] @ z_g
    kap = wavenumber(radio.carrier_freq_hz)
    pos = element_positions(anchor, spacing)
    ys = pos[: anchor.n_cols, 1]
    zs = pos[:: anchor.n_cols, 2]
    e_y = np.exp(1j * kap * np.outer(ys, xi_grid))
    e_z = np.exp(1j * kap * np.outer(zs, zeta_grid))
    return np.abs(e_z.T @ w.reshape(anchor.n_rows, anchor.n_cols) @ e_y)


def coarse_spatial_freq(
    path, profiles, anchor, spacing, tau, radio, pilots=None, step: float = SF_STEP, window=None
) -> tuple[float, float]:
    """Grid maximizer of the matched-filter magnitude.

    ``window`` is ``((xi_lo, xi_hi), (zeta_lo, zeta_hi))`` or ``None``.
    """
    xw, zw = (None, None) if window is None else window
    xi_g, zeta_g = sf_grid(step, xw), sf_grid(step, zw)
    spec = spatial_spectrum(path, profiles, anchor, spacing, tau, radio, pilots, xi_g, zeta_g)
    iz, ix = np.unravel_index(np.argmax(spec), spec.shape)
    return float(xi_g[ix]), float(zeta_g[iz])


# --- maximum-likelihood refinement ------------------------------------------

class _PathModel:
    """Separable single-path model ``outer(u(d), v(xi, zeta))`` and its partials."""

    def __init__(self, scenario: Scenario, n_cols: int, pilots, delta_base, profiles=None, anchor=None):
        radio = scenario.radio
        self.radio = radio
        self.x = (np.ones(radio.n_subcarriers) if pilots is None else pilots) * np.sqrt(radio.power_w)
        self.k = subcarrier_index(radio)
        self.delta = np.asarray(delta_base, dtype=float)
        self.n_cols = n_cols
        self.anchor = anchor
        if anchor is not None:
            self.profiles = profiles[:, :n_cols]
            self.spacing = scenario.spacing(anchor)
            pos = element_positions(anchor, self.spacing)
            self.ky = wavenumber(radio.carrier_freq_hz) * pos[:, 1]
            self.kz = wavenumber(radio.carrier_freq_hz) * pos[:, 2]

    def factors(self, theta):
        d = theta[0]
        u = delay_vector(d / SPEED_OF_LIGHT, self.radio) * self.x
        du = [(-2j * np.pi * self.k * self.radio.subcarrier_spacing_hz / SPEED_OF_LIGHT) * u]
        if self.anchor is None:
            return u, self.delta.astype(complex), du, []
        a = np.exp(1j * (self.ky * theta[1] + self.kz * theta[2]))
        v = (self.profiles.T @ a) * self.delta
        dv = [(self.profiles.T @ (1j * self.ky * a)) * self.delta, (self.profiles.T @ (1j * self.kz * a)) * self.delta]
        return u, v, du, dv

    def mean(self, theta):
        u, v, _, _ = self.factors(theta)
        return np.outer(u, v)

    def partials(self, theta):
        u, v, du, dv = self.factors(theta)
        return [np.outer(du[0], v)] + [np.outer(u, w) for w in dv]


def concentrated_residual(model: _PathModel, theta, y):
    """Residual after closed-form gain elimination, and the gain."""
    m = model.mean(theta)
    mm = np.vdot(m, m).real
    rho = np.vdot(m, y) / mm
    return y - rho * m, rho


def refine_path(model: _PathModel, y, theta0, max_nfev: int = 100, xtol: float = 1e-10):
    """Local minimization of the concentrated residual norm.

    Returns ``(theta, rho, info)``; on failure the initial point is kept and
    ``info['converged']`` is ``False``.
    """
    theta0 = np.asarray(theta0, dtype=float)

    def fun(t):
        r, _ = concentrated_residual(model, t, y)
        return np.concatenate([r.real.ravel(), r.imag.ravel()])

    def jac(t):
        m = model.mean(t)
        mm = np.vdot(m, m).real
        rho = np.vdot(m, y) / mm
        r = y - rho * m
        cols = []
        for dm in model.partials(t):
            perp = dm - m * (np.vdot(m, dm) / mm)
            g = -perp * rho - m * (np.vdot(dm, r) / mm)
            cols.append(np.concatenate([g.real.ravel(), g.imag.ravel()]))
        return np.stack(cols, axis=1)

    r0 = float(np.sum(fun(theta0) ** 2))
    info = {"residual_coarse": r0, "converged": False, "nfev": 0, "status": None}
    try:
        sol = least_squares(
            fun, theta0, jac=jac, method="trf", x_scale="jac", xtol=xtol, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev
        )
    except (ValueError, np.linalg.LinAlgError) as exc:
        info["status"] = f"error: {exc}"
        _, rho0 = concentrated_residual(model, theta0, y)
        info["residual_refined"] = r0
        return theta0, rho0, info
    r1 = float(2.0 * sol.cost)
    info.update(nfev=int(sol.nfev), status=int(sol.status))
    if not np.all(np.isfinite(sol.x)) or r1 > r0:
        info["residual_refined"] = r0
        _, rho0 = concentrated_residual(model, theta0, y)
        return theta0, rho0, info
    info["converged"] = sol.status > 0
    info["residual_refined"] = r1
    _, rho = concentrated_residual(model, sol.x, y)
    return sol.x, rho, info


# --- full channel estimation --------------------------------------------------

@dataclass
class PathEstimate:
    path: int  # 0 LOS, l >= 1 RIS l
    coarse: dict
    refined: dict
    gain: complex
    residual_coarse: float
    residual_refined: float
    nfev: int
    converged: bool
    flags: list = field(default_factory=list)


@dataclass
class ChannelEstimate:
    paths: list

    def eta_n(self, stage: str = "refined") -> np.ndarray:
        """``[d0, d1, xi1, zeta1, ...]`` with delays as ranges in meters."""
        out = []
        for p in self.paths:
            e = getattr(p, stage)
            out.append(e["d_m"])
            if p.path > 0:
                out += [e["xi"], e["zeta"]]
        return np.array(out)

    def to_dict(self) -> dict:
        rows = []
        for p in self.paths:
            d = asdict(p)
            d["gain"] = [p.gain.real, p.gain.imag]
            rows.append(d)
        return {"paths": rows}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelEstimate":
        paths = []
        for p in d["paths"]:
            p = dict(p)
            p["gain"] = complex(*p["gain"])
            paths.append(PathEstimate(**p))
        return cls(paths)


def _entry(d_m, xi=None, zeta=None):
    e = {"d_m": float(d_m), "tau_s": float(d_m) / SPEED_OF_LIGHT}
    if xi is not None:
        e.update(xi=float(xi), zeta=float(zeta))
    return e


def estimate_channel(
    scenario: Scenario,
    codebook,
    delta,
    block,
    pilots=None,
    windows=None,
    n_fft: int = N_FFT,
    sf_step: float = SF_STEP,
    refine: bool = True,
) -> ChannelEstimate:
    """Separate, coarse-estimate and refine every LOS/RIS path of a received block.

    ``windows`` optionally maps RIS index ``l`` to a spatial-frequency search
    window ``((xi_lo, xi_hi), (zeta_lo, zeta_hi))``.
    """
    radio = scenario.radio
    separated = separate_paths(block, codebook.blocks)
    gt = separated[0].shape[1]
    delta_base = np.asarray(delta, dtype=float)[:gt]
    out = []
    for l, y in enumerate(separated):
        if l == 0 and scenario.los_blocked:
            continue
        flags = []
        if l == 0:
            tau = coarse_delay(y, radio, pilots, n_fft, is_ris=False)
            coarse = _entry(tau * SPEED_OF_LIGHT)
            model = _PathModel(scenario, gt, pilots, delta_base)
            theta0 = np.array([coarse["d_m"]])
        else:
            a = scenario.anchors[l - 1]
            prof = codebook.profiles[l - 1]
            tau = coarse_delay(y, radio, pilots, n_fft, is_ris=True)
            win = None if windows is None else windows.get(l)
            xi, zeta = coarse_spatial_freq(
                y, prof, a, scenario.spacing(a), tau, radio, pilots, sf_step, win
            )
            if win is None:
                flags.append("sf_alias_possible")
            coarse = _entry(tau * SPEED_OF_LIGHT, xi, zeta)
            model = _PathModel(scenario, gt, pilots, delta_base, prof, a)
            theta0 = np.array([coarse["d_m"], xi, zeta])
        if refine:
            theta, rho, info = refine_path(model, y, theta0)
        else:
            r, rho = concentrated_residual(model, theta0, y)
            rr = float(np.vdot(r, r).real)
            theta, info = theta0, {"residual_coarse": rr, "residual_refined": rr, "nfev": 0, "converged": False}
        if refine and not info["converged"]:
            flags.append("mle_not_converged")
        refined = _entry(*theta) if l > 0 else _entry(theta[0])
        out.append(
            PathEstimate(
                path=l,
                coarse=coarse,
                refined=refined,
                gain=complex(rho),
                residual_coarse=info["residual_coarse"],
                residual_refined=info["residual_refined"],
                nfev=info["nfev"],
                converged=bool(info["converged"]),
                flags=flags,
            )
        )
    return ChannelEstimate(out)


def prior_windows(scenario: Scenario, prior_mean, sigma: float, n_draws: int = 256, seed: int = 0) -> dict:
    """Spatial-frequency search windows from a Gaussian UE prior.

    Positions are drawn within ``+-3 sigma`` per axis and mapped through the
    geometry; windows are the resulting ranges clipped to ``[-1, 1)``.
    """
    rng = np.random.default_rng(seed)
    m = np.asarray(prior_mean, dtype=float)
    draws = m[None, :6] + sigma * rng.uniform(-3.0, 3.0, (n_draws, 6))
    draws = np.vstack([m[None, :6], draws])
    out = {}
    for l, a in enumerate(scenario.anchors, start=1):
        rot = a.rotation
        ut = draws[:, :3] - a.position
        ur = draws[:, 3:6] - a.position
        t = (ut / np.linalg.norm(ut, axis=1, keepdims=True) + ur / np.linalg.norm(ur, axis=1, keepdims=True)) @ rot
        lo, hi = t.min(axis=0), t.max(axis=0)
        out[l] = tuple(
            (float(np.clip(lo[c], -1.0, 1.0)), float(np.clip(hi[c], -1.0, 1.0))) for c in (1, 2)
        )
    return out
