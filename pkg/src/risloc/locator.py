"""UE positioning from estimated channel parameters.

A 3D grid over candidate TX positions is scored by mapping each candidate
through the RIS spatial frequencies to RX bearing lines, triangulating the RX,
recovering the clock offset and measuring the delay mismatch. The best
candidate seeds a nonlinear least-squares refinement of ``(p_T, p_R, B)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import least_squares

from .crb import eta_n, eta_n_jacobian
from .scenario import Scenario


class InfeasibleCandidate(ValueError):
    """The candidate TX position admits no RX direction for some anchor."""


@dataclass
class SearchSpec:
    center: np.ndarray
    half_extent: float = 1.0
    step: float = 0.2
    pair_weights: dict | None = None  # {(i, j): w_ij}, 0-based anchors, sums to 1
    path_weights: np.ndarray | None = None  # w_l per RIS

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.step <= 0:
            raise ValueError("grid step must be positive")
        if self.half_extent < 0:
            raise ValueError("half extent must be nonnegative")
        if self.pair_weights is not None:
            total = sum(self.pair_weights.values())
            if not np.isclose(total, 1.0):
                raise ValueError(f"pair weights must sum to 1, got {total}")

    def axis(self) -> np.ndarray:
        n = int(round(self.half_extent / self.step))
        return np.arange(-n, n + 1) * self.step

    def candidates(self) -> np.ndarray:
        a = self.axis()
        gx, gy, gz = np.meshgrid(a, a, a, indexing="ij")
        return self.center + np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass
class PositionFix:
    tx: np.ndarray
    rx: np.ndarray
    clock_offset: float
    cost: float
    stage: str  # coarse | refined
    flags: list = field(default_factory=list)
    nfev: int = 0

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.tx, self.rx, [self.clock_offset]])

    def to_dict(self) -> dict:
        return {
            "tx_m": [float(v) for v in self.tx],
            "rx_m": [float(v) for v in self.rx],
            "clock_offset_m": float(self.clock_offset),
            "cost": float(self.cost),
            "stage": self.stage,
            "flags": list(self.flags),
            "nfev": int(self.nfev),
        }


def _split_eta(scenario: Scenario, eta):
    """``(d0 or None, d[L], xi[L], zeta[L])`` from an ``eta_N`` vector."""
    eta = np.asarray(eta, dtype=float)
    off = 0 if scenario.los_blocked else 1
    d0 = None if scenario.los_blocked else eta[0]
    ris = eta[off:].reshape(scenario.n_anchors, 3)
    return d0, ris[:, 0], ris[:, 1], ris[:, 2]


def candidate_rx_direction(anchor, tx_candidate, sf) -> np.ndarray:
    """Local unit RX direction implied by a TX candidate and ``(xi, zeta)``.

    Raises :class:`InfeasibleCandidate` when the implied direction would need
    a negative radicand (no real forward-facing solution).
    """
    diff = np.asarray(tx_candidate, dtype=float) - anchor.position
    dist = np.linalg.norm(diff)
    if dist == 0.0:
        raise InfeasibleCandidate("candidate coincides with the anchor")
    t_t = anchor.rotation.T @ (diff / dist)
    t2, t3 = sf[0] - t_t[1], sf[1] - t_t[2]
    rad = 1.0 - t2**2 - t3**2
    if rad < 0:
        raise InfeasibleCandidate("candidate infeasible for this anchor")
    return np.array([np.sqrt(rad), t2, t3])


def _closest_on_first(p_i, t_i, p_j, t_j):
    """Point on line ``i`` closest to line ``j``; ``None`` for (near-)parallel lines."""
    if np.linalg.norm(np.cross(t_i, t_j)) < 1e-9:
        return None
    a = np.stack([t_i, -t_j], axis=1)
    r, *_ = np.linalg.lstsq(a, p_j - p_i, rcond=None)
    return p_i + r[0] * t_i


def default_pair_weights(n: int) -> dict:
    pairs = list(combinations(range(n), 2))
    return {p: 1.0 / len(pairs) for p in pairs}


def triangulate_rx(origins, directions, weights: dict | None = None) -> np.ndarray:
    """Weighted combination of pairwise closest points between bearing lines.

    For each pair ``(i, j)``, ``i < j``, the point on line ``i`` closest to
    line ``j`` is taken. Parallel pairs are skipped and the remaining weights
    renormalized.
    """
    origins = [np.asarray(o, dtype=float) for o in origins]
    directions = [np.asarray(t, dtype=float) for t in directions]
    weights = default_pair_weights(len(origins)) if weights is None else weights
    acc, wsum = np.zeros(3), 0.0
    for (i, j), w in weights.items():
        if w == 0:
            continue
        p = _closest_on_first(origins[i], directions[i], origins[j], directions[j])
        if p is None:
            continue
        acc += w * p
        wsum += w
    if wsum == 0:
        raise InfeasibleCandidate("all bearing-line pairs are parallel")
    return acc / wsum


def _batch_closest(p_i, t_i, p_j, t_j):
    """Vectorized closest point on lines ``i`` (rows) to lines ``j``; NaN when parallel."""
    cross = np.linalg.norm(np.cross(t_i, t_j), axis=-1)
    w0 = p_i - p_j
    a = np.einsum("...k,...k", t_i, t_i)
    b = np.einsum("...k,...k", t_i, t_j)
    c = np.einsum("...k,...k", t_j, t_j)
    d = np.einsum("...k,...k", t_i, w0)
    e = np.einsum("...k,...k", t_j, w0)
    den = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (b * e - c * d) / den
        out = p_i + s[..., None] * t_i
    out[cross < 1e-9] = np.nan
    return out


def candidate_costs(scenario: Scenario, eta, candidates, mode: str = "los", pair_weights=None, path_weights=None):
    """Cost, triangulated RX and clock offset for every TX candidate.

    Infeasible candidates get ``inf`` cost. Returns ``(cost, rx, b)``.
    """
    if mode not in ("los", "blocked"):
        raise ValueError("mode must be 'los' or 'blocked'")
    d0, d, xi, zeta = _split_eta(scenario, eta)
    if mode == "los" and d0 is None:
        raise ValueError("LOS mode needs a LOS delay estimate")
    if mode == "blocked" and scenario.n_anchors < 3:
        raise ValueError("blocked mode needs at least 3 RIS anchors")
    cand = np.atleast_2d(np.asarray(candidates, dtype=float))
    n_c, n_a = cand.shape[0], scenario.n_anchors
    feasible = np.ones(n_c, dtype=bool)
    origins = np.empty((n_a, 3))
    dirs = np.empty((n_c, n_a, 3))
    for l, a in enumerate(scenario.anchors):
        diff = cand - a.position
        dist = np.linalg.norm(diff, axis=1)
        feasible &= dist > 0
        t_t = (diff / np.where(dist > 0, dist, 1.0)[:, None]) @ a.rotation
        t2, t3 = xi[l] - t_t[:, 1], zeta[l] - t_t[:, 2]
        rad = 1.0 - t2**2 - t3**2
        feasible &= rad >= 0
        t_r = np.stack([np.sqrt(np.clip(rad, 0.0, None)), t2, t3], axis=1)
        dirs[:, l] = t_r @ a.rotation.T
        origins[l] = a.position
    weights = default_pair_weights(n_a) if pair_weights is None else pair_weights
    acc = np.zeros((n_c, 3))
    wsum = np.zeros(n_c)
    for (i, j), w in weights.items():
        if w == 0:
            continue
        p = _batch_closest(origins[i], dirs[:, i], origins[j], dirs[:, j])
        ok = np.all(np.isfinite(p), axis=1)
        acc[ok] += w * p[ok]
        wsum[ok] += w
    feasible &= wsum > 0
    rx = acc / np.where(wsum > 0, wsum, 1.0)[:, None]
    seg = np.stack([np.linalg.norm(cand - a.position, axis=1) + np.linalg.norm(rx - a.position, axis=1) for a in scenario.anchors], axis=1)
    if mode == "los":
        b = d0 - np.linalg.norm(rx - cand, axis=1)
        first = 0
    else:
        b = d[0] - seg[:, 0]
        first = 1
    pw = np.ones(n_a) if path_weights is None else np.asarray(path_weights, dtype=float)
    cost = np.sum(pw[first:] * np.abs(d[first:] - seg[:, first:] - b[:, None]), axis=1)
    cost[~feasible] = np.inf
    return cost, rx, b


def coarse_locate(scenario: Scenario, eta, spec: SearchSpec, mode: str | None = None) -> PositionFix:
    """Grid search over TX candidates; ties resolve to the lowest linear index."""
    mode = ("blocked" if scenario.los_blocked else "los") if mode is None else mode
    cand = spec.candidates()
    cost, rx, b = candidate_costs(scenario, eta, cand, mode, spec.pair_weights, spec.path_weights)
    if not np.any(np.isfinite(cost)):
        return PositionFix(spec.center.copy(), np.full(3, np.nan), np.nan, np.inf, "coarse", ["no_feasible_candidate"])
    i = int(np.argmin(cost))
    return PositionFix(cand[i], rx[i], float(b[i]), float(cost[i]), "coarse")


def _whitener(sigma, n):
    if sigma is None:
        return np.eye(n)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 1:
        sigma = np.diag(sigma)
    return np.linalg.cholesky(np.linalg.inv(sigma)).T


def refinement_cost(scenario: Scenario, eta, state, sigma=None) -> float:
    w = _whitener(sigma, len(eta))
    r = w @ (np.asarray(eta) - eta_n(scenario, state[:3], state[3:6], state[6]))
    return float(r @ r)


def refine_locate(
    scenario: Scenario, coarse: PositionFix, eta, sigma=None, max_nfev: int = 100, xtol: float = 1e-10
) -> PositionFix:
    """Weighted nonlinear least squares on ``eta_hat - eta_N(s_N)`` from a coarse fix."""
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(coarse.state)):
        return PositionFix(coarse.tx, coarse.rx, coarse.clock_offset, np.inf, "coarse", coarse.flags + ["coarse_failed"])
    w = _whitener(sigma, eta.size)

    def fun(s):
        return w @ (eta - eta_n(scenario, s[:3], s[3:6], s[6]))

    def jac(s):
        return -w @ eta_n_jacobian(scenario, s[:3], s[3:6], s[6])

    s0 = coarse.state
    c0 = refinement_cost(scenario, eta, s0, sigma)
    try:
        sol = least_squares(fun, s0, jac=jac, method="trf", xtol=xtol, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
    except (ValueError, np.linalg.LinAlgError):
        return PositionFix(coarse.tx, coarse.rx, coarse.clock_offset, c0, "coarse", coarse.flags + ["refine_failed"])
    c1 = float(2.0 * sol.cost)
    if not np.all(np.isfinite(sol.x)) or c1 > c0:
        return PositionFix(coarse.tx, coarse.rx, coarse.clock_offset, c0, "coarse", coarse.flags + ["refine_diverged"])
    flags = list(coarse.flags)
    if sol.status <= 0:
        flags.append("refine_max_iter")
    s = sol.x
    return PositionFix(s[:3], s[3:6], float(s[6]), c1, "refined", flags, int(sol.nfev))


def cost_landscape(scenario: Scenario, eta, xs, ys, z: float, mode: str | None = None, **kw) -> np.ndarray:
    """Coarse-search cost over a horizontal TX slice, shape ``(len(ys), len(xs))``."""
    mode = ("blocked" if scenario.los_blocked else "los") if mode is None else mode
    gx, gy = np.meshgrid(xs, ys)
    cand = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
    cost, _, _ = candidate_costs(scenario, eta, cand, mode, **kw)
    return cost.reshape(gx.shape)


def locate(scenario: Scenario, eta, spec: SearchSpec, sigma=None, mode: str | None = None):
    """Coarse search followed by refinement; returns ``(coarse, refined)``."""
    coarse = coarse_locate(scenario, eta, spec, mode)
    return coarse, refine_locate(scenario, coarse, eta, sigma)
