"""RIS phase-profile construction and power control.

Profiles are built on a base of ``G~ = G / Gamma`` transmissions and expanded
with a time-orthogonal block code so that the LOS path and every RIS path can be
separated linearly at the receiver. Power control only ever assigns a vector of
length ``G~`` that is tiled over the ``Gamma`` blocks; this periodicity is what
keeps the separation exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import wavenumber
from .crb import SingularFimError, state_fim_terms, sym_inv
from .geometry import local_direction
from .scenario import RisAnchor, Scenario, element_positions

KINDS = ("random", "dir", "dir_der")
GAMMA_BRACKET = (1e-2, 1e2)


class CodebookError(ValueError):
    pass


@dataclass
class PriorState:
    """Gaussian prior on ``s_N = [p_T, p_R, B]``.

    The covariance may be singular (zero variance gives deterministic
    samples) but must be symmetric positive semidefinite.
    """

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(7)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape == ():
            cov = float(cov) * np.eye(7)
        if cov.shape != (7, 7):
            raise CodebookError("prior covariance must be 7x7")
        if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise CodebookError("prior covariance must be symmetric")
        w = np.linalg.eigvalsh(cov)
        if w.min() < -1e-12 * max(1.0, w.max()):
            raise CodebookError(f"prior covariance is not positive semidefinite (min eigenvalue {w.min():.3g})")
        self.covariance = cov

    @classmethod
    def isotropic(cls, scenario: Scenario, sigma: float) -> "PriorState":
        mean = np.concatenate([scenario.tx, scenario.rx, [scenario.radio.clock_offset_m]])
        return cls(mean, sigma**2 * np.eye(7))

    def sample(self, rng, n: int) -> np.ndarray:
        w, v = np.linalg.eigh(self.covariance)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return self.mean + rng.standard_normal((n, 7)) @ root.T


@dataclass
class Codebook:
    """Per-RIS ``N x G`` unit-modulus profiles with their time-orthogonal code.

    ``roles`` labels each base slot: ``random``, ``dir``, ``der_xi``,
    ``der_zeta`` or ``extra`` (a DIR beam filling a slot left over by triplets).
    ``samples`` holds the prior draws the beams were steered at.
    """

    profiles: tuple
    blocks: np.ndarray
    kind: str = "random"
    roles: tuple = ()
    samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))

    @property
    def block_count(self) -> int:
        return self.blocks.shape[0]

    @property
    def n_transmissions(self) -> int:
        return self.profiles[0].shape[1]

    @property
    def base_length(self) -> int:
        return self.n_transmissions // self.block_count

    def base(self, anchor: int) -> np.ndarray:
        """Base profiles of RIS ``anchor`` (1-based), ``N x G~``."""
        return self.profiles[anchor - 1][:, : self.base_length]


def orthogonal_block_matrix(n_blocks: int, n_ris: int) -> np.ndarray:
    """First ``L + 1`` columns of the ``Gamma``-point DFT matrix (unnormalized)."""
    if n_blocks < n_ris + 1:
        raise CodebookError(f"need at least L+1 = {n_ris + 1} blocks, got {n_blocks}")
    i = np.arange(n_blocks)[:, None]
    l = np.arange(n_ris + 1)[None, :]
    return np.exp(-2j * np.pi * i * l / n_blocks)


def expand_orthogonal(base, blocks, kind="random", roles=(), samples=None) -> Codebook:
    """Tile base profiles over the blocks, column ``i G~ + g`` = ``conj(b[i, l]) * base[:, g]``."""
    blocks = np.asarray(blocks)
    base = [np.asarray(b, dtype=complex) for b in base]
    if blocks.shape[1] != len(base) + 1:
        raise CodebookError("block matrix needs one column per RIS plus one for LOS")
    profiles = tuple(
        np.concatenate([np.conj(blocks[i, l]) * b for i in range(blocks.shape[0])], axis=1)
        for l, b in enumerate(base, start=1)
    )
    return Codebook(
        profiles=profiles,
        blocks=blocks,
        kind=kind,
        roles=tuple(roles) if roles else ("random",) * base[0].shape[1],
        samples=np.zeros((0, 7)) if samples is None else np.asarray(samples),
    )


def random_codebook(anchor: RisAnchor, base_length: int, rng) -> np.ndarray:
    return np.exp(1j * rng.uniform(0.0, 2 * np.pi, (anchor.n_elements, base_length)))


def _sum_direction(anchor, p_t, p_r):
    return local_direction(p_t, anchor.position, anchor.rotation) + local_direction(
        p_r, anchor.position, anchor.rotation
    )


def dir_beam(anchor: RisAnchor, p_t, p_r, carrier_freq: float, spacing: float | None = None) -> np.ndarray:
    """Conjugate (energy-maximizing) beam towards the TX-RIS-RX bounce."""
    z = element_positions(anchor, spacing)
    t = _sum_direction(anchor, p_t, p_r)
    return np.exp(-1j * wavenumber(carrier_freq) * (z @ t))


def _project_unit(w):
    amp = np.abs(w)
    out = np.ones_like(w)
    ok = amp >= 1e-12
    out[ok] = w[ok] / amp[ok]
    return out


def der_beams(anchor: RisAnchor, p_t, p_r, carrier_freq: float, spacing: float | None = None):
    """Derivative beams along the local y and z element coordinates, unit-modulus projected."""
    z = element_positions(anchor, spacing)
    w1 = dir_beam(anchor, p_t, p_r, carrier_freq, spacing)
    kap = wavenumber(carrier_freq)
    return _project_unit(w1 * (-1j * kap * z[:, 1])), _project_unit(w1 * (-1j * kap * z[:, 2]))


def build_codebook(
    kind: str,
    scenario: Scenario,
    prior: PriorState | None = None,
    n_blocks: int | None = None,
    rng=None,
) -> Codebook:
    """Random, DIR or DIR+DER codebook, expanded to all ``G`` transmissions.

    DIR+DER uses ``G~ // 3`` prior samples, each contributing a
    (DIR, DER-y, DER-z) triplet; leftover slots get DIR beams at extra samples.
    """
    if kind not in KINDS:
        raise CodebookError(f"unknown codebook kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng(scenario.seed) if rng is None else rng
    n_blocks = scenario.n_blocks if n_blocks is None else n_blocks
    g = scenario.radio.n_transmissions
    if g % n_blocks:
        raise CodebookError(f"G={g} is not divisible by {n_blocks} blocks")
    gt = g // n_blocks
    blocks = orthogonal_block_matrix(n_blocks, scenario.n_anchors)
    if kind == "random":
        base = [random_codebook(a, gt, rng) for a in scenario.anchors]
        return expand_orthogonal(base, blocks, "random")
    if prior is None:
        raise CodebookError(f"{kind} codebook needs a prior")
    fc = scenario.radio.carrier_freq_hz
    if kind == "dir":
        samples = prior.sample(rng, gt)
        roles = ("dir",) * gt
        base = [
            np.stack([dir_beam(a, s[:3], s[3:6], fc, scenario.spacing(a)) for s in samples], axis=1)
            for a in scenario.anchors
        ]
        return expand_orthogonal(base, blocks, "dir", roles, samples)
    n_trip, n_extra = divmod(gt, 3)
    if n_trip == 0:
        raise CodebookError(f"base length {gt} too short for a DIR+DER triplet")
    samples = prior.sample(rng, n_trip + n_extra)
    roles = ("dir", "der_xi", "der_zeta") * n_trip + ("extra",) * n_extra
    base = []
    for a in scenario.anchors:
        sp = scenario.spacing(a)
        cols = []
        for s in samples[:n_trip]:
            cols.append(dir_beam(a, s[:3], s[3:6], fc, sp))
            cols.extend(der_beams(a, s[:3], s[3:6], fc, sp))
        for s in samples[n_trip:]:
            cols.append(dir_beam(a, s[:3], s[3:6], fc, sp))
        base.append(np.stack(cols, axis=1))
    return expand_orthogonal(base, blocks, "dir_der", roles, samples)


def power_vector_from_gamma(gamma_p: float, codebook: Codebook) -> np.ndarray:
    """Power vector ``delta`` (length ``G``) for a DER-to-DIR amplitude ratio ``gamma_p``.

    Each triplet gets ``sqrt(3) / sqrt(1 + 2 gamma^2)`` on its DIR beam and
    ``gamma`` times that on both DER beams, so the triplet keeps the energy of
    three unit slots; all other slots keep unit power.
    """
    if gamma_p < 0:
        raise CodebookError("gamma_p must be nonnegative")
    scale = np.sqrt(3.0 / (1.0 + 2.0 * gamma_p**2))
    coef = {"dir": scale, "der_xi": gamma_p * scale, "der_zeta": gamma_p * scale}
    if codebook.kind != "dir_der":
        coef = {}
    base = np.array([coef.get(r, 1.0) for r in codebook.roles])
    return np.tile(base, codebook.block_count)


# --- optimization ------------------------------------------------------------

def _slot_terms(scenario: Scenario, codebook: Codebook, samples) -> np.ndarray:
    """State-FIM contributions per base slot and sample, shape ``(S, G~, n, n)``."""
    gt, nb = codebook.base_length, codebook.block_count
    out = []
    for s in np.atleast_2d(samples):
        terms = state_fim_terms(scenario, codebook, s[:3], s[3:6], s[6])
        out.append(terms.reshape(nb, gt, *terms.shape[1:]).sum(axis=0))
    return np.array(out)


class _Objective:
    """Mean squared receiver PEB over prior samples as a function of slot powers."""

    def __init__(self, slot_terms):
        # samples that are degenerate even under uniform power carry no usable
        # information about the allocation and are left out
        keep = []
        for t in slot_terms:
            try:
                sym_inv(t.sum(axis=0))
                keep.append(True)
            except SingularFimError:
                keep.append(False)
        keep = np.array(keep, dtype=bool)
        if not keep.any():
            raise CodebookError(
                "state FIM is singular at every prior sample; "
                "check for UEs on an anchor plane or coincident positions"
            )
        self.terms = slot_terms[keep]
        self.n_dropped = int((~keep).sum())

    def _inverses(self, gamma_t):
        fims = np.einsum("g,sgij->sij", gamma_t, self.terms)
        return [sym_inv(f) for f in fims]

    def value(self, gamma_t) -> float:
        try:
            invs = self._inverses(gamma_t)
        except SingularFimError:
            return np.inf
        return float(np.mean([np.trace(c[3:6, 3:6]) for c in invs]))

    def value_grad(self, gamma_t):
        try:
            invs = self._inverses(gamma_t)
        except SingularFimError:
            return np.inf, None
        val = float(np.mean([np.trace(c[3:6, 3:6]) for c in invs]))
        grad = np.zeros_like(gamma_t)
        for c, t in zip(invs, self.terms):
            m = c[:, 3:6]
            grad -= np.einsum("gij,ij->g", t, m @ m.T)
        return val, grad / len(invs)


def _default_samples(codebook: Codebook, prior: PriorState | None):
    if len(codebook.samples):
        return codebook.samples
    if prior is None:
        raise CodebookError("no prior samples available")
    return prior.mean[None]


def gamma_objective(scenario, codebook, samples=None, prior=None):
    """Callable ``gamma_p -> mean PEB_R^2`` over the given prior samples."""
    samples = _default_samples(codebook, prior) if samples is None else samples
    obj = _Objective(_slot_terms(scenario, codebook, samples))
    gt = codebook.base_length

    def f(gamma_p):
        return obj.value(power_vector_from_gamma(gamma_p, codebook)[:gt] ** 2)

    return f


def optimize_gamma(scenario: Scenario, codebook: Codebook, prior=None, samples=None, tol: float = 1e-4):
    """Best scalar DER/DIR ratio by golden-section search on ``log gamma``.

    Returns ``(gamma_p, objective)``; the result is never worse than
    ``gamma_p = 0`` or ``gamma_p = 1``.
    """
    f = gamma_objective(scenario, codebook, samples, prior)
    lo, hi = np.log(GAMMA_BRACKET[0]), np.log(GAMMA_BRACKET[1])
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(np.exp(c)), f(np.exp(d))
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(np.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(np.exp(d))
    cands = [(f(0.0), 0.0), (f(1.0), 1.0), (fc, np.exp(c)), (fd, np.exp(d))]
    best = min(cands, key=lambda t: t[0])
    if not np.isfinite(best[0]):
        raise CodebookError(
            "state FIM is singular for every gamma_p at the prior samples; "
            "check for UEs on an anchor plane or coincident positions"
        )
    return float(best[1]), float(best[0])


def project_simplex(v, total: float) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum(x) = total}`` (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass
class PowerAllocation:
    delta: np.ndarray
    gamma: np.ndarray  # base-slot powers, sums to G~
    objective: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def optimize_power_allocation(
    scenario: Scenario,
    codebook: Codebook,
    prior=None,
    samples=None,
    max_iter: int = 500,
    tol: float = 1e-10,
    start=None,
    callback=None,
) -> PowerAllocation:
    """Per-slot power allocation minimizing the mean squared receiver PEB.

    Projected gradient with Armijo backtracking over ``{gamma >= 0, sum = G~}``
    on the base slots (tiled over blocks, hence ``sum = G`` overall). The start
    point is the better of uniform power and the best scalar ``gamma_p``
    allocation, so the result never does worse than either. ``callback(x)``
    is called with the starting point and every accepted iterate.
    """
    samples = _default_samples(codebook, prior) if samples is None else samples
    obj = _Objective(_slot_terms(scenario, codebook, samples))
    gt = codebook.base_length
    if start is None:
        cands = [np.ones(gt)]
        if codebook.kind == "dir_der":
            gp, _ = optimize_gamma(scenario, codebook, samples=samples)
            cands.append(power_vector_from_gamma(gp, codebook)[:gt] ** 2)
        start = min(cands, key=obj.value)
    x = project_simplex(np.asarray(start, dtype=float), gt)
    fx, gx = obj.value_grad(x)
    if gx is None:
        raise CodebookError("state FIM is singular at the starting power allocation")
    history = [fx]
    if callback is not None:
        callback(x.copy())
    step = 1.0 / max(np.abs(gx).max(), 1e-300)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        while True:
            y = project_simplex(x - step * gx, gt)
            fy, gy = obj.value_grad(y)
            if gy is not None and fy <= fx + 1e-4 * gx @ (y - x):
                break
            step *= 0.5
            if step < 1e-30:
                break
        if gy is None or step < 1e-30:
            converged = True
            break
        s, r = y - x, gy - gx
        done = np.abs(s).max() <= tol * gt or fx - fy <= tol * abs(fx)
        x, fx, gx = y, fy, gy
        history.append(fx)
        if callback is not None:
            callback(x.copy())
        if done:
            converged = True
            break
        sr = s @ r
        step = (s @ s) / sr if sr > 0 else step * 2.0
    if not converged:
        warnings.warn("power allocation did not converge; returning the best iterate", RuntimeWarning)
    delta = np.sqrt(np.tile(x, codebook.block_count))
    return PowerAllocation(delta, x, fx, it, converged, history)


# --- export / import ---------------------------------------------------------

def save_codebook(codebook: Codebook, path) -> None:
    """Write per-RIS phase matrices (radians). ``.npz`` is binary, anything else text."""
    path = Path(path)
    phases = np.stack([np.angle(p) for p in codebook.profiles])
    if path.suffix == ".npz":
        np.savez(
            path,
            phases=phases,
            blocks=codebook.blocks,
            kind=codebook.kind,
            roles=np.array(codebook.roles),
            samples=codebook.samples,
        )
        return
    n_ris, n, g = phases.shape
    header = f"kind={codebook.kind} n_ris={n_ris} n_elements={n} n_transmissions={g} blocks={codebook.block_count}"
    header += "\nroles=" + ",".join(codebook.roles)
    np.savetxt(path, phases.reshape(n_ris * n, g), header=header, fmt="%.17g")


def load_codebook(path) -> Codebook:
    path = Path(path)
    if path.suffix == ".npz":
        d = np.load(path)
        return Codebook(
            profiles=tuple(np.exp(1j * p) for p in d["phases"]),
            blocks=d["blocks"],
            kind=str(d["kind"]),
            roles=tuple(str(r) for r in d["roles"]),
            samples=d["samples"],
        )
    meta, roles = {}, ()
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if body.startswith("roles="):
                roles = tuple(body[6:].split(","))
            else:
                meta.update(kv.split("=", 1) for kv in body.split())
    flat = np.loadtxt(path, ndmin=2)
    n_ris, n = int(meta["n_ris"]), int(meta["n_elements"])
    phases = flat.reshape(n_ris, n, -1)
    return Codebook(
        profiles=tuple(np.exp(1j * p) for p in phases),
        blocks=orthogonal_block_matrix(int(meta["blocks"]), n_ris),
        kind=meta["kind"],
        roles=roles,
    )
