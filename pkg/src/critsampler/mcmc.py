"""Markov chain baselines: Metropolis, heat bath, Wolff, Swendsen-Wang,
autocorrelation analysis and annealed importance sampling.

The inner loops are compiled with numba and draw from the caller's
``numpy.random.Generator`` so chains are reproducible from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import logsumexp

from .lattice import LatticeSpec, energy, magnetization
from .rng import split

METHODS = ("metropolis", "heatbath", "wolff", "swendsen-wang")


class DegenerateSeriesError(ValueError):
    """Raised when a time series has zero variance."""


# --------------------------------------------------------------------------
# compiled kernels; ``s`` is an (N, N) int8 array updated in place


@numba.njit(cache=True)
def _nbsum(s, y, x, N):
    return (
        s[y, (x + 1) % N]
        + s[y, (x - 1) % N]
        + s[(y + 1) % N, x]
        + s[(y - 1) % N, x]
    )


@numba.njit(cache=True)
def _metropolis(s, K, n_sweeps, rng):
    N = s.shape[0]
    accepted = 0
    for _ in range(n_sweeps):
        for y in range(N):
            for x in range(N):
                d = 2.0 * K * s[y, x] * _nbsum(s, y, x, N)
                if d <= 0.0 or rng.random() < math.exp(-d):
                    s[y, x] = -s[y, x]
                    accepted += 1
    return accepted


@numba.njit(cache=True)
def _heatbath(s, K, n_sweeps, rng):
    N = s.shape[0]
    for _ in range(n_sweeps):
        for y in range(N):
            for x in range(N):
                h = K * _nbsum(s, y, x, N)
                p_up = 1.0 / (1.0 + math.exp(-2.0 * h))
                s[y, x] = 1 if rng.random() < p_up else -1


@numba.njit(cache=True)
def _wolff(s, K, rng, stack, in_cluster):
    N = s.shape[0]
    p_add = 1.0 - math.exp(-2.0 * K)
    seed = rng.integers(0, N * N)
    y0, x0 = seed // N, seed % N
    spin = s[y0, x0]
    in_cluster[:, :] = False
    in_cluster[y0, x0] = True
    stack[0] = seed
    top = 1
    size = 1
    while top > 0:
        top -= 1
        v = stack[top]
        y, x = v // N, v % N
        for k in range(4):
            if k == 0:
                ny, nx = y, (x + 1) % N
            elif k == 1:
                ny, nx = y, (x - 1) % N
            elif k == 2:
                ny, nx = (y + 1) % N, x
            else:
                ny, nx = (y - 1) % N, x
            if not in_cluster[ny, nx] and s[ny, nx] == spin and rng.random() < p_add:
                in_cluster[ny, nx] = True
                stack[top] = ny * N + nx
                top += 1
                size += 1
    for y in range(N):
        for x in range(N):
            if in_cluster[y, x]:
                s[y, x] = -spin
    return size


@numba.njit(cache=True)
def _find(parent, v):
    root = v
    while parent[root] != root:
        root = parent[root]
    while parent[v] != root:
        nxt = parent[v]
        parent[v] = root
        v = nxt
    return root


@numba.njit(cache=True)
def _union(parent, rank, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra == rb:
        return
    if rank[ra] < rank[rb]:
        ra, rb = rb, ra
    parent[rb] = ra
    if rank[ra] == rank[rb]:
        rank[ra] += 1


@numba.njit(cache=True)
def _swendsen_wang(s, K, rng, parent, rank, flip):
    N = s.shape[0]
    V = N * N
    p_add = 1.0 - math.exp(-2.0 * K)
    for v in range(V):
        parent[v] = v
        rank[v] = 0
    for y in range(N):
        for x in range(N):
            v = y * N + x
            if s[y, (x + 1) % N] == s[y, x] and rng.random() < p_add:
                _union(parent, rank, v, y * N + (x + 1) % N)
            if s[(y + 1) % N, x] == s[y, x] and rng.random() < p_add:
                _union(parent, rank, v, ((y + 1) % N) * N + x)
    # one coin per cluster, drawn in order of first appearance of its root
    for v in range(V):
        flip[v] = -1
    n_clusters = 0
    for v in range(V):
        r = _find(parent, v)
        if flip[r] == -1:
            flip[r] = 1 if rng.random() < 0.5 else 0
            n_clusters += 1
        if flip[r] == 1:
            s[v // N, v % N] = -s[v // N, v % N]
    return n_clusters


@numba.njit(cache=True)
def _observe(s, J):
    N = s.shape[0]
    e = 0.0
    m = 0.0
    for y in range(N):
        for x in range(N):
            e -= J * s[y, x] * (s[y, (x + 1) % N] + s[(y + 1) % N, x])
            m += s[y, x]
    return e, abs(m) / (N * N)


@numba.njit(cache=True)
def _run(s, K, J, method, n_updates, rng, energies, mags, codes):
    N = s.shape[0]
    V = N * N
    stack = np.empty(V, dtype=np.int64)
    in_cluster = np.zeros((N, N), dtype=np.bool_)
    parent = np.empty(V, dtype=np.int64)
    rank = np.empty(V, dtype=np.int64)
    flip = np.empty(V, dtype=np.int64)
    accepted = 0
    for t in range(n_updates):
        if method == 0:
            accepted += _metropolis(s, K, 1, rng)
        elif method == 1:
            _heatbath(s, K, 1, rng)
        elif method == 2:
            accepted += _wolff(s, K, rng, stack, in_cluster)
        else:
            _swendsen_wang(s, K, rng, parent, rank, flip)
        e, m = _observe(s, J)
        energies[t] = e
        mags[t] = m
        if codes.shape[0] > 0:
            c = 0
            for y in range(N):
                for x in range(N):
                    c = 2 * c + (1 if s[y, x] > 0 else 0)
            codes[t] = c
    return accepted


# --------------------------------------------------------------------------
# single-update API


def _grid(cfg, spec: LatticeSpec) -> np.ndarray:
    s = np.asarray(cfg)
    if s.shape != (spec.V,):
        raise ValueError(f"expected configuration of shape ({spec.V},), got {s.shape}")
    return s.astype(np.int8).reshape(spec.N, spec.N).copy()


def metropolis_sweep(cfg, spec: LatticeSpec, rng: np.random.Generator):
    """One raster-order sweep of single-spin Metropolis updates.

    Returns ``(new_cfg, acceptance_rate)``.
    """
    s = _grid(cfg, spec)
    acc = _metropolis(s, spec.K, 1, rng)
    return s.ravel(), acc / spec.V


def heatbath_sweep(cfg, spec: LatticeSpec, rng: np.random.Generator) -> np.ndarray:
    """One raster-order sweep resampling each spin from ``sigmoid(2h)``."""
    s = _grid(cfg, spec)
    _heatbath(s, spec.K, 1, rng)
    return s.ravel()


def wolff_update(cfg, spec: LatticeSpec, rng: np.random.Generator):
    """Grow and flip one Wolff cluster. Returns ``(new_cfg, cluster_size)``."""
    s = _grid(cfg, spec)
    stack = np.empty(spec.V, dtype=np.int64)
    in_cluster = np.zeros((spec.N, spec.N), dtype=np.bool_)
    size = _wolff(s, spec.K, rng, stack, in_cluster)
    return s.ravel(), int(size)


def swendsen_wang_update(cfg, spec: LatticeSpec, rng: np.random.Generator) -> np.ndarray:
    """Place FK bonds, label clusters by union-find, flip each with prob. 1/2."""
    s = _grid(cfg, spec)
    V = spec.V
    _swendsen_wang(
        s,
        spec.K,
        rng,
        np.empty(V, dtype=np.int64),
        np.empty(V, dtype=np.int64),
        np.empty(V, dtype=np.int64),
    )
    return s.ravel()


def wolff_add_probability(K: float) -> float:
    return 1.0 - math.exp(-2.0 * K)


# --------------------------------------------------------------------------
# autocorrelation


def autocorrelation(series) -> np.ndarray:
    """Normalised autocorrelation function via FFT."""
    x = np.asarray(series, dtype=np.float64)
    x = x - x.mean()
    n = len(x)
    f = np.fft.rfft(x, n=2 * n)
    acf = np.fft.irfft(f * np.conjugate(f))[:n]
    if acf[0] <= 0:
        raise DegenerateSeriesError("series has zero variance")
    return acf / acf[0]


def tau_int(series, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Madras-Sokal automatic windowing.

    ``tau(W) = 1/2 + sum_{t=1..W} rho(t)``; the window is the smallest ``W``
    with ``W >= c * tau(W)``.
    """
    x = np.asarray(series, dtype=np.float64)
    if len(x) < 100:
        raise ValueError(f"need at least 100 points, got {len(x)}")
    if np.ptp(x) == 0:
        raise DegenerateSeriesError("series has zero variance")
    rho = autocorrelation(x)
    taus = 0.5 + np.cumsum(rho[1:])
    windows = np.arange(1, len(rho))
    ok = np.flatnonzero(windows >= c * taus)
    tau = taus[ok[0]] if len(ok) else taus[-1]
    return float(max(tau, 0.5))


# --------------------------------------------------------------------------
# chains


@dataclass(frozen=True)
class ChainStats:
    samples_kept: int
    burn_in: int
    tau_int: float
    acceptance_rate: float


@dataclass
class ChainResult:
    method: str
    energies: np.ndarray
    abs_mags: np.ndarray
    final: np.ndarray
    stats: ChainStats
    codes: np.ndarray | None = None

    def mean_and_error(self, name: str) -> tuple[float, float]:
        """Mean of ``energies`` or ``abs_mags`` with ``sqrt(2 tau var / n)`` error."""
        x = getattr(self, name)
        try:
            tau = tau_int(x)
        except DegenerateSeriesError:
            return float(x.mean()), 0.0
        return float(x.mean()), float(np.sqrt(2 * tau * x.var() / len(x)))


def run_chain(
    method: str,
    spec: LatticeSpec,
    n_updates: int,
    rng: np.random.Generator,
    cfg0=None,
    burn_in: int | None = None,
    record_states: bool = False,
) -> ChainResult:
    """Run ``burn_in + n_updates`` updates and record energy and ``|m|``.

    One update is a full sweep for the local algorithms and one cluster move
    for Wolff and Swendsen-Wang. With ``burn_in=None`` a pilot run of 1000
    updates estimates ``tau_int`` of the energy and the burn-in becomes
    ``max(1000, 10 * tau_int)``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    code = METHODS.index(method)
    if cfg0 is None:
        cfg0 = rng.choice(np.array([-1, 1], dtype=np.int8), size=spec.V)
    s = _grid(cfg0, spec)
    empty = np.empty(0, dtype=np.int64)

    if burn_in is None:
        pilot_e = np.empty(1000)
        _run(s, spec.K, spec.J, code, 1000, rng, pilot_e, np.empty(1000), empty)
        try:
            burn = max(1000, int(10 * tau_int(pilot_e)))
        except DegenerateSeriesError:
            burn = 1000
        extra = burn - 1000
    else:
        burn = extra = burn_in
    if extra > 0:
        _run(s, spec.K, spec.J, code, extra, rng, np.empty(extra), np.empty(extra), empty)

    energies = np.empty(n_updates)
    mags = np.empty(n_updates)
    codes = np.empty(n_updates if record_states else 0, dtype=np.int64)
    accepted = _run(s, spec.K, spec.J, code, n_updates, rng, energies, mags, codes)
    # heat bath and cluster moves are rejection-free
    acc = accepted / (n_updates * spec.V) if method == "metropolis" else 1.0
    try:
        tau = tau_int(energies)
    except (DegenerateSeriesError, ValueError):
        tau = 0.5
    return ChainResult(
        method=method,
        energies=energies,
        abs_mags=mags,
        final=s.ravel().copy(),
        stats=ChainStats(n_updates, burn, tau, float(acc)),
        codes=codes if record_states else None,
    )


def chain_samples(
    method: str, spec: LatticeSpec, M: int, rng: np.random.Generator, thin: int = 1
) -> np.ndarray:
    """``M`` configurations from an equilibrated chain, keeping every ``thin``-th."""
    code = METHODS.index(method)
    s = _grid(rng.choice(np.array([-1, 1], dtype=np.int8), size=spec.V), spec)
    empty = np.empty(0, dtype=np.int64)
    burn = 1000
    _run(s, spec.K, spec.J, code, burn, rng, np.empty(burn), np.empty(burn), empty)
    out = np.empty((M, spec.V), dtype=np.int8)
    for i in range(M):
        _run(s, spec.K, spec.J, code, thin, rng, np.empty(thin), np.empty(thin), empty)
        out[i] = s.ravel()
    return out


# --------------------------------------------------------------------------
# annealed importance sampling


@numba.njit(cache=True)
def _ais_chain(s, betas, J, rng):
    N = s.shape[0]
    V = N * N
    stack = np.empty(V, dtype=np.int64)
    in_cluster = np.zeros((N, N), dtype=np.bool_)
    logw = 0.0
    for t in range(1, betas.shape[0]):
        e, _ = _observe(s, J)
        logw -= (betas[t] - betas[t - 1]) * e
        K = betas[t] * J
        _heatbath(s, K, 1, rng)
        _wolff(s, K, rng, stack, in_cluster)
    return logw


def _logmeanexp(x: np.ndarray) -> float:
    return float(logsumexp(x) - np.log(len(x)))


def ais_log_weights(
    spec: LatticeSpec, n_temps: int, n_chains: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-chain AIS log-weights on a linear ``beta`` schedule from 0."""
    if n_temps < 2:
        raise ValueError("n_temps must be >= 2")
    if n_chains < 8:
        raise ValueError("n_chains must be >= 8")
    betas = np.linspace(0.0, spec.beta, n_temps + 1)
    out = np.empty(n_chains)
    for i, child in enumerate(split(rng, n_chains)):
        s0 = child.choice(np.array([-1, 1], dtype=np.int8), size=(spec.N, spec.N))
        out[i] = _ais_chain(s0, betas, spec.J, child)
    return out


def ais_logZ(
    spec: LatticeSpec, n_temps: int, n_chains: int, rng: np.random.Generator
) -> tuple[float, float]:
    """AIS estimate of ``log Z`` with a jackknife standard error over chains.

    Each temperature applies one heat-bath sweep and one Wolff update.
    """
    logw = ais_log_weights(spec, n_temps, n_chains, rng)
    if not np.any(np.isfinite(logw)):
        raise FloatingPointError("all AIS weights are degenerate")
    base = spec.V * np.log(2.0)
    est = base + _logmeanexp(logw)
    n = len(logw)
    loo = np.array([_logmeanexp(np.delete(logw, i)) for i in range(n)])
    stderr = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return float(est), stderr


def observables(configs, spec: LatticeSpec) -> tuple[np.ndarray, np.ndarray]:
    return energy(configs, spec), magnetization(configs)
