"""Importance-sampling estimators for samplers with exact ``log q``.

Everything is computed from log-weights ``log w = -beta*H - log q`` with a
max-shift before exponentiating.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

DEFAULT_BOOTSTRAP = 1000


@dataclass(frozen=True)
class WeightedBatch:
    """Independent samples with their sampling log-probability and energy.

    ``beta`` multiplies ``energy`` in the target density; ``configs`` may be
    omitted when only the weights are needed.
    """

    logq: np.ndarray
    energy: np.ndarray
    beta: float
    N: int
    configs: np.ndarray | None = None

    def __post_init__(self):
        logq = np.asarray(self.logq, dtype=np.float64)
        energy = np.asarray(self.energy, dtype=np.float64)
        if logq.shape != energy.shape or logq.ndim != 1:
            raise ValueError("logq and energy must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(logq)) and np.all(np.isfinite(energy))):
            raise ValueError("non-finite logq or energy in batch")
        object.__setattr__(self, "logq", logq)
        object.__setattr__(self, "energy", energy)

    @property
    def M(self) -> int:
        return len(self.logq)

    def subset(self, idx) -> "WeightedBatch":
        cfg = None if self.configs is None else self.configs[idx]
        return WeightedBatch(self.logq[idx], self.energy[idx], self.beta, self.N, cfg)


def log_weights(batch: WeightedBatch, beta: float | None = None) -> np.ndarray:
    beta = batch.beta if beta is None else beta
    if batch.M < 1:
        raise ValueError("empty batch")
    return -beta * batch.energy - batch.logq


def _logmeanexp(logw: np.ndarray, axis=None) -> np.ndarray:
    n = logw.shape[-1] if axis is not None else logw.size
    return logsumexp(logw, axis=axis) - np.log(n)


def bootstrap(
    data,
    B: int = DEFAULT_BOOTSTRAP,
    rng: np.random.Generator | None = None,
    statistic: Callable = np.mean,
) -> float:
    """Nonparametric bootstrap standard error of ``statistic``.

    ``data`` is an array or a tuple of equal-length arrays resampled jointly;
    ``statistic`` receives the resampled array(s) as positional arguments.
    """
    if B < 100:
        raise ValueError("bootstrap needs B >= 100 resamples")
    arrays = data if isinstance(data, tuple) else (data,)
    arrays = tuple(np.asarray(a) for a in arrays)
    n = len(arrays[0])
    if n < 2:
        raise ValueError("bootstrap needs at least two data points")
    if any(len(a) != n for a in arrays):
        raise ValueError("jointly resampled arrays differ in length")
    rng = np.random.default_rng(0) if rng is None else rng
    stats = np.empty(B)
    for b in range(B):
        idx = rng.integers(0, n, size=n)
        stats[b] = statistic(*(a[idx] for a in arrays))
    return float(np.std(stats, ddof=1))


def log_z_hat(batch: WeightedBatch, beta: float | None = None) -> float:
    return float(_logmeanexp(log_weights(batch, beta)))


def free_energy(
    batch: WeightedBatch,
    beta: float | None = None,
    B: int = DEFAULT_BOOTSTRAP,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """``F = -log Z_hat / beta`` with a bootstrap standard error."""
    beta = batch.beta if beta is None else beta
    if batch.M < 100:
        raise ValueError("free energy estimate needs at least 100 samples")
    if beta == 0:
        raise ValueError("free energy undefined at beta = 0")
    logw = log_weights(batch, beta)
    if not np.any(np.isfinite(logw)):
        raise FloatingPointError("all importance weights vanish")
    F = -float(_logmeanexp(logw)) / beta
    err = bootstrap(logw, B, rng, lambda lw: -_logmeanexp(lw) / beta)
    return F, err


def ess_from_logw(logw: np.ndarray) -> float:
    logw = np.asarray(logw, dtype=np.float64)
    if logw.size < 2:
        raise ValueError("ESS needs at least two samples")
    return float(np.exp(2 * logsumexp(logw) - logsumexp(2 * logw) - np.log(logw.size)))


def ess(batch: WeightedBatch, beta: float | None = None) -> float:
    """Normalised effective sample size ``(sum w)^2 / (M sum w^2)`` in [0, 1]."""
    return ess_from_logw(log_weights(batch, beta))


def emdm(batch: WeightedBatch, logZ_ref: float, beta: float | None = None) -> float:
    """Mean of ``w / Z_ref`` over samples of q; below 1 when q misses mass."""
    if logZ_ref is None or not np.isfinite(logZ_ref):
        raise ValueError("emdm needs a finite reference logZ")
    return float(np.exp(_logmeanexp(log_weights(batch, beta)) - logZ_ref))


def emdm_stderr(batch: WeightedBatch, logZ_ref: float, beta: float | None = None) -> float:
    """Standard error of :func:`emdm` from the sample spread of ``w / Z_ref``."""
    logw = log_weights(batch, beta)
    shift = logw.max()
    r = np.exp(logw - shift)
    return float(np.std(r, ddof=1) / np.sqrt(len(r)) * np.exp(shift - logZ_ref))


def _self_normalized(values: np.ndarray, logw: np.ndarray) -> float:
    p = np.exp(logw - logsumexp(logw))
    # anchored so that a constant observable comes back exactly
    return float(values[0] + p @ (values - values[0]))


def reweighted_observable(
    batch: WeightedBatch,
    values,
    beta: float | None = None,
    B: int = DEFAULT_BOOTSTRAP,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Self-normalised importance estimate of ``<values>`` with bootstrap error."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (batch.M,):
        raise ValueError(f"expected {batch.M} observable values, got shape {values.shape}")
    logw = log_weights(batch, beta)
    est = _self_normalized(values, logw)
    err = bootstrap((values, logw), B, rng, _self_normalized)
    return est, err


def energy_per_site(batch: WeightedBatch) -> np.ndarray:
    return batch.energy / (batch.N * batch.N)


def abs_magnetization(batch: WeightedBatch) -> np.ndarray:
    if batch.configs is None:
        raise ValueError("batch carries no configurations")
    return np.abs(batch.configs.astype(np.float64).mean(axis=-1))


def imh_chain(logw: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Independence Metropolis-Hastings over a stream of proposals.

    Proposal ``t`` replaces the current state with probability
    ``min(1, w_t / w_current)``; the first proposal is always taken. Returns
    the index of the current state after each proposal and the acceptance
    rate over proposals ``1..T-1``.
    """
    logw = np.asarray(logw, dtype=np.float64)
    T = len(logw)
    if T < 2:
        raise ValueError("chain needs at least two proposals")
    logu = np.log(rng.random(T))
    chain = np.empty(T, dtype=np.int64)
    cur = 0
    chain[0] = 0
    accepted = 0
    for t in range(1, T):
        if logu[t] < logw[t] - logw[cur]:
            cur = t
            accepted += 1
        chain[t] = cur
    return chain, accepted / (T - 1)


def neural_mc(
    sampler: Callable[[int, np.random.Generator], WeightedBatch],
    chain_length: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Run an independence MH chain with proposals from ``sampler``.

    Returns the chain configurations ``(chain_length, V)`` and the acceptance
    rate.
    """
    proposal_rng, accept_rng = rng.spawn(2)
    batch = sampler(chain_length, proposal_rng)
    if batch.configs is None:
        raise ValueError("sampler must return configurations")
    idx, acc = imh_chain(log_weights(batch), accept_rng)
    return batch.configs[idx], acc
