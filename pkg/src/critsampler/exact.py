"""Exact finite-lattice results: brute-force enumeration, the Kaufman torus
solution and the block-spin coupling recursions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .lattice import LatticeSpec, all_configs, energy, magnetization

MAX_ENUMERATE_N = 4
MAX_KAUFMAN_N = 256


@dataclass(frozen=True)
class ExactResult:
    N: int
    beta: float
    logZ: float
    free_energy: float
    energy_mean: float
    abs_magnetization_mean: float
    method: str

    @property
    def free_energy_per_site(self) -> float:
        return self.free_energy / (self.N * self.N)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["free_energy_per_site"] = self.free_energy_per_site
        return out


def _free_energy(logZ: float, beta: float) -> float:
    return -logZ / beta if beta != 0 else float("-inf")


def boltzmann_table(spec: LatticeSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All states with their energies and exact probabilities (``N <= 4``)."""
    if spec.N > MAX_ENUMERATE_N:
        raise ValueError(f"enumeration refused for N={spec.N} > {MAX_ENUMERATE_N}")
    states = all_configs(spec.V)
    H = energy(states, spec)
    logw = -spec.beta * H
    logp = logw - logsumexp(logw)
    return states, H, logp


def enumerate_exact(spec: LatticeSpec) -> ExactResult:
    """Sum over all ``2**(N*N)`` states; refuses ``N > 4``."""
    states, H, logp = boltzmann_table(spec)
    logZ = float(logsumexp(-spec.beta * H))
    p = np.exp(logp)
    return ExactResult(
        N=spec.N,
        beta=spec.beta,
        logZ=logZ,
        free_energy=_free_energy(logZ, spec.beta),
        energy_mean=float(p @ H),
        abs_magnetization_mean=float(p @ magnetization(states)),
        method="enumerate",
    )


def _log_2cosh(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x, -x)


def _log_abs_2sinh(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    with np.errstate(divide="ignore"):
        return a + np.log1p(-np.exp(-2.0 * a))


def exact_logZ(spec: LatticeSpec) -> float:
    """Kaufman's closed form for the ``N x N`` torus, accumulated in log domain.

    ``Z = 1/2 (2 sinh 2K)^(V/2) (Z1 + Z2 + Z3 + Z4)`` with the four products
    over ``gamma_k``, ``cosh gamma_k = cosh 2K coth 2K - cos(pi k / N)`` and
    the signed ``gamma_0 = 2K + ln tanh K``.
    """
    N = spec.N
    if N > MAX_KAUFMAN_N:
        raise ValueError(f"N={N} exceeds supported maximum {MAX_KAUFMAN_N}")
    K = abs(spec.K)  # bipartite lattice: J -> -J is a gauge symmetry for even N
    V = spec.V
    if K == 0.0:
        return V * np.log(2.0)

    k = np.arange(2 * N)
    c = np.cosh(2 * K) / np.tanh(2 * K) - np.cos(np.pi * k / N)
    gamma = np.arccosh(np.maximum(c, 1.0))
    gamma[0] = 2 * K + np.log(np.tanh(K))

    odd = 0.5 * N * gamma[1::2]
    even = 0.5 * N * gamma[0::2]
    logs = np.array(
        [
            _log_2cosh(odd).sum(),
            _log_abs_2sinh(odd).sum(),
            _log_2cosh(even).sum(),
            _log_abs_2sinh(even).sum(),
        ]
    )
    signs = np.array(
        [1.0, np.prod(np.sign(odd)), 1.0, np.prod(np.sign(even))]
    )
    total, sign = logsumexp(logs, b=signs, return_sign=True)
    if sign <= 0:
        raise FloatingPointError("Kaufman sum is non-positive")
    return float(-np.log(2.0) + 0.5 * V * np.log(2.0 * np.sinh(2 * K)) + total)


def exact_energy(spec: LatticeSpec, h: float = 1e-5) -> float:
    """``<H> = -d logZ / d beta`` by central differences of :func:`exact_logZ`."""
    up = exact_logZ(spec.with_beta(spec.beta + h))
    down = exact_logZ(spec.with_beta(spec.beta - h))
    return -(up - down) / (2 * h)


def exact_result(spec: LatticeSpec) -> ExactResult:
    """Closed-form result; ``abs_magnetization_mean`` only when enumerable.

    For enumerable sizes the energy comes from the enumeration rather than a
    finite difference.
    """
    logZ = exact_logZ(spec)
    absm = float("nan")
    e = None
    if spec.N <= MAX_ENUMERATE_N:
        enum = enumerate_exact(spec)
        absm, e = enum.abs_magnetization_mean, enum.energy_mean
    return ExactResult(
        N=spec.N,
        beta=spec.beta,
        logZ=logZ,
        free_energy=_free_energy(logZ, spec.beta),
        energy_mean=exact_energy(spec) if e is None else e,
        abs_magnetization_mean=absm,
        method="kaufman",
    )


def kadanoff_1d(K: float) -> tuple[float, float]:
    """1D decimation: returns ``(K', f)`` with ``K' = ln cosh(2K) / 2`` and
    ``f = 2 sqrt(cosh 2K)``."""
    c = np.cosh(2.0 * K)
    return float(0.5 * np.log(c)), float(2.0 * np.sqrt(c))


def kadanoff_2d_step(K: float) -> float:
    """``(3/8) ln cosh(4K)``: coupling one sqrt(2)-decimation coarser."""
    return float(0.375 * np.log(np.cosh(4.0 * K)))


def kadanoff_2d_terms(K: float) -> tuple[float, float, float]:
    """Nearest, next-nearest and plaquette couplings after one checkerboard
    decimation."""
    a = np.log(np.cosh(4.0 * K))
    b = np.log(np.cosh(2.0 * K))
    return float(a / 4), float(a / 8), float(a / 8 - b / 2)


def kadanoff_fixed_point(K0: float = 0.6, tol: float = 1e-13, max_iter: int = 100_000) -> float:
    """Non-trivial fixed point of :func:`kadanoff_2d_step`.

    The fixed point is repulsive under the forward map, so the inverse map
    ``K = arccosh(exp(8K'/3)) / 4`` is iterated instead.
    """
    K = K0
    for _ in range(max_iter):
        nxt = float(np.arccosh(np.exp(8.0 * K / 3.0)) / 4.0)
        if abs(nxt - K) < tol:
            return nxt
        K = nxt
    raise RuntimeError("fixed-point iteration did not converge")
