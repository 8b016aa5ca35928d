"""Multilevel heat-bath sampling over the block-spin partition.

Spins are drawn coarse to fine: the 2x2 coarsest block from its exact
nearest-neighbour Boltzmann law, then every level from independent heat-bath
conditionals with the renormalised coupling of that level. The returned
log-probability is exact, so samples can be reweighted to the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .lattice import LatticeSpec, LevelPartition, all_configs, coupling_schedule, energy


@dataclass(frozen=True)
class CouplingSchedule:
    K: np.ndarray

    @classmethod
    def from_spec(cls, spec: LatticeSpec) -> "CouplingSchedule":
        return cls(coupling_schedule(spec.K, spec.L))

    @property
    def L(self) -> int:
        return len(self.K) - 1


def coarse_log_table(K0: float) -> np.ndarray:
    """Log-probabilities of the 16 states of the 2x2 torus at coupling ``K0``.

    Indexed by :func:`critsampler.lattice.config_index` of the row-major block.
    """
    states = all_configs(4)
    logw = -K0 * energy(states, LatticeSpec(2, beta=K0, J=1.0))
    return logw - logsumexp(logw)


def hb_logits(configs: np.ndarray, partition: LevelPartition, level: int, K: float) -> np.ndarray:
    """``2 K * (sum of conditioning spins)`` for each site of ``level``.

    ``sigmoid`` of this logit is the probability of spin up.
    """
    nb = partition.neighbors[level]
    return 2.0 * K * configs[:, nb].sum(axis=-1, dtype=np.float64)


def _coarse_codes(configs: np.ndarray, partition: LevelPartition) -> np.ndarray:
    bits = (configs[:, partition.sites[0]] > 0).astype(np.int64)
    return bits @ np.array([8, 4, 2, 1])


def sample_mlmc(
    spec: LatticeSpec,
    partition: LevelPartition,
    schedule: CouplingSchedule,
    rng: np.random.Generator,
    batch: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch`` configurations and their exact sampling log-probabilities.

    Returns ``(configs, logq)`` with ``configs`` of shape ``(batch, N*N)``.
    """
    if schedule.L != partition.L or partition.N != spec.N:
        raise ValueError("partition / schedule do not match the lattice")
    configs = np.zeros((batch, spec.V), dtype=np.int8)
    table = coarse_log_table(schedule.K[0])
    codes = rng.choice(16, size=batch, p=np.exp(table))
    configs[:, partition.sites[0]] = all_configs(4)[codes]
    logq = table[codes].copy()
    for level in range(1, partition.L + 1):
        z = hb_logits(configs, partition, level, schedule.K[level])
        up = rng.random(z.shape) < expit(z)
        s = np.where(up, 1, -1).astype(np.int8)
        configs[:, partition.sites[level]] = s
        logq += log_expit(s * z).sum(axis=-1)
    return configs, logq


def logq_mlmc(
    cfg, spec: LatticeSpec, partition: LevelPartition, schedule: CouplingSchedule
) -> np.ndarray | float:
    """Sampling log-probability of given configuration(s) under the sampler."""
    configs = np.atleast_2d(np.asarray(cfg))
    if configs.shape[-1] != spec.V:
        raise ValueError(f"configuration has {configs.shape[-1]} sites, expected {spec.V}")
    logq = coarse_log_table(schedule.K[0])[_coarse_codes(configs, partition)]
    for level in range(1, partition.L + 1):
        z = hb_logits(configs, partition, level, schedule.K[level])
        s = configs[:, partition.sites[level]]
        logq = logq + log_expit(s * z).sum(axis=-1)
    return float(logq[0]) if np.ndim(cfg) == 1 else logq
