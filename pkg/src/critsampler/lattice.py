"""Square-lattice geometry, Ising energies and the block-spin level partition.

Sites are indexed row-major, ``v = y * N + x``, on an ``N x N`` torus.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPIN_MAGIC = b"CSPN"
_SPIN_HEADER = struct.Struct("<4sIII")

AXIS_OFFSETS = ((1, 0), (-1, 0), (0, 1), (0, -1))
DIAG_OFFSETS = ((1, 1), (1, -1), (-1, 1), (-1, -1))


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic ``N x N`` Ising lattice at inverse temperature ``beta``."""

    N: int
    beta: float
    J: float = 1.0
    D: int = 2

    def __post_init__(self):
        if self.D != 2:
            raise ValueError(f"only D=2 lattices are supported, got D={self.D}")
        if not _is_power_of_two(self.N) or self.N < 2:
            raise ValueError(f"N must be a power of two >= 2, got {self.N}")

    @property
    def V(self) -> int:
        return self.N * self.N

    @property
    def K(self) -> float:
        """Dimensionless coupling beta * J."""
        return self.beta * self.J

    @property
    def L(self) -> int:
        """Finest level index, ``2 * log2(N / 2)``."""
        return 2 * (self.N.bit_length() - 2)

    def with_beta(self, beta: float) -> "LatticeSpec":
        return LatticeSpec(self.N, beta, self.J)


def _as_grid(cfg, N: int) -> np.ndarray:
    s = np.asarray(cfg)
    if s.shape[-1] != N * N:
        raise ValueError(f"configuration has {s.shape[-1]} sites, expected {N * N}")
    return s.reshape(s.shape[:-1] + (N, N))


def energy(cfg, spec: LatticeSpec) -> np.ndarray | float:
    """Ising energy ``-J * sum_v sum_{mu in x,y} s_v s_{v+mu}`` with periodic wrap.

    Accepts a single configuration of length ``N**2`` or a batch ``(M, N**2)``.
    Every site contributes one bond per positive axis direction, so ``N = 2``
    counts each neighbouring pair twice.
    """
    s = _as_grid(cfg, spec.N).astype(np.float64)
    bonds = s * np.roll(s, -1, axis=-1) + s * np.roll(s, -1, axis=-2)
    out = -spec.J * bonds.sum(axis=(-1, -2))
    return float(out) if out.ndim == 0 else out


def magnetization(cfg) -> np.ndarray | float:
    """Absolute magnetisation per site, ``|mean(s)|``."""
    out = np.abs(np.asarray(cfg, dtype=np.float64).mean(axis=-1))
    return float(out) if out.ndim == 0 else out


def neighbor_sum(cfg, v: int) -> float:
    s = np.asarray(cfg)
    N = int(round(np.sqrt(s.shape[-1])))
    if not 0 <= v < N * N:
        raise IndexError(f"site {v} out of range for N={N}")
    y, x = divmod(v, N)
    return float(
        s[y * N + (x + 1) % N]
        + s[y * N + (x - 1) % N]
        + s[((y + 1) % N) * N + x]
        + s[((y - 1) % N) * N + x]
    )


def local_field(cfg, v: int, K: float) -> float:
    """``K`` times the sum of the four axis neighbours of site ``v``."""
    return K * neighbor_sum(cfg, v)


def flip(cfg, v: int) -> np.ndarray:
    out = np.array(cfg, copy=True)
    out[v] = -out[v]
    return out


def all_configs(V: int) -> np.ndarray:
    """Every ``+-1`` configuration on ``V`` sites, shape ``(2**V, V)``, int8.

    Row ``i`` encodes the bits of ``i`` with site 0 as the most significant bit.
    """
    idx = np.arange(2**V, dtype=np.int64)[:, None]
    bits = (idx >> np.arange(V - 1, -1, -1)) & 1
    return (2 * bits - 1).astype(np.int8)


def config_index(cfg) -> np.ndarray:
    """Inverse of :func:`all_configs`: integer code of each configuration."""
    s = np.atleast_2d(np.asarray(cfg))
    bits = (s > 0).astype(np.int64)
    V = s.shape[-1]
    return bits @ (1 << np.arange(V - 1, -1, -1, dtype=np.int64))


# --------------------------------------------------------------------------
# block-spin partition


def kadanoff_step(K):
    """One 2D decimation step of the nearest-neighbour coupling."""
    return 0.375 * np.log(np.cosh(4.0 * np.asarray(K, dtype=np.float64)))


def coupling_schedule(K_fine: float, L: int) -> np.ndarray:
    """Couplings ``K_0 .. K_L`` with ``K_L = K_fine`` and one step per level."""
    K = np.empty(L + 1)
    K[L] = K_fine
    for level in range(L, 0, -1):
        K[level - 1] = kadanoff_step(K[level])
    return K


def site_level(x: int, y: int, N: int) -> int:
    L = 2 * (N.bit_length() - 2)
    if L == 0:
        return 0
    if (x + y) % 2 == 1:
        return L
    if x % 2 == 1:
        return L - 1
    return site_level(x // 2, y // 2, N // 2)


@dataclass(frozen=True)
class LevelPartition:
    """Assignment of every site to a level ``0..L`` plus per-level geometry.

    ``neighbors[l]`` has shape ``(len(sites[l]), 4)`` and lists the site
    indices whose spins condition level ``l``; it is empty for level 0.
    ``grid_size[l]`` is the side of the axis-aligned sub-lattice on which the
    conditional for level ``l`` is evaluated.
    """

    N: int
    L: int
    level_of_site: np.ndarray
    sites: tuple
    neighbors: tuple
    couplings: np.ndarray = field(repr=False)

    def sizes(self) -> list[int]:
        return [len(s) for s in self.sites]

    def grid_size(self, level: int) -> int:
        """Side of the smallest axis-aligned sub-lattice containing ``level``."""
        return 2 * 2 ** ((level + 1) // 2)

    def stride(self, level: int) -> int:
        """Spacing on the full lattice of that sub-lattice."""
        return self.N // self.grid_size(level)


def build_partition(spec: LatticeSpec) -> LevelPartition:
    N, L = spec.N, spec.L
    level_of_site = np.empty(N * N, dtype=np.int64)
    for y in range(N):
        for x in range(N):
            level_of_site[y * N + x] = site_level(x, y, N)
    sites = tuple(np.flatnonzero(level_of_site == lev) for lev in range(L + 1))
    neighbors = [np.zeros((len(sites[0]), 0), dtype=np.int64)]
    for lev in range(1, L + 1):
        scale = 2 ** ((L - lev) // 2)
        offsets = AXIS_OFFSETS if (L - lev) % 2 == 0 else DIAG_OFFSETS
        ys, xs = np.divmod(sites[lev], N)
        nb = np.stack(
            [((ys + scale * dy) % N) * N + (xs + scale * dx) % N for dx, dy in offsets],
            axis=1,
        )
        neighbors.append(nb)
    return LevelPartition(
        N=N,
        L=L,
        level_of_site=level_of_site,
        sites=sites,
        neighbors=tuple(neighbors),
        couplings=coupling_schedule(spec.K, L),
    )


def coarse_positions(N_coarse: int) -> np.ndarray:
    """Flat indices in the ``2N x 2N`` grid of the (even, even) sub-lattice."""
    ys, xs = np.divmod(np.arange(N_coarse * N_coarse), N_coarse)
    return (2 * ys) * (2 * N_coarse) + 2 * xs


def embed_coarse(coarse) -> np.ndarray:
    """Place coarse spins on the (even, even) sites of a grid twice as large.

    ``coarse`` has trailing shape ``(n, n)``; the result has trailing shape
    ``(2n, 2n)`` with zeros on every not-yet-sampled site.
    """
    c = np.asarray(coarse, dtype=np.float64)
    if c.ndim < 2 or c.shape[-1] != c.shape[-2]:
        raise ValueError(f"expected trailing square grid, got shape {c.shape}")
    n = c.shape[-1]
    out = np.zeros(c.shape[:-2] + (2 * n, 2 * n))
    out[..., ::2, ::2] = c
    return out


def sublattice_indices(N: int, n: int) -> np.ndarray:
    """Flat indices (row-major, on ``N x N``) of the ``n x n`` strided sub-lattice."""
    stride = N // n
    ys, xs = np.divmod(np.arange(n * n), n)
    return (stride * ys) * N + stride * xs


# --------------------------------------------------------------------------
# binary spin files


def write_spins(path, configs) -> None:
    """Write one or more configurations as ``CSPN`` little-endian int8 records."""
    s = np.atleast_2d(np.asarray(configs))
    N = int(round(np.sqrt(s.shape[-1])))
    if N * N != s.shape[-1]:
        raise ValueError("configuration length is not a perfect square")
    if not np.all(np.abs(s) == 1):
        raise ValueError("spins must be +-1")
    with open(path, "wb") as fh:
        fh.write(_SPIN_HEADER.pack(SPIN_MAGIC, N, s.shape[0], 0))
        fh.write(s.astype("<i1").tobytes())


def read_spins(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _SPIN_HEADER.size:
        raise ValueError(f"{path}: truncated spin header")
    magic, N, count, _ = _SPIN_HEADER.unpack_from(raw)
    if magic != SPIN_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_SPIN_HEADER.size :]
    if len(body) != count * N * N:
        raise ValueError(f"{path}: expected {count * N * N} spin bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<i1").reshape(count, N * N).astype(np.int8)
