"""Network families: a masked-convolution PixelCNN over a square grid and the
small conditional CNN that predicts one level of spins from the coarser ones.

Both produce Bernoulli logits; ``sigmoid(logit)`` is the probability of spin
up. Models own their parameter tensors and are mutated in place by training.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from .autodiff import Mask, Tensor, conv2d, log_sigmoid, mul, no_grad, tanh

BUNDLE_MAGIC = b"CSMB"
BUNDLE_VERSION = 1
KIND_RIGCS = 0
KIND_VAN = 1

_HEADER = struct.Struct("<4sIIId")
_ARCH = struct.Struct("<IIIIII")


def _init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, scale: float):
    bound = scale / np.sqrt(c_in * k * k)
    w = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True)
    return w, b


class PixelCNN:
    """Autoregressive model over raster order of an ``n x n`` grid.

    Layer layout: a kind-A masked convolution ``1 -> width``, then ``depth - 2``
    residual blocks (kind-B masked convolution plus a 1x1 skip), and a final
    kind-B masked convolution ``width -> 1`` producing logits.
    """

    def __init__(self, depth: int = 3, width: int = 12, kernel: int = 13, rng=None, init_scale: float = 1.0):
        if depth < 2:
            raise ValueError("PixelCNN needs at least two masked layers")
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        rng = np.random.default_rng(0) if rng is None else rng
        self.depth, self.width, self.kernel = depth, width, kernel
        self.mask_a = Mask(kernel, "A")
        self.mask_b = Mask(kernel, "B")
        self.first = _init_conv(rng, width, 1, kernel, init_scale)
        self.blocks = [
            (_init_conv(rng, width, width, kernel, init_scale), _init_conv(rng, width, width, 1, init_scale))
            for _ in range(depth - 2)
        ]
        self.last = _init_conv(rng, 1, width, kernel, init_scale)

    def params(self) -> list[Tensor]:
        out = list(self.first)
        for masked, skip in self.blocks:
            out += [*masked, *skip]
        out += list(self.last)
        return out

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = tanh(conv2d(x, *self.first, mask=self.mask_a, padding="zeros"))
        for (w, b), (ws, bs) in self.blocks:
            h = tanh(conv2d(h, w, b, mask=self.mask_b, padding="zeros")) + conv2d(h, ws, bs)
        return conv2d(h, *self.last, mask=self.mask_b, padding="zeros")


class CondCNN:
    """Two unmasked circular convolutions (5x5 then 3x3) with a tanh between.

    Each output sees a 7x7 window of the embedded grid.
    """

    def __init__(self, width: int = 12, rng=None, init_scale: float = 1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.width = width
        self.conv1 = _init_conv(rng, width, 1, 5, init_scale)
        self.conv2 = _init_conv(rng, 1, width, 3, init_scale)

    def params(self) -> list[Tensor]:
        return [*self.conv1, *self.conv2]

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return conv2d(tanh(conv2d(x, *self.conv1)), *self.conv2)


def _as_grid(configs: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(configs, dtype=np.float64).reshape(-1, 1, n, n)


def pixelcnn_sample(model: PixelCNN, n: int, batch: int, rng: np.random.Generator):
    """Ancestral raster-order sampling; returns ``(configs (batch, n*n) int8, logq)``."""
    x = np.zeros((batch, 1, n, n))
    logq = np.zeros(batch)
    with no_grad():
        for v in range(n * n):
            i, j = divmod(v, n)
            z = model.logits(x).data[:, 0, i, j]
            if not np.all(np.isfinite(z)):
                raise FloatingPointError("non-finite network output")
            s = np.where(rng.random(batch) < expit(z), 1.0, -1.0)
            x[:, 0, i, j] = s
            logq += log_expit(s * z)
    return x.reshape(batch, n * n).astype(np.int8), logq


def pixelcnn_logq_tensor(model: PixelCNN, configs: np.ndarray, n: int) -> Tensor:
    """Teacher-forced log-probability of each configuration as a graph node."""
    x = _as_grid(configs, n)
    z = model.logits(x)
    return log_sigmoid(mul(z, x)).sum(axis=(1, 2, 3))


def pixelcnn_logq(model: PixelCNN, configs: np.ndarray) -> np.ndarray | float:
    configs = np.asarray(configs)
    n = int(round(np.sqrt(configs.shape[-1])))
    if n * n != configs.shape[-1]:
        raise ValueError("configuration is not a square grid")
    with no_grad():
        out = pixelcnn_logq_tensor(model, np.atleast_2d(configs), n).data
    return float(out[0]) if configs.ndim == 1 else out


def condcnn_sample_level(
    model: CondCNN, embedded: np.ndarray, level_mask: np.ndarray, rng: np.random.Generator
):
    """Sample every site flagged by ``level_mask`` independently from one pass.

    ``embedded`` is ``(batch, g, g)`` holding known spins and zeros elsewhere.
    Returns ``(spins (batch, n_sites), logq contribution (batch,))`` with
    spins listed in raster order of the flagged positions.
    """
    embedded = np.asarray(embedded, dtype=np.float64)
    if embedded.ndim != 3 or embedded.shape[1:] != level_mask.shape:
        raise ValueError("embedded grid does not match the level mask")
    if np.any(embedded[:, level_mask] != 0):
        raise ValueError("level sites must be zero in the embedded grid")
    with no_grad():
        z = model.logits(embedded[:, None]).data[:, 0][:, level_mask]
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite network output")
    s = np.where(rng.random(z.shape) < expit(z), 1, -1).astype(np.int8)
    return s, log_expit(s * z).sum(axis=-1)


def transfer_weights(src, dst):
    """Deep copy of ``src``'s parameters into ``dst`` (shapes must agree)."""
    if type(src) is not type(dst):
        raise ValueError("cannot transfer between different model families")
    sp, dp = src.params(), dst.params()
    if len(sp) != len(dp) or any(a.shape != b.shape for a, b in zip(sp, dp)):
        raise ValueError("parameter shapes differ")
    for a, b in zip(sp, dp):
        b.data = a.data.copy()
        b.grad = None
    return dst


def copy_model(model):
    return copy.deepcopy(model)


@dataclass
class ModelBundle:
    """Everything needed to sample: the coarsest model plus per-level
    conditionals for levels ``1 .. L-1``. ``kind`` distinguishes a multilevel
    bundle from a single full-lattice PixelCNN."""

    N: int
    L: int
    beta: float
    theta0: PixelCNN
    cond: list[CondCNN] = field(default_factory=list)
    kind: int = KIND_RIGCS
    history: dict = field(default_factory=dict)

    def params(self, n_cond: int | None = None) -> list[Tensor]:
        cond = self.cond if n_cond is None else self.cond[:n_cond]
        out = self.theta0.params()
        for c in cond:
            out += c.params()
        return out


_HISTORY_KEYS = ("step", "phase", "loss", "ess_small_batch")


def _write_array(fh, a: np.ndarray):
    a = np.ascontiguousarray(a, dtype="<f8").ravel()
    fh.write(struct.pack("<Q", a.size))
    fh.write(a.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated bundle file")
    return buf


def _read_array(fh, shape) -> np.ndarray:
    (size,) = struct.unpack("<Q", _read_exact(fh, 8))
    if shape is not None and size != int(np.prod(shape)):
        raise ValueError(f"array length {size} does not match expected shape {shape}")
    a = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").astype(np.float64)
    return a if shape is None else a.reshape(shape)


def save_bundle(bundle: ModelBundle, path) -> None:
    t0 = bundle.theta0
    cond_width = bundle.cond[0].width if bundle.cond else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, bundle.N, bundle.L, float(bundle.beta)))
        fh.write(_ARCH.pack(bundle.kind, t0.depth, t0.width, t0.kernel, len(bundle.cond), cond_width))
        for p in bundle.params():
            _write_array(fh, p.data)
        for key in _HISTORY_KEYS:
            _write_array(fh, np.asarray(bundle.history.get(key, []), dtype=np.float64))


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < 4 or head[:4] != BUNDLE_MAGIC:
            raise ValueError(f"{path}: not a model bundle (bad magic)")
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        _, version, N, L, beta = _HEADER.unpack(head)
        if version != BUNDLE_VERSION:
            raise ValueError(f"{path}: unsupported bundle version {version}")
        kind, depth, width, kernel, n_cond, cond_width = _ARCH.unpack(_read_exact(fh, _ARCH.size))
        if kind not in (KIND_RIGCS, KIND_VAN):
            raise ValueError(f"{path}: unknown bundle kind {kind}")
        theta0 = PixelCNN(depth, width, kernel)
        cond = [CondCNN(cond_width) for _ in range(n_cond)]
        bundle = ModelBundle(N, L, beta, theta0, cond, kind)
        for p in bundle.params():
            p.data = _read_array(fh, p.shape)
        bundle.history = {key: _read_array(fh, None) for key in _HISTORY_KEYS}
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after bundle")
    return bundle
