"""Multilevel sampler with learned conditionals and its staged training.

Levels are sampled coarse to fine on an ``n x n`` lattice: the coarsest 2x2
block from a PixelCNN, every intermediate level from a conditional CNN that
sees the already-sampled spins of its sub-lattice (zeros elsewhere), and the
finest level from the exact heat-bath conditional.

Training proceeds through a sequence of nearest-neighbour targets on lattices
of side 2, 4, 8, ..., N, each sampled by the first ``L'`` levels of the model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from .autodiff import Tensor, adam_init, adam_step, log_sigmoid, mul, no_grad
from .estimators import WeightedBatch, ess, ess_from_logw
from .lattice import LatticeSpec, build_partition, coupling_schedule, energy
from .rng import make_rng
from .models import (
    KIND_RIGCS,
    KIND_VAN,
    CondCNN,
    ModelBundle,
    PixelCNN,
    pixelcnn_logq_tensor,
    pixelcnn_sample,
    save_bundle,
    transfer_weights,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class _Block:
    level: int
    stride: int
    site_mask: np.ndarray  # (g, g) positions sampled at this level
    known_mask: np.ndarray  # (g, g) positions of coarser levels


class Layout:
    """Level geometry of the ``n x n`` lattice used by an ``L``-level sampler."""

    def __init__(self, n: int):
        spec = LatticeSpec(n, beta=1.0)
        part = build_partition(spec)
        self.n, self.L = n, part.L
        grid = part.level_of_site.reshape(n, n)
        self.level_grid = grid
        self.coarse_stride = n // 2
        self.blocks = []
        for level in range(1, self.L):
            s = part.stride(level)
            sub = grid[::s, ::s]
            self.blocks.append(_Block(level, s, sub == level, sub < level))
        self.fine_mask = grid == self.L


def phase_sizes(L: int) -> list[int]:
    """Lattice sides of the sequential targets ``L' = 0, 2, ..., L``."""
    return [2 * 2 ** (Lp // 2) for Lp in range(0, L + 1, 2)]


@dataclass(frozen=True)
class SequentialTarget:
    """Nearest-neighbour Ising target on an ``n x n`` torus at coupling ``K``.

    ``reduced_energy`` returns ``beta * H`` directly.
    """

    n: int
    K: float

    @property
    def L(self) -> int:
        return 2 * (self.n.bit_length() - 2)

    def reduced_energy(self, configs: np.ndarray) -> np.ndarray:
        return self.K * np.atleast_1d(energy(configs, LatticeSpec(self.n, beta=1.0, J=1.0)))


def sequential_targets(spec: LatticeSpec) -> list[SequentialTarget]:
    K = coupling_schedule(spec.K, spec.L)
    return [SequentialTarget(n, float(K[Lp])) for n, Lp in zip(phase_sizes(spec.L), range(0, spec.L + 1, 2))]


# --------------------------------------------------------------------------
# sampling and density evaluation


def _hb_logits(grid: np.ndarray, K: float) -> np.ndarray:
    nb = (
        np.roll(grid, 1, axis=1) + np.roll(grid, -1, axis=1)
        + np.roll(grid, 1, axis=2) + np.roll(grid, -1, axis=2)
    )
    return 2.0 * K * nb


def _level_logq(model: CondCNN, sub: np.ndarray, block: _Block, rng) -> Tensor:
    """Forward one conditional; if ``rng`` is given, fill the level in ``sub``."""
    x = (sub * block.known_mask)[:, None]
    z = model.logits(x)
    if rng is not None:
        zs = z.data[:, 0][:, block.site_mask]
        if not np.all(np.isfinite(zs)):
            raise FloatingPointError("non-finite network output")
        sub[:, block.site_mask] = np.where(rng.random(zs.shape) < expit(zs), 1.0, -1.0)
    lp = log_sigmoid(mul(z, sub[:, None]))
    return mul(lp, block.site_mask.astype(np.float64)).sum(axis=(1, 2, 3))


def _forward(
    bundle: ModelBundle,
    layout: Layout,
    K_fine: float,
    configs: np.ndarray | None,
    batch: int,
    rng: np.random.Generator | None,
):
    """Shared path for sampling (``configs is None``) and teacher forcing.

    Returns ``(grid (B, n, n) float, logq_model Tensor, logq_hb ndarray)``.
    """
    n = layout.n
    sampling = configs is None
    if sampling:
        grid = np.zeros((batch, n, n))
    else:
        grid = np.asarray(configs, dtype=np.float64).reshape(-1, n, n).copy()
        batch = grid.shape[0]

    s0 = layout.coarse_stride
    if sampling:
        c0, _ = pixelcnn_sample(bundle.theta0, 2, batch, rng)
        grid[:, ::s0, ::s0] = c0.reshape(batch, 2, 2)
    logq = pixelcnn_logq_tensor(bundle.theta0, grid[:, ::s0, ::s0], 2)

    for block in layout.blocks:
        sub = grid[:, :: block.stride, :: block.stride]
        logq = logq + _level_logq(bundle.cond[block.level - 1], sub, block, rng if sampling else None)

    logq_hb = np.zeros(batch)
    if layout.L > 0:
        z = _hb_logits(grid, K_fine)[:, layout.fine_mask]
        if sampling:
            s = np.where(rng.random(z.shape) < expit(z), 1.0, -1.0)
            grid[:, layout.fine_mask] = s
        logq_hb = log_expit(grid[:, layout.fine_mask] * z).sum(axis=-1)
    return grid, logq, logq_hb


def _check_bundle(bundle: ModelBundle, layout: Layout):
    if bundle.kind != KIND_RIGCS:
        raise ValueError("bundle does not hold a multilevel model")
    if len(bundle.cond) < max(layout.L - 1, 0):
        raise ValueError(f"bundle has {len(bundle.cond)} conditionals, lattice needs {layout.L - 1}")


def rigcs_sample(
    bundle: ModelBundle,
    spec: LatticeSpec,
    batch: int,
    rng: np.random.Generator,
    layout: Layout | None = None,
) -> WeightedBatch:
    """Draw ``batch`` configurations with their exact log-probabilities."""
    layout = Layout(spec.N) if layout is None else layout
    if layout.n != spec.N or bundle.N != spec.N:
        raise ValueError("bundle was built for a different lattice")
    _check_bundle(bundle, layout)
    with no_grad():
        grid, logq, logq_hb = _forward(bundle, layout, spec.K, None, batch, rng)
    configs = grid.reshape(batch, -1).astype(np.int8)
    return WeightedBatch(logq.data + logq_hb, energy(configs, spec).reshape(-1), spec.beta, spec.N, configs)


def rigcs_logq(bundle: ModelBundle, cfg, spec: LatticeSpec, layout: Layout | None = None):
    """Teacher-forced sampling log-probability of configuration(s)."""
    layout = Layout(spec.N) if layout is None else layout
    cfg = np.asarray(cfg)
    if cfg.shape[-1] != spec.V:
        raise ValueError(f"configuration has {cfg.shape[-1]} sites, expected {spec.V}")
    _check_bundle(bundle, layout)
    with no_grad():
        _, logq, logq_hb = _forward(bundle, layout, spec.K, np.atleast_2d(cfg), 0, None)
    out = logq.data + logq_hb
    return float(out[0]) if cfg.ndim == 1 else out


# --------------------------------------------------------------------------
# gradient estimation


@dataclass
class StepResult:
    loss: float
    grads: list
    logw: np.ndarray


def reinforce_surrogate(r: np.ndarray, logq: Tensor) -> Tensor:
    """Surrogate whose gradient is the score-function estimate of the
    reverse-KL gradient with the batch-mean baseline."""
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite reverse-KL score")
    return mul(logq, (r - r.mean()) / len(r)).sum()


def _score_step(params: list[Tensor], r: np.ndarray, logq: Tensor) -> StepResult:
    for p in params:
        p.grad = None
    reinforce_surrogate(r, logq).backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    return StepResult(float(r.mean()), grads, -r)


def reverse_kl_step(
    bundle: ModelBundle,
    target: SequentialTarget,
    batch: int,
    rng: np.random.Generator,
    layout: Layout | None = None,
) -> StepResult:
    """One reverse-KL gradient estimate for the levels active on ``target``.

    The reported loss is ``mean(beta*H + log q)``, the KL divergence shifted
    by ``-log Z``.
    """
    if batch < 2:
        raise ValueError("reverse-KL step needs batch >= 2")
    layout = Layout(target.n) if layout is None else layout
    _check_bundle(bundle, layout)
    grid, logq, logq_hb = _forward(bundle, layout, target.K, None, batch, rng)
    configs = grid.reshape(batch, -1).astype(np.int8)
    r = target.reduced_energy(configs) + logq.data + logq_hb
    return _score_step(bundle.params(max(layout.L - 1, 0)), r, logq)


def van_step(model: PixelCNN, target: SequentialTarget, batch: int, rng) -> StepResult:
    """Reverse-KL gradient estimate for a single full-lattice PixelCNN."""
    if batch < 2:
        raise ValueError("reverse-KL step needs batch >= 2")
    configs, _ = pixelcnn_sample(model, target.n, batch, rng)
    logq = pixelcnn_logq_tensor(model, configs, target.n)
    r = target.reduced_energy(configs) + logq.data
    return _score_step(model.params(), r, logq)


# --------------------------------------------------------------------------
# training


DEFAULT_STEPS_FINAL = 3000


def default_phase_steps(L: int, steps_final: int = DEFAULT_STEPS_FINAL) -> list[int]:
    """Gradient steps for ``L' = 0, 2, ..., L``: the coarsest phase gets 500,
    the last three 1500/2000/``steps_final`` and the rest 1000."""
    out = []
    for Lp in range(0, L + 1, 2):
        if Lp == L:
            out.append(steps_final)
        elif Lp == 0:
            out.append(500)
        elif Lp == L - 2:
            out.append(2000)
        elif Lp == L - 4:
            out.append(1500)
        else:
            out.append(1000)
    return out


@dataclass
class TrainConfig:
    phase_steps: list[int] | None = None
    steps_final: int = DEFAULT_STEPS_FINAL
    batch: int = 100
    lr: float = 1e-3
    seed: int = 0
    warm_start: bool = True
    ess_batch: int = 16
    eval_every: int = 0
    eval_batch: int = 1000
    pixel_depth: int = 3
    pixel_width: int = 12
    pixel_kernel: int = 13
    cond_width: int = 12
    init_scale: float = 1.0
    checkpoint_dir: str | None = None

    def steps_for(self, L: int) -> list[int]:
        steps = self.phase_steps or default_phase_steps(L, self.steps_final)
        if len(steps) != L // 2 + 1:
            raise ValueError(f"need {L // 2 + 1} phase step counts, got {len(steps)}")
        return list(steps)


@dataclass
class TrainHistory:
    step: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    ess_small_batch: list = field(default_factory=list)
    wallclock_s: list = field(default_factory=list)
    eval_step: list = field(default_factory=list)
    eval_ess: list = field(default_factory=list)
    phase_steps: list = field(default_factory=list)

    def as_bundle_history(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("step", "phase", "loss", "ess_small_batch")}

    def first_step_reaching(self, threshold: float) -> int | None:
        """Cumulative step of the first periodic evaluation with ESS >= threshold."""
        for s, e in zip(self.eval_step, self.eval_ess):
            if e >= threshold:
                return s
        return None


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, bundle: ModelBundle, history: TrainHistory):
        super().__init__(message)
        self.bundle = bundle
        self.history = history


def new_bundle(spec: LatticeSpec, config: TrainConfig, rng: np.random.Generator) -> ModelBundle:
    theta0 = PixelCNN(config.pixel_depth, config.pixel_width, config.pixel_kernel, rng, config.init_scale)
    cond = [CondCNN(config.cond_width, rng, config.init_scale) for _ in range(max(spec.L - 1, 0))]
    return ModelBundle(spec.N, spec.L, spec.beta, theta0, cond, KIND_RIGCS)


def _snapshot(bundle: ModelBundle) -> list[np.ndarray]:
    return [p.data.copy() for p in bundle.params()]


def _restore(bundle: ModelBundle, saved: list[np.ndarray]):
    for p, d in zip(bundle.params(), saved):
        p.data = d


def _apply_transfers(bundle: ModelBundle, Lp: int):
    """Initialise newly attached conditionals of phase ``L'`` from coarser ones."""
    if Lp == 4:
        transfer_weights(bundle.cond[0], bundle.cond[2])
    elif Lp >= 6:
        transfer_weights(bundle.cond[Lp - 5], bundle.cond[Lp - 3])  # level L'-2 from L'-4
        transfer_weights(bundle.cond[Lp - 4], bundle.cond[Lp - 2])  # level L'-1 from L'-3


def _train_phase(
    bundle: ModelBundle,
    params: list[Tensor],
    step_fn,
    n_steps: int,
    phase: int,
    config: TrainConfig,
    rng: np.random.Generator,
    history: TrainHistory,
    evaluate,
    t0: float,
):
    state = adam_init(params)
    good = _snapshot(bundle)
    for _ in range(n_steps):
        try:
            res = step_fn(rng)
            if not np.isfinite(res.loss):
                raise FloatingPointError("non-finite loss")
            adam_step(params, res.grads, state, lr=config.lr)
        except FloatingPointError as exc:
            _restore(bundle, good)
            raise TrainingDiverged(f"phase {phase}: {exc}", bundle, history) from exc
        step = len(history.step) + 1
        history.step.append(step)
        history.phase.append(phase)
        history.loss.append(res.loss)
        history.ess_small_batch.append(ess_from_logw(res.logw[: config.ess_batch]))
        history.wallclock_s.append(time.perf_counter() - t0)
        if config.eval_every and step % config.eval_every == 0 and evaluate is not None:
            history.eval_step.append(step)
            history.eval_ess.append(evaluate())
        if step % 100 == 0:
            good = _snapshot(bundle)
    history.phase_steps.append(n_steps)


def _save_checkpoint(bundle: ModelBundle, history: TrainHistory, config: TrainConfig, name: str):
    if config.checkpoint_dir is None:
        return
    bundle.history = history.as_bundle_history()
    path = Path(config.checkpoint_dir)
    path.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, path / name)


def sequential_train(spec: LatticeSpec, config: TrainConfig) -> tuple[ModelBundle, TrainHistory]:
    """Train a multilevel model for ``spec``.

    With ``warm_start`` the model is trained on targets of side 2, 4, ..., N
    in turn, newly attached conditionals being initialised from coarser ones;
    all parameters keep training in every phase. Without it the full model is
    trained on the final target from random initialisation for the same total
    number of steps.
    """
    if spec.N < 4:
        raise ValueError("sequential training needs N >= 4")
    rng = make_rng(config.seed)
    init_rng, train_rng, eval_rng = rng.spawn(3)
    bundle = new_bundle(spec, config, init_rng)
    steps = config.steps_for(spec.L)
    targets = sequential_targets(spec)
    history = TrainHistory()
    t0 = time.perf_counter()
    final_layout = Layout(spec.N)

    def evaluate():
        return ess(rigcs_sample(bundle, spec, config.eval_batch, eval_rng, final_layout))

    if config.warm_start:
        phases = list(enumerate(targets))
    else:
        phases = [(len(targets) - 1, targets[-1])]
        steps = [0] * (len(targets) - 1) + [sum(steps)]

    for phase, target in phases:
        Lp = target.L
        if config.warm_start:
            _apply_transfers(bundle, Lp)
        layout = Layout(target.n)
        params = bundle.params(max(Lp - 1, 0))
        evaluator = evaluate if Lp == spec.L else None
        log.info("phase %d: n=%d K=%.6f steps=%d", phase, target.n, target.K, steps[phase])
        _train_phase(
            bundle,
            params,
            lambda r, t=target, lay=layout: reverse_kl_step(bundle, t, config.batch, r, lay),
            steps[phase],
            phase,
            config,
            train_rng,
            history,
            evaluator,
            t0,
        )
        _save_checkpoint(bundle, history, config, f"phase{phase}.csmb")
    bundle.history = history.as_bundle_history()
    return bundle, history


@dataclass
class VanConfig:
    steps: int = 5000
    batch: int = 100
    lr: float = 1e-3
    seed: int = 0
    depth: int = 6
    width: int = 32
    kernel: int = 13
    init_scale: float = 1.0
    ess_batch: int = 16
    time_budget_s: float | None = None


def plain_van_train(spec: LatticeSpec, config: VanConfig) -> tuple[ModelBundle, TrainHistory]:
    """Train one PixelCNN over the whole lattice by the same reverse-KL step."""
    init_rng, train_rng = make_rng(config.seed).spawn(2)
    model = PixelCNN(config.depth, config.width, config.kernel, init_rng, config.init_scale)
    bundle = ModelBundle(spec.N, spec.L, spec.beta, model, [], KIND_VAN)
    target = SequentialTarget(spec.N, spec.K)
    history = TrainHistory()
    params = model.params()
    state = adam_init(params)
    t0 = time.perf_counter()
    for step in range(1, config.steps + 1):
        res = van_step(model, target, config.batch, train_rng)
        if not np.isfinite(res.loss):
            raise TrainingDiverged("non-finite loss", bundle, history)
        adam_step(params, res.grads, state, lr=config.lr)
        history.step.append(step)
        history.phase.append(0)
        history.loss.append(res.loss)
        history.ess_small_batch.append(ess_from_logw(res.logw[: config.ess_batch]))
        history.wallclock_s.append(time.perf_counter() - t0)
        if config.time_budget_s is not None and history.wallclock_s[-1] >= config.time_budget_s:
            break
    history.phase_steps.append(len(history.step))
    bundle.history = history.as_bundle_history()
    return bundle, history


def van_sample(bundle: ModelBundle, spec: LatticeSpec, batch: int, rng) -> WeightedBatch:
    if bundle.kind != KIND_VAN or bundle.N != spec.N:
        raise ValueError("bundle is not a full-lattice model for this lattice")
    configs, logq = pixelcnn_sample(bundle.theta0, spec.N, batch, rng)
    return WeightedBatch(logq, energy(configs, spec).reshape(-1), spec.beta, spec.N, configs)
