"""Command-line entry point: ``critsampler {oracle,sample,train,estimate,bench}``.

Every data output is a deterministic function of the flags and ``--seed``;
only ``wallclock_s`` columns vary between runs. Flags override values read
from ``--config FILE.toml`` (top-level keys or a table named after the
subcommand).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import mcmc
from .estimators import (
    WeightedBatch,
    abs_magnetization,
    emdm,
    emdm_stderr,
    energy_per_site,
    ess,
    free_energy,
    reweighted_observable,
)
from .exact import enumerate_exact, exact_logZ, exact_result
from .lattice import LatticeSpec, build_partition, energy, read_spins, write_spins
from .mlmc import CouplingSchedule, logq_mlmc, sample_mlmc
from .models import KIND_RIGCS, KIND_VAN, ModelBundle, load_bundle, pixelcnn_logq, save_bundle
from .rigcs import (
    TrainConfig,
    TrainingDiverged,
    VanConfig,
    plain_van_train,
    rigcs_logq,
    rigcs_sample,
    sequential_train,
    van_sample,
)
from .rng import make_rng

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

MCMC_METHODS = mcmc.METHODS
SAMPLE_METHODS = (*MCMC_METHODS, "mlmc-hb", "van", "rigcs")

log = logging.getLogger("critsampler")


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


# --------------------------------------------------------------------------
# formatting


def fmt(x) -> str:
    """Round-trip decimal text: 17 significant digits for floats."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    return str(x)


def _json_value(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (float, np.floating)) and not math.isfinite(float(v)):
        return "null"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{_json_value(str(k))}: {_json_value(x)}" for k, x in v.items()) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_json_value(x) for x in v) + "]"
    return fmt(v)


def to_json(obj: dict) -> str:
    return _json_value(obj) + "\n"


def _emit(text: str, out: str | None):
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {out}: {exc}") from exc


def _write_csv(path, header, rows):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(x) for x in row])
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _load_bundle(path):
    if path is None:
        raise UsageError("this method needs --checkpoint")
    try:
        return load_bundle(path)
    except FileNotFoundError as exc:
        raise IOFailure(f"checkpoint not found: {path}") from exc
    except (OSError, ValueError) as exc:
        raise IOFailure(str(exc)) from exc


def _spec(args) -> LatticeSpec:
    try:
        return LatticeSpec(int(args.N), beta=float(args.beta), J=float(args.J))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# subcommands


def cmd_oracle(args) -> int:
    spec = _spec(args)
    res = exact_result(spec)
    out = res.to_dict()
    # |m| is only known by enumeration; null beyond N = 4
    out["abs_mag_mean"] = out.pop("abs_magnetization_mean")
    if spec.N <= 4:
        out["logZ_enumerate"] = enumerate_exact(spec).logZ
    _emit(to_json(out), args.out)
    return 0


def draw_samples(method: str, spec: LatticeSpec, M: int, rng, checkpoint=None, thin: int = 1) -> WeightedBatch:
    """``M`` samples from any supported sampler.

    ``checkpoint`` is a path or an already loaded bundle. MCMC samplers have
    no tractable density, so their ``logq`` entries are zero placeholders.
    """
    if method in MCMC_METHODS:
        configs = mcmc.chain_samples(method, spec, M, rng, thin=thin)
        return WeightedBatch(np.zeros(M), energy(configs, spec).reshape(-1), spec.beta, spec.N, configs)
    if method == "mlmc-hb":
        part = build_partition(spec)
        configs, logq = sample_mlmc(spec, part, CouplingSchedule.from_spec(spec), rng, batch=M)
        return WeightedBatch(logq, energy(configs, spec).reshape(-1), spec.beta, spec.N, configs)
    bundle = checkpoint if isinstance(checkpoint, ModelBundle) else _load_bundle(checkpoint)
    if bundle.N != spec.N:
        raise UsageError(f"checkpoint is for N={bundle.N}, requested N={spec.N}")
    if method == "van":
        if bundle.kind != KIND_VAN:
            raise UsageError("checkpoint does not hold a full-lattice model")
        return van_sample(bundle, spec, M, rng)
    if method == "rigcs":
        if bundle.kind != KIND_RIGCS:
            raise UsageError("checkpoint does not hold a multilevel model")
        return rigcs_sample(bundle, spec, M, rng)
    raise UsageError(f"unknown method {method!r}")


def cmd_sample(args) -> int:
    if args.method not in SAMPLE_METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(SAMPLE_METHODS)}")
    spec = _spec(args)
    if args.M < 1:
        raise UsageError("--M must be positive")
    batch = draw_samples(args.method, spec, args.M, make_rng(args.seed), args.checkpoint, args.thin)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_spins(out, batch.configs)
    except OSError as exc:
        raise IOFailure(f"cannot write {out}: {exc}") from exc
    has_logq = args.method not in MCMC_METHODS
    rows = (
        (i, batch.logq[i] if has_logq else float("nan"), batch.energy[i]) for i in range(batch.M)
    )
    _write_csv(out.with_suffix(out.suffix + ".csv"), ["sample_id", "logq", "energy"], rows)
    return 0


def cmd_train(args) -> int:
    spec = _spec(args)
    outdir = Path(args.out)
    try:
        if args.model == "van":
            cfg = VanConfig(
                steps=args.steps_final, batch=args.batch, lr=args.lr, seed=args.seed,
                depth=args.van_depth, width=args.van_width, kernel=args.van_kernel,
            )
            bundle, hist = plain_van_train(spec, cfg)
        else:
            cfg = TrainConfig(
                steps_final=args.steps_final, batch=args.batch, lr=args.lr, seed=args.seed,
                warm_start=args.warm_start, checkpoint_dir=str(outdir),
                eval_every=args.eval_every, eval_batch=args.eval_batch,
            )
            bundle, hist = sequential_train(spec, cfg)
    except TrainingDiverged as exc:
        _write_history(outdir, exc.history)
        raise
    _write_history(outdir, hist)
    try:
        save_bundle(bundle, outdir / "final.csmb")
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint: {exc}") from exc
    if hist.eval_step:
        _write_csv(outdir / "eval.csv", ["step", "ess"], zip(hist.eval_step, hist.eval_ess))
    return 0


def _write_history(outdir: Path, hist):
    rows = zip(hist.step, hist.phase, hist.loss, hist.ess_small_batch, hist.wallclock_s)
    _write_csv(outdir / "train.csv", ["step", "phase", "loss", "ess_small_batch", "wallclock_s"], rows)


def _read_samples(path) -> np.ndarray:
    try:
        return read_spins(path)
    except FileNotFoundError as exc:
        raise IOFailure(f"sample file not found: {path}") from exc
    except (OSError, ValueError) as exc:
        raise IOFailure(str(exc)) from exc


def weigh_samples(method: str, configs: np.ndarray, spec: LatticeSpec, bundle=None) -> WeightedBatch:
    """Re-evaluate ``log q`` of stored configurations under ``method``."""
    if method == "mlmc-hb":
        logq = logq_mlmc(configs, spec, build_partition(spec), CouplingSchedule.from_spec(spec))
    elif method == "rigcs":
        logq = rigcs_logq(bundle, configs, spec)
    elif method == "van":
        logq = pixelcnn_logq(bundle.theta0, configs)
    else:
        raise UsageError(f"method {method!r} has no sampling density")
    return WeightedBatch(np.atleast_1d(logq), energy(configs, spec).reshape(-1), spec.beta, spec.N, configs)


def summarize(method: str, batch: WeightedBatch, spec: LatticeSpec, rng, B: int = 1000) -> dict:
    """Estimator summary of an importance-weighted batch."""
    logZ = exact_logZ(spec)
    F, F_err = free_energy(batch, B=B, rng=rng)
    e, e_err = reweighted_observable(batch, energy_per_site(batch), B=B, rng=rng)
    m, m_err = reweighted_observable(batch, abs_magnetization(batch), B=B, rng=rng)
    return {
        "method": method,
        "N": spec.N,
        "beta": spec.beta,
        "M": batch.M,
        "F_hat": F,
        "F_stderr": F_err,
        "F_exact": -logZ / spec.beta,
        "ess": ess(batch),
        "emdm": emdm(batch, logZ),
        "emdm_stderr": emdm_stderr(batch, logZ),
        "energy": e,
        "energy_stderr": e_err,
        "abs_mag": m,
        "abs_mag_stderr": m_err,
    }


def cmd_estimate(args) -> int:
    bundle = None
    method = args.method
    if args.checkpoint is not None:
        bundle = _load_bundle(args.checkpoint)
        method = method or ("van" if bundle.kind == KIND_VAN else "rigcs")
    if method is None:
        raise UsageError("give --method or --checkpoint")
    if method in ("rigcs", "van") and bundle is None:
        raise UsageError(f"method {method!r} needs --checkpoint")
    beta = args.beta if args.beta is not None else (bundle.beta if bundle is not None else None)
    if beta is None:
        raise UsageError("give --beta")
    rng = make_rng(args.seed)
    if args.samples is not None:
        configs = _read_samples(args.samples)
        N = int(round(math.sqrt(configs.shape[-1])))
        spec = LatticeSpec(N, beta=beta, J=args.J)
        batch = weigh_samples(method, configs, spec, bundle)
    else:
        if args.N is None and bundle is None:
            raise UsageError("give --N, --samples or --checkpoint")
        N = args.N if args.N is not None else bundle.N
        spec = LatticeSpec(N, beta=beta, J=args.J)
        sample_rng, rng = rng.spawn(2)
        batch = draw_samples(method, spec, args.M, sample_rng, bundle)
    _emit(to_json(summarize(method, batch, spec, rng, B=args.bootstrap)), args.out)
    return 0


BENCH_HEADER = ["algorithm", "N", "beta", "observable", "estimate", "stderr", "tau_int", "wallclock_s"]


def bench_rows(spec: LatticeSpec, args, rng) -> list[list]:
    rows = []
    nan = float("nan")
    methods = args.methods.split(",") if args.methods else list(BENCH_DEFAULT)
    streams = dict(zip(methods, rng.spawn(len(methods))))
    for method in methods:
        r = streams[method]
        t0 = time.perf_counter()
        if method in MCMC_METHODS:
            res = mcmc.run_chain(method, spec, args.updates, r)
            wall = time.perf_counter() - t0
            for name, series, scale in (
                ("energy_per_site", "energies", spec.V),
                ("abs_magnetization", "abs_mags", 1),
            ):
                est, err = res.mean_and_error(series)
                try:
                    tau = mcmc.tau_int(getattr(res, series))
                except ValueError:
                    tau = nan
                rows.append([method, spec.N, spec.beta, name, est / scale, err / scale, tau, wall])
        elif method == "ais":
            logZ, err = mcmc.ais_logZ(spec, args.ais_temps, args.ais_chains, r)
            wall = time.perf_counter() - t0
            rows.append([method, spec.N, spec.beta, "free_energy", -logZ / spec.beta, err / spec.beta, nan, wall])
        elif method in ("mlmc-hb", "rigcs", "van"):
            ckpt = {"rigcs": args.checkpoint, "van": args.van_checkpoint}.get(method)
            if method == "rigcs" and ckpt is None:
                train_rng_seed = int(r.integers(2**63))
                bundle, _ = sequential_train(spec, TrainConfig(seed=train_rng_seed))
                ckpt = bundle
            elif method == "van" and ckpt is None:
                log.warning("skipping van: no --van-checkpoint")
                continue
            sample_rng, est_rng = r.spawn(2)
            batch = draw_samples(method, spec, args.M, sample_rng, ckpt)
            wall = time.perf_counter() - t0
            s = summarize(method, batch, spec, est_rng, B=args.bootstrap)
            for name, est, err in (
                ("free_energy", s["F_hat"], s["F_stderr"]),
                ("ess", s["ess"], nan),
                ("emdm", s["emdm"], s["emdm_stderr"]),
                ("energy_per_site", s["energy"], s["energy_stderr"]),
                ("abs_magnetization", s["abs_mag"], s["abs_mag_stderr"]),
            ):
                rows.append([method, spec.N, spec.beta, name, est, err, nan, wall])
        else:
            raise UsageError(f"unknown bench method {method!r}")
    rows.append(["exact", spec.N, spec.beta, "free_energy", -exact_logZ(spec) / spec.beta, 0.0, nan, 0.0])
    return rows


BENCH_DEFAULT = (*MCMC_METHODS, "ais", "mlmc-hb", "rigcs", "van")


def cmd_bench(args) -> int:
    spec = _spec(args)
    rows = bench_rows(spec, args, make_rng(args.seed))
    if args.out is None or args.out == "-":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for row in rows:
            w.writerow([fmt(x) for x in row])
    else:
        _write_csv(args.out, BENCH_HEADER, rows)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _lattice_flags(p):
    p.add_argument("--N", type=int, default=4)
    p.add_argument("--beta", type=float, default=0.44)
    p.add_argument("--J", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="critsampler", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="TOML file with default values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", help="exact logZ, energy and |m| for a small torus")
    _lattice_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sample", help="draw configurations from one sampler")
    _lattice_flags(p)
    p.add_argument("--method", default="wolff")
    p.add_argument("--M", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--checkpoint")
    p.add_argument("--out", default="samples.cspn")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a multilevel model or a full-lattice PixelCNN")
    _lattice_flags(p)
    p.add_argument("--model", choices=("rigcs", "van"), default="rigcs")
    p.add_argument("--seed", type=int, default=0)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--warm-start", dest="warm_start", action="store_true", default=True)
    g.add_argument("--cold-start", dest="warm_start", action="store_false")
    p.add_argument("--steps-final", type=int, default=3000)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--eval-batch", type=int, default=1000)
    p.add_argument("--van-depth", type=int, default=6)
    p.add_argument("--van-width", type=int, default=32)
    p.add_argument("--van-kernel", type=int, default=13)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="importance-sampling estimates from a model or sample file")
    p.add_argument("--N", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--J", type=float, default=1.0)
    p.add_argument("--method", choices=("mlmc-hb", "rigcs", "van"))
    p.add_argument("--checkpoint")
    p.add_argument("--samples")
    p.add_argument("--M", type=int, default=10000)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="comparison table across samplers")
    _lattice_flags(p)
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(BENCH_DEFAULT))
    p.add_argument("--M", type=int, default=10000)
    p.add_argument("--updates", type=int, default=100000)
    p.add_argument("--ais-temps", type=int, default=256)
    p.add_argument("--ais-chains", type=int, default=128)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--checkpoint")
    p.add_argument("--van-checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def _config_defaults(path: str, command: str) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise IOFailure(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    values = {k: v for k, v in data.items() if not isinstance(v, dict)}
    values.update(data.get(command, {}))
    return {k.replace("-", "_"): v for k, v in values.items()}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        defaults = _config_defaults(args.config, args.command)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
