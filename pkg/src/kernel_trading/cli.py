"""Command line entry point: ``kernel-trading <command> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from importlib import resources

import numpy as np

from . import _jsonio

log = logging.getLogger("kernel_trading")

SIM_KEYS = {"generator", "n_paths", "n_steps", "dt", "label", "seed"}
FIT_KEYS = {"kernel", "embedding", "fit", "lift", "data", "val_data"}


class UsageError(Exception):
    pass


def _read_json(path: str, what: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path!r}: {exc.strerror}") from None
    return _jsonio.loads(text, what)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def _check(doc: dict, allowed: set, what: str) -> None:
    extra = set(doc) - allowed
    if extra:
        raise ValueError(f"unknown keys in {what}: {sorted(extra)}")


def _load_batch(path: str):
    from .paths import PathBatch
    if path.endswith(".csv"):
        from .paths import load_bars
        batch, report = load_bars(path)
        log.info("loaded %d sessions (%d dropped)", report.sessions, report.dropped)
        return batch
    try:
        with open(path) as fh:
            return PathBatch.from_json(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read data {path!r}: {exc.strerror}") from None


def _rel(base: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(os.path.dirname(base), p)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> None:
    from .paths import batch_to_bars_csv
    from .synth import DriftModelParams, OUParams, gen_ou, gen_pathdep_drift, gen_sv_sessions
    cfg = _read_json(args.config, "config file")
    _check(cfg, SIM_KEYS, "simulate config")
    gen = dict(cfg.get("generator", {"kind": "ou", "theta": [1.0], "mu": [0.0], "sigma": [0.2]}))
    kind = gen.pop("kind", "ou")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    n, steps, dt = int(cfg.get("n_paths", 100)), int(cfg.get("n_steps", 20)), float(cfg.get("dt", 0.05))
    if kind == "ou":
        batch = gen_ou(OUParams.from_dict(gen), n, steps, dt, seed, cfg.get("label", "ou"))
    elif kind == "pathdep_drift":
        x, i, _mu = gen_pathdep_drift(DriftModelParams(**gen), n, steps, dt, seed)
        batch = x.with_signals(list(i.paths))
    elif kind == "sv_bars":
        gen.pop("seed", None)
        batch = gen_sv_sessions(n, steps + 1, seed, **gen)
    else:
        raise ValueError(f"unknown generator kind {kind!r}")
    if args.out and args.out.endswith(".csv"):
        _write(args.out, batch_to_bars_csv(batch))
    else:
        _write(args.out, batch.to_json())


def _specs(cfg: dict, batch):
    from .paths import EmbeddingSpec
    from .pnlkernel import OperatorLift
    from .sigkernel import KernelSpec
    kspec = KernelSpec.from_dict(cfg.get("kernel", {"variant": "sig_pde"}))
    espec = EmbeddingSpec.from_dict(cfg.get("embedding", {}))
    lift = cfg.get("lift")
    lift = OperatorLift.identity(batch.dim) if lift is None else OperatorLift(np.asarray(lift, dtype=float))
    return kspec, espec, lift


def cmd_gram(args) -> None:
    from .pnlkernel import kphi_gram, nystrom_gram, random_landmarks
    cfg = _read_json(args.config, "config file")
    _check(cfg, FIT_KEYS | {"landmarks"}, "gram config")
    batch = _batch_arg(args, cfg)
    kspec, espec, lift = _specs(cfg, batch)
    if "landmarks" in cfg:
        idx = random_landmarks(len(batch), int(cfg["landmarks"]), args.seed or 0)
        g = nystrom_gram(kspec, espec, lift, batch, idx)
    else:
        g = kphi_gram(kspec, espec, lift, batch)
    _write(args.out, g.to_json())


def _batch_arg(args, cfg: dict):
    if args.data:
        return _load_batch(args.data)
    if "data" in cfg:
        return _load_batch(_rel(args.config, cfg["data"]))
    raise UsageError("missing required option --data")


def cmd_fit(args) -> None:
    from .harness import write_scores
    from .meanvar import grid_search
    from .strategies import StrategyModel, save
    cfg = _read_json(args.config, "config file")
    _check(cfg, FIT_KEYS, "fit config")
    batch = _batch_arg(args, cfg)
    val = args.val or (_rel(args.config, cfg["val_data"]) if "val_data" in cfg else None)
    val = _load_batch(val) if val else None
    kspec, espec, lift = _specs(cfg, batch)
    f = dict(cfg.get("fit", {}))
    _check(f, {"scale_grid", "lambda_grid", "m_grid", "eta", "folds", "val_fraction"}, "fit section")
    res = grid_search(batch, kspec, espec, lift, f.get("scale_grid", [espec.scale_gamma]),
                      f.get("lambda_grid", [1e-3]), f.get("m_grid", ["full"]), f.get("eta", 1.0),
                      val_batch=val, val_fraction=f.get("val_fraction", 0.25), folds=f.get("folds"),
                      seed=args.seed or 0)
    model = StrategyModel.from_fit(res.embedding, kspec, lift, res.train_batch, res.weights)
    _write(args.out, save(model))
    if args.out and args.out != "-":
        write_scores(os.path.splitext(args.out)[0] + ".scores.csv", res.table)
    log.info("selected scale_gamma=%g lambda=%g m=%s", res.scale_gamma, res.lam, res.m)


def cmd_backtest(args) -> None:
    from .strategies import backtest, load
    try:
        with open(args.model) as fh:
            model = load(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read model {args.model!r}: {exc.strerror}") from None
    batch = _load_batch(args.data)
    eta = args.eta if args.eta is not None else model.weights.config.eta
    rep = backtest(model, batch, eta)
    if args.out and args.out != "-":
        _write(args.out, rep.to_csv())
        _write(os.path.splitext(args.out)[0] + ".json", rep.to_json())
    else:
        _write(None, rep.to_json())


def cmd_sweep(args) -> None:
    from .harness import ExperimentConfig, run
    cfg = _read_json(args.config, "config file")
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    exp = ExperimentConfig.from_dict(cfg)
    res = run(exp, args.out)
    if args.time:
        for k, v in sorted(res.timings.items()):
            print(f"time {k}: {v:.3f} s", file=sys.stderr)


def _fixture(name: str):
    from .paths import Path
    return Path.from_json(resources.files("kernel_trading").joinpath("data", name).read_text())


def cmd_eval_kernel(args) -> None:
    from .paths import Path
    from .sigkernel import KernelSpec, kernel_eval

    def get(p, default):
        if p is None:
            return _fixture(default)
        try:
            with open(p) as fh:
                return Path.from_json(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read path {p!r}: {exc.strerror}") from None

    x, y = get(args.x, "linear_a.json"), get(args.y, "linear_b.json")
    if args.config:
        spec = KernelSpec.from_dict(_read_json(args.config, "config file"))
    else:
        spec = KernelSpec(dyadic_order=args.dyadic_order)
    value = kernel_eval(spec, x, y)
    print(f"{value:.5f}" if not args.full else repr(value))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--threads", type=int, default=None, help="numba worker threads")
    common.add_argument("--time", action="store_true", help="print stage timings to stderr")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kernel-trading", description="Kernel trading strategies.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic path batch")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("gram", parents=[common], help="compute a K_Phi Gram matrix")
    s.add_argument("--config", required=True)
    s.add_argument("--data")
    s.set_defaults(func=cmd_gram)

    s = sub.add_parser("fit", parents=[common], help="grid-search and fit a kernel strategy")
    s.add_argument("--config", required=True)
    s.add_argument("--data")
    s.add_argument("--val", help="explicit validation batch")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("backtest", parents=[common], help="backtest a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--eta", type=float, default=None)
    s.set_defaults(func=cmd_backtest)

    s = sub.add_parser("sweep", parents=[common], help="run an experiment config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("eval-kernel", parents=[common], help="signature kernel of two paths")
    s.add_argument("--x", help="path JSON (default: bundled fixture)")
    s.add_argument("--y", help="path JSON (default: bundled fixture)")
    s.add_argument("--config", help="kernel spec JSON")
    s.add_argument("--dyadic-order", type=int, default=2)
    s.add_argument("--full", action="store_true", help="print all digits")
    s.set_defaults(func=cmd_eval_kernel)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be at least 1")
        import numba
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    t0 = time.perf_counter()
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, RuntimeError, FloatingPointError, np.linalg.LinAlgError, KeyError,
            IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.time:
        print(f"time total: {time.perf_counter() - t0:.3f} s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
