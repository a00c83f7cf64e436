"""Experiment configs and runners for the synthetic studies."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import __version__, _jsonio
from .meanvar import (FitConfig, alpha_spectral, calibrate_eta, grid_search, pnl_vector,
                      spectrum, stability_metric, write_score_table)
from .paths import EmbeddingSpec, Path, PathBatch, load_bars, prefix
from .pnlkernel import OperatorLift, kphi_cross, kphi_gram
from .sigkernel import KernelSpec
from .strategies import (MarkowitzStrategy, backtest, fit_sig_trader, ou_drift, sig_pnl_features,
                         signal_drift)
from .synth import (DriftModelParams, OUParams, SignalParams, gen_ou, gen_pathdep_drift,
                    gen_signal_batch, gen_sv_sessions)

log = logging.getLogger(__name__)

EXPERIMENTS = ("ou_convergence", "truncation_convergence", "lambda_sweep", "scale_sweep",
               "rank_sweep", "eta_delta_surface", "pathdep_drift", "signal_study")

_DATA_KEYS = {"n_train", "n_val", "n_test", "n_steps", "dt"}
_FIT_KEYS = {"scale_grid", "lambda_grid", "m_grid", "eta", "folds", "val_fraction"}
_PARAM_KEYS = {"sample_sizes", "path_lengths", "sig_order", "sig_orders",
               "sig_lambda_grid", "lambda", "decay_alphas", "eta_grid", "target_deltas",
               "bars_csv", "n_sessions", "train_fraction", "signal", "with_mu"}
_GENERATOR_KEYS = {
    "ou": {"kind", "theta", "mu", "sigma", "corr", "x0"},
    "pathdep_drift": {"kind", "kappa", "sigma_I", "sigma_X", "decay_alpha", "decay_c", "rho"},
    "sv_bars": {"kind", "base_vol", "vol_of_vol", "vol_reversion", "p0", "seed"},
}
_TOP_KEYS = {"experiment", "seeds", "output_dir", "generator", "data", "kernel", "embedding",
             "fit", "params", "lift"}

_DEFAULT_OU = {"kind": "ou", "theta": [1.0, 0.5], "mu": [1.0, 1.0], "sigma": [0.3, 0.2],
               "corr": [[1.0, 0.3], [0.3, 1.0]], "x0": [1.0, 1.0]}
_DEFAULT_DRIFT = {"kind": "pathdep_drift", "kappa": 5.0, "sigma_I": 1.0, "sigma_X": 0.2,
                  "decay_alpha": 1.0, "decay_c": 0.05, "rho": 0.1}


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "results"
    generator: dict = field(default_factory=lambda: dict(_DEFAULT_OU))
    data: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=lambda: {"variant": "sig_pde", "dyadic_order": 0})
    embedding: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    lift: list | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        _check_keys(self.data, _DATA_KEYS, "data")
        _check_keys(self.fit, _FIT_KEYS, "fit")
        _check_keys(self.params, _PARAM_KEYS, "params")
        kind = self.generator.get("kind")
        if kind not in _GENERATOR_KEYS:
            raise ValueError(f"unknown generator kind {kind!r}")
        _check_keys(self.generator, _GENERATOR_KEYS[kind], "generator")
        KernelSpec.from_dict(self.kernel)
        EmbeddingSpec.from_dict(self.embedding)
        for key in ("scale_grid", "lambda_grid", "m_grid"):
            if key in self.fit and not self.fit[key]:
                raise ValueError(f"fit.{key} must be nonempty")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        _check_keys(doc, _TOP_KEYS, "config")
        if "experiment" not in doc:
            raise ValueError("config needs an 'experiment' entry")
        return cls(**copy.deepcopy(doc))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(_jsonio.loads(text, "config file"))

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "seeds": list(self.seeds), "output_dir": self.output_dir,
                "generator": self.generator, "data": self.data, "kernel": self.kernel,
                "embedding": self.embedding, "fit": self.fit, "params": self.params,
                "lift": self.lift}

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("output_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    # convenience accessors with defaults
    def d(self, key, default):
        return self.data.get(key, default)

    def f(self, key, default):
        return self.fit.get(key, default)

    def p(self, key, default):
        return self.params.get(key, default)


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise ValueError(f"{where} must be an object")
    extra = set(doc) - allowed
    if extra:
        raise ValueError(f"unknown keys in {where}: {sorted(extra)}")


# ---------------------------------------------------------------- run state

@dataclass
class RunResult:
    rows: list
    summary: dict
    columns: list
    manifest: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


class _Timer:
    def __init__(self):
        self.stages: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0


def _kspec(cfg: ExperimentConfig) -> KernelSpec:
    return KernelSpec.from_dict(cfg.kernel)


def _lift(cfg: ExperimentConfig, d: int) -> OperatorLift:
    return OperatorLift.identity(d) if cfg.lift is None else OperatorLift(np.asarray(cfg.lift, dtype=float))


def _espec(cfg: ExperimentConfig, horizon: float) -> EmbeddingSpec:
    doc = dict(cfg.embedding)
    doc.setdefault("horizon", horizon)
    return EmbeddingSpec.from_dict(doc)


def _sub_seed(seed: int, role: int) -> int:
    return int(seed) * 1000 + role


def _ou_params(cfg: ExperimentConfig) -> OUParams:
    g = {k: v for k, v in cfg.generator.items() if k != "kind"}
    return OUParams.from_dict(g)


def _ou_cov(p: OUParams) -> np.ndarray:
    return np.diag(p.sigma) @ p.corr @ np.diag(p.sigma)


def _sharpe(v: np.ndarray) -> float:
    sd = float(np.std(v))
    return float(np.mean(v)) / sd if sd > 0 else float("nan")


def outperformance(j_new: float, j_base: float) -> tuple[float, str]:
    """(J_new - J_base)/|J_base|; absolute difference (flagged) when J_base <= 0."""
    if j_base > 0:
        return (j_new - j_base) / abs(j_base), "relative"
    return j_new - j_base, "absolute"


def _objective(v: np.ndarray, eta: float) -> float:
    return float(np.mean(v) - 0.5 * eta * np.var(v))


def _fit_kernel(cfg, train, val, espec, kspec, lift):
    return grid_search(train, kspec, espec, lift, cfg.f("scale_grid", [1.0]),
                       cfg.f("lambda_grid", [1e-4]), cfg.f("m_grid", ["full"]), cfg.f("eta", 1.0),
                       val_batch=val)


def _kernel_rows(cfg, res, test, kspec, lift):
    eta = cfg.f("eta", 1.0)
    v_in = pnl_vector(res.weights.alpha, res.gram.values)
    v_out = pnl_vector(res.weights.alpha, kphi_cross(kspec, res.embedding, lift, res.train_batch, test))
    return {"objective_in": _objective(v_in, eta), "objective_out": _objective(v_out, eta),
            "J_out": _sharpe(v_out), "lambda": res.lam, "scale_gamma": res.scale_gamma}


def _fit_sig(cfg, train, val, espec):
    """Sig-Trader at the configured order, lambda picked on the validation paths."""
    eta = cfg.f("eta", 1.0)
    order = int(cfg.p("sig_order", 4))
    best = None
    for lam in cfg.p("sig_lambda_grid", cfg.f("lambda_grid", [1e-4])):
        m = fit_sig_trader(train, order, float(lam), eta, espec)
        score = backtest(m, val, eta).objective
        if best is None or score > best[0] or (score == best[0] and lam > best[1].lam):
            best = (score, m)
    return best[1]


def _sig_rows(cfg, model, train, test):
    eta = cfg.f("eta", 1.0)
    v_in = sig_pnl_features(train, model.order, model.embedding) @ model.ell.ravel()
    v_out = backtest(model, test, eta).pnl
    return {"objective_in": _objective(v_in, eta), "objective_out": _objective(v_out, eta),
            "J_out": _sharpe(v_out), "lambda": model.lam, "scale_gamma": ""}


def _strategy_rows(cfg, strat, train, test):
    eta = cfg.f("eta", 1.0)
    v_in = backtest(strat, train, eta).pnl
    v_out = backtest(strat, test, eta).pnl
    return {"objective_in": _objective(v_in, eta), "objective_out": _objective(v_out, eta),
            "J_out": _sharpe(v_out), "lambda": "", "scale_gamma": ""}


def _with_outperf(rows: list, base_method: str) -> None:
    base = {}
    for r in rows:
        if r["method"] == base_method:
            base[r["_group"]] = r["J_out"]
    for r in rows:
        jb = base.get(r["_group"])
        if jb is None or r["method"] == base_method or not np.isfinite(r["J_out"]):
            r["outperf"], r["outperf_kind"] = "", ""
        else:
            r["outperf"], r["outperf_kind"] = outperformance(r["J_out"], jb)


# ---------------------------------------------------------------- experiments

_METRIC_COLS = ["objective_in", "objective_out", "J_out", "outperf", "outperf_kind",
                "lambda", "scale_gamma"]


def _run_ou_convergence(cfg, timer):
    p = _ou_params(cfg)
    kspec = _kspec(cfg)
    lift = _lift(cfg, p.dim)
    dt = float(cfg.d("dt", 0.05))
    eta = cfg.f("eta", 1.0)
    rows = []
    for n_steps in cfg.p("path_lengths", [cfg.d("n_steps", 20)]):
        espec = _espec(cfg, n_steps * dt)
        for n_train in cfg.p("sample_sizes", [cfg.d("n_train", 500)]):
            for seed in cfg.seeds:
                group = (n_steps, n_train, seed)
                base = {"seed": seed, "n_steps": n_steps, "n_train": n_train, "_group": group}
                with timer.stage("simulate"):
                    train = gen_ou(p, n_train, n_steps, dt, _sub_seed(seed, 0))
                    val = gen_ou(p, cfg.d("n_val", 500), n_steps, dt, _sub_seed(seed, 1))
                    test = gen_ou(p, cfg.d("n_test", 1000), n_steps, dt, _sub_seed(seed, 2))
                for method in ("kernel", "sig", "markowitz"):
                    try:
                        with timer.stage(method):
                            if method == "kernel":
                                res = _fit_kernel(cfg, train, val, espec, kspec, lift)
                                m = _kernel_rows(cfg, res, test, kspec, lift)
                            elif method == "sig":
                                m = _sig_rows(cfg, _fit_sig(cfg, train, val, espec), train, test)
                            else:
                                strat = MarkowitzStrategy(_ou_cov(p), ou_drift(p.theta, p.mu), eta)
                                m = _strategy_rows(cfg, strat, train, test)
                        rows.append({**base, "method": method, **m, "error": ""})
                    except Exception as exc:  # logged, run continues
                        log.warning("cell %s/%s failed: %s", group, method, exc)
                        rows.append({**base, "method": method, "error": str(exc),
                                     **{k: float("nan") for k in ("objective_in", "objective_out", "J_out")}})
    _with_outperf(rows, "markowitz")
    cols = ["seed", "n_steps", "n_train", "method"] + _METRIC_COLS + ["error"]
    return rows, cols, _aggregate(rows, ["n_steps", "n_train", "method"],
                                  ["objective_in", "objective_out", "J_out", "outperf"])


def _run_truncation(cfg, timer):
    p = _ou_params(cfg)
    kspec = _kspec(cfg)
    lift = _lift(cfg, p.dim)
    dt = float(cfg.d("dt", 0.05))
    n_steps = int(cfg.d("n_steps", 20))
    espec = _espec(cfg, n_steps * dt)
    eta = cfg.f("eta", 1.0)
    lam = float(cfg.p("lambda", 1e-3))
    orders = cfg.p("sig_orders", [1, 2, 3, 4])
    rows = []
    for seed in cfg.seeds:
        with timer.stage("simulate"):
            train = gen_ou(p, cfg.d("n_train", 1000), n_steps, dt, _sub_seed(seed, 0))
        for k in orders:
            with timer.stage("sig"):
                m = fit_sig_trader(train, int(k), lam, eta, espec)
                v = sig_pnl_features(train, int(k), espec) @ m.ell.ravel()
            rows.append({"seed": seed, "method": "sig", "order": int(k), "objective_in": _objective(v, eta)})
        with timer.stage("kernel"):
            g = kphi_gram(kspec, espec, lift, train)
            a = alpha_spectral(g, FitConfig(lam, eta)).alpha
            v = pnl_vector(a, g.values)
        rows.append({"seed": seed, "method": "kernel", "order": "", "objective_in": _objective(v, eta)})
    summary = _aggregate(rows, ["method", "order"], ["objective_in"])
    sig_means = [np.mean([r["objective_in"] for r in rows if r["method"] == "sig" and r["order"] == k])
                 for k in orders]
    ker_mean = float(np.mean([r["objective_in"] for r in rows if r["method"] == "kernel"]))
    summary["checks"] = {"sig_monotone_in_order": bool(np.all(np.diff(sig_means) >= -1e-12)),
                         "sig_monotone_every_seed": all(
                             np.all(np.diff([r["objective_in"] for r in rows
                                             if r["method"] == "sig" and r["seed"] == s]) >= -1e-12)
                             for s in cfg.seeds),
                         "kernel_mean": ker_mean, "sig_means": [float(x) for x in sig_means],
                         "kernel_dominates_mean": bool(ker_mean >= max(sig_means))}
    return rows, ["seed", "method", "order", "objective_in"], summary


def _search_rows(cfg, timer, scales, ms):
    p = _ou_params(cfg)
    kspec = _kspec(cfg)
    lift = _lift(cfg, p.dim)
    dt = float(cfg.d("dt", 0.05))
    n_steps = int(cfg.d("n_steps", 20))
    espec = _espec(cfg, n_steps * dt)
    rows = []
    for seed in cfg.seeds:
        with timer.stage("simulate"):
            train = gen_ou(p, cfg.d("n_train", 500), n_steps, dt, _sub_seed(seed, 0))
            val = gen_ou(p, cfg.d("n_val", 250), n_steps, dt, _sub_seed(seed, 1))
        with timer.stage("grid_search"):
            res = grid_search(train, kspec, espec, lift, scales, cfg.f("lambda_grid", [1e-4]), ms,
                              cfg.f("eta", 1.0), val_batch=val)
        for r in res.table:
            rows.append({"seed": seed, **{k: r[k] for k in ("scale_gamma", "lambda", "m", "objective_train",
                                                           "objective_val", "J", "R_contrib")}})
    return rows


def _run_lambda_sweep(cfg, timer):
    rows = _search_rows(cfg, timer, cfg.f("scale_grid", [1.0])[:1], cfg.f("m_grid", ["full"])[:1])
    cols = ["seed", "lambda", "objective_train", "objective_val", "J"]
    summary = _aggregate(rows, ["lambda"], ["objective_train", "objective_val", "J"])
    return rows, cols, summary


def _run_scale_sweep(cfg, timer):
    rows = _search_rows(cfg, timer, cfg.f("scale_grid", [0.5, 1.0, 2.0]), cfg.f("m_grid", ["full"])[:1])
    cols = ["seed", "scale_gamma", "lambda", "objective_train", "objective_val", "J"]
    summary = _aggregate(rows, ["scale_gamma", "lambda"], ["objective_train", "objective_val"])
    best = {}
    for r in rows:
        key = (r["seed"], r["scale_gamma"])
        if key not in best or r["objective_val"] > best[key]["objective_val"]:
            best[key] = r
    summary["best_by_scale"] = [{"seed": k[0], "scale_gamma": k[1], "lambda": v["lambda"],
                                 "objective_val": v["objective_val"]} for k, v in sorted(best.items())]
    return rows, cols, summary


def _run_rank_sweep(cfg, timer):
    rows = _search_rows(cfg, timer, cfg.f("scale_grid", [1.0])[:1], cfg.f("m_grid", [1, 5, 20, "full"]))
    cols = ["seed", "m", "lambda", "objective_train", "objective_val", "J", "R_contrib"]
    summary = _aggregate(rows, ["m", "lambda"], ["objective_val", "J"])
    r_m = []
    for seed in cfg.seeds:
        for m in dict.fromkeys(r["m"] for r in rows):
            sel = sorted((r for r in rows if r["seed"] == seed and r["m"] == m), key=lambda r: r["lambda"])
            js = [r["J"] for r in sel]
            if len(sel) >= 2 and np.all(np.isfinite(js)):
                r_m.append({"seed": seed, "m": m, "R": stability_metric([r["lambda"] for r in sel], js)})
    summary["R_m"] = r_m
    return rows, cols, summary


def _run_eta_delta(cfg, timer):
    p = _ou_params(cfg)
    kspec = _kspec(cfg)
    lift = _lift(cfg, p.dim)
    dt = float(cfg.d("dt", 0.05))
    n_steps = int(cfg.d("n_steps", 20))
    espec = _espec(cfg, n_steps * dt).replace(scale_gamma=float(cfg.f("scale_grid", [1.0])[0]))
    lams = cfg.f("lambda_grid", [1e-4, 1e-3, 1e-2])
    rows, fits = [], []
    for seed in cfg.seeds:
        with timer.stage("gram"):
            g = kphi_gram(kspec, espec, lift, gen_ou(p, cfg.d("n_train", 200), n_steps, dt, _sub_seed(seed, 0)))
            spec = spectrum(g)
        for lam in lams:
            for eta in cfg.p("eta_grid", [0.1, 1.0, 10.0]):
                a = alpha_spectral(g, FitConfig(float(lam), float(eta)), spec).alpha
                rows.append({"seed": seed, "kind": "surface", "lambda": lam, "eta": eta,
                             "delta": float(np.var(pnl_vector(a, g.values))), "target_delta": ""})
        for delta in cfg.p("target_deltas", [0.0025]):
            pts = []
            for lam in lams:
                try:
                    e = calibrate_eta(g, float(lam), float(delta))
                except (ValueError, RuntimeError) as exc:
                    log.warning("calibration failed at lambda=%s: %s", lam, exc)
                    continue
                pts.append((lam, e))
                rows.append({"seed": seed, "kind": "calibrated", "lambda": lam, "eta": e,
                             "delta": float(delta), "target_delta": float(delta)})
            if len(pts) >= 2:
                slope, icpt = np.polyfit(np.log([q[0] for q in pts]), np.log([q[1] for q in pts]), 1)
                fits.append({"seed": seed, "target_delta": float(delta), "p": float(slope),
                             "a": float(math.exp(icpt))})
    return rows, ["seed", "kind", "lambda", "eta", "delta", "target_delta"], {"power_law_fits": fits}


def _drift_world(cfg, seed, alpha):
    g = {k: v for k, v in cfg.generator.items() if k != "kind"}
    g["decay_alpha"] = float(alpha)
    params = DriftModelParams(**g)
    n_tr, n_va, n_te = cfg.d("n_train", 500), cfg.d("n_val", 250), cfg.d("n_test", 500)
    n_steps = int(cfg.d("n_steps", 20))
    x, i_b, mu_b = gen_pathdep_drift(params, n_tr + n_va + n_te, n_steps, float(cfg.d("dt", 0.05)), seed)
    parts = {}
    for name, lo, hi in (("train", 0, n_tr), ("val", n_tr, n_tr + n_va), ("test", n_tr + n_va, n_tr + n_va + n_te)):
        idx = range(lo, hi)
        parts[name] = (x.subset(idx).with_signals([i_b[k] for k in idx]),
                       x.subset(idx).with_signals([mu_b[k] for k in idx]))
    return params, parts


def _run_pathdep(cfg, timer):
    kspec = _kspec(cfg)
    lift = _lift(cfg, 1)
    dt = float(cfg.d("dt", 0.05))
    n_steps = int(cfg.d("n_steps", 20))
    espec = _espec(cfg, n_steps * dt)
    eta = cfg.f("eta", 1.0)
    rows = []
    for alpha in cfg.p("decay_alphas", [0.5, 2.0]):
        for seed in cfg.seeds:
            with timer.stage("simulate"):
                params, parts = _drift_world(cfg, seed, alpha)
            base = {"seed": seed, "decay_alpha": alpha, "_group": (alpha, seed)}
            sig2 = np.array([[params.sigma_X ** 2]])
            methods = [("kernel_I", 0), ("markowitz_I", 0), ("markowitz_mu", 1)]
            if cfg.p("with_mu", False):
                methods.append(("kernel_mu", 1))
            for method, which in methods:
                train, val, test = (parts[s][which] for s in ("train", "val", "test"))
                try:
                    with timer.stage(method):
                        if method.startswith("kernel"):
                            res = _fit_kernel(cfg, train, val, espec, kspec, lift)
                            m = _kernel_rows(cfg, res, test, kspec, lift)
                        else:
                            m = _strategy_rows(cfg, MarkowitzStrategy(sig2, signal_drift(), eta), train, test)
                    rows.append({**base, "method": method, **m, "error": ""})
                except Exception as exc:
                    log.warning("cell %s/%s failed: %s", base["_group"], method, exc)
                    rows.append({**base, "method": method, "error": str(exc),
                                 **{k: float("nan") for k in ("objective_in", "objective_out", "J_out")}})
    _with_outperf(rows, "markowitz_I")
    cols = ["seed", "decay_alpha", "method"] + _METRIC_COLS + ["error"]
    return rows, cols, _aggregate(rows, ["decay_alpha", "method"], ["J_out", "outperf"])


def _bar_sessions(cfg) -> PathBatch:
    path = cfg.p("bars_csv", None)
    if path:
        batch, report = load_bars(path)
        log.info("loaded %d sessions, dropped %d", report.sessions, report.dropped)
        return batch
    g = {k: v for k, v in cfg.generator.items() if k not in ("kind", "seed")}
    return gen_sv_sessions(int(cfg.p("n_sessions", 400)), 78, int(cfg.generator.get("seed", 0)), **g)


def _run_signal_study(cfg, timer):
    kspec = _kspec(cfg)
    lift = _lift(cfg, 1)
    eta = cfg.f("eta", 1.0)
    sdoc = dict(cfg.p("signal", {}))
    with timer.stage("simulate"):
        sessions = _bar_sessions(cfg)
    n = len(sessions)
    n_tr = int(round(cfg.p("train_fraction", 0.7) * n))
    n_va = max(1, (n - n_tr) // 2)
    rows = []
    for seed in cfg.seeds:
        params = SignalParams(**{**sdoc, "seed": seed})
        w = params.horizon_w
        with timer.stage("signal"):
            sig_tr, stats = gen_signal_batch(sessions.subset(range(n_tr)), params)
            sig_rest, _ = gen_signal_batch(sessions.subset(range(n_tr, n)), params, stats)
        sig_all = sig_tr.paths + sig_rest.paths
        # align the asset with the forecast grid and rescale the forecast to return units
        assets = [prefix(p, p.n_steps - w) for p in sessions.paths]
        step_sd = float(np.std(np.concatenate([np.diff(a.values[:, 0]) for a in assets[:n_tr]])))
        sig_sd = float(np.std(np.concatenate([s.values[:, 0] for s in sig_tr.paths])))
        scale = step_sd / sig_sd if sig_sd > 0 else 1.0
        sig_all = [Path(s.times, s.values * scale) for s in sig_all]
        full = PathBatch(tuple(assets), "sessions", tuple(sig_all))
        train = full.subset(range(n_tr))
        val = full.subset(range(n_tr, n_tr + n_va))
        test = full.subset(range(n_tr + n_va, n))
        espec = _espec(cfg, float(assets[0].times[-1]))
        base = {"seed": seed, "_group": seed}
        for method in ("kernel", "sig", "markowitz"):
            try:
                with timer.stage(method):
                    if method == "kernel":
                        res = _fit_kernel(cfg, train, val, espec, kspec, lift)
                        m = _kernel_rows(cfg, res, test, kspec, lift)
                    elif method == "sig":
                        m = _sig_rows(cfg, _fit_sig(cfg, train, val, espec), train, test)
                    else:
                        m = _strategy_rows(cfg, MarkowitzStrategy(np.array([[step_sd ** 2]]), signal_drift(), eta),
                                           train, test)
                rows.append({**base, "method": method, **m, "error": ""})
            except Exception as exc:
                log.warning("seed %s/%s failed: %s", seed, method, exc)
                rows.append({**base, "method": method, "error": str(exc),
                             **{k: float("nan") for k in ("objective_in", "objective_out", "J_out")}})
    _with_outperf(rows, "markowitz")
    cols = ["seed", "method"] + _METRIC_COLS + ["error"]
    return rows, cols, _aggregate(rows, ["method"], ["J_out", "outperf"])


_RUNNERS = {"ou_convergence": _run_ou_convergence, "truncation_convergence": _run_truncation,
            "lambda_sweep": _run_lambda_sweep, "scale_sweep": _run_scale_sweep,
            "rank_sweep": _run_rank_sweep, "eta_delta_surface": _run_eta_delta,
            "pathdep_drift": _run_pathdep, "signal_study": _run_signal_study}


# ---------------------------------------------------------------- aggregation / output

def _aggregate(rows: list, keys: list, metrics: list) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for gk, members in groups.items():
        entry = dict(zip(keys, gk))
        entry["n"] = len(members)
        for m in metrics:
            vals = np.array([r[m] for r in members if isinstance(r.get(m), (int, float)) and np.isfinite(r[m])],
                            dtype=float)
            entry[f"{m}_mean"] = float(vals.mean()) if vals.size else None
            entry[f"{m}_std"] = float(vals.std()) if vals.size else None
        out.append(entry)
    return {"groups": out}


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else "nan"
    return str(v)


def rows_to_csv(rows: list, columns: list) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return out.getvalue()


def versions() -> dict:
    import numba
    return {"kernel_trading": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "numba": numba.__version__}


def run(cfg: ExperimentConfig, output_dir: str | None = None, write: bool = True) -> RunResult:
    """Run one experiment; writes results.csv, summary.json and manifest.json."""
    timer = _Timer()
    t0 = time.perf_counter()
    rows, cols, summary = _RUNNERS[cfg.experiment](cfg, timer)
    for r in rows:
        r.pop("_group", None)
    if rows and all(r.get("error") for r in rows if "error" in r) and any("error" in r for r in rows):
        raise RuntimeError("every cell of the run failed")
    wall = time.perf_counter() - t0
    summary = {"experiment": cfg.experiment, "seeds": cfg.seeds, **summary}
    manifest = {"experiment": cfg.experiment, "config_hash": cfg.config_hash(), "config": cfg.to_dict(),
                "versions": versions(), "wall_time_s": wall,
                "stage_times_s": dict(sorted(timer.stages.items()))}
    res = RunResult(rows, summary, cols, manifest, dict(timer.stages))
    if write:
        out = output_dir or cfg.output_dir
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "results.csv"), "w", newline="") as fh:
            fh.write(rows_to_csv(rows, cols))
        with open(os.path.join(out, "summary.json"), "w") as fh:
            fh.write(_jsonio.dumps(_clean(summary)) + "\n")
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            fh.write(_jsonio.dumps(_clean(manifest)) + "\n")
    return res


def _clean(obj):
    """Make summaries JSON-safe (NaN -> None, tuples -> lists)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_scores(path: str, table: list) -> None:
    with open(path, "w", newline="") as fh:
        write_score_table(table, fh)
